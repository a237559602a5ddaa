import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pepseg.evaluation import Detection, area_ranges, evaluate, mask_iou
from pepseg.supervision import Instance, Scene

from conftest import square_scene


def reference_ap(dets, scenes, num_classes, threshold):
    """Straightforward AP at one IoU threshold, every ground truth counted, no area buckets."""
    per_class = []
    for k in range(1, num_classes + 1):
        n_gt = sum(1 for s in scenes for g in s.instances if g.class_id == k)
        if n_gt == 0:
            continue
        outcomes = []
        for s in scenes:
            gts = [g.mask for g in s.instances if g.class_id == k]
            mine = sorted((d for d in dets if d.image_id == s.image_id and d.class_id == k),
                          key=lambda d: -d.score)
            used = set()
            for d in mine:
                best, best_iou = None, threshold
                for gi, g in enumerate(gts):
                    inter = np.logical_and(d.mask, g).sum()
                    union = np.logical_or(d.mask, g).sum()
                    iou = inter / union if union else 0.0
                    if gi not in used and iou >= best_iou:
                        best, best_iou = gi, iou
                if best is not None:
                    used.add(best)
                outcomes.append((d.score, best is not None))
        outcomes.sort(key=lambda o: -o[0])
        tp = fp = 0
        curve = []
        for _, hit in outcomes:
            tp += hit
            fp += not hit
            curve.append((tp / n_gt, tp / (tp + fp)))
        total = 0.0
        for r in np.linspace(0, 1, 101):
            reachable = [p for rc, p in curve if rc >= r - 1e-12]
            total += max(reachable) if reachable else 0.0
        per_class.append(total / 101)
    return float(np.mean(per_class))


def random_scenario(rng):
    size = 32
    scenes, dets = [], []
    for image_id in range(int(rng.integers(1, 4))):
        insts = []
        for _ in range(int(rng.integers(1, 4))):
            r, c = rng.integers(0, 24, size=2)
            h, w = rng.integers(3, 9, size=2)
            m = np.zeros((size, size), dtype=bool)
            m[r:r + h, c:c + w] = True
            insts.append(Instance(int(rng.integers(1, 3)), m))
        scenes.append(Scene(np.zeros((3, size, size)), insts, image_id))
        for g in insts:
            if rng.random() < 0.8:
                m = np.roll(g.mask, tuple(rng.integers(-2, 3, size=2)), axis=(0, 1))
                if m.any():
                    dets.append(Detection(image_id, g.class_id, m, float(rng.random())))
        for _ in range(int(rng.integers(0, 3))):
            m = np.zeros((size, size), dtype=bool)
            r, c = rng.integers(0, 26, size=2)
            m[r:r + 6, c:c + 6] = True
            dets.append(Detection(image_id, int(rng.integers(1, 3)), m, float(rng.random())))
    return dets, scenes


def test_mask_iou_examples():
    a = np.zeros((4, 4), bool)
    b = np.zeros((4, 4), bool)
    a[0, :4] = True
    b[0, 2:4] = True
    b[1, 0:2] = True
    assert mask_iou(a, b) == pytest.approx(2 / 6)
    assert mask_iou(a, a) == 1.0
    assert mask_iou(np.zeros((2, 2)), np.zeros((2, 2))) == 0.0
    with pytest.raises(ValueError, match="resolution"):
        mask_iou(np.zeros((2, 2)), np.zeros((3, 3)))


def test_perfect_detections_score_exactly_one():
    scene = square_scene([(0, 0, 10, 10, 1), (20, 20, 40, 40, 2), (40, 0, 60, 30, 1)])
    dets = [Detection(0, i.class_id, i.mask, 1.0) for i in scene.instances]
    report = evaluate(dets, [scene], 2)
    assert report.AP == 1.0 and report.AP50 == 1.0 and report.AP75 == 1.0


def test_no_detections_score_zero():
    scene = square_scene([(0, 0, 10, 10, 1)])
    assert evaluate([], [scene], 1).AP == 0.0


def test_one_of_two_found():
    # the 0.5 recall step covers 51 of the 101 recall points
    scene = square_scene([(0, 0, 10, 10, 1), (20, 20, 30, 30, 1)])
    report = evaluate([Detection(0, 1, scene.instances[0].mask, 0.9)], [scene], 1)
    assert report.AP50 == pytest.approx(51 / 101, abs=1e-12)


def test_duplicate_of_matched_instance_never_raises_ap():
    rng = np.random.default_rng(3)
    checked = 0
    for _ in range(40):
        dets, scenes = random_scenario(rng)
        scene = scenes[0]
        g = scene.instances[0]
        others = [o for o in scene.instances[1:] if o.class_id == g.class_id]
        if any(mask_iou(g.mask, o.mask) >= 0.5 for o in others):
            continue
        # an exact top-scoring hit matches g at every threshold; its copy has nothing left to match
        dets = dets + [Detection(scene.image_id, g.class_id, g.mask, 1.0)]
        base = evaluate(dets, scenes, 2).AP
        dup = Detection(scene.image_id, g.class_id, g.mask, float(rng.random()))
        assert evaluate(dets + [dup], scenes, 2).AP <= base + 1e-12
        checked += 1
    assert checked >= 20


def test_permutation_invariance():
    rng = np.random.default_rng(4)
    dets, scenes = random_scenario(rng)
    a = evaluate(dets, scenes, 2).as_dict()
    b = evaluate([dets[i] for i in rng.permutation(len(dets))], scenes, 2).as_dict()
    assert a == b


def test_unknown_class_rejected():
    scene = square_scene([(0, 0, 10, 10, 1)])
    with pytest.raises(ValueError, match="unknown class"):
        evaluate([Detection(0, 5, scene.instances[0].mask, 0.5)], [scene], 2)
    with pytest.raises(ValueError):
        Detection(0, 1, scene.instances[0].mask, 1.5)


def test_area_ranges_scale_with_canvas():
    full = area_ranges(640, 640)
    assert full[1][1] == 32 ** 2 and full[2][1] == 96 ** 2
    assert area_ranges(64, 64)[1][1] == pytest.approx(10.24)
    assert area_ranges(64, 64, "absolute")[1][1] == 1024


def test_matches_reference_on_random_scenarios():
    rng = np.random.default_rng(0)
    for _ in range(30):
        dets, scenes = random_scenario(rng)
        report = evaluate(dets, scenes, 2, area_scaling="absolute")
        assert report.AP50 == pytest.approx(reference_ap(dets, scenes, 2, 0.5), abs=1e-6)
        assert report.AP75 == pytest.approx(reference_ap(dets, scenes, 2, 0.75), abs=1e-6)
        mean = np.mean([reference_ap(dets, scenes, 2, t) for t in np.linspace(0.5, 0.95, 10)])
        assert report.AP == pytest.approx(mean, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_ap_bounded(seed):
    dets, scenes = random_scenario(np.random.default_rng(seed))
    for v in evaluate(dets, scenes, 2).as_dict().values():
        assert v is None or 0.0 <= v <= 1.0
