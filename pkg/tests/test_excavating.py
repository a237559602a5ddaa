import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from pepseg.excavating import (CenterMap, KeyPixel, ObjectExcavating, classify_key_pixels,
                               excavate, excavate_many, extract_key_pixels, loss_excavating,
                               loss_excavating_cls, mint_mined_descriptors)
from pepseg.perceiving import MINED, InstanceDescriptor
from pepseg.supervision import Window, window_for

from conftest import tiny_model_config


def _desc(vec, stage=1, loc=(0, 0), i=0):
    return InstanceDescriptor(vector=vec, stage=stage, location=loc, class_id=1, confidence=0.9, id=i)


def _pyramid(sizes=(32, 16, 8, 4, 2), c=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(c, n, n, generator=g) for n in sizes]


def test_window_geometry_center_and_corner():
    assert window_for((16, 16), 8, (32, 32)).shape == (17, 17)
    assert window_for((0, 0), 8, (32, 32)).shape == (9, 9)
    assert window_for((3, 3), None, (32, 32)).shape == (32, 32)


def test_excavate_window_shapes():
    torch.manual_seed(0)
    module = ObjectExcavating(tiny_model_config())
    pyr = _pyramid()
    cm = excavate(module, _desc(torch.randn(8), loc=(16, 16)), pyr, radius=8)
    assert cm.logits.shape == (17, 17)
    assert cm.window_origin == (8, 8)
    corner = excavate(module, _desc(torch.randn(8), loc=(0, 0)), pyr, radius=8)
    assert corner.logits.shape == (9, 9) and corner.window_origin == (0, 0)


def test_zero_output_layer_gives_uniform_sigmoid_of_bias():
    module = ObjectExcavating(tiny_model_config())
    with torch.no_grad():
        module.out.weight.zero_()
        module.out.bias.fill_(-1.5)
    cm = excavate(module, _desc(torch.randn(8), loc=(5, 5)), _pyramid(), radius=3)
    assert torch.allclose(cm.probs, torch.full_like(cm.probs, 1 / (1 + math.exp(1.5))))


def test_first_layer_matches_literal_concatenation():
    torch.manual_seed(0)
    module = ObjectExcavating(tiny_model_config()).double()
    for h, w in [(1, 1), (2, 3), (7, 5), (16, 16)]:
        feat = torch.randn(8, h, w, dtype=torch.float64)
        cond = torch.randn(4, module.cond_dim, dtype=torch.float64)
        fast = module.first_layer(feat, cond)
        ref = module.first_layer_reference(feat, cond)
        assert torch.allclose(fast, ref, atol=1e-10)


def test_batched_excavation_matches_single():
    torch.manual_seed(0)
    module = ObjectExcavating(tiny_model_config())
    pyr = _pyramid()
    descs = [_desc(torch.randn(8), stage=s, loc=loc, i=i)
             for i, (s, loc) in enumerate([(1, (3, 4)), (1, (20, 9)), (2, (5, 5))])]
    many = excavate_many(module, descs, pyr, 4)
    for d, cm in zip(descs, many):
        single = excavate(module, d, pyr, 4)
        assert torch.allclose(single.logits, cm.logits, atol=1e-6)
        assert single.window == cm.window


def _bce(p, t):
    return -(t * math.log(p) + (1 - t) * math.log(1 - p))


def test_loss_excavating_single_pixel_ln2():
    cm = CenterMap(torch.zeros(1, 1, dtype=torch.float64), Window(0, 1, 0, 1), 0, 1)
    assert loss_excavating([cm], [np.ones((1, 1))]).item() == pytest.approx(math.log(2), abs=1e-12)


def test_loss_excavating_perfect_is_near_zero():
    t = np.array([[0.0, 1.0], [0.0, 0.0]])
    cm = CenterMap(torch.tensor(t * 80 - 40, dtype=torch.float64), Window(0, 2, 0, 2), 0, 1)
    assert loss_excavating([cm], [t]).item() <= 1e-8


def test_loss_excavating_matches_naive_sum():
    rng = np.random.default_rng(0)
    maps, targets, expected = [], [], 0.0
    for k in range(4):
        h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        z = rng.normal(size=(h, w))
        t = (rng.random((h, w)) < 0.3).astype(float)
        maps.append(CenterMap(torch.tensor(z), Window(0, h, 0, w), k, 1))
        targets.append(t)
        p = 1 / (1 + np.exp(-z))
        expected += sum(_bce(p[i, j], t[i, j]) for i in range(h) for j in range(w)) / (h * w)
    assert abs(loss_excavating(maps, targets).item() - expected) <= 1e-8


def test_loss_excavating_geometry_mismatch():
    cm = CenterMap(torch.zeros(2, 2), Window(0, 2, 0, 2), 0, 1)
    with pytest.raises(ValueError, match="geometry"):
        loss_excavating([cm], [np.zeros((3, 2))])


def _map(probs, origin=(0, 0)):
    p = torch.as_tensor(probs, dtype=torch.float64).clamp(1e-9, 1 - 1e-9)
    h, w = p.shape
    logits = torch.log(p) - torch.log1p(-p)
    return CenterMap(logits, Window(origin[0], origin[0] + h, origin[1], origin[1] + w), 7, 1)


def test_key_pixels_below_threshold_empty():
    assert extract_key_pixels(_map(np.full((5, 5), 0.2)), 0.3) == []


def test_single_strict_peak_with_origin_offset():
    p = np.full((5, 5), 0.1)
    p[2, 3] = 0.8
    keys = extract_key_pixels(_map(p, origin=(4, 6)), 0.3)
    assert [(k.location, k.source_id) for k in keys] == [((6, 9), 7)]
    assert keys[0].score == pytest.approx(0.8)


def test_plateau_keeps_lexicographic_first():
    p = np.full((4, 4), 0.1)
    p[1:3, 1:3] = 0.7
    assert [k.location for k in extract_key_pixels(_map(p), 0.3)] == [(1, 1)]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_key_pixels_deterministic_and_bounded(seed, k_max):
    rng = np.random.default_rng(seed)
    cm = _map(rng.integers(0, 5, size=(6, 6)) / 5.0 + 0.05)
    a = extract_key_pixels(cm, 0.3, k_max)
    assert a == extract_key_pixels(cm, 0.3, k_max)
    assert len(a) <= k_max
    assert all(k.score >= 0.3 for k in a)
    assert [k.score for k in a] == sorted((k.score for k in a), reverse=True)


def test_minting_shapes_and_provenance():
    torch.manual_seed(0)
    cfg = tiny_model_config()
    module = ObjectExcavating(cfg)
    assert module.mint[0].in_features == cfg.descriptor_dim + 2
    src = _desc(torch.randn(cfg.descriptor_dim), loc=(4, 4), i=3)
    assert mint_mined_descriptors(module, src, [], (16, 16)) == []
    keys = [KeyPixel((3, 5), 0.9, 3), KeyPixel((6, 2), 0.6, 3)]
    mined = mint_mined_descriptors(module, src, keys, (16, 16), first_id=10)
    assert [d.id for d in mined] == [10, 11]
    assert all(d.provenance == MINED and d.source_id == 3 and d.stage == 1 for d in mined)
    assert [d.location for d in mined] == [(3, 5), (6, 2)]
    assert mined[0].vector.shape == (cfg.descriptor_dim,)
    assert not torch.allclose(mined[0].vector, mined[1].vector)


def test_mined_locations_within_radius():
    torch.manual_seed(0)
    module = ObjectExcavating(tiny_model_config())
    pyr = _pyramid()
    src = _desc(torch.randn(8), loc=(10, 12))
    with torch.no_grad():
        module.out.bias.fill_(2.0)  # everything above threshold
    cm = excavate(module, src, pyr, radius=3)
    keys = extract_key_pixels(cm, 0.3, 50)
    assert keys
    for d in mint_mined_descriptors(module, src, keys, (32, 32)):
        assert max(abs(d.location[0] - 10), abs(d.location[1] - 12)) <= 3


def test_key_pixel_classification_uniform_is_ln_cp():
    cfg = tiny_model_config()
    module = ObjectExcavating(cfg)
    with torch.no_grad():
        module.classifier.weight.zero_()
        module.classifier.bias.zero_()
    mined = [_desc(torch.randn(8), i=i) for i in range(3)]
    logits = classify_key_pixels(module, mined)
    targets = torch.eye(cfg.num_outputs)[[1, 0, 3]]
    assert loss_excavating_cls(logits, targets).item() == pytest.approx(3 * math.log(4), abs=1e-6)


def test_classification_loss_is_sum_of_items():
    rng = np.random.default_rng(0)
    z = torch.tensor(rng.normal(size=(3, 4)))
    t = torch.eye(4, dtype=torch.float64)[[2, 0, 1]]
    expected = 0.0
    for i in range(3):
        p = np.exp(z[i].numpy()) / np.exp(z[i].numpy()).sum()
        expected -= math.log(p[int(t[i].argmax())])
    assert abs(loss_excavating_cls(z, t).item() - expected) <= 1e-8
    perfect = t * 100.0
    assert loss_excavating_cls(perfect, t).item() <= 1e-8
