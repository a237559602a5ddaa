import dataclasses

import numpy as np
import pytest
import torch

from pepseg.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from pepseg.inference import infer, infer_scene_views
from pepseg.supervision import Scene
from pepseg.training import (TERMS, LossBreakdown, NonFiniteLossError, build_model, forward,
                             lr_at, make_optimizer, milestone_steps, train)

from conftest import square_scene, tiny_run_config


def _with(cfg, section, **kw):
    return dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **kw)})


def _scene():
    return square_scene([(8, 8, 20, 20, 1), (8, 20, 20, 32, 2), (36, 36, 60, 60, 3)])


def test_total_is_weighted_sum():
    parts = {n: torch.tensor(float(v)) for n, v in zip(TERMS, (1, 2, 3, 4, 5))}
    assert LossBreakdown(**parts).total.item() == 15.0
    lb = LossBreakdown(**parts, alpha=2, beta=0, gamma=0.5, delta=1)
    assert lb.total.item() == 1 + 4 + 0 + 2 + 5
    assert torch.equal(lb.recompute_total(), lb.total)


def test_forward_total_recomputes_exactly(tiny_model, tiny_cfg):
    out = forward(tiny_model, [_scene()], tiny_cfg, "gt")
    assert torch.equal(out.losses.recompute_total(), out.losses.total)
    assert all(v > 0 for v in out.losses.as_floats().values())


def test_gamma_zero_ignores_affinity(tiny_model, tiny_cfg):
    cfg = _with(tiny_cfg, "train", gamma=0.0)
    a = forward(tiny_model, [_scene()], cfg, "gt").losses
    with torch.no_grad():
        tiny_model.purifying.offset.fill_(3.0)
    b = forward(tiny_model, [_scene()], cfg, "gt").losses
    assert a.L_Matrix.item() != b.L_Matrix.item()
    assert a.total.item() == b.total.item()


def test_empty_scene_contributes_only_perceiving_loss(tiny_model, tiny_cfg):
    empty = Scene(np.full((3, 64, 64), 0.1, dtype=np.float32), [])
    out = forward(tiny_model, [empty], tiny_cfg, "gt")
    assert out.skipped == 1
    assert out.losses.total.item() == out.losses.L_P.item() > 0
    for name in ("L_E", "L_PE", "L_Matrix", "L_Mask"):
        assert getattr(out.losses, name).item() == 0.0


def test_non_finite_loss_names_the_term(tiny_model, tiny_cfg):
    parts = {n: torch.tensor(1.0) for n in TERMS}
    parts["L_PE"] = torch.tensor(float("nan"))
    with pytest.raises(NonFiniteLossError, match="L_PE"):
        LossBreakdown(**parts).check_finite()
    bad = _scene()
    bad.image[:] = np.nan
    with pytest.raises(NonFiniteLossError):
        forward(tiny_model, [bad], tiny_cfg, "gt")


def test_unknown_mode(tiny_model, tiny_cfg):
    with pytest.raises(ValueError):
        forward(tiny_model, [_scene()], tiny_cfg, "oracle")


def test_lr_schedule():
    assert milestone_steps(36, (0.75, 0.92)) == [27, 33]
    lrs = [lr_at(e, 36, 0.01) for e in range(36)]
    assert sorted(set(lrs), reverse=True) == pytest.approx([0.01, 0.001, 0.0001])
    assert lrs[26] == 0.01 and lrs[27] == pytest.approx(0.001) and lrs[33] == pytest.approx(0.0001)


def test_optimizer_matches_config(tiny_model, tiny_cfg):
    group = make_optimizer(tiny_model, tiny_cfg).param_groups[0]
    assert group["momentum"] == 0.9 and group["weight_decay"] == 0.0001 and group["lr"] == 0.01


def test_single_step_descends(synth_scenes):
    cfg = _with(tiny_run_config(), "train", lr=1e-4)
    decreased = 0
    for seed in range(10):
        model = build_model(cfg, seed=seed)
        scene = [synth_scenes[seed % len(synth_scenes)]]
        opt = make_optimizer(model, cfg)
        before = forward(model, scene, cfg, "gt").losses.total
        opt.zero_grad()
        before.backward()
        opt.step()
        after = forward(model, scene, cfg, "gt").losses.total
        decreased += after.item() < before.item()
    assert decreased >= 9


def test_disabled_excavating_owns_nothing_and_mines_nothing(tiny_cfg):
    cfg = _with(tiny_cfg, "model", enable_excavating=False)
    model = build_model(cfg)
    assert model.excavating is None
    assert not any("excavating" in n for n, _ in model.named_parameters())
    out = forward(model, [_scene()], cfg, "gt")
    assert out.losses.L_E.item() == 0.0 and out.losses.L_PE.item() == 0.0
    assert out.losses.L_Matrix.item() > 0
    assert all(not r.mined for r in out.images)


def test_disabled_purifying_uses_nms(tiny_cfg):
    cfg = _with(tiny_cfg, "model", enable_purifying=False, tau_conf=0.0)
    model = build_model(cfg)
    assert model.purifying is None
    assert not any("purifying" in n for n, _ in model.named_parameters())
    out = forward(model, [_scene()], cfg, "gt")
    assert out.losses.L_Matrix.item() == 0.0 and out.losses.L_E.item() > 0
    feats = model.features(torch.as_tensor(_scene().image)[None])
    _, trace = infer_scene_views(model, feats.image(0), cfg, (64, 64))
    assert trace.affinity is None and trace.groups is None


def test_train_logs_and_checkpoints(tmp_path, synth_scenes):
    cfg = _with(tiny_run_config(), "train", steps=4, batch_size=2, log_every=1, checkpoint_every=1)
    res = train(cfg, synth_scenes, out_dir=tmp_path)
    assert res.steps == 4 and len(res.history) == 4
    assert [r["step"] for r in res.history] == [1, 2, 3, 4]
    assert len(res.checkpoints) == 3  # two epochs plus the final one
    assert len((tmp_path / "train_log.jsonl").read_text().splitlines()) == 4


def test_training_is_deterministic(synth_scenes):
    cfg = _with(tiny_run_config(), "train", steps=3, batch_size=2)
    a = train(cfg, synth_scenes).history
    b = train(cfg, synth_scenes).history
    assert a == b


def test_should_stop_ends_early(synth_scenes):
    cfg = _with(tiny_run_config(), "train", steps=10, batch_size=2, eval_every=2)
    res = train(cfg, synth_scenes, should_stop=lambda step, model, hist: step >= 4)
    assert res.steps == 4


def test_checkpoint_round_trip(tmp_path, tiny_model, tiny_cfg):
    save_checkpoint(tiny_model, tiny_cfg, tmp_path / "ck")
    model, cfg = load_checkpoint(tmp_path / "ck")
    assert cfg == tiny_cfg
    for (n, a), (_, b) in zip(tiny_model.state_dict().items(), model.state_dict().items()):
        assert torch.equal(a, b), n


def test_corrupt_checkpoint_is_rejected(tmp_path, tiny_model, tiny_cfg):
    d = save_checkpoint(tiny_model, tiny_cfg, tmp_path / "ck")
    blob = bytearray((d / "params.bin").read_bytes())
    blob[10] ^= 0xFF
    (d / "params.bin").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="integrity"):
        load_checkpoint(d)
    (d / "manifest.json").write_text("{not json")
    with pytest.raises(CheckpointError, match="corrupt"):
        load_checkpoint(d)
    (d / "manifest.json").unlink()
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(d)


def test_blank_image_gives_no_detections(tiny_model, tiny_cfg):
    blank = np.zeros((3, 64, 64), dtype=np.float32)
    with torch.no_grad():
        probs = tiny_model.features(torch.as_tensor(blank)[None]).image(0)[1]
    assert max(float(p[1:].max()) for p in probs) < tiny_cfg.model.tau_conf
    assert infer(tiny_model, blank, tiny_cfg) == []


def test_single_descriptor_is_one_detection(tiny_cfg):
    cfg = _with(tiny_cfg, "model", tau_conf=0.0, n_cap=1)
    model = build_model(cfg)
    feats = model.features(torch.as_tensor(_scene().image)[None])
    dets, trace = infer_scene_views(model, feats.image(0), cfg, (64, 64))
    assert len(trace.descriptors) == 1 and trace.groups.groups == [[trace.descriptors[0].id]]
    assert len(dets) == 1


def test_merged_group_takes_max_confidence(tiny_cfg):
    cfg = _with(tiny_cfg, "model", tau_conf=0.0, n_cap=5, enable_excavating=False)
    model = build_model(cfg)
    with torch.no_grad():
        model.purifying.offset.fill_(50.0)  # every pair above the merge threshold
    feats = model.features(torch.as_tensor(_scene().image)[None])
    dets, trace = infer_scene_views(model, feats.image(0), cfg, (64, 64))
    assert len(trace.descriptors) == 5 and len(trace.groups.groups) == 1
    assert len(dets) == 1
    assert dets[0].score == pytest.approx(max(d.confidence for d in trace.descriptors))
