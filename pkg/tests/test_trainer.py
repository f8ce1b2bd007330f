import copy
import csv
import io
import math

import numpy as np
import pytest

from ubsegnet.autograd import Tensor
from ubsegnet.boxes import encode_boxes, generate_anchors
from ubsegnet.detector import DetectorConfig, init_model, save_model
from ubsegnet.synthdata import GenConfig, generate
from ubsegnet.trainer import (
    LOSS_NAMES,
    RoiTargets,
    RpnTargets,
    TrainConfig,
    TrainingError,
    head_loss,
    recalibrate_bn,
    roi_targets,
    rpn_loss,
    rpn_targets,
    train,
    train_phase,
)

MICRO = DetectorConfig(
    backbone=((4, 3, 1), (8, 3, 2), (8, 3, 2), (8, 3, 2)), rpn_channels=8, head_channels=(8, 8, 16), roi_pool_size=4
)


@pytest.fixture(scope="module")
def small_set():
    return generate(GenConfig(count=1, seed=4))


def _micro_train(dataset, **kw):
    cfg = TrainConfig(**{"epochs": (1, 1, 1, 1), "learning_rates": (0.05,) * 4, **kw})
    return train(init_model(MICRO, seed=1), dataset, cfg)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(phases=("b", "x"), epochs=(1, 1), learning_rates=(0.1, 0.1)),
        dict(epochs=(1, 1)),
        dict(loss_weights=(1, 1, 0, 1)),
        dict(images_per_step=0),
        dict(learning_rates=(0.1, -0.1, 0.1, 0.1)),
    ],
)
def test_config_validated(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_config_dict_round_trip():
    cfg = TrainConfig(phases=("b", "d"), epochs=(2, 3), learning_rates=(0.1, 0.2), images_per_step=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"batch": 3})


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------


def test_single_gt_gets_a_positive():
    grid = generate_anchors(12, 12, 8)
    t = rpn_targets(grid, np.array([[30.0, 20, 52, 61]]), TrainConfig(), np.random.default_rng(0))
    assert np.count_nonzero(t.sampled_labels == 1) >= 1


def test_no_gts_all_negative():
    grid = generate_anchors(12, 12, 8)
    t = rpn_targets(grid, np.zeros((0, 4)), TrainConfig(), np.random.default_rng(0))
    assert len(t.sampled) == 32 and np.all(t.sampled_labels == 0)


def test_minibatch_composition():
    grid = generate_anchors(12, 12, 8)
    cfg = TrainConfig()
    gts = np.array([[0.0, 0, 16, 16], [40, 40, 72, 72], [8, 56, 40, 88]])
    for seed in range(5):
        t = rpn_targets(grid, gts, cfg, np.random.default_rng(seed))
        n_pos_avail = np.count_nonzero(t.labels == 1)
        n_pos = np.count_nonzero(t.sampled_labels == 1)
        assert n_pos == min(n_pos_avail, 16)
        assert len(t.sampled) == 32
        assert np.count_nonzero(t.sampled_labels == -1) == 0
        assert np.all(t.sampled_labels[:n_pos] == 1)  # positives first


def test_roi_targets_labels_and_deltas():
    cfg = TrainConfig(roi_batch_size=8, add_gt_proposals=False)
    gt = np.array([[10.0, 10, 50, 50]])
    props = np.array([[10.0, 10, 50, 52], [60, 60, 80, 80], [0, 0, 8, 8], [12, 10, 50, 50]])
    rt = roi_targets(props, gt, ["palm"], cfg, np.random.default_rng(0))
    assert rt.labels.tolist() == [3, 3, 0, 0]
    assert np.allclose(rt.deltas[:2], encode_boxes(np.repeat(gt, 2, 0), rt.rois[:2]))
    assert np.all(rt.deltas[2:] == 0)


def test_roi_targets_append_gt():
    rt = roi_targets(np.zeros((0, 4)), np.array([[1.0, 1, 9, 9]]), ["iris"], TrainConfig(), np.random.default_rng(0))
    assert rt.labels.tolist() == [2]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _rpn_case(rng, h=3, w=4, k=9):
    labels = rng.choice([-1, 0, 1], size=h * w * k)
    deltas = rng.normal(size=(h * w * k, 4))
    sampled = np.flatnonzero(labels >= 0)
    return RpnTargets(labels, deltas, sampled)


def _to_maps(scores, deltas, h=3, w=4, k=9):
    obj = scores.reshape(h, w, k).transpose(2, 0, 1)[None]
    d = deltas.reshape(h, w, k, 4).transpose(2, 3, 0, 1).reshape(1, 4 * k, h, w)
    return Tensor(obj), Tensor(d)


def test_perfect_predictions_near_zero_loss():
    rng = np.random.default_rng(0)
    t = _rpn_case(rng)
    obj, d = _to_maps(np.where(t.labels == 1, 1.0, 0.0), t.deltas)
    cls, reg = rpn_loss(obj, d, t)
    assert cls.item() < 1e-9 and reg.item() < 1e-9
    rt = RoiTargets(np.zeros((3, 4)), np.array([0, 2, 5]), rng.normal(size=(3, 4)))
    scores = np.eye(6)[rt.labels]
    hd = np.zeros((3, 5, 4))
    hd[1, 1], hd[2, 4] = rt.deltas[1], rt.deltas[2]
    cls, reg = head_loss(Tensor(scores), Tensor(hd.reshape(3, 20)), rt)
    assert cls.item() < 1e-9 and reg.item() < 1e-9


def test_uniform_scores_cost_ln6():
    rt = RoiTargets(np.zeros((4, 4)), np.array([0, 1, 3, 5]), np.zeros((4, 4)))
    cls, _ = head_loss(Tensor(np.full((4, 6), 1 / 6)), Tensor(np.zeros((4, 20))), rt)
    assert cls.item() == pytest.approx(math.log(6), abs=1e-12)


def test_regression_losses_match_direct_mse():
    rng = np.random.default_rng(1)
    t = _rpn_case(rng)
    pred = rng.normal(size=t.deltas.shape)
    obj, d = _to_maps(rng.uniform(0.1, 0.9, len(t.labels)), pred)
    _, reg = rpn_loss(obj, d, t)
    pos = t.sampled[t.labels[t.sampled] == 1]
    assert abs(reg.item() - np.mean((pred[pos] - t.deltas[pos]) ** 2)) < 1e-12

    labels = np.array([0, 4, 1, 0, 5])
    rt = RoiTargets(np.zeros((5, 4)), labels, rng.normal(size=(5, 4)))
    hd = rng.normal(size=(5, 5, 4))
    _, reg = head_loss(Tensor(rng.dirichlet(np.ones(6), 5)), Tensor(hd.reshape(5, 20)), rt)
    fg = [1, 2, 4]
    oracle = np.mean([(hd[i, labels[i] - 1] - rt.deltas[i]) ** 2 for i in fg])
    assert abs(reg.item() - oracle) < 1e-12


def test_no_positives_reg_zero():
    t = RpnTargets(np.zeros(9 * 12, dtype=int), np.zeros((108, 4)), np.arange(10))
    obj, d = _to_maps(np.full(108, 0.3), np.ones((108, 4)))
    assert rpn_loss(obj, d, t)[1].item() == 0.0
    rt = RoiTargets(np.zeros((2, 4)), np.array([0, 0]), np.zeros((2, 4)))
    assert head_loss(Tensor(np.full((2, 6), 1 / 6)), Tensor(np.ones((2, 20))), rt)[1].item() == 0.0


# ---------------------------------------------------------------------------
# phases
# ---------------------------------------------------------------------------


def _trained_micro(small_set):
    model, _ = _micro_train(small_set, phases=("b", "c"), epochs=(1, 1), learning_rates=(0.05, 0.05))
    return model


@pytest.mark.parametrize("phase, frozen", [("d", ("backbone", "heads")), ("e", ("backbone", "rpn"))])
def test_frozen_components_bit_identical(small_set, phase, frozen):
    model = _trained_micro(small_set)
    before = model.checksums()
    rep = train_phase(model, small_set, phase, 2, 0.1, TrainConfig(), np.random.default_rng(0))
    after = model.checksums()
    for comp in frozen:
        assert before[comp] == after[comp]
    active = {"d": "rpn", "e": "heads"}[phase]
    assert before[active] != after[active]
    assert rep.phase_checksums == [(phase, before, after)]


def test_phase_b_only_leaves_heads(small_set):
    model = init_model(MICRO, seed=1)
    heads = model.checksum("heads")
    model, rep = train(model, small_set, TrainConfig(phases=("b",), epochs=(1,), learning_rates=(0.1,)))
    assert model.checksum("heads") == heads
    assert rep.checksums == model.checksums()


def test_phase_writes_to_frozen_component_detected(small_set, monkeypatch):
    import ubsegnet.trainer as tr

    real = tr._step

    def tamper(model, *args, **kw):
        out = real(model, *args, **kw)
        model.params["heads.cls.bias"].data += 1.0
        return out

    monkeypatch.setattr(tr, "_step", tamper)
    with pytest.raises(TrainingError, match="frozen component 'heads'"):
        train_phase(init_model(MICRO), small_set, "d", 1, 0.1, TrainConfig(), np.random.default_rng(0))


def test_recalibration_touches_only_named_components(small_set):
    # heads still carry their initial statistics after phase b
    model, _ = _micro_train(small_set, phases=("b",), epochs=(1,), learning_rates=(0.05,))
    before = model.checksums()
    recalibrate_bn(model, small_set, ("heads",))
    after = model.checksums()
    assert before["backbone"] == after["backbone"] and before["rpn"] == after["rpn"]
    assert before["heads"] != after["heads"]
    params = {n: t.data.copy() for n, t in model.params.items()}
    recalibrate_bn(model, small_set, ("backbone", "rpn", "heads"))
    assert all(np.array_equal(params[n], t.data) for n, t in model.params.items())


def test_recalibration_idempotent(small_set):
    model = _trained_micro(small_set)
    first = model.checksums()
    recalibrate_bn(model, small_set, ("backbone", "heads"))
    assert model.checksums() == first


def test_recalibrated_statistics_are_dataset_means(small_set):
    from ubsegnet.detector import as_image_tensor, backbone_forward

    model = init_model(MICRO, seed=2)
    recalibrate_bn(model, small_set, ("backbone",))
    means = []
    for item in small_set:
        probe = copy.deepcopy(model)
        probe.buffers["backbone.0.bn.running_mean"][:] = 0.0
        cfg = probe.config
        probe.config = DetectorConfig(**{**cfg.to_dict(), "bn_momentum": 0.0})
        backbone_forward(probe, as_image_tensor(item.pixels), "train")
        means.append(probe.buffers["backbone.0.bn.running_mean"].copy())
    assert np.allclose(model.buffers["backbone.0.bn.running_mean"], np.mean(means, axis=0), atol=1e-12)


def test_nan_aborts_with_context(small_set):
    model = init_model(MICRO)
    model.params["rpn.cls.bias"].data[:] = np.nan
    with pytest.raises(TrainingError, match=r"phase b epoch 1 step 1 \(images .+\).*non-finite"):
        train_phase(model, small_set, "b", 1, 0.1, TrainConfig(shuffle=False), np.random.default_rng(0))


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train(init_model(MICRO), [], TrainConfig())


# ---------------------------------------------------------------------------
# reports and determinism
# ---------------------------------------------------------------------------


def test_report_shape_and_csv(small_set):
    _, rep = _micro_train(small_set, epochs=(1, 2, 1, 1))
    assert [r.phase for r in rep.epochs] == ["b", "c", "c", "d", "e"]
    assert [r.epoch for r in rep.epochs] == [1, 2, 3, 4, 5]
    assert [p for p, _ in rep.phase_times] == ["b", "c", "d", "e"]
    for name in LOSS_NAMES:
        assert len(rep.losses(name)) == 5 and all(v >= 0 for v in rep.losses(name))
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert rows[0] == ["epoch", "phase", "rpn_cls", "rpn_reg", "head_cls", "head_reg", "wall_time"]
    assert len(rows) == 6
    assert float(rows[1][2]) == rep.epochs[0].rpn_cls
    assert list(csv.reader(io.StringIO(rep.to_csv(include_time=False))))[0][-1] == "head_reg"


def test_same_seed_bit_identical(small_set, tmp_path):
    (m1, r1), (m2, r2) = _micro_train(small_set, images_per_step=2), _micro_train(small_set, images_per_step=2)
    save_model(m1, tmp_path / "a.bin")
    save_model(m2, tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert r1.to_csv(include_time=False) == r2.to_csv(include_time=False)


def test_different_seed_differs(small_set):
    (m1, _), (m2, _) = _micro_train(small_set, seed=0), _micro_train(small_set, seed=1)
    assert m1.checksum() != m2.checksum()


# ---------------------------------------------------------------------------
# overfit run (shared fixture, see conftest)
# ---------------------------------------------------------------------------


def test_overfit_loss_drops(overfit):
    _, rep, _ = overfit
    totals = rep.totals()
    assert totals[-1] < 0.2 * totals[0]


def test_overfit_moving_average_non_increasing(overfit):
    _, rep, _ = overfit
    totals = np.array(rep.totals())
    # every full 5-epoch window ends on epoch 5 or later, i.e. after epoch 3
    ma = np.convolve(totals, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(ma) <= 0), ma
