import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cave.data import AvMask, DsaSeries
from cave.model import CaveConfig, CaveNet, load_checkpoint
from cave.synth import SynthConfig, generate_dataset, render
from cave.training import (
    ConfigError,
    PlateauController,
    Sample,
    TrainConfig,
    TrainingError,
    av_loss,
    fit,
    load_split,
    model_input,
    soft_mdice,
    train,
)


def t64(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


# ---- soft M-Dice ------------------------------------------------------------


def test_mdice_hand_count():
    pred = t64([[[1, 1], [0, 0]], [[0, 0], [0, 0]]])
    gt = t64([[[1, 0], [1, 0]], [[0, 0], [0, 0]]])
    # TP=1, FP=1, FN=1
    assert soft_mdice(pred, gt, 0.0).item() == pytest.approx(0.5, abs=1e-15)


def test_mdice_identity_and_empty():
    g = t64(np.random.default_rng(0).random((2, 4, 4)) > 0.5)
    assert soft_mdice(g, g, 1.0).item() == 1.0
    assert soft_mdice(g, g, 0.0).item() == 1.0
    z = torch.zeros(2, 3, 3, dtype=torch.float64)
    assert soft_mdice(z, z, 1.0).item() == 1.0


def test_mdice_accepts_avmask():
    m = AvMask(np.eye(3, dtype=bool), np.zeros((3, 3), bool))
    assert soft_mdice(t64(m.stack()), m, 0.0).item() == 1.0


def test_mdice_shape_mismatch():
    with pytest.raises(ValueError):
        soft_mdice(torch.zeros(2, 3, 3), torch.zeros(2, 3, 4))


masks = arrays(np.bool_, (2, 3, 3))


@settings(max_examples=60)
@given(masks, masks)
def test_mdice_symmetric_for_hard_masks(a, b):
    if a.sum() + b.sum() == 0:
        return
    assert soft_mdice(t64(a), t64(b), 0.0).item() == pytest.approx(soft_mdice(t64(b), t64(a), 0.0).item(), abs=1e-15)


@settings(max_examples=60)
@given(arrays(np.float64, (2, 3, 3), elements=st.floats(0, 1)), masks, st.randoms(use_true_random=False))
def test_mdice_pixel_permutation_invariant(p, g, rnd):
    perm = list(range(9))
    rnd.shuffle(perm)
    pp = p.reshape(2, 9)[:, perm].reshape(2, 3, 3)
    gp = g.reshape(2, 9)[:, perm].reshape(2, 3, 3)
    assert soft_mdice(t64(p), t64(g)).item() == pytest.approx(soft_mdice(t64(pp), t64(gp)).item(), rel=1e-12)


# ---- loss -------------------------------------------------------------------


def test_ce_at_half_is_ln2():
    gt = t64(np.random.default_rng(1).random((2, 5, 5)) > 0.3)
    out = av_loss(torch.full((2, 5, 5), 0.5, dtype=torch.float64), gt)
    assert out.ce.item() == pytest.approx(math.log(2), abs=1e-12)


def test_perfect_prediction_zero_loss():
    gt = t64(np.random.default_rng(2).random((2, 5, 5)) > 0.5)
    out = av_loss(gt.clone(), gt)
    assert out.ce.item() < 1e-6
    assert out.mdice_loss.item() == pytest.approx(0.0, abs=1e-12)
    assert out.total.item() < 1e-6


@settings(max_examples=40)
@given(arrays(np.float64, (2, 3, 3), elements=st.floats(0, 1)), masks)
def test_loss_ranges(p, g):
    out = av_loss(t64(p), t64(g))
    assert out.total.item() >= 0
    assert 0 <= out.mdice_loss.item() <= 1
    assert out.total.item() == pytest.approx(out.ce.item() + out.mdice_loss.item(), rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_gradient_wrt_logits_finite_difference(seed):
    rng = np.random.default_rng(seed)
    logits = t64(rng.normal(size=(2, 8, 8))).requires_grad_(True)
    gt = t64(rng.random((2, 8, 8)) > 0.6)

    def f(z):
        return av_loss(torch.sigmoid(z), gt).total

    f(logits).backward()
    analytic = logits.grad.numpy().ravel()
    numeric = np.empty_like(analytic)
    h = 1e-6
    base = logits.detach().clone().ravel()
    for i in range(base.numel()):
        up, dn = base.clone(), base.clone()
        up[i] += h
        dn[i] -= h
        numeric[i] = (f(up.view(2, 8, 8)).item() - f(dn.view(2, 8, 8)).item()) / (2 * h)
    rel = np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)
    assert rel < 1e-4


# ---- scheduler --------------------------------------------------------------


def test_plateau_schedule_never_improving():
    ctl = PlateauController(TrainConfig())
    lrs, stop_epoch = {}, None
    for epoch in range(1, 1001):
        lrs[epoch] = ctl.lr
        _, stop = ctl.step(epoch, 1.0)
        if stop:
            stop_epoch = epoch
            break
    assert lrs[11] == 1e-5 and lrs[12] == 5e-6
    assert lrs[21] == 5e-6 and lrs[22] == 2.5e-6
    assert ctl.lr == pytest.approx(1e-5 * 0.5**5)
    assert stop_epoch == 51


def test_plateau_resets_on_improvement():
    cfg = TrainConfig(plateau_patience=2, early_stop_patience=3)
    ctl = PlateauController(cfg)
    seq = [1.0, 1.0, 0.5, 0.5, 0.5, 0.5]
    out = [ctl.step(e, v) for e, v in enumerate(seq, 1)]
    assert [o[0] for o in out] == [True, False, True, False, False, False]
    assert out[-1][1] and not out[-2][1]
    assert ctl.lr == cfg.lr * 0.5


def test_min_improvement():
    ctl = PlateauController(TrainConfig())
    ctl.step(1, 1.0)
    assert not ctl.step(2, 1.0 - 1e-7)[0]
    assert ctl.step(3, 1.0 - 1e-5)[0]


@pytest.mark.parametrize(
    "kw", [dict(plateau_patience=0), dict(decay_factor=1.0), dict(max_epochs=0), dict(lr=0), dict(monitor="acc")]
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


# ---- loop -------------------------------------------------------------------


def tiny_sample(seed=0):
    out = render(SynthConfig(size=(16, 16), n_frames=4, n_artery_branches=2, n_vein_branches=2, seed=seed))
    return Sample(out.series, out.mask)


def tiny_model(module="conv_gru"):
    torch.manual_seed(0)
    return CaveNet(CaveConfig(base_channels=4, depth=2, temporal_module=module))


def test_overfit_single_sample():
    s = tiny_sample()
    cfg = TrainConfig(lr=1e-4, max_epochs=50, aug_enabled=False, early_stop_patience=50)
    res = fit(tiny_model(), [s], [s], cfg)
    train_losses = [r["train_loss"] for r in res.log]
    assert all(b < a for a, b in zip(train_losses[:10], train_losses[1:10]))
    assert train_losses[-1] < train_losses[0]


def test_stub_validation_drives_schedule():
    s = tiny_sample()
    cfg = TrainConfig(lr=1e-5, max_epochs=1000, aug_enabled=False)
    res = fit(tiny_model(), [s], [s], cfg, val_loss_fn=lambda m, e: 1.0)
    lrs = [r["lr"] for r in res.log]
    assert len(res.log) == 51
    assert lrs[10] == 1e-5 and lrs[11] == 5e-6 and lrs[21] == 2.5e-6


def test_max_epochs_bound():
    s = tiny_sample()
    res = fit(tiny_model(), [s], [s], TrainConfig(max_epochs=3), val_loss_fn=lambda m, e: -e)
    assert len(res.log) == 3 and res.best_epoch == 3


def test_seeded_determinism():
    s = [tiny_sample(0), tiny_sample(1)]
    cfg = TrainConfig(lr=1e-3, max_epochs=3, seed=4)
    a = fit(tiny_model(), s, s[:1], cfg).log
    b = fit(tiny_model(), s, s[:1], cfg).log
    assert a == b


def test_best_state_restored():
    s = tiny_sample()
    vals = iter([3.0, 1.0, 2.0, 2.0])
    model = tiny_model()
    snapshots = {}

    def val(m, epoch):
        snapshots[epoch] = {k: v.clone() for k, v in m.state_dict().items()}
        return next(vals)

    res = fit(model, [s], [s], TrainConfig(lr=1e-3, max_epochs=4), val_loss_fn=val)
    assert res.best_epoch == 2
    for k, v in model.state_dict().items():
        assert torch.equal(v, snapshots[2][k])


def test_val_mdice_monitor():
    s = tiny_sample()
    res = fit(tiny_model(), [s], [s], TrainConfig(lr=1e-3, max_epochs=2, monitor="val_mdice"))
    assert all(0 <= r["val_mdice"] <= 1 for r in res.log)
    assert res.best_val == pytest.approx(1 - max(r["val_mdice"] for r in res.log))


def test_non_finite_loss_aborts():
    s = tiny_sample()
    model = tiny_model()
    with torch.no_grad():
        model.decoder.head.bias.fill_(float("nan"))
    with pytest.raises(TrainingError):
        fit(model, [s], [s], TrainConfig(max_epochs=1))


def test_empty_split_is_config_error():
    with pytest.raises(ConfigError):
        fit(tiny_model(), [], [tiny_sample()], TrainConfig())


def test_model_input_unet_uses_minip():
    frames = np.stack([np.full((16, 16), 200.0), np.full((16, 16), 100.0)])
    s = DsaSeries(frames, fps=1.0)
    x = model_input(tiny_model("none"), s)
    assert tuple(x.shape) == (1, 1, 16, 16)
    assert torch.allclose(x, torch.full_like(x, 1 - 100 / 255))
    assert tuple(model_input(tiny_model(), s).shape) == (2, 1, 16, 16)


def test_train_writes_run_dir(tmp_path):
    cfg_s = SynthConfig(size=(16, 16), n_frames=4, n_artery_branches=2, n_vein_branches=2)
    generate_dataset(cfg_s, 4, (0.5, 0.25, 0.25), seed=0, out_dir=tmp_path / "data")
    res = train(tiny_model(), tmp_path / "data" / "manifest.json", TrainConfig(lr=1e-3, max_epochs=2), tmp_path / "run")
    lines = [json.loads(l) for l in open(tmp_path / "run" / "log.jsonl")]
    assert [l["epoch"] for l in lines] == [1, 2]
    assert set(lines[0]) == {"epoch", "train_loss", "val_loss", "lr"}
    model, extra = load_checkpoint(tmp_path / "run" / "checkpoint.best")
    assert extra["best_epoch"] == res.best_epoch
    assert len(load_split(tmp_path / "data" / "manifest.json", "test")) == 1
    with pytest.raises(ConfigError):
        load_split(tmp_path / "data" / "manifest.json", "holdout")
