"""Training loop: schedules, optimizer arithmetic, determinism, resume."""
import csv
import dataclasses
import math

import numpy as np
import pytest
import torch

import disdet.train as T
from disdet.config import ModelConfig, TrainConfig
from disdet.errors import CheckpointError, LeakGuardError
from disdet.train import (
    METRICS_COLUMNS,
    TrainState,
    _Cycler,
    grl_coefficient,
    load_checkpoint,
    lr_schedule,
    make_optimizer,
    model_from_checkpoint,
    run_training,
    save_checkpoint,
    strip_annotations,
    train_step,
)

LOSS_COLS = [c for c in METRICS_COLUMNS if c.startswith("l_")]


def small_cfg(**kw):
    base = dict(total_iters=20, warmup_iters=6, checkpoint_every=8, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def read_metrics(path):
    with open(path) as f:
        reader = csv.reader(f)
        header = next(reader)
        assert header == list(METRICS_COLUMNS)
        return [dict(zip(header, row)) for row in reader]


# -- schedules -----------------------------------------------------------

def test_lr_schedule_phase_boundary():
    cfg = TrainConfig()
    boundary = math.ceil(cfg.phase_split * cfg.total_iters)
    assert lr_schedule(0, cfg) == cfg.lr_phase1
    assert lr_schedule(boundary - 1, cfg) == cfg.lr_phase1
    assert lr_schedule(boundary, cfg) == cfg.lr_phase2
    assert lr_schedule(cfg.total_iters - 1, cfg) == cfg.lr_phase2


def test_lr_schedule_rejects_out_of_range():
    cfg = TrainConfig()
    with pytest.raises(ValueError):
        lr_schedule(-1, cfg)
    with pytest.raises(ValueError):
        lr_schedule(cfg.total_iters, cfg)


def test_grl_coefficient_const():
    cfg = TrainConfig(lambda_schedule="const")
    for it in (0, 100, 6999):
        assert grl_coefficient(it, cfg, 1.0) == 1.0
        assert grl_coefficient(it, cfg, 0.3) == 0.3


def test_grl_coefficient_ramp_endpoints():
    cfg = TrainConfig(total_iters=1000, warmup_iters=100)
    assert grl_coefficient(0, cfg, 1.0) == 0.0
    assert grl_coefficient(100, cfg, 1.0) == 0.0
    full = 2.0 / (1.0 + math.exp(-10.0)) - 1.0
    assert grl_coefficient(1000, cfg, 1.0) == pytest.approx(full, abs=1e-15)
    mid = 2.0 / (1.0 + math.exp(-5.0)) - 1.0
    assert grl_coefficient(550, cfg, 1.0) == pytest.approx(mid, abs=1e-15)
    assert grl_coefficient(550, cfg, 0.5) == pytest.approx(0.5 * mid, abs=1e-15)


def test_grl_coefficient_monotone():
    cfg = TrainConfig(total_iters=500, warmup_iters=50)
    vals = [grl_coefficient(it, cfg, 1.0) for it in range(0, 501, 10)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert all(0.0 <= v <= 1.0 for v in vals)


# -- optimizer oracle ----------------------------------------------------

def test_sgd_matches_momentum_recurrence():
    # v <- mu*v + g + wd*theta; theta <- theta - lr*v
    lr, mu, wd = 0.1, 0.9, 5e-4
    p = torch.tensor([0.7, -1.3], dtype=torch.float64, requires_grad=True)
    opt = torch.optim.SGD([p], lr=lr, momentum=mu, weight_decay=wd)
    theta = np.array([0.7, -1.3])
    v = np.zeros(2)
    for _ in range(6):
        opt.zero_grad()
        (0.5 * (p**2).sum()).backward()
        opt.step()
        g = theta  # gradient of 0.5*theta^2
        v = mu * v + g + wd * theta
        theta = theta - lr * v
        assert np.allclose(p.detach().numpy(), theta, atol=1e-15)


def test_make_optimizer_hyperparameters():
    model = torch.nn.Linear(2, 2)
    cfg = TrainConfig()
    opt = make_optimizer(model, cfg)
    (group,) = opt.param_groups
    assert group["lr"] == cfg.lr_phase1
    assert group["momentum"] == cfg.momentum
    assert group["weight_decay"] == cfg.weight_decay


# -- cycler --------------------------------------------------------------

def test_cycler_visits_every_index_each_epoch():
    cyc = _Cycler(7, np.random.default_rng(0))
    first = [cyc.take() for _ in range(7)]
    second = [cyc.take() for _ in range(7)]
    assert sorted(first) == list(range(7))
    assert sorted(second) == list(range(7))


def test_cycler_state_roundtrip():
    cyc = _Cycler(5, np.random.default_rng(1))
    for _ in range(7):
        cyc.take()
    st = cyc.state()
    expect = [cyc.take() for _ in range(11)]
    fresh = _Cycler(5, np.random.default_rng(99))
    fresh.restore(st)
    assert [fresh.take() for _ in range(11)] == expect


def test_cycler_deterministic_across_instances():
    a = _Cycler(6, np.random.default_rng(42))
    b = _Cycler(6, np.random.default_rng(42))
    assert [a.take() for _ in range(18)] == [b.take() for _ in range(18)]


# -- train_step ----------------------------------------------------------

def test_strip_annotations(samples):
    src, _ = samples
    bare = strip_annotations(src[0])
    assert bare.annotations == ()
    assert bare.id == src[0].id
    assert np.array_equal(bare.pixels, src[0].pixels)


def test_train_step_rejects_annotated_target(model_cfg, samples):
    src, tgt = samples
    assert len(tgt[0].annotations) > 0
    from disdet.model import DetectorModel

    model = DetectorModel(model_cfg, num_classes=3, seed=0)
    state = TrainState(iter=600, rng=np.random.default_rng(0),
                       optimizer=make_optimizer(model, TrainConfig()))
    with pytest.raises(LeakGuardError, match=tgt[0].id):
        train_step(model, state, src[0], tgt[0], TrainConfig())


def test_train_step_warmup_only_detection(model_cfg, samples):
    src, tgt = samples
    from disdet.model import DetectorModel

    model = DetectorModel(model_cfg, num_classes=3, seed=0)
    state = TrainState(iter=0, rng=np.random.default_rng(0),
                       optimizer=make_optimizer(model, TrainConfig()))
    report = train_step(model, state, src[0], strip_annotations(tgt[0]),
                        TrainConfig(), warmup=True)
    assert report.l_det > 0
    for name in ("l_di", "l_ds", "l_tri", "l_isd_intra", "l_isd_inter", "l_variant"):
        assert getattr(report, name) == 0.0
    assert state.iter == 1


def test_train_step_zero_lr_keeps_params(model_cfg, samples):
    src, tgt = samples
    from disdet.model import DetectorModel

    model = DetectorModel(model_cfg, num_classes=3, seed=0)
    state = TrainState(iter=0, rng=np.random.default_rng(0),
                       optimizer=make_optimizer(model, TrainConfig()))
    before = {k: v.clone() for k, v in model.state_dict().items()}
    train_step(model, state, src[0], strip_annotations(tgt[0]), TrainConfig(),
               lr=0.0, warmup=True)
    after = model.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


# -- full runs -----------------------------------------------------------

def test_run_training_determinism(dataset_pair, tmp_path):
    src, tgt = dataset_pair
    cfg = small_cfg()
    mcfg = ModelConfig(width_mult=0.125)
    run_training(cfg, mcfg, src, tgt, tmp_path / "a")
    run_training(cfg, mcfg, src, tgt, tmp_path / "b")
    rows_a = read_metrics(tmp_path / "a" / "metrics.csv")
    rows_b = read_metrics(tmp_path / "b" / "metrics.csv")
    assert len(rows_a) == len(rows_b) == cfg.total_iters
    for ra, rb in zip(rows_a, rows_b):
        for col in ("step", "lr", *LOSS_COLS):
            assert ra[col] == rb[col], f"step {ra['step']} col {col}"


def test_run_training_metrics_shape(dataset_pair, tmp_path):
    src, tgt = dataset_pair
    cfg = small_cfg()
    out = run_training(cfg, ModelConfig(width_mult=0.125), src, tgt, tmp_path / "run")
    rows = read_metrics(out["metrics"])
    assert [int(r["step"]) for r in rows] == list(range(cfg.total_iters))
    for r in rows:
        if int(r["step"]) < cfg.warmup_iters:
            for col in LOSS_COLS:
                if col not in ("l_det", "l_total"):
                    assert float(r[col]) == 0.0
        assert float(r["l_total"]) == pytest.approx(
            float(r["l_det"]) + float(r["l_di"]) + float(r["l_gtd"])
            + float(r["l_isd"]) + float(r["l_variant"]), abs=1e-12
        )
        assert float(r["wall_s"]) >= 0.0


def test_run_training_freezes_base(dataset_pair, tmp_path):
    src, tgt = dataset_pair
    cfg = small_cfg()
    out = run_training(cfg, ModelConfig(width_mult=0.125), src, tgt, tmp_path / "run")
    latest = load_checkpoint(tmp_path / "run" / "ckpt_latest.pt")
    final = load_checkpoint(out["checkpoint"])
    assert final["e_b_frozen"] is True
    # checkpoint_every=8 saves first at iter 8, after the freeze at 6
    assert latest["iter"] == cfg.total_iters or latest["iter"] >= cfg.warmup_iters
    for k, v in final["model_state"].items():
        if k.startswith("e_b."):
            assert torch.equal(latest["model_state"][k], v), k


def test_resume_reproduces_trajectory(dataset_pair, tmp_path, monkeypatch):
    src, tgt = dataset_pair
    cfg = small_cfg()
    mcfg = ModelConfig(width_mult=0.125)
    run_training(cfg, mcfg, src, tgt, tmp_path / "a")
    rows_a = read_metrics(tmp_path / "a" / "metrics.csv")

    real = train_step
    calls = {"n": 0}

    def dies_at_13(*args, **kwargs):
        if calls["n"] == 13:
            raise RuntimeError("simulated crash")
        calls["n"] += 1
        return real(*args, **kwargs)

    monkeypatch.setattr(T, "train_step", dies_at_13)
    with pytest.raises(RuntimeError, match="simulated crash"):
        run_training(cfg, mcfg, src, tgt, tmp_path / "b")
    monkeypatch.setattr(T, "train_step", real)

    latest = load_checkpoint(tmp_path / "b" / "ckpt_latest.pt")
    assert latest["iter"] == 8  # checkpoint_every=8, crash at step 13
    run_training(cfg, mcfg, src, tgt, tmp_path / "b",
                 resume_from=tmp_path / "b" / "ckpt_latest.pt")
    rows_b = read_metrics(tmp_path / "b" / "metrics.csv")
    assert len(rows_b) == cfg.total_iters
    for ra, rb in zip(rows_a, rows_b):
        for col in ("step", "lr", *LOSS_COLS):
            assert ra[col] == rb[col], f"step {ra['step']} col {col}"
    fin_a = load_checkpoint(tmp_path / "a" / "ckpt_final.pt")
    fin_b = load_checkpoint(tmp_path / "b" / "ckpt_final.pt")
    assert fin_a["model_state"].keys() == fin_b["model_state"].keys()
    for k in fin_a["model_state"]:
        assert torch.equal(fin_a["model_state"][k], fin_b["model_state"][k]), k


def test_resume_rejects_config_mismatch(dataset_pair, tmp_path):
    src, tgt = dataset_pair
    cfg = small_cfg()
    mcfg = ModelConfig(width_mult=0.125)
    run_training(cfg, mcfg, src, tgt, tmp_path / "run")
    ckpt = tmp_path / "run" / "ckpt_final.pt"
    other = dataclasses.replace(cfg, margin=0.5)
    with pytest.raises(CheckpointError, match="config"):
        run_training(other, mcfg, src, tgt, tmp_path / "run2", resume_from=ckpt)
    other_m = ModelConfig(width_mult=0.25)
    with pytest.raises(CheckpointError, match="config"):
        run_training(cfg, other_m, src, tgt, tmp_path / "run3", resume_from=ckpt)


def test_run_training_rejects_empty_dataset(dataset_pair, tmp_path):
    from disdet.errors import ConfigError, DatasetError

    src, tgt = dataset_pair
    with pytest.raises((ConfigError, DatasetError)):
        run_training(small_cfg(), ModelConfig(width_mult=0.125), tmp_path / "nope", tgt,
                     tmp_path / "out")


# -- checkpoint files ----------------------------------------------------

def test_checkpoint_roundtrip_rebuilds_model(dataset_pair, tmp_path, samples):
    src_dir, tgt_dir = dataset_pair
    out = run_training(small_cfg(), ModelConfig(width_mult=0.125), src_dir, tgt_dir,
                       tmp_path / "run")
    from disdet.model import detect

    model, payload = model_from_checkpoint(out["checkpoint"])
    assert payload["iter"] == 20
    assert model.e_b_frozen is True
    orig = out["model"]
    src, _ = samples
    with torch.no_grad():
        a = detect(orig, src[0].pixels)
        b = detect(model, src[0].pixels)
    assert len(a) == len(b)
    for da, db in zip(a, b):
        assert da.class_id == db.class_id
        assert da.score == pytest.approx(db.score, abs=0)
        assert np.array_equal(da.box, db.box)


def test_load_checkpoint_missing_and_corrupt(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "missing.pt")
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"torch? no.")
    with pytest.raises(CheckpointError, match="unreadable"):
        load_checkpoint(bad)


def test_load_checkpoint_rejects_unknown_version(model_cfg, tmp_path):
    from disdet.model import DetectorModel

    model = DetectorModel(model_cfg, num_classes=3, seed=0)
    state = TrainState(iter=0, rng=np.random.default_rng(0),
                       optimizer=make_optimizer(model, TrainConfig()))
    path = save_checkpoint(tmp_path / "c.pt", model, state, TrainConfig())
    payload = torch.load(path, weights_only=False)
    payload["format_version"] = 999
    torch.save(payload, path)
    with pytest.raises(CheckpointError, match="format_version"):
        load_checkpoint(path)


def test_model_from_checkpoint_detects_tamper(model_cfg, tmp_path):
    from disdet.model import DetectorModel

    model = DetectorModel(model_cfg, num_classes=3, seed=0)
    state = TrainState(iter=0, rng=np.random.default_rng(0),
                       optimizer=make_optimizer(model, TrainConfig()))
    path = save_checkpoint(tmp_path / "c.pt", model, state, TrainConfig())
    payload = torch.load(path, weights_only=False)
    payload["num_classes"] = 7
    torch.save(payload, path)
    with pytest.raises(CheckpointError, match="hash"):
        model_from_checkpoint(path)
