import math
from dataclasses import replace

import numpy as np
import pytest

from exodebias import baselines as bl
from exodebias.datagen import SynthSpec, generate, paper_test_fraction, split_test
from exodebias.dataio import InteractionDataset
from exodebias.likelihood import Batch, batch_loglik, cont_obs_term, phase_stream
from exodebias.numkernel import LOG_SQRT_2PI, RngStream
from exodebias.optim import AdamState, adam_step
from exodebias.scoremodel import CorrelationParam, GradBuffer, ScalarLinear, ScalarMLP
from exodebias.trainer import (METHODS, PHASE_R, PRESETS, TrainConfig, TrainingError, _check_finite,
                               _EarlyStop, _split, _val_metric, aggregate, build_models,
                               evaluate_model, make_batch, phase_d_step, phase_r_step, preset_config,
                               rows_to_csv, sweep, train, train_binary, train_continuous)


def tiny(kind, seed=0, n=30, rho=0.5):
    extra = dict(pref_scale=0.5, target_sparsity=0.2) if kind == "binary" else {}
    d = generate(SynthSpec(n, n, rho=rho, label_mode=kind, seed=seed, **extra))
    return split_test(d, paper_test_fraction(d), seed)


def fast_cfg(kind, **kw):
    if kind == "binary":
        return preset_config("synthetic-binary", **{"max_epochs": 3, **kw})
    return preset_config("synthetic-continuous", **{"max_epochs": 3, "warmup_steps": 200, **kw})


# ---------------------------------------------------------------- optimiser


def test_adam_zero_grad_no_decay_is_identity():
    p = np.array([1.0, -2.0, 3.0])
    st = AdamState.zeros_like(p)
    for _ in range(5):
        adam_step(p, np.zeros(3), st, lr=0.1)
    assert np.array_equal(p, [1.0, -2.0, 3.0])


def test_adam_first_step_is_lr_times_sign():
    p = np.zeros(4)
    g = np.array([3.0, -0.2, 1e-3, -50.0])
    adam_step(p, g, AdamState.zeros_like(p), lr=0.01)
    assert np.allclose(p, -0.01 * np.sign(g), rtol=1e-4)


def test_adam_converges_on_quadratic():
    # constant-lr Adam circles the minimum with shrinking amplitude; at lr 0.3
    # the 100th iterate is inside the 1e-2 band
    w = np.array([0.0])
    st = AdamState.zeros_like(w)
    for _ in range(100):
        adam_step(w, 2 * (w - 3.0), st, lr=0.3)
    assert abs(w[0] - 3.0) < 1e-2


def test_adam_weight_decay_enters_gradient():
    p1, p2 = np.array([2.0, -1.0]), np.array([2.0, -1.0])
    g = np.array([0.3, 0.4])
    adam_step(p1, g, AdamState.zeros_like(p1), lr=0.05, weight_decay=0.1)
    adam_step(p2, g + 0.1 * np.array([2.0, -1.0]), AdamState.zeros_like(p2), lr=0.05)
    assert np.array_equal(p1, p2)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        adam_step(np.zeros(3), np.zeros(2), AdamState.zeros_like(np.zeros(3)), 0.1)


# ---------------------------------------------------------------- config


@pytest.mark.parametrize("bad", [dict(alpha=1.5), dict(alpha=-0.1), dict(method="snips"), dict(batch_r=0),
                                 dict(steps_d=0), dict(max_epochs=0), dict(mc_samples=0), dict(patience=-1),
                                 dict(backbone="gnn")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_config_properties():
    assert TrainConfig(method="ours-dr").debias_kind == "dr"
    assert TrainConfig(method="ips").debias_kind == "ips" and not TrainConfig(method="ips").is_ours
    mle = TrainConfig(method="ours-mle", alpha=0.3)
    assert mle.debias_kind == "none" and mle.effective_alpha == 1.0
    c = TrainConfig(seed=4, mc_samples=16)
    assert c.mc.L == 16 and c.mc.seed == 4
    assert TrainConfig(seed=4, mc_seed=9).mc.seed == 9
    assert TrainConfig(hidden=[4, 2]).to_dict()["hidden"] == [4, 2]


def test_presets():
    for name in PRESETS:
        cfg = preset_config(name, seed=3)
        assert cfg.backbone == "feature" and cfg.seed == 3
    assert preset_config("synthetic-binary").r_head == "mlp"
    with pytest.raises(ValueError):
        preset_config("movielens")


def test_zero_output_heads_for_prediction():
    tr, _ = tiny("binary")
    cfg = fast_cfg("binary")
    mo, mr, corr = build_models(cfg, tr)
    x = np.linspace(-2, 2, 5)
    assert np.all(mr.score(x) == 0) and not np.all(mo.score(x) == 0) and corr.value() == 0


# ---------------------------------------------------------------- smoke runs


@pytest.mark.parametrize("method", METHODS)
@pytest.mark.parametrize("kind", ["binary", "continuous"])
def test_every_method_trains(method, kind):
    tr, te = tiny(kind)
    res = train(tr, fast_cfg(kind, method=method))
    recs = res.trace.records
    assert 1 <= len(recs) <= 3
    assert res.trace.best_epoch in [r.epoch for r in recs]
    if method.startswith("ours"):
        assert all(-1 < r.rho < 1 for r in recs)
    rep = evaluate_model(res.model_r, te, 5)
    assert all(math.isfinite(v) for v in (rep.mse, rep.auc))


def test_mf_backbone_trains():
    tr, te = tiny("binary")
    res = train(tr, TrainConfig(method="ours-ips", max_epochs=2, batch_r=64, batch_d=256, embed_dim=4))
    assert len(res.trace.records) == 2
    assert math.isfinite(evaluate_model(res.model_r, te).auc)


@pytest.mark.parametrize("kind,method", [("binary", "ours-dr"), ("binary", "dr"), ("continuous", "ours-mle"),
                                         ("continuous", "ips")])
def test_trace_bit_identical_across_runs(kind, method):
    tr, _ = tiny(kind)
    a = train(tr, fast_cfg(kind, method=method, seed=5))
    b = train(tr, fast_cfg(kind, method=method, seed=5))
    np.testing.assert_array_equal(a.trace.deterministic_view(), b.trace.deterministic_view())
    assert np.array_equal(a.model_r.params, b.model_r.params)


def test_seed_changes_trace():
    tr, _ = tiny("binary")
    a = train(tr, fast_cfg("binary", seed=1))
    b = train(tr, fast_cfg("binary", seed=2))
    assert not np.allclose(a.trace.deterministic_view(), b.trace.deterministic_view(), equal_nan=True)


def test_trace_csv_one_row_per_epoch():
    tr, _ = tiny("binary")
    res = train(tr, fast_cfg("binary"))
    lines = res.trace.to_csv().strip().split("\n")
    assert lines[0].startswith("epoch,neg_loglik_r,neg_loglik_d,blended,rho,val_auc")
    assert len(lines) == 1 + len(res.trace.records)


def test_best_snapshot_restored():
    tr, _ = tiny("continuous", n=40)
    cfg = fast_cfg("continuous", method="ours-mle", max_epochs=6)
    res = train(tr, cfg)
    again = _val_metric(tr, _split(tr, cfg), res.model_o, res.model_r, res.corr, cfg, True)
    assert again == res.trace.best_value


# ---------------------------------------------------------------- binary phases


def _phase_setup(seed=0):
    tr, _ = tiny("binary", n=40)
    cfg = fast_cfg("binary", seed=seed)
    split = _split(tr, cfg)
    rng = RngStream(seed, 77)
    mo = ScalarMLP((8,), rng.normal(ScalarMLP.num_params((8,))))
    mr = ScalarMLP((8,), rng.normal(ScalarMLP.num_params((8,))))
    return tr, cfg, split, mo, mr, CorrelationParam(0.4)


@pytest.mark.parametrize("method", ["ours-naive", "ours-ips", "ours-dr", "ours-eib"])
def test_alpha_zero_reduces_to_baseline_gradient(method):
    tr, cfg, split, mo, mr, corr = _phase_setup()
    cfg = replace(cfg, method=method, alpha=0.0)
    idx_o, idx_a = split.train_obs[:64], split.train_all[:64]
    imput = ScalarMLP((8,), RngStream(3, 3).normal(ScalarMLP.num_params((8,))))
    props = bl.propensity_from_selection_head(mo, tr.inputs(mo, tr.unflatten(idx_o)), cfg.clip_floor)
    grad, _, blended = phase_r_step(tr, split, idx_o, idx_a, mo, mr, corr, cfg, 0, imput, props)
    want = GradBuffer.like(mr)
    obs = make_batch(tr, idx_o, mo, mr, split.labels, split.mask)
    full = make_batch(tr, idx_a, mo, mr, split.labels, split.mask)
    loss = bl.paired_debias_loss(cfg.debias_kind, obs, full, mr, "cross_entropy", split.obs_fraction,
                                 want, imput, props)
    assert np.array_equal(grad.params, want.params)
    assert grad.rho_raw == 0.0
    assert blended == loss


def test_rho_gets_gradient_in_both_phases():
    tr, cfg, split, mo, mr, corr = _phase_setup()
    g_r, _, _ = phase_r_step(tr, split, split.train_obs[:64], split.train_all[:64], mo, mr, corr, cfg, 0)
    g_d, _ = phase_d_step(tr, split, split.train_all[:256], mo, mr, corr, cfg, 0)
    assert g_r.rho_raw != 0.0 and g_d.rho_raw != 0.0
    assert np.any(g_r.params != 0) and np.any(g_d.params != 0)


def _neg_lr(tr, split, mo, mr, corr, cfg, epoch):
    b = make_batch(tr, split.train_obs, mo, mr, split.labels, split.mask)
    return -batch_loglik(b, mo, mr, corr, "binaryR", cfg.mc, phase_stream(epoch, PHASE_R)) / len(b)


def test_pure_likelihood_run_completes():
    tr, _ = tiny("binary", n=50)
    res = train_binary(tr, fast_cfg("binary", method="ours-naive", alpha=1.0, max_epochs=10, mc_samples=256))
    assert len(res.trace.records) == 10
    assert all(math.isfinite(r.neg_loglik_r) and math.isfinite(r.neg_loglik_d) for r in res.trace.records)


def test_phase_r_descends_on_fixed_objective():
    # frozen theta_o and Monte Carlo draws, full observed batch, plain gradient steps
    tr, _ = tiny("binary", n=50)
    cfg = fast_cfg("binary", alpha=1.0, mc_samples=256)
    split = _split(tr, cfg)
    mo, mr, corr = build_models(cfg, tr)
    idx = split.train_obs
    values = []
    for _ in range(100):
        grad, neg_lr, _ = phase_r_step(tr, split, idx, split.train_all[:len(idx)], mo, mr, corr, cfg, 0)
        values.append(neg_lr)
        mr.params -= 0.1 * grad.params
        corr.params -= 0.1 * grad.rho_raw
    assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))
    assert values[-1] < values[0]


def test_training_lowers_likelihood_loss():
    tr, _ = tiny("binary", n=50)
    cfg = fast_cfg("binary", alpha=1.0, max_epochs=10, mc_samples=256)
    split = _split(tr, cfg)
    init = _neg_lr(tr, split, *build_models(cfg, tr), cfg, 99)
    res = train(tr, cfg)
    assert _neg_lr(tr, split, res.model_o, res.model_r, res.corr, cfg, 99) < init


# ---------------------------------------------------------------- continuous


@pytest.mark.parametrize("seed", range(3))
def test_continuous_recovers_zero_rho(seed):
    d = generate(SynthSpec(200, 200, rho=0.0, seed=seed))
    tr, _ = split_test(d, 0.025, seed)
    res = train(tr, preset_config("synthetic-continuous", method="ours-mle", seed=seed))
    assert abs(res.rho) <= 0.1


def _full_nll(ds, mo, mr, corr):
    flat = np.arange(ds.n_pairs)
    x = ds.features.ravel()
    b = Batch(x, x, ds.observed_mask.astype(float), ds.label_matrix(), flat, "continuous")
    return -batch_loglik(b, mo, mr, corr, "continuous") / len(flat)


def test_oracle_initialisation_is_near_optimum():
    d = generate(SynthSpec(200, 200, rho=0.6, seed=3))
    tr, _ = split_test(d, 0.025, 3)
    # tanh(x - mean) * 5 - beta is one tanh unit; g_r = 5 x is linear
    mo = ScalarMLP((1,), np.array([1.0, -d.x.mean(), 5.0, -d.beta]))
    mr, corr = ScalarLinear(5.0, 0.0), CorrelationParam.from_value(0.6)
    before = _full_nll(tr, mo, mr, corr)
    res = train(tr, preset_config("synthetic-continuous", method="ours-mle", max_epochs=30), models=(mo, mr, corr))
    after = _full_nll(tr, res.model_o, res.model_r, res.corr)
    assert abs(before - after) <= 0.01 * abs(after)


def test_observed_term_gaussian_when_selection_certain():
    t = cont_obs_term(1.3, 40.0, 1.3, 0.7)
    assert t.value == pytest.approx(-LOG_SQRT_2PI, abs=1e-12)


# ---------------------------------------------------------------- errors


def test_empty_observed_set():
    empty = InteractionDataset(5, 5, [], [], [], "binary", np.zeros((5, 5)))
    with pytest.raises(TrainingError, match="empty O"):
        train(empty, fast_cfg("binary"))


def test_wrong_label_kind():
    tb, _ = tiny("binary")
    tc, _ = tiny("continuous")
    with pytest.raises(TrainingError):
        train_continuous(tb, fast_cfg("continuous"))
    with pytest.raises(TrainingError):
        train_binary(tc, fast_cfg("binary"))


def test_check_finite_names_term():
    _check_finite(1.0, "x")
    with pytest.raises(TrainingError, match="phase D"):
        _check_finite(float("nan"), "phase D (selection model)")
    with pytest.raises(TrainingError):
        _check_finite(float("inf"), "y")


def test_non_finite_loss_aborts():
    tr, _ = tiny("continuous")
    labels = tr.labels.copy()
    labels[:] = np.nan
    bad = InteractionDataset(tr.n_users, tr.n_items, tr.users, tr.items, labels, "continuous", tr.features)
    with pytest.raises(TrainingError, match="continuous likelihood"):
        train(bad, fast_cfg("continuous", method="ours-mle", warmup_steps=0, warmup_epochs=0))


# ---------------------------------------------------------------- early stopping


def _run_stopper(values, patience, higher):
    es = _EarlyStop(patience, higher)
    for e, v in enumerate(values):
        if es.update(e, v, lambda e=e: e):
            return e, es
    return None, es


def test_early_stop_patience():
    stop, es = _run_stopper([0.5, 0.6, 0.55, 0.58, 0.59, 0.7], patience=2, higher=True)
    assert stop == 4 and es.best_epoch == 1 and es.snapshot == 1


def test_early_stop_lower_is_better():
    stop, es = _run_stopper([3.0, 2.0, 2.5, 1.0, 1.5], patience=5, higher=False)
    assert stop is None and es.best_epoch == 3


def test_early_stop_nan_rules():
    # undefined metric before any finite value: keep the latest, never stop
    stop, es = _run_stopper([float("nan")] * 5, patience=1, higher=True)
    assert stop is None and es.best_epoch == 4
    # after a finite value, an undefined metric counts as no improvement
    stop, es = _run_stopper([0.6, float("nan"), float("nan")], patience=1, higher=True)
    assert stop == 2 and es.best_epoch == 0


# ---------------------------------------------------------------- sweeps


SWEEP_SPEC = SynthSpec(25, 25, label_mode="binary", pref_scale=0.5, target_sparsity=0.2, seed=10)


def test_rho_sweep_cardinality_and_csv():
    rows = sweep("rho", [-0.8, 0.0, 0.8], SWEEP_SPEC, fast_cfg("binary", max_epochs=1), repeats=3)
    assert len(rows) == 9 and all(r["status"] == "ok" for r in rows)
    assert [r["true_rho"] for r in rows] == [-0.8] * 3 + [0.0] * 3 + [0.8] * 3
    assert len(rows_to_csv(rows).strip().split("\n")) == 10
    agg = aggregate(rows)
    assert len(agg) == 3 and all(a["runs"] == 3 for a in agg)


def test_alpha_sweep_replays_datasets():
    rows = sweep("alpha", [0.2, 0.8], SWEEP_SPEC, fast_cfg("binary", max_epochs=1), repeats=2)
    for j in range(2):
        same = [r for r in rows if r["repeat"] == j]
        assert len({(r["data_seed"], r["beta"], r["sparsity"]) for r in same}) == 1


def test_sweep_failed_rows_continue():
    rows = sweep("rho", [1.5, 0.3], SWEEP_SPEC, fast_cfg("binary", max_epochs=1), repeats=1)
    assert rows[0]["status"].startswith("failed") and rows[1]["status"] == "ok"
    agg = aggregate(rows)
    assert agg[0]["runs"] == 0 and math.isnan(agg[0]["auc_mean"]) and agg[1]["runs"] == 1


@pytest.mark.parametrize("kw", [dict(axis="beta", values=[1]), dict(axis="rho", values=[]),
                                dict(axis="rho", values=[0.1], repeats=0)])
def test_sweep_argument_errors(kw):
    with pytest.raises(ValueError):
        sweep(spec=SWEEP_SPEC, cfg=fast_cfg("binary"), **{"repeats": 1, **kw})


MC_SPEC = SynthSpec(100, 100, rho=0.7, label_mode="binary", pref_scale=0.5, target_sparsity=0.2, seed=2)


def test_mc_sweep_spread_shrinks_with_samples():
    cfg = preset_config("synthetic-binary", max_epochs=1)
    rows = sweep("mc_L", [10, 100, 1000], MC_SPEC, cfg, repeats=20)
    assert len({r["data_seed"] for r in rows}) == 1
    spread = [a["rho_hat_std"] for a in aggregate(rows)]
    assert spread[0] >= spread[1] >= spread[2]


def test_validation_noise_shrinks_with_samples():
    # heads of the generating process, so held-out predictions carry real ranking signal
    d = generate(MC_SPEC)
    tr, _ = split_test(d, paper_test_fraction(d), 2)
    cfg = preset_config("synthetic-binary")
    split = _split(tr, cfg)
    mo = ScalarMLP((1,), np.array([1.0, -d.x.mean(), 5.0, -d.beta]))
    mr, corr = ScalarLinear(0.5, 0.0), CorrelationParam.from_value(0.7)
    spread = []
    for L in (10, 100, 1000):
        vals = [_val_metric(tr, split, mo, mr, corr, replace(cfg, mc_samples=L, mc_seed=500 + j), True)
                for j in range(30)]
        spread.append(np.std(vals))
    assert spread[0] >= spread[1] >= spread[2]
