"""Training loops: alternating likelihood/debias optimisation for binary
labels, joint likelihood maximisation for continuous labels, standalone
baselines, and grid sweeps over synthetic data."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import special

from . import baselines as bl
from .dataio import InteractionDataset
from .datagen import SynthSpec, generate, paper_test_fraction, split_test
from .likelihood import Batch, MCConfig, batch_loglik, mc_joint_pos_r, phase_stream
from .metrics import EvalReport, auc, evaluate, mse
from .numkernel import RngStream, inverse_mills, std_normal_cdf
from .optim import Adam, adam_step  # noqa: F401  (re-exported)
from .scoremodel import (CorrelationParam, GradBuffer, MatrixFactorization, PairRef, ScalarLinear,
                         ScalarMLP, ScoreModel)

METHODS = ("naive", "eib", "ips", "dr", "ours-naive", "ours-eib", "ours-ips", "ours-dr", "ours-mle")
PHASE_R, PHASE_D, PHASE_C = 0, 1, 2


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    method: str = "ours-naive"
    alpha: float = 0.8
    backbone: str = "mf"              # "mf" or "feature"
    embed_dim: int = 8
    r_head: str = "linear"            # feature backbone: "linear" or "mlp"
    hidden: tuple = (8,)
    lr: float = 0.01
    lr_rho: float = 0.01
    weight_decay: float = 1e-5
    batch_r: int = 1024
    batch_d: int = 4096
    steps_r: int | None = None        # None: one pass over the observed pairs
    steps_d: int | None = None        # None: one pass over all pairs
    mc_samples: int = 64
    mc_seed: int | None = None        # Monte Carlo seed; defaults to ``seed``
    floor_eps: float = 1e-9
    max_epochs: int = 50
    patience: int = 5
    val_fraction: float = 0.1
    clip_floor: float = 0.05
    propensity_epochs: int = 10
    warmup_epochs: int = 5            # continuous mode: probit epochs of the two-step warm start
    warmup_steps: int = 4000          # continuous mode: full-batch least-squares steps on O
    warmup_lr: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.backbone not in ("mf", "feature"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        for name in ("batch_r", "batch_d", "max_epochs", "mc_samples", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("steps_r", "steps_d"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be positive")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")
        self.hidden = tuple(int(h) for h in self.hidden)

    @property
    def is_ours(self) -> bool:
        return self.method.startswith("ours")

    @property
    def debias_kind(self) -> str:
        if self.method == "ours-mle":
            return "none"
        return self.method.split("-", 1)[1] if self.is_ours else self.method

    @property
    def effective_alpha(self) -> float:
        return 1.0 if self.method == "ours-mle" else self.alpha

    @property
    def mc(self) -> MCConfig:
        return MCConfig(self.mc_samples, self.seed if self.mc_seed is None else self.mc_seed, self.floor_eps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


# Shared settings for the synthetic studies; every method in a comparison
# gets the same backbone, learning rate and epoch budget.
PRESETS = {
    "synthetic-continuous": dict(backbone="feature", r_head="linear", lr=0.05, lr_rho=0.05, batch_r=256,
                                 batch_d=4096, max_epochs=400, patience=10),
    "synthetic-binary": dict(backbone="feature", r_head="mlp", lr=0.05, lr_rho=0.05, batch_r=256,
                             batch_d=4096, steps_d=4, max_epochs=30, patience=30, mc_samples=64),
}


def preset_config(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return TrainConfig(**{**PRESETS[name], **overrides})


@dataclass
class EpochRecord:
    epoch: int
    neg_loglik_r: float
    neg_loglik_d: float
    blended: float
    rho: float
    val_metric: float
    seconds: float


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)
    val_name: str = ""
    best_epoch: int = -1

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "neg_loglik_r", "neg_loglik_d", "blended", "rho", self.val_name or "val", "seconds"])
        for r in self.records:
            w.writerow([r.epoch] + [repr(float(v)) for v in
                                    (r.neg_loglik_r, r.neg_loglik_d, r.blended, r.rho, r.val_metric, r.seconds)])
        return buf.getvalue()

    @property
    def best_value(self) -> float:
        for r in self.records:
            if r.epoch == self.best_epoch:
                return r.val_metric
        return float("nan")

    def deterministic_view(self) -> list:
        """Records without wall-clock times (for reproducibility checks)."""
        return [(r.epoch, r.neg_loglik_r, r.neg_loglik_d, r.blended, r.rho, r.val_metric) for r in self.records]


@dataclass
class TrainResult:
    model_o: ScoreModel
    model_r: ScoreModel
    corr: CorrelationParam
    trace: TrainTrace
    imput: ScoreModel | None = None
    seconds: float = 0.0

    @property
    def rho(self) -> float:
        return self.corr.value()


# ---------------------------------------------------------------------------
# model construction


def build_head(cfg: TrainConfig, ds: InteractionDataset, role: str, stream: int) -> ScoreModel:
    rng = RngStream(cfg.seed, 1000 + stream)
    if cfg.backbone == "mf":
        return MatrixFactorization.init(ds.n_users, ds.n_items, cfg.embed_dim, rng)
    if role == "r" and cfg.r_head == "linear":
        return ScalarLinear()
    if role == "prop":
        return ScalarLinear()
    return ScalarMLP.init(cfg.hidden, rng, zero_output=role in ("r", "imp"))


def build_models(cfg: TrainConfig, ds: InteractionDataset):
    return build_head(cfg, ds, "o", 1), build_head(cfg, ds, "r", 2), CorrelationParam(0.0)


# ---------------------------------------------------------------------------
# data plumbing


@dataclass
class _Split:
    train_all: np.ndarray     # flat indices of all training pairs (D minus holdout)
    train_obs: np.ndarray     # observed training pairs
    val_all: np.ndarray
    val_obs: np.ndarray
    labels: np.ndarray        # flat label vector (0 where unobserved)
    mask: np.ndarray          # flat observed mask

    @property
    def obs_fraction(self) -> float:
        return len(self.train_obs) / len(self.train_all)


def _split(ds: InteractionDataset, cfg: TrainConfig) -> _Split:
    n = ds.n_pairs
    hold = np.zeros(n, dtype=bool)
    n_val = int(round(cfg.val_fraction * n))
    if n_val:
        hold[RngStream(cfg.seed, 7).choice(n, n_val)] = True
    mask = ds.observed_mask
    train_all = np.flatnonzero(~hold)
    train_obs = np.flatnonzero(~hold & mask)
    if len(train_obs) == 0 or len(train_all) == 0:
        raise TrainingError("no observed training pairs (empty O) or no pairs at all (empty D)")
    return _Split(train_all, train_obs, np.flatnonzero(hold), np.flatnonzero(hold & mask),
                  ds.label_matrix(), mask)


def make_batch(ds: InteractionDataset, flat: np.ndarray, model_o: ScoreModel, model_r: ScoreModel,
               labels: np.ndarray, mask: np.ndarray) -> Batch:
    pairs = ds.unflatten(flat)
    return Batch(ds.inputs(model_o, pairs), ds.inputs(model_r, pairs), mask[flat].astype(float),
                 labels[flat], flat, ds.label_kind)


def _chunks(order: np.ndarray, size: int, steps: int | None):
    """``steps`` consecutive batches cycling through ``order``."""
    n = len(order)
    if steps is None:
        steps = max(1, math.ceil(n / size))
    for s in range(steps):
        start = (s * size) % n
        idx = order[start:start + size]
        if len(idx) < size and n > size:
            idx = np.concatenate([idx, order[:size - len(idx)]])
        yield idx


def _check_finite(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss in {what}")


def _loglik(what: str, *args, **kw) -> float:
    """batch_loglik with a non-finite total reported as a TrainingError naming ``what``."""
    try:
        return batch_loglik(*args, **kw)
    except FloatingPointError as exc:
        raise TrainingError(f"non-finite loss in {what}: {exc}") from None


# ---------------------------------------------------------------------------
# propensity model for standalone IPS / DR


def fit_propensity(ds: InteractionDataset, split: _Split, cfg: TrainConfig) -> ScoreModel:
    """Logistic regression of o on the pair (user + item bias, or the scalar feature)."""
    if cfg.backbone == "mf":
        model = MatrixFactorization(ds.n_users, ds.n_items, 0)
    else:
        model = ScalarLinear()
    opt = Adam(model.params, lr=0.05)
    buf = GradBuffer.like(model)
    rng = RngStream(cfg.seed, 31)
    for epoch in range(cfg.propensity_epochs):
        order = split.train_all[rng.substream(epoch).permutation(len(split.train_all))]
        for idx in _chunks(order, cfg.batch_d, None):
            x = ds.inputs(model, ds.unflatten(idx))
            _, de = bl.score_error(split.mask[idx].astype(float), model.score(x), "cross_entropy")
            buf.zero()
            model.accumulate_grad(x, de / len(idx), buf)
            opt.step(buf.params)
    return model


def _imputation_target(method: str, kind: str) -> str:
    """DR fits imputed errors for cross-entropy, where the error is linear in
    the pseudo-label. Under squared error (pseudo - s)^2 = e has two roots,
    so the error fit can settle on the reflected label 2s - y; there the
    imputation model regresses labels instead."""
    return "error" if method == "dr" and kind == "cross_entropy" else "label"


def _logistic_props(model: ScoreModel, inputs, clip: float) -> bl.PropensityEstimate:
    return bl.clip_propensity(special.expit(model.score(inputs)), clip)


# ---------------------------------------------------------------------------
# validation


PHASE_VAL = 3


def _val_pairs(ds, split, model_o, model_r):
    pairs = ds.unflatten(split.val_obs)
    return ds.inputs(model_o, pairs), ds.inputs(model_r, pairs), split.labels[split.val_obs]


def observed_prediction(model_o, model_r, corr, x_o, x_r, kind: str, mc: MCConfig | None = None, keys=None):
    """Prediction of an observed pair's label under the selection model.

    Continuous: E[y | o = 1] = g_r + rho * phi(g_o) / Phi(g_o).
    Binary: P(r = 1 | o = 1) = MC^r(g_o, g_r) / Phi(g_o).
    Validation data are observed pairs, so this (not g_r alone) is what a
    held-out observed label should be compared with.
    """
    g_o, g_r, rho = model_o.score(x_o), model_r.score(x_r), corr.value()
    if kind == "continuous":
        return g_r + rho * inverse_mills(g_o)
    eps = mc.draw_keyed(phase_stream(0, PHASE_VAL), keys)
    joint = mc_joint_pos_r(g_o, g_r, rho, eps).estimate
    return joint / np.maximum(std_normal_cdf(g_o), mc.floor_eps)


def _val_metric(ds, split, model_o, model_r, corr, cfg: TrainConfig, selection_aware: bool) -> float:
    """Validation AUC (binary) or MSE (continuous) on held-out observed pairs."""
    if len(split.val_obs) == 0:
        return float("nan")
    x_o, x_r, labels = _val_pairs(ds, split, model_o, model_r)
    if selection_aware:
        pred = observed_prediction(model_o, model_r, corr, x_o, x_r, ds.label_kind, cfg.mc, split.val_obs)
    else:
        pred = model_r.score(x_r)
    if ds.label_kind == "continuous":
        return mse(pred, labels)
    try:
        return auc(pred, labels)
    except ValueError:
        return float("nan")


class _EarlyStop:
    def __init__(self, patience: int, higher_is_better: bool):
        self.patience, self.sign = patience, (1.0 if higher_is_better else -1.0)
        self.best = -math.inf
        self.bad = 0
        self.snapshot = None
        self.best_epoch = -1

    def update(self, epoch: int, metric: float, snapshot) -> bool:
        """Record the epoch; True when training should stop.

        While the metric has never been finite (e.g. single-class validation
        labels leave AUC undefined) the latest parameters are kept and
        training runs to max_epochs.
        """
        if not np.isfinite(metric):
            if self.best == -math.inf:
                self.snapshot, self.best_epoch = snapshot(), epoch
                return False
            self.bad += 1
            return self.bad > self.patience
        score = self.sign * metric
        if self.snapshot is None or score > self.best:
            self.best, self.bad, self.snapshot, self.best_epoch = score, 0, snapshot(), epoch
            return False
        self.bad += 1
        return self.bad > self.patience


def _snapshot(*models):
    def take():
        return [m.params.copy() if m is not None else None for m in models]
    return take


def _restore(models, params):
    for m, p in zip(models, params):
        if m is not None:
            m.params[...] = p


# ---------------------------------------------------------------------------
# binary: alternating optimisation


def phase_r_step(ds, split, idx_obs, idx_all, model_o, model_r, corr, cfg: TrainConfig, epoch: int,
                 imput=None, props_obs=None):
    """Gradient of alpha * (-L^R)/|B| + (1 - alpha) * L_debias for one paired batch.

    Returns (grad buffer for theta_r with the rho slot, -L^R per pair, blended loss).
    """
    alpha = cfg.effective_alpha
    obs = make_batch(ds, idx_obs, model_o, model_r, split.labels, split.mask)
    grad = GradBuffer.like(model_r)
    what = "phase R (prediction model)"
    ll = _loglik(what, obs, model_o, model_r, corr, "binaryR", cfg.mc, phase_stream(epoch, PHASE_R),
                 grad_r=grad, weight=-alpha / len(obs)) if alpha > 0 else 0.0
    if alpha == 0:
        # the likelihood value is still reported
        ll = _loglik(what, obs, model_o, model_r, corr, "binaryR", cfg.mc, phase_stream(epoch, PHASE_R))
    neg_lr = -ll / len(obs)
    debias = 0.0
    if alpha < 1:
        dgrad = GradBuffer.like(model_r)
        full = make_batch(ds, idx_all, model_o, model_r, split.labels, split.mask)
        debias = bl.paired_debias_loss(cfg.debias_kind, obs, full, model_r, "cross_entropy",
                                       split.obs_fraction, dgrad, imput, props_obs)
        grad.params += (1.0 - alpha) * dgrad.params
    return grad, neg_lr, alpha * neg_lr + (1.0 - alpha) * debias


def phase_d_step(ds, split, idx_all, model_o, model_r, corr, cfg: TrainConfig, epoch: int):
    """Gradient of -L^D / |B| w.r.t. theta_o (and rho in the buffer's rho slot)."""
    b = make_batch(ds, idx_all, model_o, model_r, split.labels, split.mask)
    grad = GradBuffer.like(model_o)
    ll = _loglik("phase D (selection model)", b, model_o, model_r, corr, "binaryD", cfg.mc,
                 phase_stream(epoch, PHASE_D), grad_o=grad, weight=-1.0 / len(b))
    return grad, -ll / len(b)


def _selection_props(ds, idx, model_o, clip) -> bl.PropensityEstimate:
    return bl.propensity_from_selection_head(model_o, ds.inputs(model_o, ds.unflatten(idx)), clip)


def train_binary(train: InteractionDataset, cfg: TrainConfig, models=None) -> TrainResult:
    """Alternate (theta_r, rho) updates on observed batches with (theta_o, rho)
    updates on batches of all pairs; early stopping on held-out observed AUC."""
    if train.label_kind != "binary":
        raise TrainingError("train_binary needs binary labels")
    if not cfg.is_ours:
        return train_baseline(train, cfg)
    t0 = time.perf_counter()
    split = _split(train, cfg)
    model_o, model_r, corr = models or build_models(cfg, train)
    if models is None and cfg.warmup_epochs:
        probit_warm_start(train, split, model_o, cfg)
    need_imput = cfg.debias_kind in ("dr", "eib") and cfg.effective_alpha < 1
    imput = build_head(cfg, train, "imp", 3) if need_imput else None
    opt_r = Adam(model_r.params, cfg.lr, cfg.weight_decay)
    opt_o = Adam(model_o.params, cfg.lr, cfg.weight_decay)
    opt_rho = Adam(corr.params, cfg.lr_rho)
    opt_i = Adam(imput.params, cfg.lr, cfg.weight_decay) if imput is not None else None
    trace = TrainTrace(val_name="val_auc")
    stopper = _EarlyStop(cfg.patience, higher_is_better=True)
    keep = (model_o, model_r, imput, corr)
    rng = RngStream(cfg.seed, 5)
    for epoch in range(cfg.max_epochs):
        te = time.perf_counter()
        ep = rng.substream(epoch)
        order_o = split.train_obs[ep.substream(0).permutation(len(split.train_obs))]
        order_a = split.train_all[ep.substream(1).permutation(len(split.train_all))]
        paired = _chunks(order_a, cfg.batch_r, None if cfg.steps_r is None else cfg.steps_r)
        lr_vals, blend_vals = [], []
        for idx_obs in _chunks(order_o, cfg.batch_r, cfg.steps_r):
            idx_all = next(paired, None)
            if idx_all is None:
                paired = _chunks(order_a, cfg.batch_r, None)
                idx_all = next(paired)
            props = None
            if cfg.debias_kind in ("ips", "dr"):
                props = _selection_props(train, idx_obs, model_o, cfg.clip_floor)
            grad, neg_lr, blended = phase_r_step(train, split, idx_obs, idx_all, model_o, model_r, corr,
                                                 cfg, epoch, imput, props)
            _check_finite(blended, "phase R (prediction model)")
            opt_r.step(grad.params)
            opt_rho.step(np.array([grad.rho_raw]))
            if imput is not None:
                ig = GradBuffer.like(imput)
                obs = make_batch(train, idx_obs, model_o, model_r, split.labels, split.mask)
                bl.update_imputation(obs, model_r, imput, "cross_entropy", ig, props,
                                     _imputation_target(cfg.debias_kind, "cross_entropy"))
                opt_i.step(ig.params)
            lr_vals.append(neg_lr)
            blend_vals.append(blended)
        ld_vals = []
        for idx_all in _chunks(order_a, cfg.batch_d, cfg.steps_d):
            grad, neg_ld = phase_d_step(train, split, idx_all, model_o, model_r, corr, cfg, epoch)
            _check_finite(neg_ld, "phase D (selection model)")
            opt_o.step(grad.params)
            opt_rho.step(np.array([grad.rho_raw]))
            ld_vals.append(neg_ld)
        val = _val_metric(train, split, model_o, model_r, corr, cfg, True)
        trace.records.append(EpochRecord(epoch, float(np.mean(lr_vals)), float(np.mean(ld_vals)),
                                         float(np.mean(blend_vals)), corr.value(), val,
                                         time.perf_counter() - te))
        if stopper.update(epoch, val, _snapshot(*keep)):
            break
    _restore(keep, stopper.snapshot)
    trace.best_epoch = stopper.best_epoch
    return TrainResult(model_o, model_r, corr, trace, imput, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# continuous: joint maximum likelihood


def probit_warm_start(ds, split, model_o, cfg: TrainConfig) -> None:
    """Fit the selection head alone by probit regression of o on all training pairs."""
    opt_o = Adam(model_o.params, cfg.warmup_lr, cfg.weight_decay)
    rng = RngStream(cfg.seed, 6)
    for epoch in range(cfg.warmup_epochs):
        order = split.train_all[rng.substream(epoch).permutation(len(split.train_all))]
        for idx in _chunks(order, cfg.batch_d, cfg.steps_d):
            x = ds.inputs(model_o, ds.unflatten(idx))
            g = model_o.score(x)
            sign = np.where(split.mask[idx], 1.0, -1.0)
            d = sign * inverse_mills(sign * g)       # d log Phi(sign g) / d g
            buf = GradBuffer.like(model_o)
            model_o.accumulate_grad(x, -d / len(idx), buf)
            opt_o.step(buf.params)


def two_step_warm_start(ds, split, model_o, model_r, corr, cfg: TrainConfig) -> None:
    """Two-step starting values for the joint likelihood.

    1. probit fit of o on all training pairs for theta_o;
    2. least squares of y on g_r + c * phi(g_o) / Phi(g_o) over observed
       pairs for theta_r and c. With unit preference-noise variance c
       estimates rho, and it seeds the correlation (clipped to +-0.9).

    The joint likelihood has a spurious optimum with rho of the wrong sign
    that gradient descent from rho = 0 can fall into; these starting
    values sit in the right basin.
    """
    probit_warm_start(ds, split, model_o, cfg)
    opt_r = Adam(model_r.params, cfg.warmup_lr, cfg.weight_decay)
    c = np.zeros(1)
    opt_c = Adam(c, cfg.warmup_lr)
    obs = split.train_obs
    pairs = ds.unflatten(obs)
    lam = inverse_mills(model_o.score(ds.inputs(model_o, pairs)))
    x = ds.inputs(model_r, pairs)
    y = split.labels[obs]
    for _ in range(cfg.warmup_steps):
        resid = model_r.score(x) + c[0] * lam - y
        buf = GradBuffer.like(model_r)
        model_r.accumulate_grad(x, 2.0 * resid / len(obs), buf)
        opt_r.step(buf.params)
        opt_c.step(np.array([2.0 * np.mean(resid * lam)]))
    corr.params[0] = CorrelationParam.from_value(float(np.clip(c[0], -0.9, 0.9))).raw


def train_continuous(train: InteractionDataset, cfg: TrainConfig, models=None) -> TrainResult:
    """Minimise -L_MLE over (theta_o, theta_r, rho) jointly with minibatches of
    all pairs; early stopping on the selection-aware MSE of held-out observed pairs."""
    if train.label_kind != "continuous":
        raise TrainingError("train_continuous needs continuous labels")
    if not cfg.is_ours:
        return train_baseline(train, cfg)
    t0 = time.perf_counter()
    split = _split(train, cfg)
    model_o, model_r, corr = models or build_models(cfg, train)
    if models is None and (cfg.warmup_epochs or cfg.warmup_steps):
        two_step_warm_start(train, split, model_o, model_r, corr, cfg)
    opt_r = Adam(model_r.params, cfg.lr, cfg.weight_decay)
    opt_o = Adam(model_o.params, cfg.lr, cfg.weight_decay)
    opt_rho = Adam(corr.params, cfg.lr_rho)
    trace = TrainTrace(val_name="val_mse")
    stopper = _EarlyStop(cfg.patience, higher_is_better=False)
    keep = (model_o, model_r, corr)
    rng = RngStream(cfg.seed, 5)
    for epoch in range(cfg.max_epochs):
        te = time.perf_counter()
        order = split.train_all[rng.substream(epoch).permutation(len(split.train_all))]
        vals = []
        for idx in _chunks(order, cfg.batch_d, cfg.steps_d):
            b = make_batch(train, idx, model_o, model_r, split.labels, split.mask)
            go, gr = GradBuffer.like(model_o), GradBuffer.like(model_r)
            ll = _loglik("continuous likelihood", b, model_o, model_r, corr, "continuous", grad_o=go, grad_r=gr,
                         weight=-1.0 / len(b))
            _check_finite(ll, "continuous likelihood")
            opt_o.step(go.params)
            opt_r.step(gr.params)
            opt_rho.step(np.array([go.rho_raw]))
            vals.append(-ll / len(b))
        val = _val_metric(train, split, model_o, model_r, corr, cfg, True)
        nll = float(np.mean(vals))
        trace.records.append(EpochRecord(epoch, nll, float("nan"), nll, corr.value(), val,
                                         time.perf_counter() - te))
        if stopper.update(epoch, val, _snapshot(*keep)):
            break
    _restore(keep, stopper.snapshot)
    trace.best_epoch = stopper.best_epoch
    return TrainResult(model_o, model_r, corr, trace, None, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# baselines on their own


def train_baseline(train: InteractionDataset, cfg: TrainConfig) -> TrainResult:
    """Naive / EIB / IPS / DR with the same backbone; the checkpointed
    selection head is the logistic propensity model (zeros for naive/EIB)."""
    t0 = time.perf_counter()
    kind = "cross_entropy" if train.label_kind == "binary" else "squared"
    split = _split(train, cfg)
    model_r = build_head(cfg, train, "r", 2)
    prop_model = fit_propensity(train, split, cfg) if cfg.method in ("ips", "dr") else build_head(cfg, train, "prop", 4)
    imput = build_head(cfg, train, "imp", 3) if cfg.method in ("eib", "dr") else None
    opt_r = Adam(model_r.params, cfg.lr, cfg.weight_decay)
    opt_i = Adam(imput.params, cfg.lr, cfg.weight_decay) if imput is not None else None
    binary = kind == "cross_entropy"
    trace = TrainTrace(val_name="val_auc" if binary else "val_mse")
    stopper = _EarlyStop(cfg.patience, higher_is_better=binary)
    keep = (model_r, imput)
    rng = RngStream(cfg.seed, 5)
    for epoch in range(cfg.max_epochs):
        te = time.perf_counter()
        ep = rng.substream(epoch)
        order_o = split.train_obs[ep.substream(0).permutation(len(split.train_obs))]
        order_a = split.train_all[ep.substream(1).permutation(len(split.train_all))]
        paired = _chunks(order_a, cfg.batch_r, None)
        vals = []
        for idx_obs in _chunks(order_o, cfg.batch_r, cfg.steps_r):
            idx_all = next(paired, None)
            if idx_all is None:
                paired = _chunks(order_a, cfg.batch_r, None)
                idx_all = next(paired)
            obs = make_batch(train, idx_obs, prop_model, model_r, split.labels, split.mask)
            full = make_batch(train, idx_all, prop_model, model_r, split.labels, split.mask)
            props = _logistic_props(prop_model, obs.inputs_o, cfg.clip_floor) if cfg.method in ("ips", "dr") else None
            grad = GradBuffer.like(model_r)
            loss = bl.paired_debias_loss(cfg.method, obs, full, model_r, kind, split.obs_fraction,
                                         grad, imput, props)
            _check_finite(loss, f"{cfg.method} loss")
            opt_r.step(grad.params)
            if imput is not None:
                ig = GradBuffer.like(imput)
                bl.update_imputation(obs, model_r, imput, kind, ig, props, _imputation_target(cfg.method, kind))
                opt_i.step(ig.params)
            vals.append(loss)
        val = _val_metric(train, split, prop_model, model_r, None, cfg, False)
        loss = float(np.mean(vals))
        trace.records.append(EpochRecord(epoch, float("nan"), float("nan"), loss, float("nan"), val,
                                         time.perf_counter() - te))
        if stopper.update(epoch, val, _snapshot(*keep)):
            break
    _restore(keep, stopper.snapshot)
    trace.best_epoch = stopper.best_epoch
    return TrainResult(prop_model, model_r, CorrelationParam(0.0), trace, imput, time.perf_counter() - t0)


def train(train_set: InteractionDataset, cfg: TrainConfig, models=None) -> TrainResult:
    if train_set.label_kind == "binary":
        return train_binary(train_set, cfg, models)
    return train_continuous(train_set, cfg, models)


# ---------------------------------------------------------------------------
# evaluation and experiments


def evaluate_model(model_r: ScoreModel, test: InteractionDataset, k: int = 5) -> EvalReport:
    pairs = PairRef(test.users, test.items)
    scores = model_r.score(test.inputs(model_r, pairs))
    preds = special.expit(scores) if test.label_kind == "binary" else scores
    return evaluate(test.users, test.items, scores, test.labels, k, preds)


def run_experiment(spec: SynthSpec, cfg: TrainConfig, k: int = 5, test_fraction: float | None = None) -> dict:
    """Generate, train and evaluate once; returns a flat metrics row."""
    data = generate(spec)
    frac = test_fraction if test_fraction is not None else paper_test_fraction(data)
    train_set, test = split_test(data, frac, spec.seed)
    res = train(train_set, cfg)
    rep = evaluate_model(res.model_r, test, k)
    return {"method": cfg.method, "data_seed": spec.seed, "seed": cfg.seed, "true_rho": spec.rho,
            "rho_hat": res.rho if cfg.is_ours else float("nan"), "beta": data.beta,
            "sparsity": data.sparsity, **rep.as_dict(), "epochs": len(res.trace.records),
            "val_metric": res.trace.best_value, "seconds": res.seconds}


SWEEP_AXES = ("rho", "alpha", "mc_L")
SWEEP_FIELDS = ["axis", "value", "repeat", "status", "method", "data_seed", "seed", "true_rho", "rho_hat",
                "beta", "sparsity", "mse", "auc", "recall_at_k", "ndcg_at_k", "k", "epochs", "val_metric", "seconds"]


def sweep(axis: str, values, spec: SynthSpec, cfg: TrainConfig, repeats: int = 1, k: int = 5) -> list[dict]:
    """One row per (value, repeat); a failing run gives a row marked failed.

    rho: repeat j uses data seed spec.seed + j and training seed cfg.seed + j.
    alpha: the same, so every alpha value replays the same datasets.
    mc_L: data, initialisation and batches stay fixed; repeat j changes only
    the Monte Carlo seed, so spread across repeats is Monte Carlo noise.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rows = []
    for v in values:
        for j in range(repeats):
            row = {"axis": axis, "value": v, "repeat": j}
            try:
                if axis == "mc_L":
                    s = spec
                    c = replace(cfg, mc_samples=int(v), mc_seed=cfg.seed + 1000 + j)
                else:
                    s = replace(spec, seed=spec.seed + j, rho=v if axis == "rho" else spec.rho)
                    c = replace(cfg, seed=cfg.seed + j)
                    if axis == "alpha":
                        c = replace(c, alpha=v)
                row.update(run_experiment(s, c, k))
                row["status"] = "ok"
            except Exception as exc:
                row["status"] = f"failed: {type(exc).__name__}: {exc}"
            rows.append(row)
    return rows


def rows_to_csv(rows: list[dict], fields=None) -> str:
    fields = fields or SWEEP_FIELDS
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({f: (repr(float(r[f])) if isinstance(r.get(f), (float, np.floating)) else r.get(f, ""))
                    for f in fields})
    return buf.getvalue()


def aggregate(rows: list[dict], metrics=("mse", "auc", "recall_at_k", "ndcg_at_k", "rho_hat", "val_metric")) -> list[dict]:
    """mean and std per sweep value over successful repeats."""
    out = []
    for v in dict.fromkeys(r["value"] for r in rows):
        ok = [r for r in rows if r["value"] == v and r.get("status") == "ok"]
        agg = {"axis": rows[0]["axis"], "value": v, "runs": len(ok)}
        for m in metrics:
            vals = np.array([r[m] for r in ok], dtype=float)
            agg[f"{m}_mean"] = float(np.mean(vals)) if len(vals) else float("nan")
            agg[f"{m}_std"] = float(np.std(vals)) if len(vals) else float("nan")
        out.append(agg)
    return out
