"""Per-pair log-likelihood terms of the bivariate-normal selection model.

All term functions are vectorised: scalars or equal-shape arrays for the
scores, and an ``eps`` array whose trailing axis holds the L Monte Carlo
draws for each pair.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numkernel import (LOG_SQRT_2PI, RngStream, derive_stream_id, inverse_mills,
                        keyed_normals, log_std_normal_cdf, std_normal_cdf, std_normal_pdf)
from .scoremodel import CorrelationParam, GradBuffer, ScoreModel


@dataclass
class LikelihoodTerm:
    value: np.ndarray | float
    d_go: np.ndarray | float
    d_gr: np.ndarray | float
    d_rho: np.ndarray | float


@dataclass(frozen=True)
class MCConfig:
    L: int = 64
    seed: int = 0
    floor_eps: float = 1e-9

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("Monte Carlo sample count L must be >= 1")
        if not 0.0 < self.floor_eps < 1e-3:
            raise ValueError("floor_eps must lie in (0, 1e-3)")

    def draw(self, stream: RngStream) -> np.ndarray:
        return stream.normal(self.L)

    def draw_keyed(self, stream_id: int, keys) -> np.ndarray:
        return keyed_normals(self.seed, stream_id, keys, self.L)


def _check_rho(rho: float) -> None:
    if not abs(rho) < 1.0:
        raise ValueError(f"|rho| must be < 1, got {rho}")


def _arr(v):
    return np.asarray(v, dtype=float)


def _out(a):
    a = np.asarray(a)
    return a[()] if a.ndim == 0 else a


# ---------------------------------------------------------------------------
# continuous labels


def cont_obs_term(y, g_o, g_r, rho: float) -> LikelihoodTerm:
    """log f(z > 0, y) for an observed pair with continuous label y."""
    _check_rho(rho)
    y, g_o, g_r = np.broadcast_arrays(_arr(y), _arr(g_o), _arr(g_r))
    s = math.sqrt(1.0 - rho * rho)
    e = y - g_r
    t = (g_o + rho * e) / s
    lam = _arr(inverse_mills(t))
    value = -LOG_SQRT_2PI - 0.5 * e * e + _arr(log_std_normal_cdf(t))
    d_go = lam / s
    d_gr = e - lam * rho / s
    d_rho = lam * (e + rho * g_o) / s ** 3
    return LikelihoodTerm(_out(value), _out(d_go), _out(d_gr), _out(d_rho))


def cont_mis_term(g_o) -> LikelihoodTerm:
    """log f(z <= 0) = log Phi(-g_o) for an unobserved pair."""
    g_o = _arr(g_o)
    value = _arr(log_std_normal_cdf(-g_o))
    d_go = -_arr(inverse_mills(-g_o))
    zero = np.zeros_like(g_o)
    return LikelihoodTerm(_out(value), _out(d_go), _out(zero), _out(zero))


# ---------------------------------------------------------------------------
# binary labels, Monte Carlo


@dataclass
class MCEstimate:
    estimate: np.ndarray | float
    d_inner: np.ndarray | float   # derivative w.r.t. the score inside Phi
    d_rho: np.ndarray | float


def _mc_joint(inner, gate, rho: float, eps) -> MCEstimate:
    """(1/L) sum_l Phi((inner + rho eps_l)/s) 1{eps_l > -gate}.

    The indicator is held fixed, so derivatives only touch the Phi factor.
    """
    _check_rho(rho)
    inner, gate = np.broadcast_arrays(_arr(inner), _arr(gate))
    eps = _arr(eps)
    s = math.sqrt(1.0 - rho * rho)
    inner_, gate_ = inner[..., None], gate[..., None]
    t = (inner_ + rho * eps) / s
    ind = (eps > -gate_).astype(float)
    pdf = _arr(std_normal_pdf(t)) * ind
    est = np.mean(_arr(std_normal_cdf(t)) * ind, axis=-1)
    d_inner = np.mean(pdf, axis=-1) / s
    d_rho = np.mean(pdf * (eps + rho * inner_), axis=-1) / s ** 3
    return MCEstimate(_out(est), _out(d_inner), _out(d_rho))


def mc_joint_pos_r(g_o, g_r, rho: float, eps) -> MCEstimate:
    """MC estimate of P(z > 0, y > 0) with g_r inside Phi and g_o in the indicator.

    ``d_inner`` is the derivative with respect to g_r.
    """
    return _mc_joint(g_r, g_o, rho, eps)


def mc_joint_pos_o(g_o, g_r, rho: float, eps) -> MCEstimate:
    """Same probability with the order of integration swapped: g_o inside Phi.

    ``d_inner`` is the derivative with respect to g_o.
    """
    return _mc_joint(g_o, g_r, rho, eps)


def _clamped_log(p, dp_inner, dp_rho, floor):
    ok = p > floor
    value = np.log(np.where(ok, p, floor))
    safe = np.where(ok, p, 1.0)
    return value, np.where(ok, dp_inner / safe, 0.0), np.where(ok, dp_rho / safe, 0.0)


def _binary_observed(r, g_o, mc: MCEstimate, floor: float, d_go_phi):
    """log of MC (r = 1) or Phi(g_o) - MC (r = 0) with derivative wrt the inner score.

    ``d_go_phi`` is 1 when the inner score is g_o (Phi(g_o) depends on it),
    0 when it is g_r.
    """
    r = _arr(r)
    est, di, drho = _arr(mc.estimate), _arr(mc.d_inner), _arr(mc.d_rho)
    phi_go = _arr(std_normal_cdf(g_o))
    pos_v, pos_i, pos_r = _clamped_log(est, di, drho, floor)
    neg_p = phi_go - est
    neg_di = d_go_phi * _arr(std_normal_pdf(g_o)) - di
    neg_v, neg_i, neg_r = _clamped_log(neg_p, neg_di, -drho, floor)
    pos = r > 0.5
    return np.where(pos, pos_v, neg_v), np.where(pos, pos_i, neg_i), np.where(pos, pos_r, neg_r)


def binary_term_R(o, r, g_o, g_r, rho: float, cfg: MCConfig, eps) -> LikelihoodTerm:
    """Summand of the prediction-side log-likelihood (observed pairs only).

    Only d_gr and d_rho are populated; g_o is frozen in this phase.
    """
    o = _arr(o)
    if np.any(o != 1):
        raise ValueError("binary_term_R is defined on observed pairs (o = 1) only")
    g_o, g_r = np.broadcast_arrays(_arr(g_o), _arr(g_r))
    mc = mc_joint_pos_r(g_o, g_r, rho, eps)
    value, d_gr, d_rho = _binary_observed(r, g_o, mc, cfg.floor_eps, 0.0)
    return LikelihoodTerm(_out(value), _out(np.zeros_like(value)), _out(d_gr), _out(d_rho))


def binary_term_D(o, r, g_o, g_r, rho: float, cfg: MCConfig, eps) -> LikelihoodTerm:
    """Summand of the observation-side log-likelihood over all pairs.

    Only d_go and d_rho are populated; g_r is frozen in this phase.
    """
    o, r = _arr(o), _arr(r)
    g_o, g_r = np.broadcast_arrays(_arr(g_o), _arr(g_r))
    mc = mc_joint_pos_o(g_o, g_r, rho, eps)
    obs_v, obs_go, obs_rho = _binary_observed(r, g_o, mc, cfg.floor_eps, 1.0)
    mis = cont_mis_term(g_o)
    seen = o > 0.5
    value = np.where(seen, obs_v, _arr(mis.value))
    d_go = np.where(seen, obs_go, _arr(mis.d_go))
    d_rho = np.where(seen, obs_rho, 0.0)
    return LikelihoodTerm(_out(value), _out(d_go), _out(np.zeros_like(value)), _out(d_rho))


# ---------------------------------------------------------------------------
# batches

MODES = ("continuous", "binaryR", "binaryD")


@dataclass
class Batch:
    """Pairs handed to the likelihood: model inputs plus labels.

    ``keys`` identify pairs for the Monte Carlo substreams (flat pair index).
    ``r`` of unobserved pairs is ignored.
    """

    inputs_o: object
    inputs_r: object
    o: np.ndarray
    r: np.ndarray
    keys: np.ndarray | None = None
    label_kind: str | None = None

    def __len__(self) -> int:
        return len(self.o)


class LabelTypeError(ValueError):
    pass


def _check_labels(batch: Batch, mode: str) -> None:
    if mode == "continuous":
        if batch.label_kind == "binary":
            raise LabelTypeError("continuous likelihood applied to binary labels")
        return
    r = batch.r[batch.o > 0.5]
    if batch.label_kind == "continuous" or not np.all((r == 0) | (r == 1)):
        raise LabelTypeError(f"{mode} likelihood requires binary labels")


def batch_loglik(batch: Batch, model_o: ScoreModel, model_r: ScoreModel, corr: CorrelationParam,
                 mode: str, cfg: MCConfig | None = None, stream_id: int = 0,
                 grad_o: GradBuffer | None = None, grad_r: GradBuffer | None = None,
                 eps: np.ndarray | None = None, weight: float = 1.0,
                 check_labels: bool = True) -> float:
    """Sum of per-pair log-likelihood terms over ``batch``.

    Gradients of ``weight * total`` are accumulated into the given buffers;
    d rho is chained through tanh into ``rho_raw`` of whichever buffer is
    passed (grad_r in phase R, grad_o otherwise). Monte Carlo draws default
    to the pair-keyed substream ``(cfg.seed, stream_id, batch.keys)``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown likelihood mode {mode!r}")
    if len(batch) == 0:
        return 0.0
    if check_labels:
        _check_labels(batch, mode)
    rho = corr.value()
    g_o = model_o.score(batch.inputs_o)
    g_r = model_r.score(batch.inputs_r)
    if mode == "continuous":
        seen = batch.o > 0.5
        obs = cont_obs_term(batch.r[seen], g_o[seen], g_r[seen], rho)
        mis = cont_mis_term(g_o[~seen])
        d_go = np.zeros(len(batch))
        d_gr = np.zeros(len(batch))
        d_go[seen], d_go[~seen] = obs.d_go, mis.d_go
        d_gr[seen] = obs.d_gr
        total = float(np.sum(obs.value) + np.sum(mis.value))
        d_rho = float(np.sum(obs.d_rho))
    else:
        if cfg is None:
            raise ValueError("binary modes need an MCConfig")
        keys = batch.keys if batch.keys is not None else np.arange(len(batch))
        if mode == "binaryR":
            if eps is None:
                eps = cfg.draw_keyed(stream_id, keys)
            term = binary_term_R(batch.o, batch.r, g_o, g_r, rho, cfg, eps)
            total = float(np.sum(term.value))
            d_go, d_gr = _arr(term.d_go), _arr(term.d_gr)
            d_rho = float(np.sum(term.d_rho))
        else:
            # unobserved pairs have a closed form; draws are keyed per pair,
            # so sampling only the observed ones changes nothing
            seen = batch.o > 0.5
            eps_seen = cfg.draw_keyed(stream_id, keys[seen]) if eps is None else np.asarray(eps)[seen]
            obs = binary_term_D(np.ones(int(seen.sum())), batch.r[seen], g_o[seen], g_r[seen], rho, cfg,
                                eps_seen)
            mis = cont_mis_term(g_o[~seen])
            d_go = np.zeros(len(batch))
            d_go[seen], d_go[~seen] = obs.d_go, mis.d_go
            d_gr = np.zeros(len(batch))
            total = float(np.sum(obs.value) + np.sum(mis.value))
            d_rho = float(np.sum(obs.d_rho))
    if not np.isfinite(total):
        raise FloatingPointError(f"non-finite {mode} log-likelihood")
    draw = weight * d_rho * corr.jacobian()
    if grad_o is not None and mode != "binaryR":
        model_o.accumulate_grad(batch.inputs_o, weight * d_go, grad_o)
    if grad_r is not None and mode != "binaryD":
        model_r.accumulate_grad(batch.inputs_r, weight * d_gr, grad_r)
    rho_buf = grad_r if mode == "binaryR" else (grad_o if grad_o is not None else grad_r)
    if rho_buf is not None:
        rho_buf.rho_raw += draw
    return total


def phase_stream(epoch: int, phase: int) -> int:
    """Stream id for the Monte Carlo draws of one (epoch, phase)."""
    return derive_stream_id(epoch, phase)
