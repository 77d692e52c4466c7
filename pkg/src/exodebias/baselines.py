"""Naive, EIB, IPS and DR debiasing losses with gradients.

Scores are raw model outputs. For binary labels the error is cross entropy
against the logistic squash of the score; for continuous labels it is the
squared error of the score itself.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .likelihood import Batch
from .numkernel import std_normal_cdf
from .scoremodel import GradBuffer, ScoreModel

ERROR_KINDS = ("cross_entropy", "squared")


def prediction_error(r, r_hat, kind: str = "cross_entropy"):
    r = np.asarray(r, dtype=float)
    r_hat = np.asarray(r_hat, dtype=float)
    if kind == "cross_entropy":
        if np.any((r_hat <= 0.0) | (r_hat >= 1.0)):
            raise ValueError("cross entropy needs predictions strictly inside (0, 1)")
        # xlogy keeps r = 0 / r = 1 exact
        out = -special.xlogy(r, r_hat) - special.xlogy(1.0 - r, 1.0 - r_hat)
    elif kind == "squared":
        out = (r - r_hat) ** 2
    else:
        raise ValueError(f"unknown error kind {kind!r}")
    return out[()] if out.ndim == 0 else out


def score_error(target, score, kind: str):
    """Error of a raw score against a (possibly soft) target, and d error / d score."""
    target = np.asarray(target, dtype=float)
    score = np.asarray(score, dtype=float)
    if kind == "cross_entropy":
        # t softplus(-s) + (1 - t) softplus(s) == CE(t, sigmoid(s)) with no cancellation
        e = target * np.logaddexp(0.0, -score) + (1.0 - target) * np.logaddexp(0.0, score)
        return e, special.expit(score) - target
    if kind == "squared":
        d = score - target
        return d * d, 2.0 * d
    raise ValueError(f"unknown error kind {kind!r}")


def pseudo_label(raw, kind: str):
    """Imputation model output mapped to label space, and its derivative."""
    raw = np.asarray(raw, dtype=float)
    if kind == "cross_entropy":
        p = special.expit(raw)
        return p, p * (1.0 - p)
    return raw, np.ones_like(raw)


def predict_label(score, kind: str):
    return special.expit(score) if kind == "cross_entropy" else np.asarray(score, dtype=float)


# ---------------------------------------------------------------------------
# plain estimators on fixed error vectors


def naive_estimate(e, o) -> float:
    e, o = np.asarray(e, dtype=float), np.asarray(o, dtype=float)
    if o.sum() == 0:
        raise ValueError("naive estimator needs at least one observed pair")
    return float(np.sum(o * e) / o.sum())


def ips_estimate(e, o, p_hat) -> float:
    e, o = np.asarray(e, dtype=float), np.asarray(o, dtype=float)
    if e.size == 0:
        raise ValueError("empty slice")
    return float(np.mean(np.where(o > 0, e / np.asarray(p_hat, dtype=float), 0.0)))


def dr_estimate(e, e_hat, o, p_hat) -> float:
    e, e_hat, o = (np.asarray(a, dtype=float) for a in (e, e_hat, o))
    if e_hat.size == 0:
        raise ValueError("empty slice")
    corr = np.where(o > 0, (e - e_hat) / np.asarray(p_hat, dtype=float), 0.0)
    return float(np.mean(e_hat + corr))


def eib_estimate(e, e_imputed, o) -> float:
    e, e_imputed, o = (np.asarray(a, dtype=float) for a in (e, e_imputed, o))
    if o.size == 0:
        raise ValueError("empty slice")
    return float(np.mean(np.where(o > 0, e, e_imputed)))


# ---------------------------------------------------------------------------
# propensities


@dataclass
class PropensityEstimate:
    p_hat: np.ndarray
    clip_floor: float = 0.05


def clip_propensity(p, clip_floor: float = 0.05) -> PropensityEstimate:
    return PropensityEstimate(np.clip(np.asarray(p, dtype=float), clip_floor, 1.0), clip_floor)


def propensity_from_selection_head(model_o: ScoreModel, inputs, clip_floor: float = 0.05) -> PropensityEstimate:
    """p_hat = max(Phi(g_o), clip_floor)."""
    return clip_propensity(std_normal_cdf(model_o.score(inputs)), clip_floor)


# ---------------------------------------------------------------------------
# model-based losses; each returns the loss and adds its gradient to ``grad``


def _slice_errors(batch: Batch, model_r: ScoreModel, kind: str):
    s = model_r.score(batch.inputs_r)
    r = np.where(batch.o > 0, batch.r, 0.0)
    e, de = score_error(r, s, kind)
    return s, e, de


def _imputed_errors(batch: Batch, scores, imput: ScoreModel, kind: str):
    pseudo, _ = pseudo_label(imput.score(batch.inputs_r), kind)
    return score_error(pseudo, scores, kind)


def _require(batch: Batch, what: str = "slice") -> None:
    if len(batch) == 0:
        raise ValueError(f"empty {what}")


def naive_loss(batch: Batch, model_r: ScoreModel, kind: str, grad: GradBuffer | None = None) -> float:
    _require(batch)
    if np.any(batch.o != 1):
        raise ValueError("naive loss takes observed pairs only")
    _, e, de = _slice_errors(batch, model_r, kind)
    n = len(batch)
    if grad is not None:
        model_r.accumulate_grad(batch.inputs_r, de / n, grad)
    return float(e.mean())


def ips_loss(batch: Batch, model_r: ScoreModel, props: PropensityEstimate, kind: str,
             grad: GradBuffer | None = None, n_total: float | None = None) -> float:
    """(1/|D|) sum o e / p_hat; ``n_total`` overrides |D| for sub-sampled slices."""
    _require(batch)
    _, e, de = _slice_errors(batch, model_r, kind)
    n = float(n_total or len(batch))
    w = np.where(batch.o > 0, 1.0 / props.p_hat, 0.0)
    if grad is not None:
        model_r.accumulate_grad(batch.inputs_r, w * de / n, grad)
    return float(np.sum(w * e) / n)


def dr_loss(batch: Batch, model_r: ScoreModel, imput: ScoreModel, props: PropensityEstimate,
            kind: str, grad: GradBuffer | None = None) -> float:
    """(1/|D|) sum [e_hat + o (e - e_hat) / p_hat]; imputed errors depend on the prediction."""
    _require(batch)
    s, e, de = _slice_errors(batch, model_r, kind)
    e_hat, de_hat = _imputed_errors(batch, s, imput, kind)
    w = np.where(batch.o > 0, 1.0 / props.p_hat, 0.0)
    n = len(batch)
    if grad is not None:
        model_r.accumulate_grad(batch.inputs_r, (de_hat + w * (de - de_hat)) / n, grad)
    return float(np.mean(e_hat + w * (e - e_hat)))


def eib_loss(batch: Batch, model_r: ScoreModel, imput: ScoreModel, kind: str,
             grad: GradBuffer | None = None) -> float:
    """Observed pairs use their label, unobserved ones the imputed pseudo-label."""
    _require(batch)
    s, e, de = _slice_errors(batch, model_r, kind)
    e_imp, de_imp = _imputed_errors(batch, s, imput, kind)
    seen = batch.o > 0
    n = len(batch)
    if grad is not None:
        model_r.accumulate_grad(batch.inputs_r, np.where(seen, de, de_imp) / n, grad)
    return float(np.mean(np.where(seen, e, e_imp)))


def update_imputation(batch: Batch, model_r: ScoreModel, imput: ScoreModel, kind: str,
                      grad: GradBuffer, props: PropensityEstimate | None = None,
                      target: str = "error") -> float:
    """Gradient of the imputation fit on observed pairs.

    target="error": mean of (e_hat - e)^2 / p_hat, the joint-learning DR fit.
    target="label": the imputation model's own prediction error on labels
    (pseudo-labels for EIB).
    """
    _require(batch, "observed slice")
    n = len(batch)
    raw = imput.score(batch.inputs_r)
    if target == "label":
        e, de = score_error(batch.r, raw, kind)
        imput.accumulate_grad(batch.inputs_r, de / n, grad)
        return float(e.mean())
    if target != "error":
        raise ValueError(f"unknown imputation target {target!r}")
    s = model_r.score(batch.inputs_r)
    e, _ = score_error(batch.r, s, kind)
    pseudo, dpseudo = pseudo_label(raw, kind)
    e_hat, _ = score_error(pseudo, s, kind)
    # d e_hat / d pseudo for both error kinds
    de_hat_dpseudo = -s if kind == "cross_entropy" else 2.0 * (pseudo - s)
    w = 1.0 / props.p_hat if props is not None else np.ones(n)
    resid = e_hat - e
    imput.accumulate_grad(batch.inputs_r, 2.0 * w * resid * de_hat_dpseudo * dpseudo / n, grad)
    return float(np.mean(w * resid * resid))


def paired_debias_loss(method: str, obs: Batch, full: Batch, model_r: ScoreModel, kind: str,
                       obs_fraction: float, grad: GradBuffer | None = None,
                       imput: ScoreModel | None = None,
                       props_obs: PropensityEstimate | None = None) -> float:
    """Mini-batch estimate of a debiasing loss from an observed batch and a
    uniformly drawn batch of all pairs.

    ``obs_fraction`` = |O| / |D| rescales observed-pair sums so each method
    stays an unbiased estimate of its full-data loss.
    """
    if method in ("none", "naive"):
        return naive_loss(obs, model_r, kind, grad)
    n_o = len(obs)
    s, e, de = _slice_errors(obs, model_r, kind)
    if method == "ips":
        w = obs_fraction / (n_o * props_obs.p_hat)
        if grad is not None:
            model_r.accumulate_grad(obs.inputs_r, w * de, grad)
        return float(np.sum(w * e))
    if imput is None:
        raise ValueError(f"{method} needs an imputation model")
    s_all = model_r.score(full.inputs_r)
    e_all, de_all = _imputed_errors(full, s_all, imput, kind)
    n_d = len(full)
    if method == "dr":
        e_hat, de_hat = _imputed_errors(obs, s, imput, kind)
        w = obs_fraction / (n_o * props_obs.p_hat)
        if grad is not None:
            model_r.accumulate_grad(full.inputs_r, de_all / n_d, grad)
            model_r.accumulate_grad(obs.inputs_r, w * (de - de_hat), grad)
        return float(e_all.mean() + np.sum(w * (e - e_hat)))
    if method == "eib":
        unseen = (full.o < 0.5).astype(float)
        if grad is not None:
            model_r.accumulate_grad(obs.inputs_r, obs_fraction * de / n_o, grad)
            model_r.accumulate_grad(full.inputs_r, unseen * de_all / n_d, grad)
        return float(obs_fraction * e.mean() + np.sum(unseen * e_all) / n_d)
    raise ValueError(f"unknown debiasing method {method!r}")
