"""Semi-synthetic MNAR data with correlated selection and preference noise.

For every pair: r = 5 x + delta, z = 5 tanh(x - mean(x)) + eps - beta,
o = 1{z > 0}, with (eps, delta) standard bivariate normal of correlation rho.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .dataio import InteractionDataset, read_triples
from .numkernel import RngStream, sample_bivariate
from .optim import Adam
from .scoremodel import GradBuffer, MatrixFactorization, PairRef

SPARSITY_TOL = 0.002


class GenerationError(ValueError):
    pass


@dataclass
class SynthSpec:
    n_users: int = 500
    n_items: int = 500
    rho: float = 0.0
    beta: float | None = None
    target_sparsity: float | None = 0.05
    feature_source: str = "random_mf"      # or "external_ratings"
    feature_dim: int = 8
    ratings_path: str | None = None
    mf_epochs: int = 50
    label_mode: str = "continuous"         # or "binary"
    seed: int = 0
    pref_scale: float = 5.0
    sel_scale: float = 5.0

    def __post_init__(self):
        if (self.beta is None) == (self.target_sparsity is None):
            raise ValueError("set exactly one of beta / target_sparsity")
        if self.n_users < 2 or self.n_items < 2:
            raise ValueError("need at least 2 users and 2 items")
        if not abs(self.rho) < 1.0:
            raise ValueError(f"rho must lie in (-1, 1), got {self.rho}")
        if self.target_sparsity is not None and not 0.0 < self.target_sparsity < 1.0:
            raise ValueError("target_sparsity must lie in (0, 1)")
        if self.label_mode not in ("continuous", "binary"):
            raise ValueError(f"unknown label mode {self.label_mode!r}")
        if self.feature_source not in ("random_mf", "external_ratings"):
            raise ValueError(f"unknown feature source {self.feature_source!r}")
        if self.feature_source == "external_ratings" and not self.ratings_path:
            raise ValueError("external_ratings needs ratings_path")


@dataclass
class SynthDataset:
    spec: SynthSpec
    x: np.ndarray          # (m, n) features
    eps: np.ndarray        # selection noise
    delta: np.ndarray      # preference noise
    y: np.ndarray          # latent preference 5x + delta
    r: np.ndarray          # label: y, or 1{y > 0} in binary mode
    o: np.ndarray          # bool, observed
    beta: float
    sparsity: float
    mf_losses: list = field(default_factory=list)

    @property
    def label_kind(self) -> str:
        return self.spec.label_mode

    def observed(self) -> InteractionDataset:
        u, i = np.nonzero(self.o)
        return InteractionDataset(self.spec.n_users, self.spec.n_items, u, i, self.r[u, i],
                                  self.label_kind, self.x)

    def metadata(self) -> dict:
        return {"spec": asdict(self.spec), "beta": self.beta, "achieved_sparsity": self.sparsity,
                "seed": self.spec.seed, "rho": self.spec.rho,
                "mf_hyperparams": {"dim": self.spec.feature_dim, "epochs": self.spec.mf_epochs}}


def features_from_factors(P: np.ndarray, Q: np.ndarray, standardize: bool = True) -> np.ndarray:
    x = np.asarray(P, dtype=float) @ np.asarray(Q, dtype=float).T
    sd = x.std()
    if standardize and sd > 0:
        x = x / sd
    return x


def fit_mf_ratings(users, items, ratings, n_users: int, n_items: int, dim: int = 8,
                   epochs: int = 50, lr: float = 0.05, weight_decay: float = 1e-4, seed: int = 0):
    """Full-batch Adam fit of a biased MF to ratings -> (model, per-epoch MSE)."""
    model = MatrixFactorization.init(n_users, n_items, dim, RngStream(seed, 11))
    pairs = PairRef(np.asarray(users), np.asarray(items))
    ratings = np.asarray(ratings, dtype=float)
    opt = Adam(model.params, lr=lr, weight_decay=weight_decay)
    buf = GradBuffer.like(model)
    losses = []
    n = len(ratings)
    for _ in range(epochs):
        resid = model.score(pairs) - ratings
        losses.append(float(np.mean(resid ** 2)))
        buf.zero()
        model.accumulate_grad(pairs, 2.0 * resid / n, buf)
        opt.step(buf.params)
    return model, losses


def fit_base_features(spec: SynthSpec):
    """x matrix (m, n) and the MF training-loss history (empty for random_mf)."""
    m, n, k = spec.n_users, spec.n_items, spec.feature_dim
    if spec.feature_source == "random_mf":
        rng = RngStream(spec.seed, 1)
        P = rng.normal((m, k))
        Q = rng.normal((n, k))
        return features_from_factors(P, Q), []
    rows = read_triples(spec.ratings_path)
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    uu, ii, vv = [], [], []
    for u, i, v in rows:
        uu.append(users.setdefault(u, len(users)))
        ii.append(items.setdefault(i, len(items)))
        vv.append(v)
    if len(users) > m or len(items) > n:
        raise GenerationError(f"ratings file has {len(users)}x{len(items)} ids, spec allows {m}x{n}")
    model, losses = fit_mf_ratings(uu, ii, vv, m, n, k, spec.mf_epochs, seed=spec.seed)
    U, I = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
    x = model.score(PairRef(U.ravel(), I.ravel())).reshape(m, n)
    return x, losses


def _sparsity_beta(base: np.ndarray, target: float) -> float:
    """Bisection on beta so that mean(base > beta) hits ``target``.

    mean(base > beta) is non-increasing in beta, so the bracket
    [min - 1, max + 1] always holds a solution up to ties in ``base``.
    """
    lo, hi = float(base.min()) - 1.0, float(base.max()) + 1.0
    rate = lambda b: float(np.mean(base > b))
    if not rate(lo) >= target >= rate(hi):
        raise GenerationError("bisection bracket does not contain the target sparsity")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        r = rate(mid)
        if abs(r - target) <= SPARSITY_TOL / 4:
            return mid
        if r > target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12:
            break
    mid = 0.5 * (lo + hi)
    if abs(rate(mid) - target) > SPARSITY_TOL:
        raise GenerationError(f"cannot reach sparsity {target} (degenerate features)")
    return mid


def generate(spec: SynthSpec, x: np.ndarray | None = None) -> SynthDataset:
    losses = []
    if x is None:
        x, losses = fit_base_features(spec)
    m, n = spec.n_users, spec.n_items
    draws = sample_bivariate(spec.rho, RngStream(spec.seed, 2), size=(m, n))
    y = spec.pref_scale * x + draws.delta
    r = (y > 0).astype(float) if spec.label_mode == "binary" else y
    base = spec.sel_scale * np.tanh(x - x.mean()) + draws.eps
    beta = spec.beta if spec.beta is not None else _sparsity_beta(base, spec.target_sparsity)
    o = base - beta > 0
    return SynthDataset(spec, x, np.asarray(draws.eps), np.asarray(draws.delta), y, r, o,
                        float(beta), float(o.mean()), losses)


def split_test(data: SynthDataset, fraction: float, seed: int):
    """(train view, unbiased test view): test pairs drawn uniformly from all pairs.

    The training view keeps every observed pair; the two are not disjoint.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    m, n = data.spec.n_users, data.spec.n_items
    size = int(round(fraction * m * n))
    flat = np.sort(RngStream(seed, 3).choice(m * n, size))
    u, i = np.divmod(flat, n)
    test = InteractionDataset(m, n, u, i, data.r[u, i], data.label_kind, data.x)
    return data.observed(), test


def ideal_truth(data: SynthDataset) -> np.ndarray:
    """Full label matrix, flattened, for ideal-loss evaluation."""
    return data.r.ravel()


def paper_test_fraction(data: SynthDataset) -> float:
    """Test set sized at half the number of observed pairs."""
    return max(min(0.5 * data.sparsity, 0.999), 1.0 / (data.spec.n_users * data.spec.n_items))

