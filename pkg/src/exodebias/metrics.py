"""MSE, AUC, Recall@K and NDCG@K."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata


def mse(preds, labels) -> float:
    preds = np.asarray(preds, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise ValueError("mse of an empty set")
    return float(np.mean((preds - labels) ** 2))


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels) > 0.5
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)  # average ranks handle ties
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def rank_by_user(users, items, scores) -> dict[int, np.ndarray]:
    """Each user's items, best score first; ties broken by item index."""
    users = np.asarray(users)
    items = np.asarray(items)
    scores = np.asarray(scores, dtype=float)
    order = np.lexsort((items, -scores, users))
    users_s, items_s = users[order], items[order]
    cuts = np.flatnonzero(np.diff(users_s)) + 1
    return {int(chunk_u[0]): chunk_i
            for chunk_u, chunk_i in zip(np.split(users_s, cuts), np.split(items_s, cuts)) if len(chunk_u)}


def positives_by_user(users, items, labels) -> dict[int, set]:
    out: dict[int, set] = {}
    for u, i, y in zip(np.asarray(users), np.asarray(items), np.asarray(labels)):
        s = out.setdefault(int(u), set())
        if y > 0.5:
            s.add(int(i))
    return out


def _check_k(k: int) -> None:
    if k < 1:
        raise ValueError("k must be >= 1")


def recall_at_k(ranked: dict[int, np.ndarray], positives: dict[int, set], k: int) -> float:
    """Mean over users of hits@k / min(k, |test items of user|)."""
    _check_k(k)
    vals = []
    for u, items in ranked.items():
        if len(items) == 0:
            continue
        pos = positives.get(u, set())
        hits = sum(1 for i in items[:k] if int(i) in pos)
        vals.append(hits / min(k, len(items)))
    return float(np.mean(vals)) if vals else 0.0


def _dcg(ranks) -> float:
    return sum(1.0 / math.log2(r + 1) for r in ranks)


def ndcg_at_k(ranked: dict[int, np.ndarray], positives: dict[int, set], k: int) -> float:
    """Mean over users of DCG@k / IDCG@k with log2 discounts.

    Users without a positive test item have no ideal DCG and are skipped.
    """
    _check_k(k)
    vals = []
    for u, items in ranked.items():
        pos = positives.get(u, set())
        if not pos or len(items) == 0:
            continue
        hit_ranks = [r for r, i in enumerate(items[:k], 1) if int(i) in pos]
        ideal = _dcg(range(1, min(k, len(pos)) + 1))
        vals.append(_dcg(hit_ranks) / ideal)
    return float(np.mean(vals)) if vals else 0.0


@dataclass
class EvalReport:
    mse: float
    auc: float
    recall_at_k: float
    ndcg_at_k: float
    k: int

    def as_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        return "".join(f"{key}={_fmt(val)}\n" for key, val in self.as_dict().items())

    def csv_header(self) -> str:
        return ",".join(self.as_dict()) + "\n"

    def csv_row(self) -> str:
        return ",".join(_fmt(v) for v in self.as_dict().values()) + "\n"


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


def evaluate(users, items, scores, labels, k: int = 5, preds=None) -> EvalReport:
    """Full report; ranking metrics treat labels > 0.5 as positives.

    ``preds`` are the values compared with ``labels`` for MSE (defaults to
    the scores). AUC is NaN when the labels hold a single class.
    """
    labels = np.asarray(labels, dtype=float)
    preds = scores if preds is None else preds
    binary = labels > 0.5
    try:
        a = auc(scores, binary)
    except ValueError:
        a = float("nan")
    ranked = rank_by_user(users, items, scores)
    pos = positives_by_user(users, items, binary)
    return EvalReport(mse(preds, labels), a, recall_at_k(ranked, pos, k), ndcg_at_k(ranked, pos, k), int(k))
