"""Interaction datasets, triple-file loading and binarization rules."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scoremodel import PairRef, ScoreModel


class DataFormatError(ValueError):
    pass


@dataclass
class InteractionDataset:
    """Observed (user, item, label) triples over an m x n universe of pairs.

    ``features`` is an optional (m, n) matrix of scalar pair features used by
    the scalar score heads.
    """

    n_users: int
    n_items: int
    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    label_kind: str = "continuous"
    features: np.ndarray | None = None
    _mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=float)
        if not (len(self.users) == len(self.items) == len(self.labels)):
            raise ValueError("users, items and labels must have equal length")
        if len(self.users) and (self.users.min() < 0 or self.users.max() >= self.n_users
                                or self.items.min() < 0 or self.items.max() >= self.n_items):
            raise ValueError("pair index outside dataset bounds")

    def __len__(self) -> int:
        return len(self.users)

    @property
    def n_pairs(self) -> int:
        return self.n_users * self.n_items

    @property
    def flat(self) -> np.ndarray:
        return self.users * self.n_items + self.items

    @property
    def observed_mask(self) -> np.ndarray:
        if self._mask is None:
            mask = np.zeros(self.n_pairs, dtype=bool)
            mask[self.flat] = True
            self._mask = mask
        return self._mask

    def label_matrix(self) -> np.ndarray:
        """Flat vector of labels over all pairs (0 where unobserved)."""
        out = np.zeros(self.n_pairs)
        out[self.flat] = self.labels
        return out

    def unflatten(self, flat: np.ndarray) -> PairRef:
        u, i = np.divmod(np.asarray(flat, dtype=np.int64), self.n_items)
        return PairRef(u, i)

    def inputs(self, model: ScoreModel, pairs: PairRef):
        """Model input for ``pairs``: the pairs themselves or their features."""
        if model.kind == "mf":
            return pairs
        if self.features is None:
            raise ValueError(f"{model.kind} score head needs pair features, dataset has none")
        return self.features[pairs.users, pairs.items]

    def subset(self, index: np.ndarray) -> "InteractionDataset":
        return InteractionDataset(self.n_users, self.n_items, self.users[index], self.items[index],
                                  self.labels[index], self.label_kind, self.features)


# ---------------------------------------------------------------------------
# binarization


@dataclass(frozen=True)
class BinarizeRule:
    """rating_ge_threshold: label 1 iff value >= t (Coat, Yahoo! R3 with t = 3).
    ratio_lt_threshold: label 1 iff value < t (KuaiRec watch ratio with t = 2).
    """

    kind: str
    threshold: float

    def __post_init__(self):
        if self.kind not in ("rating_ge_threshold", "ratio_lt_threshold"):
            raise ValueError(f"unknown binarize rule {self.kind!r}")
        if not np.isfinite(self.threshold):
            raise ValueError("threshold must be finite")

    def apply(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=float)
        if self.kind == "rating_ge_threshold":
            return (v >= self.threshold).astype(float)
        return (v < self.threshold).astype(float)


# ---------------------------------------------------------------------------
# triple files


def _split(line: str) -> list[str]:
    if "\t" in line:
        return [p.strip() for p in line.split("\t")]
    return [p.strip() for p in line.split(",")]


def read_triples(path) -> list[tuple[str, str, float]]:
    """Parse ``user,item,value`` lines (comma or tab, optional header)."""
    rows = []
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = _split(line.rstrip("\n"))
            if len(parts) < 3:
                raise DataFormatError(f"{path}:{lineno}: expected user,item,value")
            try:
                value = float(parts[2])
            except ValueError:
                if not rows and lineno == 1:
                    continue  # header
                raise DataFormatError(f"{path}:{lineno}: bad value {parts[2]!r}") from None
            rows.append((parts[0], parts[1], value))
    if not rows:
        raise DataFormatError(f"{path}: no interactions")
    return rows


def _dedupe(rows, path):
    seen: dict[tuple[str, str], float] = {}
    for u, i, v in rows:
        if (u, i) in seen:
            warnings.warn(f"{path}: duplicate pair ({u}, {i}); keeping the last occurrence", stacklevel=3)
        seen[(u, i)] = v
    return seen


@dataclass
class IdMap:
    users: dict[str, int]
    items: dict[str, int]

    def to_json(self) -> str:
        return json.dumps({"users": self.users, "items": self.items}, sort_keys=True)


def load_dataset(train_path, test_path, rule: BinarizeRule | None = None):
    """Load train/test triple files with dense id re-indexing.

    Returns (train, test, id_map). Without a rule labels stay continuous.
    """
    train_rows = _dedupe(read_triples(train_path), train_path)
    test_rows = _dedupe(read_triples(test_path), test_path)
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    for u, i in list(train_rows) + list(test_rows):
        users.setdefault(u, len(users))
        items.setdefault(i, len(items))
    kind = "binary" if rule is not None else "continuous"

    def build(rows):
        uu = np.array([users[u] for u, _ in rows], dtype=np.int64)
        ii = np.array([items[i] for _, i in rows], dtype=np.int64)
        vv = np.array(list(rows.values()), dtype=float)
        if rule is not None:
            vv = rule.apply(vv)
        return InteractionDataset(len(users), len(items), uu, ii, vv, kind)

    return build(train_rows), build(test_rows), IdMap(users, items)


def write_triples(path, users, items, values, header=("user", "item", "rating")) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for u, i, v in zip(users, items, values):
            w.writerow((int(u), int(i), repr(float(v))))


# ---------------------------------------------------------------------------
# dataset directories (as produced by the ``generate`` command)


def write_dataset_dir(out, train: InteractionDataset, test: InteractionDataset, meta: dict) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_triples(out / "train.csv", train.users, train.items, train.labels)
    write_triples(out / "test.csv", test.users, test.items, test.labels)
    if train.features is not None:
        m, n = train.features.shape
        uu, ii = np.divmod(np.arange(m * n), n)
        write_triples(out / "features.csv", uu, ii, train.features.ravel(), ("user", "item", "x"))
    meta = dict(meta, n_users=train.n_users, n_items=train.n_items, label_kind=train.label_kind)
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_indexed(path, m: int, n: int):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.size == 0:
        raise DataFormatError(f"{path}: no rows")
    uu, ii = data[:, 0].astype(np.int64), data[:, 1].astype(np.int64)
    if uu.min() < 0 or uu.max() >= m or ii.min() < 0 or ii.max() >= n:
        raise DataFormatError(f"{path}: index outside {m}x{n}")
    return uu, ii, data[:, 2]


def read_dataset_dir(path):
    """Read a generated dataset directory -> (train, test, meta)."""
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{path}: missing meta.json")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    m, n, kind = int(meta["n_users"]), int(meta["n_items"]), meta["label_kind"]
    features = None
    if (path / "features.csv").exists():
        uu, ii, xx = _read_indexed(path / "features.csv", m, n)
        features = np.zeros((m, n))
        features[uu, ii] = xx
    tr = _read_indexed(path / "train.csv", m, n)
    te = _read_indexed(path / "test.csv", m, n)
    train = InteractionDataset(m, n, *tr, label_kind=kind, features=features)
    test = InteractionDataset(m, n, *te, label_kind=kind, features=features)
    return train, test, meta
