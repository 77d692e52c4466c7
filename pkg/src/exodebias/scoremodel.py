"""Score heads g(x; theta) with hand-written backprop, the correlation
parameter and binary checkpoints."""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence, Union

import numpy as np

from .numkernel import RngStream


class PairRef(NamedTuple):
    """Batch of (user, item) index pairs."""

    users: np.ndarray
    items: np.ndarray


ModelInput = Union[PairRef, np.ndarray]


class KindMismatch(TypeError):
    pass


@dataclass
class GradBuffer:
    params: np.ndarray
    rho_raw: float = 0.0

    @classmethod
    def like(cls, model: "ScoreModel") -> "GradBuffer":
        return cls(np.zeros_like(model.params))

    def zero(self) -> None:
        self.params.fill(0.0)
        self.rho_raw = 0.0


class CorrelationParam:
    """rho = tanh(raw), so |rho| < 1 whatever the optimizer does."""

    def __init__(self, raw: float = 0.0):
        # 1-element array so the optimizer can update it in place
        self.params = np.array([float(raw)])

    @property
    def raw(self) -> float:
        return float(self.params[0])

    def value(self) -> float:
        return math.tanh(self.params[0])

    def jacobian(self) -> float:
        v = self.value()
        return 1.0 - v * v

    @classmethod
    def from_value(cls, rho: float) -> "CorrelationParam":
        return cls(math.atanh(rho))


class ScoreModel:
    kind: str = ""
    tag: int = 0

    params: np.ndarray

    def score(self, inputs: ModelInput) -> np.ndarray:
        raise NotImplementedError

    def accumulate_grad(self, inputs: ModelInput, upstream, buf: GradBuffer) -> None:
        """buf += sum_j upstream_j * d score_j / d params."""
        raise NotImplementedError

    @property
    def dims(self) -> tuple[int, int, int]:
        return (0, 0, 0)

    def copy(self) -> "ScoreModel":
        raise NotImplementedError


class MatrixFactorization(ScoreModel):
    """Biased MF: <p_u, q_i> + b_u + b_i + b0.

    Parameter layout: P (m*k), Q (n*k), b_user (m), b_item (n), b0.
    """

    kind = "mf"
    tag = 1

    def __init__(self, n_users: int, n_items: int, dim: int, params: np.ndarray | None = None):
        self.n_users, self.n_items, self.dim = int(n_users), int(n_items), int(dim)
        size = self.num_params(n_users, n_items, dim)
        if params is None:
            params = np.zeros(size)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (size,):
            raise ValueError(f"MF({n_users},{n_items},{dim}) needs {size} parameters, got {params.shape}")
        self.params = params

    @staticmethod
    def num_params(m: int, n: int, k: int) -> int:
        return m * k + n * k + m + n + 1

    @classmethod
    def init(cls, n_users: int, n_items: int, dim: int, rng: RngStream, scale: float = 0.1):
        model = cls(n_users, n_items, dim)
        nk = (n_users + n_items) * dim
        model.params[:nk] = scale * rng.normal(nk) if nk else 0.0
        return model

    def _views(self, arr: np.ndarray):
        m, n, k = self.n_users, self.n_items, self.dim
        o = 0
        P = arr[o:o + m * k].reshape(m, k); o += m * k
        Q = arr[o:o + n * k].reshape(n, k); o += n * k
        bu = arr[o:o + m]; o += m
        bi = arr[o:o + n]; o += n
        return P, Q, bu, bi, arr[o:o + 1]

    @property
    def dims(self):
        return (self.n_users, self.n_items, self.dim)

    def _check(self, inputs) -> PairRef:
        if not isinstance(inputs, PairRef):
            raise KindMismatch("matrix factorization scores (user, item) pairs, not scalar features")
        return inputs

    def score(self, inputs):
        u, i = self._check(inputs)
        P, Q, bu, bi, b0 = self._views(self.params)
        out = bu[u] + bi[i] + b0[0]
        if self.dim:
            out = out + np.einsum("bk,bk->b", P[u], Q[i])
        return out

    def accumulate_grad(self, inputs, upstream, buf):
        u, i = self._check(inputs)
        g = np.broadcast_to(np.asarray(upstream, dtype=float), np.shape(u))
        P, Q, _, _, _ = self._views(self.params)
        gP, gQ, gbu, gbi, gb0 = self._views(buf.params)
        if self.dim:
            np.add.at(gP, u, g[:, None] * Q[i])
            np.add.at(gQ, i, g[:, None] * P[u])
        gbu += np.bincount(u, weights=g, minlength=self.n_users)
        gbi += np.bincount(i, weights=g, minlength=self.n_items)
        gb0 += g.sum()

    def copy(self):
        return MatrixFactorization(self.n_users, self.n_items, self.dim, self.params.copy())


class ScalarLinear(ScoreModel):
    """w * x + b on a scalar pair feature."""

    kind = "linear"
    tag = 2

    def __init__(self, weight: float = 0.0, bias: float = 0.0, params: np.ndarray | None = None):
        self.params = np.array([weight, bias], dtype=float) if params is None else np.asarray(params, dtype=float)
        if self.params.shape != (2,):
            raise ValueError("ScalarLinear has exactly two parameters")

    def _check(self, inputs) -> np.ndarray:
        if isinstance(inputs, PairRef):
            raise KindMismatch("scalar model expects a feature array, got (user, item) pairs")
        return np.asarray(inputs, dtype=float)

    def score(self, inputs):
        x = self._check(inputs)
        return self.params[0] * x + self.params[1]

    def accumulate_grad(self, inputs, upstream, buf):
        x = self._check(inputs)
        g = np.broadcast_to(np.asarray(upstream, dtype=float), x.shape)
        buf.params[0] += np.sum(g * x)
        buf.params[1] += np.sum(g)

    def copy(self):
        return ScalarLinear(params=self.params.copy())


class ScalarMLP(ScoreModel):
    """Scalar feature -> tanh hidden layers -> linear output."""

    kind = "mlp"
    tag = 3

    def __init__(self, hidden: Sequence[int], params: np.ndarray | None = None):
        self.hidden = tuple(int(h) for h in hidden)
        if not self.hidden or min(self.hidden) < 1:
            raise ValueError("ScalarMLP needs at least one hidden layer of positive width")
        self.widths = (1,) + self.hidden + (1,)
        size = self.num_params(self.hidden)
        self.params = np.zeros(size) if params is None else np.asarray(params, dtype=float)
        if self.params.shape != (size,):
            raise ValueError(f"ScalarMLP{self.hidden} needs {size} parameters, got {self.params.shape}")

    @staticmethod
    def num_params(hidden: Sequence[int]) -> int:
        w = (1,) + tuple(hidden) + (1,)
        return sum(a * b + b for a, b in zip(w[:-1], w[1:]))

    @classmethod
    def init(cls, hidden: Sequence[int], rng: RngStream, zero_output: bool = False):
        """Normal weights scaled by 1/sqrt(fan_in), zero biases.

        zero_output starts the model at the constant 0, so the sign of its
        first slope comes from the data rather than the draw.
        """
        model = cls(hidden)
        layers = model._layers(model.params)
        for W, _ in layers:
            W[...] = rng.normal(W.shape) / math.sqrt(W.shape[0])
        if zero_output:
            layers[-1][0][...] = 0.0
        return model

    def _layers(self, arr: np.ndarray):
        out, o = [], 0
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            W = arr[o:o + a * b].reshape(a, b); o += a * b
            c = arr[o:o + b]; o += b
            out.append((W, c))
        return out

    def _check(self, inputs) -> np.ndarray:
        if isinstance(inputs, PairRef):
            raise KindMismatch("scalar model expects a feature array, got (user, item) pairs")
        return np.asarray(inputs, dtype=float)

    def _forward(self, x: np.ndarray):
        h = x.reshape(-1, 1)
        acts = [h]
        layers = self._layers(self.params)
        for W, c in layers[:-1]:
            h = np.tanh(h @ W + c)
            acts.append(h)
        W, c = layers[-1]
        return (h @ W + c)[:, 0], acts

    def score(self, inputs):
        x = self._check(inputs)
        out, _ = self._forward(x)
        return out.reshape(x.shape)

    def accumulate_grad(self, inputs, upstream, buf):
        x = self._check(inputs)
        g = np.broadcast_to(np.asarray(upstream, dtype=float), x.shape).reshape(-1, 1)
        _, acts = self._forward(x)
        layers = self._layers(self.params)
        glayers = self._layers(buf.params)
        delta = g
        for idx in range(len(layers) - 1, -1, -1):
            W, _ = layers[idx]
            gW, gc = glayers[idx]
            a_in = acts[idx]
            gW += a_in.T @ delta
            gc += delta.sum(axis=0)
            if idx:
                delta = (delta @ W.T) * (1.0 - a_in * a_in)

    def copy(self):
        return ScalarMLP(self.hidden, self.params.copy())


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"EXOC"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def _pack_model(model: ScoreModel) -> bytes:
    m, n, k = model.dims
    hidden = getattr(model, "hidden", ())
    head = struct.pack("<BIIIH", model.tag, m, n, k, len(hidden))
    head += struct.pack(f"<{len(hidden)}I", *hidden)
    head += struct.pack("<Q", model.params.size)
    return head + model.params.astype("<f8").tobytes()


def save_checkpoint(model_o: ScoreModel, model_r: ScoreModel, corr: CorrelationParam, path) -> None:
    body = MAGIC + struct.pack("<H", FORMAT_VERSION)
    body += _pack_model(model_o) + _pack_model(model_r)
    body += struct.pack("<d", corr.raw)
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    Path(path).write_bytes(body)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointFormatError("truncated checkpoint")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals


def _unpack_model(rd: _Reader) -> ScoreModel:
    tag, m, n, k, nh = rd.take("<BIIIH")
    hidden = rd.take(f"<{nh}I") if nh else ()
    (count,) = rd.take("<Q")
    if rd.pos + 8 * count > len(rd.data):
        raise CheckpointFormatError("truncated parameter block")
    params = np.frombuffer(rd.data, dtype="<f8", count=count, offset=rd.pos).astype(np.float64)
    rd.pos += 8 * count
    try:
        if tag == MatrixFactorization.tag:
            return MatrixFactorization(m, n, k, params)
        if tag == ScalarLinear.tag:
            return ScalarLinear(params=params)
        if tag == ScalarMLP.tag:
            return ScalarMLP(hidden, params)
    except ValueError as exc:
        raise CheckpointFormatError(str(exc)) from exc
    raise CheckpointFormatError(f"unknown model kind tag {tag}")


def load_checkpoint(path, n_users: int | None = None, n_items: int | None = None):
    """Read (model_o, model_r, corr); optionally check MF shapes against a dataset."""
    data = Path(path).read_bytes()
    if len(data) < 10 or data[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic header)")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointFormatError(f"{path}: CRC mismatch, file is corrupt")
    rd = _Reader(data[:-4])
    rd.pos = 6
    model_o = _unpack_model(rd)
    model_r = _unpack_model(rd)
    (raw,) = rd.take("<d")
    if rd.pos != len(rd.data):
        raise CheckpointFormatError(f"{path}: trailing bytes after payload")
    for model in (model_o, model_r):
        if isinstance(model, MatrixFactorization):
            if (n_users is not None and model.n_users != n_users) or (
                    n_items is not None and model.n_items != n_items):
                raise CheckpointShapeError(
                    f"checkpoint trained on {model.n_users}x{model.n_items}, dataset is {n_users}x{n_items}")
    return model_o, model_r, CorrelationParam(raw)
