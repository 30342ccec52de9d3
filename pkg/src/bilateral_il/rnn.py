"""Two-layer LSTM regressor written directly in numpy.

Layout: input -> LSTM(100) -> LSTM(100) -> affine output. Gates are logistic,
the candidate and cell output use tanh. Gate blocks in every weight matrix are
stacked in the order input, forget, output, candidate.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import (CorruptFile, FormatVersionMismatch, NormRanges, TrainingWindow, sample_window)

log = logging.getLogger(__name__)

N_IN = 9
N_OUT = {"M1": 3, "M2": 9}
PARAM_NAMES = ("W1", "b1", "W2", "b2", "Wy", "by")


class DimensionMismatch(ValueError):
    pass


class DivergedLoss(FloatingPointError):
    pass


class VariantMismatch(ValueError):
    pass


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class NetworkParams:
    variant: str
    sizes: tuple[int, int, int, int]
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    Wy: np.ndarray
    by: np.ndarray
    norm: NormRanges | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n_in, h1, h2, n_out = self.sizes
        expect = {"W1": (4 * h1, n_in + h1), "b1": (4 * h1,), "W2": (4 * h2, h1 + h2), "b2": (4 * h2,),
                  "Wy": (n_out, h2), "by": (n_out,)}
        for k, shape in expect.items():
            if getattr(self, k).shape != shape:
                raise DimensionMismatch(f"{k} has shape {getattr(self, k).shape}, expected {shape}")

    @classmethod
    def init(cls, variant: str = "M2", rng: np.random.Generator | None = None, sizes=None,
             norm: NormRanges | None = None, forget_bias: float = 1.0) -> "NetworkParams":
        """Uniform(+-1/sqrt(fan_in)) weights, zero biases except the forget gate."""
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = tuple(sizes or (N_IN, 100, 100, N_OUT[variant]))
        n_in, h1, h2, n_out = sizes

        def u(shape, fan_in):
            a = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-a, a, size=shape)

        b1, b2 = np.zeros(4 * h1), np.zeros(4 * h2)
        b1[h1:2 * h1] = forget_bias
        b2[h2:2 * h2] = forget_bias
        return cls(variant, sizes, u((4 * h1, n_in + h1), n_in + h1), b1, u((4 * h2, h1 + h2), h1 + h2), b2,
                   u((n_out, h2), h2), np.zeros(n_out), norm)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays().items()}

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.variant, self.sizes, *(v.copy() for v in self.arrays().values()),
                             norm=self.norm, meta=dict(self.meta))


@dataclass
class HiddenState:
    h1: np.ndarray
    c1: np.ndarray
    h2: np.ndarray
    c2: np.ndarray

    @classmethod
    def zeros(cls, params: NetworkParams, batch: tuple = ()) -> "HiddenState":
        _, n1, n2, _ = params.sizes
        return cls(np.zeros(batch + (n1,)), np.zeros(batch + (n1,)), np.zeros(batch + (n2,)), np.zeros(batch + (n2,)))


def _cell(W, b, x, h, c):
    n = h.shape[-1]
    z = np.concatenate([x, h], axis=-1) @ W.T + b
    i = sigmoid(z[..., :n])
    f = sigmoid(z[..., n:2 * n])
    o = sigmoid(z[..., 2 * n:3 * n])
    g = np.tanh(z[..., 3 * n:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    return o * tc, c_new, (i, f, o, g, tc)


def forward_step(params: NetworkParams, hidden: HiddenState, x) -> tuple[np.ndarray, HiddenState]:
    """One tick: normalised input (n_in,) or (B, n_in) -> normalised prediction."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.sizes[0]:
        raise DimensionMismatch(f"input has {x.shape[-1]} features, network expects {params.sizes[0]}")
    h1, c1, _ = _cell(params.W1, params.b1, x, hidden.h1, hidden.c1)
    h2, c2, _ = _cell(params.W2, params.b2, h1, hidden.h2, hidden.c2)
    y = h2 @ params.Wy.T + params.by
    return y, HiddenState(h1, c1, h2, c2)


def forward_sequence(params: NetworkParams, X, hidden: HiddenState | None = None, keep_cache: bool = False):
    """Run a (T, n_in) or (B, T, n_in) sequence from a zero (or given) state.

    Returns outputs with the matching leading shape, plus the per-step cache
    when ``keep_cache`` is set.
    """
    X = np.asarray(X, dtype=float)
    single = X.ndim == 2
    if single:
        X = X[None]
    if X.shape[-1] != params.sizes[0]:
        raise DimensionMismatch(f"input has {X.shape[-1]} features, network expects {params.sizes[0]}")
    B, T, _ = X.shape
    st = hidden or HiddenState.zeros(params, (B,))
    h1, c1, h2, c2 = st.h1, st.c1, st.h2, st.c2
    H2 = np.empty((B, T, params.sizes[2]))
    cache = []
    for t in range(T):
        x = X[:, t]
        h1n, c1n, g1 = _cell(params.W1, params.b1, x, h1, c1)
        h2n, c2n, g2 = _cell(params.W2, params.b2, h1n, h2, c2)
        if keep_cache:
            cache.append((x, h1, c1, h1n, c1n, g1, h2, c2, h2n, c2n, g2))
        h1, c1, h2, c2 = h1n, c1n, h2n, c2n
        H2[:, t] = h2
    Y = H2 @ params.Wy.T + params.by
    if single:
        Y = Y[0]
    return (Y, cache, H2) if keep_cache else Y


def loss(params: NetworkParams, window: TrainingWindow) -> float:
    """Mean squared error over all steps and output channels (normalised space)."""
    Y = forward_sequence(params, window.inputs)
    return float(np.mean((Y - window.targets) ** 2))


def _cell_backward(W, dh, dc, x, h_prev, c_prev, gates, grads_W, grads_b):
    i, f, o, g, tc = gates
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di = dc * g
    dg = dc * i
    df = dc * c_prev
    dc_prev = dc * f
    dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=-1)
    xin = np.concatenate([x, h_prev], axis=-1)
    grads_W += dz.T @ xin
    grads_b += dz.sum(axis=0)
    dxin = dz @ W
    n_x = x.shape[-1]
    return dxin[:, :n_x], dxin[:, n_x:], dc_prev


def loss_and_grad(params: NetworkParams, inputs, targets) -> tuple[float, dict[str, np.ndarray]]:
    """MSE loss and its exact gradient by backpropagation through the whole sequence.

    inputs (T, n_in) or (B, T, n_in); targets shaped like the outputs.
    """
    X = np.asarray(inputs, dtype=float)
    Yt = np.asarray(targets, dtype=float)
    if X.ndim == 2:
        X, Yt = X[None], Yt[None]
    Y, cache, H2 = forward_sequence(params, X, keep_cache=True)
    err = Y - Yt
    value = float(np.mean(err ** 2))
    dY = 2.0 * err / err.size
    grads = params.zeros_like()
    grads["Wy"] = np.einsum("btk,bth->kh", dY, H2)
    grads["by"] = dY.sum(axis=(0, 1))
    dH2 = dY @ params.Wy
    B, T, _ = X.shape
    _, n1, n2, _ = params.sizes
    dh1n, dc1n = np.zeros((B, n1)), np.zeros((B, n1))
    dh2n, dc2n = np.zeros((B, n2)), np.zeros((B, n2))
    for t in reversed(range(T)):
        x, h1, c1, h1o, c1o, g1, h2, c2, h2o, c2o, g2 = cache[t]
        dh_in, dh2n, dc2n = _cell_backward(params.W2, dH2[:, t] + dh2n, dc2n, h1o, h2, c2, g2,
                                           grads["W2"], grads["b2"])
        _, dh1n, dc1n = _cell_backward(params.W1, dh_in + dh1n, dc1n, x, h1, c1, g1, grads["W1"], grads["b1"])
    return value, grads


def backward(params: NetworkParams, window: TrainingWindow) -> dict[str, np.ndarray]:
    return loss_and_grad(params, window.inputs, window.targets)[1]


class Adam:
    def __init__(self, params: NetworkParams, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def step(self, params: NetworkParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            getattr(params, k)[...] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass(frozen=True)
class TrainHyper:
    iterations: int = 5000
    learning_rate: float = 1e-3
    seed: int = 0
    batch: int = 1
    window_s: float = 2.0
    clip_norm: float | None = 1.0


def train(corpus, variant: str, hyper: TrainHyper = TrainHyper(), norm: NormRanges | None = None,
          params: NetworkParams | None = None, progress=None) -> tuple[NetworkParams, np.ndarray]:
    """Fit a network to randomly drawn windows of the corpus.

    Each iteration draws ``hyper.batch`` windows, runs full BPTT over them and
    takes one Adam step. Deterministic given the seed.
    """
    if not corpus:
        raise ValueError("corpus is empty")
    rng = np.random.default_rng(hyper.seed)
    norm = norm or NormRanges.table(variant)
    params = params or NetworkParams.init(variant, rng, norm=norm)
    params.norm = norm
    opt = Adam(params, hyper.learning_rate)
    losses = np.empty(hyper.iterations)
    for it in range(hyper.iterations):
        wins = [sample_window(corpus, variant, rng, hyper.window_s, norm) for _ in range(hyper.batch)]
        X = np.stack([w.inputs for w in wins])
        Yt = np.stack([w.targets for w in wins])
        value, grads = loss_and_grad(params, X, Yt)
        if not np.isfinite(value):
            raise DivergedLoss(f"loss became {value} at iteration {it}")
        if hyper.clip_norm is not None:
            gnorm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if gnorm > hyper.clip_norm:
                grads = {k: g * (hyper.clip_norm / gnorm) for k, g in grads.items()}
        opt.step(params, grads)
        losses[it] = value
        if progress is not None and (it + 1) % 500 == 0:
            progress(it + 1, float(losses[max(0, it - 499): it + 1].mean()))
    return params, losses


# ---------------------------------------------------------------------------
# .net files

NET_MAGIC = b"BILNET\x00\x00"
NET_VERSION = 1


def save_params(path, params: NetworkParams) -> None:
    header = {"variant": params.variant, "sizes": list(params.sizes),
              "norm": params.norm.to_dict() if params.norm is not None else None, "meta": params.meta}
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(NET_MAGIC)
    buf.write(struct.pack("<BI", NET_VERSION, len(hbytes)))
    buf.write(hbytes)
    for k in PARAM_NAMES:
        buf.write(np.ascontiguousarray(getattr(params, k), dtype="<f8").tobytes())
    body = buf.getvalue()
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_params(path, expect_variant: str | None = None) -> NetworkParams:
    raw = Path(path).read_bytes()
    if len(raw) < len(NET_MAGIC) + 5 + 32 or raw[: len(NET_MAGIC)] != NET_MAGIC:
        raise CorruptFile(f"{path}: not a network file")
    version, hlen = struct.unpack_from("<BI", raw, len(NET_MAGIC))
    if version != NET_VERSION:
        raise FormatVersionMismatch(f"{path}: version {version}, expected {NET_VERSION}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptFile(f"{path}: checksum mismatch")
    off = len(NET_MAGIC) + 5
    header = json.loads(body[off: off + hlen])
    off += hlen
    if expect_variant is not None and header["variant"] != expect_variant:
        raise VariantMismatch(f"{path} holds a {header['variant']} network, expected {expect_variant}")
    n_in, h1, h2, n_out = header["sizes"]
    shapes = [(4 * h1, n_in + h1), (4 * h1,), (4 * h2, h1 + h2), (4 * h2,), (n_out, h2), (n_out,)]
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(shape).astype(float))
        off += 8 * n
    if off != len(body):
        raise CorruptFile(f"{path}: payload size mismatch")
    norm = NormRanges.from_dict(header["norm"]) if header["norm"] else None
    return NetworkParams(header["variant"], tuple(header["sizes"]), *arrays, norm=norm, meta=header["meta"])
