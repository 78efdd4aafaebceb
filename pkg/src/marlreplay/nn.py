"""Small numpy neural-network core for per-agent Q-functions.

Two model kinds are supported: a feed-forward Q-network (rectifier hidden
layers, linear head) and a single-layer GRU with a linear head. Both expose an
explicit forward pass that records a tape and a matching analytic backward
pass; the GRU backward pass is full backpropagation through time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

GRU_NAMES = ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh", "Wq", "bq")

CHECKPOINT_MAGIC = b"IQLP"
CHECKPOINT_VERSION = 1
_KIND_CODES = {"mlp": 1, "gru": 2}


class ConfigError(ValueError):
    """Inconsistent dimensions or settings, raised before any training step."""


class ParamSet:
    """Named parameter arrays of one model, in declaration order.

    Shapes are fixed at construction; assigning an array of another shape
    raises. The same class doubles as the gradient container.
    """

    __slots__ = ("kind", "arrays")

    def __init__(self, kind: str, arrays: dict[str, np.ndarray]):
        if kind not in _KIND_CODES:
            raise ConfigError(f"unknown model kind {kind!r}")
        self.kind = kind
        self.arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
        _validate(self)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.arrays[name].shape:
            raise ConfigError(f"{name}: shape {value.shape} != {self.arrays[name].shape}")
        self.arrays[name] = value

    def names(self) -> list[str]:
        return list(self.arrays)

    def copy(self) -> "ParamSet":
        return ParamSet(self.kind, {k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self) -> "ParamSet":
        return ParamSet(self.kind, {k: np.zeros_like(v) for k, v in self.arrays.items()})

    def same_shape(self, other: "ParamSet") -> bool:
        return (self.kind == other.kind and self.names() == other.names()
                and all(self[k].shape == other[k].shape for k in self.arrays))

    def scaled(self, factor: float) -> "ParamSet":
        return ParamSet(self.kind, {k: v * factor for k, v in self.arrays.items()})

    def add_(self, other: "ParamSet") -> None:
        for k in self.arrays:
            self.arrays[k] += other.arrays[k]

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.arrays.values())

    @property
    def input_dim(self) -> int:
        return self.arrays["W0" if self.kind == "mlp" else "Wz"].shape[1]

    @property
    def output_dim(self) -> int:
        if self.kind == "gru":
            return self.arrays["Wq"].shape[0]
        return self.arrays[f"W{self.n_layers - 1}"].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.arrays) // 2 if self.kind == "mlp" else 1

    @property
    def hidden_dim(self) -> int:
        if self.kind == "gru":
            return self.arrays["Uz"].shape[0]
        return self.arrays[f"W{self.n_layers - 2}"].shape[0] if self.n_layers > 1 else 0

    def __repr__(self) -> str:
        dims = ", ".join(f"{k}{list(v.shape)}" for k, v in self.arrays.items())
        return f"ParamSet({self.kind}: {dims})"


def _validate(p: ParamSet) -> None:
    a = p.arrays
    if p.kind == "mlp":
        n = len(a) // 2
        if list(a) != [f"{c}{i}" for i in range(n) for c in "Wb"] or n == 0:
            raise ConfigError(f"bad mlp layer names {list(a)}")
        prev = a["W0"].shape[1]
        for i in range(n):
            W, b = a[f"W{i}"], a[f"b{i}"]
            if W.ndim != 2 or W.shape[1] != prev or b.shape != (W.shape[0],):
                raise ConfigError(f"layer {i} dims inconsistent: W{W.shape} b{b.shape}")
            prev = W.shape[0]
    else:
        if tuple(a) != GRU_NAMES:
            raise ConfigError(f"bad gru names {list(a)}")
        H, D = a["Wz"].shape
        for g in "zrh":
            if a[f"W{g}"].shape != (H, D) or a[f"U{g}"].shape != (H, H) or a[f"b{g}"].shape != (H,):
                raise ConfigError(f"gate {g} dims inconsistent")
        if a["Wq"].ndim != 2 or a["Wq"].shape[1] != H or a["bq"].shape != (a["Wq"].shape[0],):
            raise ConfigError("head dims inconsistent")


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_mlp(input_dim: int, hidden: Sequence[int], output_dim: int,
             rng: np.random.Generator) -> ParamSet:
    sizes = [input_dim, *hidden, output_dim]
    arrays = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        arrays[f"W{i}"] = _uniform(rng, (fan_out, fan_in), fan_in)
        arrays[f"b{i}"] = _uniform(rng, (fan_out,), fan_in)
    return ParamSet("mlp", arrays)


def init_gru(input_dim: int, hidden: int, output_dim: int,
             rng: np.random.Generator) -> ParamSet:
    arrays = {}
    for g in "zrh":
        arrays[f"W{g}"] = _uniform(rng, (hidden, input_dim), input_dim)
        arrays[f"U{g}"] = _uniform(rng, (hidden, hidden), hidden)
        arrays[f"b{g}"] = _uniform(rng, (hidden,), hidden)
    arrays["Wq"] = _uniform(rng, (output_dim, hidden), hidden)
    arrays["bq"] = _uniform(rng, (output_dim,), hidden)
    return ParamSet("gru", arrays)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class Tape:
    """Intermediate values of a forward pass, consumed by `backward`."""

    kind: str
    shapes: dict[str, tuple[int, ...]]
    cache: dict[str, np.ndarray] = field(default_factory=dict)


def _check_input(params: ParamSet, x: np.ndarray) -> None:
    if x.shape[-1] != params.input_dim:
        raise ConfigError(f"input width {x.shape[-1]} != declared {params.input_dim}")


def mlp_forward(params: ParamSet, x: np.ndarray) -> np.ndarray:
    """Q-values for one observation (D,) or a batch (N, D)."""
    _check_input(params, x)
    n = params.n_layers
    a = x
    for i in range(n):
        a = a @ params.arrays[f"W{i}"].T + params.arrays[f"b{i}"]
        if i < n - 1:
            a = np.maximum(a, 0.0)
    return a


def mlp_forward_tape(params: ParamSet, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    _check_input(params, x)
    x2 = np.atleast_2d(x)
    n = params.n_layers
    acts = [x2]
    a = x2
    for i in range(n):
        a = a @ params.arrays[f"W{i}"].T + params.arrays[f"b{i}"]
        if i < n - 1:
            a = np.maximum(a, 0.0)
            acts.append(a)
    tape = Tape("mlp", {k: v.shape for k, v in params.arrays.items()},
                {f"a{i}": v for i, v in enumerate(acts)})
    return (a if x.ndim == 2 else a[0]), tape


def mlp_hidden(params: ParamSet, x: np.ndarray) -> np.ndarray:
    """Activations of the last hidden layer."""
    a = x
    for i in range(params.n_layers - 1):
        a = np.maximum(a @ params.arrays[f"W{i}"].T + params.arrays[f"b{i}"], 0.0)
    return a


def gru_step(params: ParamSet, h: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One recurrent step: returns (q, h_next). Works on (D,) or (B, D) inputs.

    h' = (1 - z) * h + z * tanh(Wh x + Uh (r * h) + bh)
    """
    _check_input(params, x)
    p = params.arrays
    z = sigmoid(x @ p["Wz"].T + h @ p["Uz"].T + p["bz"])
    r = sigmoid(x @ p["Wr"].T + h @ p["Ur"].T + p["br"])
    c = np.tanh(x @ p["Wh"].T + (r * h) @ p["Uh"].T + p["bh"])
    h_next = h + z * (c - h)
    return h_next @ p["Wq"].T + p["bq"], h_next


def gru_unroll(params: ParamSet, xs: np.ndarray, h0: np.ndarray | None = None,
               keep_tape: bool = True) -> tuple[np.ndarray, np.ndarray, Tape | None]:
    """Run the GRU over a (T, B, D) sequence from `h0` (zeros by default).

    Returns (q of shape (T, B, U), hidden states (T, B, H), tape).
    """
    _check_input(params, xs)
    p = params.arrays
    T, B, _ = xs.shape
    H = p["Uz"].shape[0]
    h = np.zeros((B, H)) if h0 is None else h0
    # input projections for every step at once
    wx = xs.reshape(T * B, -1) @ np.concatenate([p["Wz"], p["Wr"], p["Wh"]]).T
    wx = (wx + np.concatenate([p["bz"], p["br"], p["bh"]])).reshape(T, B, 3 * H)
    Uzr = np.concatenate([p["Uz"], p["Ur"]]).T
    UhT = p["Uh"].T
    hs = np.empty((T, B, H))
    if keep_tape:
        hprev = np.empty((T, B, H))
        zs = np.empty((T, B, H))
        rs = np.empty((T, B, H))
        cs = np.empty((T, B, H))
    for t in range(T):
        zr = sigmoid(wx[t, :, :2 * H] + h @ Uzr)
        z, r = zr[:, :H], zr[:, H:]
        c = np.tanh(wx[t, :, 2 * H:] + (r * h) @ UhT)
        if keep_tape:
            hprev[t], zs[t], rs[t], cs[t] = h, z, r, c
        h = h + z * (c - h)
        hs[t] = h
    q = hs @ p["Wq"].T + p["bq"]
    tape = None
    if keep_tape:
        tape = Tape("gru", {k: v.shape for k, v in p.items()},
                    {"x": xs, "hprev": hprev, "z": zs, "r": rs, "c": cs, "h": hs})
    return q, hs, tape


def backward(params: ParamSet, tape: Tape, upstream: np.ndarray) -> ParamSet:
    """Gradients of sum(upstream * q) with respect to every parameter.

    `upstream` has the shape of the q returned by the forward pass that
    produced `tape`; for the GRU it covers every unrolled step.
    """
    if tape.kind != params.kind or tape.shapes != {k: v.shape for k, v in params.arrays.items()}:
        raise ConfigError("tape was not produced by a forward pass of these parameters")
    if params.kind == "mlp":
        return _mlp_backward(params, tape, upstream)
    return _gru_backward(params, tape, upstream)


def _mlp_backward(params: ParamSet, tape: Tape, upstream: np.ndarray) -> ParamSet:
    g = np.atleast_2d(upstream)
    n = params.n_layers
    grads = {}
    for i in reversed(range(n)):
        a_in = tape.cache[f"a{i}"]
        grads[f"W{i}"] = g.T @ a_in
        grads[f"b{i}"] = g.sum(axis=0)
        if i > 0:
            g = (g @ params.arrays[f"W{i}"]) * (a_in > 0)
    return ParamSet("mlp", {k: grads[k] for k in params.arrays})


def _gru_backward(params: ParamSet, tape: Tape, upstream: np.ndarray) -> ParamSet:
    p = params.arrays
    c = tape.cache
    xs, hprev, zs, rs, cs, hs = c["x"], c["hprev"], c["z"], c["r"], c["c"], c["h"]
    T, B, H = hs.shape
    if upstream.shape[:2] != (T, B):
        raise ConfigError(f"upstream {upstream.shape} does not cover the {T}-step unroll")
    dq = upstream
    grads = {"Wq": np.einsum("tbu,tbh->uh", dq, hs), "bq": dq.sum(axis=(0, 1))}
    dh_out = dq @ p["Wq"]  # (T, B, H)
    da = np.empty((T, B, 3 * H))  # pre-activation grads for z, r, h gates
    drh = np.empty((T, B, H))
    Uz, Ur, Uh = p["Uz"], p["Ur"], p["Uh"]
    dh = np.zeros((B, H))
    for t in reversed(range(T)):
        dh = dh + dh_out[t]
        z, r, cc, hp = zs[t], rs[t], cs[t], hprev[t]
        da_h = dh * z * (1.0 - cc * cc)
        d_rh = da_h @ Uh
        da_r = d_rh * hp * r * (1.0 - r)
        da_z = dh * (cc - hp) * z * (1.0 - z)
        da[t, :, :H], da[t, :, H:2 * H], da[t, :, 2 * H:] = da_z, da_r, da_h
        drh[t] = r * hp
        dh = dh * (1.0 - z) + d_rh * r + da_z @ Uz + da_r @ Ur
    da2 = da.reshape(T * B, 3 * H)
    dW = da2.T @ xs.reshape(T * B, -1)
    hp2 = hprev.reshape(T * B, H)
    for k, g in enumerate("zrh"):
        sl = slice(k * H, (k + 1) * H)
        grads[f"W{g}"] = dW[sl]
        grads[f"b{g}"] = da2[:, sl].sum(axis=0)
        src = drh.reshape(T * B, H) if g == "h" else hp2
        grads[f"U{g}"] = da2[:, sl].T @ src
    return ParamSet("gru", {k: grads[k] for k in GRU_NAMES})


def grad_check(f: Callable[[ParamSet], float], params: ParamSet, analytic: ParamSet,
               delta: float = 1e-5, atol: float = 1e-8) -> float:
    """Worst relative error between `analytic` and central differences of `f`.

    Relative error per coordinate is |a - n| / max(|a| + |n|, atol).
    Raises FloatingPointError if `f` returns a non-finite value.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if not analytic.same_shape(params):
        raise ConfigError("analytic gradients do not mirror the parameter set")
    probe = params.copy()
    worst = 0.0
    for name in probe.names():
        arr = probe.arrays[name]
        flat = arr.reshape(-1)
        ana = analytic.arrays[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + delta
            fp = f(probe)
            flat[i] = orig - delta
            fm = f(probe)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite objective at {name}[{i}]")
            num = (fp - fm) / (2 * delta)
            err = abs(ana[i] - num) / max(abs(ana[i]) + abs(num), atol)
            worst = max(worst, err)
    return worst


def global_norm(grads: ParamSet) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.arrays.values())))


class SGD:
    """Plain gradient descent, mainly for oracle tests."""

    def __init__(self, lr: float, clip_norm: float | None = None):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = lr
        self.clip_norm = clip_norm
        self.rejected = 0

    def step(self, params: ParamSet, grads: ParamSet) -> bool:
        g = _prepare(self, grads)
        if g is None:
            return False
        for k in params.arrays:
            params.arrays[k] -= self.lr * g.arrays[k]
        return True


class RMSProp:
    """s <- decay * s + (1 - decay) * g^2;  theta <- theta - lr * g / sqrt(s + damping)."""

    def __init__(self, lr: float = 5e-4, decay: float = 0.99, damping: float = 1e-6,
                 clip_norm: float | None = 10.0):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = lr
        self.decay = decay
        self.damping = damping
        self.clip_norm = clip_norm
        self.rejected = 0
        self.sq: dict[str, np.ndarray] | None = None

    def step(self, params: ParamSet, grads: ParamSet) -> bool:
        g = _prepare(self, grads)
        if g is None:
            return False
        if self.sq is None:
            self.sq = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        for k in params.arrays:
            gk = g.arrays[k]
            s = self.sq[k]
            s *= self.decay
            s += (1.0 - self.decay) * gk * gk
            params.arrays[k] -= self.lr * gk / np.sqrt(s + self.damping)
        return True


def _prepare(opt, grads: ParamSet) -> ParamSet | None:
    if not grads.is_finite():
        opt.rejected += 1
        return None
    if opt.clip_norm is not None:
        norm = global_norm(grads)
        if norm > opt.clip_norm:
            return grads.scaled(opt.clip_norm / norm)
    return grads


def optimizer_step(params: ParamSet, grads: ParamSet, state: SGD | RMSProp,
                   lr: float | None = None) -> bool:
    """Apply one update in place; returns False when the step was rejected."""
    if lr is not None:
        if lr <= 0:
            raise ValueError("lr must be positive")
        state.lr = lr
    return state.step(params, grads)


def save_checkpoint(path: str | Path, param_sets: Iterable[ParamSet]) -> None:
    """Write parameter sets as consecutive versioned blocks.

    Block layout (little-endian): magic, u32 version, u32 kind, u32 array
    count, then per array u32 ndim and u32 dims, then every array's float64
    values in declaration order.
    """
    out = bytearray()
    for p in param_sets:
        out += CHECKPOINT_MAGIC
        out += struct.pack("<III", CHECKPOINT_VERSION, _KIND_CODES[p.kind], len(p.arrays))
        for v in p.arrays.values():
            out += struct.pack(f"<I{v.ndim}I", v.ndim, *v.shape)
        for v in p.arrays.values():
            out += v.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> list[ParamSet]:
    data = Path(path).read_bytes()
    kinds = {v: k for k, v in _KIND_CODES.items()}
    pos = 0
    result = []
    while pos < len(data):
        if data[pos:pos + 4] != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic at byte {pos}")
        version, kind, count = struct.unpack_from("<III", data, pos + 4)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos += 16
        shapes = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", data, pos)
            shapes.append(struct.unpack_from(f"<{ndim}I", data, pos + 4))
            pos += 4 + 4 * ndim
        kind_name = kinds[kind]
        names = (list(GRU_NAMES) if kind_name == "gru"
                 else [f"{c}{i}" for i in range(count // 2) for c in "Wb"])
        arrays = {}
        for name, shape in zip(names, shapes):
            n = int(np.prod(shape))
            arrays[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
            pos += 8 * n
        result.append(ParamSet(kind_name, arrays))
    return result
