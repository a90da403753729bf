"""Dense tensors with tape-based reverse-mode differentiation.

Ops run eagerly on numpy arrays. While a :class:`Tape` is active, every op
whose inputs require gradients appends a vector-Jacobian closure to it;
:func:`backward` replays the closures in reverse.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = [np.float32]
_ACTIVE: list["Tape"] = []
BACKWARD_CALLS = [0]


def dtype():
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dt):
    """Temporarily switch the compute dtype (float64 for gradient checks)."""
    _DTYPE.append(np.dtype(dt).type)
    try:
        yield
    finally:
        _DTYPE.pop()


class Tensor:
    __slots__ = ("value", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(value, dtype=dtype())
        if arr.ndim > 3:
            raise ValueError(f"tensors have at most 3 axes, got shape {arr.shape}")
        self.value = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, name={self.name!r})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of executed ops. Use as a context manager."""

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._seen: set[int] = set()

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self.entries.append((out, inputs, vjp))
        self._seen.add(id(out))
        self._seen.update(id(i) for i in inputs)

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._seen

    def __len__(self):
        return len(self.entries)


def _emit(value: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor(value)
    if _ACTIVE and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        _ACTIVE[-1].record(out, inputs, vjp)
    return out


def _shape_error(op: str, a, b) -> ValueError:
    return ValueError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(n,k)@(k,m) or batched (B,n,k)@(k,m)."""
    if b.value.ndim != 2 or a.value.ndim not in (2, 3) or a.shape[-1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    av, bv = a.value, b.value

    def vjp(g):
        ga = g @ bv.T
        gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _emit(av @ bv, (a, b), vjp)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> bool:
    """True when b is a row vector broadcast over a's leading axes."""
    if a.shape == b.shape:
        return False
    if b.value.ndim == 1 and a.value.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    raise _shape_error(op, a.shape, b.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    bc = _broadcast_check("add", a, b)

    def vjp(g):
        return g, (g.reshape(-1, g.shape[-1]).sum(axis=0) if bc else g)

    return _emit(a.value + b.value, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    bc = _broadcast_check("sub", a, b)

    def vjp(g):
        return g, -(g.reshape(-1, g.shape[-1]).sum(axis=0) if bc else g)

    return _emit(a.value - b.value, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; b may be a row vector (diagonal gate)."""
    bc = _broadcast_check("mul", a, b)
    av, bv = a.value, b.value

    def vjp(g):
        gb = g * av
        return g * bv, (gb.reshape(-1, gb.shape[-1]).sum(axis=0) if bc else gb)

    return _emit(av * bv, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    if c == 1.0:
        return a
    return _emit(a.value * dtype()(c), (a,), lambda g: (g * c,))


def add_n(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ValueError("add_n needs at least one tensor")
    out = xs[0]
    for x in xs[1:]:
        out = add(out, x)
    return out


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    values = [x.value for x in xs]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[v.shape for v in values]}") from None
    sizes = np.cumsum([v.shape[axis] for v in values])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _emit(out, tuple(xs), vjp)


def stack(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    values = [x.value for x in xs]
    try:
        out = np.stack(values, axis=axis)
    except ValueError:
        raise ValueError(f"stack: incompatible shapes {[v.shape for v in values]}") from None

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _emit(out, tuple(xs), vjp)


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _emit(a.value * mask, (a,), lambda g: (g * mask,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax; -inf entries get probability 0 and all -inf rows give zeros."""
    v = a.value
    m = np.max(v, axis=axis, keepdims=True)
    dead = ~np.isfinite(m)
    e = np.exp(v - np.where(dead, 0, m))
    s = e.sum(axis=axis, keepdims=True)
    p = np.where(dead, 0, e / np.where(s == 0, 1, s)).astype(v.dtype)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _emit(p, (a,), vjp)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by ``value`` (no gradient there)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise _shape_error("masked_fill", a.shape, mask.shape)
    keep = ~mask
    return _emit(np.where(mask, dtype()(value), a.value), (a,), lambda g: (g * keep,))


def layernorm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine (gamma, beta)."""
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise _shape_error("layernorm", a.shape, gamma.shape)
    x = a.value
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gamma.value

    def vjp(g):
        gx = g * gv
        ga = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        return ga, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return _emit((xhat * gv + beta.value).astype(x.dtype), (a, gamma, beta), vjp)


def dropout(a: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not train or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    mask = (rng.random(a.shape) >= p).astype(a.value.dtype) / (1.0 - p)
    return _emit(a.value * mask, (a,), lambda g: (g * mask,))


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Rows of a 2-D tensor; index -1 yields a zero row."""
    if a.value.ndim != 2:
        raise ValueError(f"gather_rows expects a 2-D tensor, got shape {a.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    valid = idx >= 0
    safe = np.where(valid, idx, 0)
    if len(a.value) == 0:
        out = np.zeros(idx.shape + (a.shape[1],), dtype=a.value.dtype)
    else:
        out = a.value[safe] * valid[..., None]

    def vjp(g):
        ga = np.zeros_like(a.value)
        np.add.at(ga, idx[valid], g[valid])
        return (ga,)

    return _emit(out.astype(a.value.dtype), (a,), vjp)


def mean_aggregate(src: Tensor, adj) -> Tensor:
    """``adj @ src`` for a row-normalised sparse (n_dst, n_src) matrix."""
    if adj.shape[1] != src.shape[0]:
        raise _shape_error("mean_aggregate", adj.shape, src.shape)
    adj_t = adj.T.tocsr()
    out = np.asarray(adj @ src.value, dtype=src.value.dtype)
    return _emit(out, (src,), lambda g: (np.asarray(adj_t @ g, dtype=g.dtype),))


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    def vjp(g):
        ga = np.zeros_like(a.value)
        ga[..., start:stop] = g
        return (ga,)

    return _emit(a.value[..., start:stop], (a,), vjp)


def bmv(k: Tensor, q: Tensor) -> Tensor:
    """Batched (B,N,d)·(B,d) -> (B,N)."""
    if k.value.ndim != 3 or q.value.ndim != 2 or k.shape[0] != q.shape[0] or k.shape[2] != q.shape[1]:
        raise _shape_error("bmv", k.shape, q.shape)
    kv, qv = k.value, q.value

    def vjp(g):
        return g[:, :, None] * qv[:, None, :], np.einsum("bn,bnd->bd", g, kv)

    return _emit(np.einsum("bnd,bd->bn", kv, qv), (k, q), vjp)


def bvm(a: Tensor, v: Tensor) -> Tensor:
    """Batched (B,N)·(B,N,d) -> (B,d)."""
    if a.value.ndim != 2 or v.value.ndim != 3 or a.shape != v.shape[:2]:
        raise _shape_error("bvm", a.shape, v.shape)
    av, vv = a.value, v.value

    def vjp(g):
        return np.einsum("bd,bnd->bn", g, vv), av[:, :, None] * g[:, None, :]

    return _emit(np.einsum("bn,bnd->bd", av, vv), (a, v), vjp)


def reduce_sum(a: Tensor) -> Tensor:
    return _emit(np.asarray(a.value.sum(), dtype=a.value.dtype), (a,), lambda g: (np.full_like(a.value, g),))


def reduce_mean(a: Tensor) -> Tensor:
    n = a.value.size
    return _emit(np.asarray(a.value.mean(), dtype=a.value.dtype), (a,), lambda g: (np.full_like(a.value, g / n),))


def pick(a: Tensor, idx: np.ndarray) -> Tensor:
    """a[i, idx[i]] for a 2-D tensor -> (N,)."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(len(idx))

    def vjp(g):
        ga = np.zeros_like(a.value)
        ga[rows, idx] = g
        return (ga,)

    return _emit(a.value[rows, idx], (a,), vjp)


# ---------------------------------------------------------------- loss


def class_weights(labels: np.ndarray, n_classes: int = 3) -> np.ndarray:
    """Inverse-frequency weights N / (C * count_c); absent classes get 0."""
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=n_classes).astype(float)
    w = np.zeros(n_classes)
    nz = counts > 0
    w[nz] = len(labels) / (n_classes * counts[nz])
    return w


def weighted_cross_entropy(logits: Tensor, labels: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise _shape_error("weighted_cross_entropy", logits.shape, labels.shape)
    if n == 0:
        raise ValueError("weighted_cross_entropy on an empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c - 1}], got {sorted(set(labels.tolist()))}")
    w = np.ones(c) if weights is None else np.asarray(weights, dtype=float)
    z = logits.value
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    logp = z - lse
    wi = w[labels]
    total = wi.sum()
    if total <= 0:
        raise ValueError("class weights of the batch labels sum to zero")
    rows = np.arange(n)
    loss = -(wi * logp[rows, labels]).sum() / total
    p = np.exp(logp)

    def vjp(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return ((g * wi / total)[:, None] * d).astype(z.dtype),

    return _emit(np.asarray(max(loss, 0.0), dtype=z.dtype), (logits,), vjp)


# ---------------------------------------------------------------- backward


def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``loss`` w.r.t. each tensor of ``wrt``."""
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or loss not in tape:
        raise ValueError("loss was not traced on this tape")
    for t in wrt:
        if t not in tape:
            raise ValueError(f"tensor {t.name or t.shape} is not on the tape")
    BACKWARD_CALLS[0] += 1
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for out, inputs, vjp in reversed(tape.entries):
        g = grads.pop(id(out), None) if not any(out is w for w in wrt) else grads.get(id(out))
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    return [grads.get(id(t), np.zeros_like(t.value)) for t in wrt]


# ---------------------------------------------------------------- optimiser


class Adam:
    """Bias-corrected Adam over a list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be > 0, got {lr}")
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value, dtype=np.float64) for p in self.params]
        self.v = [np.zeros_like(p.value, dtype=np.float64) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray | None]) -> None:
        """Apply one update; a None gradient leaves that parameter and its moments as they are."""
        if len(grads) != len(self.params):
            raise ValueError(f"got {len(grads)} gradients for {len(self.params)} parameters")
        for p, g in zip(self.params, grads):
            if g is None:
                continue
            if g.shape != p.shape:
                raise _shape_error("adam_step", p.shape, g.shape)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {p.name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            upd = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.value = (p.value - upd).astype(p.value.dtype)


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"NDCK0001"


def encode_tensors(named: dict[str, np.ndarray]) -> bytes:
    parts = [_MAGIC, struct.pack("<I", len(named))]
    for name in sorted(named):
        arr = np.ascontiguousarray(named[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != _MAGIC:
        raise ValueError("not a tensor blob")
    (count,) = struct.unpack_from("<I", blob, 8)
    pos = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * size
    return out


def save_checkpoint(directory: str | Path, named: dict[str, np.ndarray], meta: dict) -> dict:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    blob = encode_tensors(named)
    (d / "params.bin").write_bytes(blob)
    manifest = dict(meta)
    manifest["params_sha256"] = hashlib.sha256(blob).hexdigest()
    manifest["tensors"] = {k: list(np.shape(v)) for k, v in sorted(named.items())}
    (d / "checkpoint.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_checkpoint(directory: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(directory)
    blob = (d / "params.bin").read_bytes()
    manifest = json.loads((d / "checkpoint.json").read_text())
    if hashlib.sha256(blob).hexdigest() != manifest.get("params_sha256"):
        raise ValueError(f"checkpoint {d} is corrupt: parameter hash mismatch")
    return decode_tensors(blob), manifest


def parameters(named: dict[str, Tensor]) -> list[Tensor]:
    return [named[k] for k in sorted(named)]


def total_size(tensors: Iterable[Tensor]) -> int:
    return int(sum(t.value.size for t in tensors))
