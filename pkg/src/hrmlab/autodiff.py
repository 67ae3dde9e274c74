"""Minimal dense-tensor substrate with reverse-mode differentiation.

Just enough machinery for a single-layer transformer encoder: affine maps,
multi-head self-attention, a gated feed-forward, RMS normalization, softmax
cross-entropy, and an adaptive-moment optimizer. Gradients are recorded on
an explicit Tape (a Wengert list); detaching a tensor severs it from the
tape, so no gradient ever flows upstream of a detach.

Tensors are immutable values. A tape is single-owner: all tensors feeding
one op must share the same tape (or carry none). Each recorded op carries
one backward callable that maps the output adjoint to the adjoints of all
its inputs, so fused composite ops (like a whole encoder block) cost a
single tape entry.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

_UIDS = itertools.count(1)

ArrayLike = Union[np.ndarray, float, int, Sequence]


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes are inconsistent."""


class TapeOp:
    """One primitive: output uid, input uids, and a backward callable that
    turns the output adjoint into one adjoint per input (None = skip)."""

    __slots__ = ("out_uid", "in_uids", "backward")

    def __init__(self, out_uid, in_uids, backward):
        self.out_uid = out_uid
        self.in_uids = in_uids
        self.backward = backward


class Tape:
    """Ordered record of primitive operations for reverse-mode accumulation."""

    def __init__(self):
        self.ops: list[TapeOp] = []

    def __len__(self) -> int:
        return len(self.ops)

    def record(self, out_uid: int, in_uids, backward) -> None:
        self.ops.append(TapeOp(out_uid, tuple(in_uids), backward))

    def gradients(self, output: "Tensor", wrt: Sequence["Tensor"]) -> list[np.ndarray]:
        """Accumulate d(output)/d(t) for each t in wrt; output must be scalar.

        Re-entrant: the tape is replayed, not consumed, so several outputs
        recorded on one tape can each be differentiated.
        """
        if output.data.ndim != 0:
            raise ShapeError(f"gradients need a scalar output, got {output.shape}")
        if output.tape is not self:
            raise ValueError("output was not recorded on this tape")
        grads: dict[int, np.ndarray] = {
            output.uid: np.ones((), dtype=output.data.dtype)
        }
        for op in reversed(self.ops):
            g = grads.pop(op.out_uid, None)
            if g is None:
                continue
            contribs = op.backward(g)
            for uid, c in zip(op.in_uids, contribs):
                if uid is None or c is None:
                    continue
                acc = grads.get(uid)
                grads[uid] = c if acc is None else acc + c
        return [grads.get(t.uid, np.zeros_like(t.data)) for t in wrt]


class Tensor:
    """An immutable dense array, optionally attached to a tape."""

    __slots__ = ("data", "tape", "uid")

    def __init__(self, data: ArrayLike, tape: Optional[Tape] = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor holds non-finite values")
        self.data = arr
        self.tape = tape
        self.uid = next(_UIDS)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A constant copy of the value; gradients never cross it."""
        return Tensor(self.data, tape=None)

    def watched(self, tape: Tape) -> "Tensor":
        """The same value attached to tape (a fresh leaf)."""
        return Tensor(self.data, tape=tape)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), tape=None)

    def __repr__(self) -> str:
        taped = "taped" if self.tape is not None else "const"
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, {taped})"


def _merged_tape(*tensors: Tensor) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("tensors from different tapes cannot mix in one op")
    return tape


def _uid_or_none(t: Tensor) -> Optional[int]:
    return t.uid if t.tape is not None else None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to shape (the adjoint of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# fast reduction helpers (the generic ufunc reduces are slow on this host)


def _max_last(x: np.ndarray) -> np.ndarray:
    """Max over the last axis, keepdims, via pairwise maximum folding.
    Folding the odd tail into every pair is sound: max is idempotent."""
    m = x
    while m.shape[-1] > 1:
        k = m.shape[-1] // 2
        folded = np.maximum(m[..., :k], m[..., k : 2 * k])
        if m.shape[-1] % 2:
            folded = np.maximum(folded, m[..., -1:])
        m = folded
    return m


def _sum_last(x: np.ndarray, keepdims: bool = False) -> np.ndarray:
    lead = x.shape[:-1]
    out = np.einsum("ij->i", np.ascontiguousarray(x).reshape(-1, x.shape[-1]))
    out = out.reshape(lead)
    return out[..., None] if keepdims else out


def _dot_last(a: np.ndarray, b: np.ndarray, keepdims: bool = False) -> np.ndarray:
    """Row dot product over the last axis (a and b same shape)."""
    lead = a.shape[:-1]
    out = np.einsum(
        "ij,ij->i",
        np.ascontiguousarray(a).reshape(-1, a.shape[-1]),
        np.ascontiguousarray(b).reshape(-1, b.shape[-1]),
    )
    out = out.reshape(lead)
    return out[..., None] if keepdims else out


def _flat_mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a (..., m, k) @ b (k, n) as one GEMM over flattened leading dims."""
    lead = a.shape[:-1]
    return (
        np.ascontiguousarray(a).reshape(-1, a.shape[-1]) @ b
    ).reshape(lead + (b.shape[1],))


def _weight_grad(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """d(a @ W)/dW summed over leading dims: a^T g as one GEMM."""
    k, n = a.shape[-1], g.shape[-1]
    return (
        np.ascontiguousarray(a).reshape(-1, k).T
        @ np.ascontiguousarray(g).reshape(-1, n)
    )


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _merged_tape(a, b)
    out = Tensor(a.data + b.data, tape)
    if tape is not None:

        def backward(g, sa=a.shape, sb=b.shape):
            return _unbroadcast(g, sa), _unbroadcast(g, sb)

        tape.record(out.uid, (_uid_or_none(a), _uid_or_none(b)), backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _merged_tape(a, b)
    out = Tensor(a.data * b.data, tape)
    if tape is not None:

        def backward(g, ad=a.data, bd=b.data, sa=a.shape, sb=b.shape):
            return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

        tape.record(out.uid, (_uid_or_none(a), _uid_or_none(b)), backward)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c, x.tape)
    if x.tape is not None:
        x.tape.record(out.uid, (x.uid,), lambda g, c=c: (g * c,))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    tape = _merged_tape(a, b)
    if b.ndim == 2:
        # Projection by a weight matrix: collapse leading dims so the whole
        # batch runs through single GEMMs, forward and backward.
        out = Tensor(_flat_mm(a.data, b.data), tape)
        if tape is not None:

            def backward(g, ad=a.data, bd=b.data):
                return _flat_mm(g, bd.T), _weight_grad(ad, g)

            tape.record(out.uid, (_uid_or_none(a), _uid_or_none(b)), backward)
        return out

    out = Tensor(np.matmul(a.data, b.data), tape)
    if tape is not None:

        def backward(g, ad=a.data, bd=b.data, sa=a.shape, sb=b.shape):
            ga = _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), sa)
            gb = _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), sb)
            return ga, gb

        tape.record(out.uid, (_uid_or_none(a), _uid_or_none(b)), backward)
    return out


def affine(x: Tensor, w: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """y = x @ w (+ bias), the workhorse projection."""
    y = matmul(x, w)
    return y if bias is None else add(y, bias)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor(x.data.reshape(shape), x.tape)
    if x.tape is not None:
        x.tape.record(out.uid, (x.uid,), lambda g, sh=x.shape: (g.reshape(sh),))
    return out


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    out = Tensor(x.data.swapaxes(a, b), x.tape)
    if x.tape is not None:
        x.tape.record(out.uid, (x.uid,), lambda g, a=a, b=b: (g.swapaxes(a, b),))
    return out


def _sigmoid_raw(x: np.ndarray) -> np.ndarray:
    # tanh form: saturates cleanly at both ends, no overflow, no branching
    return 0.5 * np.tanh(0.5 * x) + 0.5


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_raw(x.data)
    out = Tensor(s, x.tape)
    if x.tape is not None:
        x.tape.record(out.uid, (x.uid,), lambda g, s=s: (g * s * (1.0 - s),))
    return out


def _softmax_raw(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - _max_last(x))
    return e / _sum_last(e, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    s = _softmax_raw(x.data)
    out = Tensor(s, x.tape)
    if x.tape is not None:

        def backward(g, s=s):
            return (s * (g - _dot_last(g, s, keepdims=True)),)

        x.tape.record(out.uid, (x.uid,), backward)
    return out


RMS_EPS = 1e-6


def _rms_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = x.shape[-1]
    inv = 1.0 / np.sqrt(_dot_last(x, x, keepdims=True) / d + RMS_EPS)
    return x * inv, inv


def _rms_backward(
    g_out: np.ndarray, x: np.ndarray, inv: np.ndarray, gain: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Adjoints of y = x * inv(x) * gain wrt x and gain."""
    d = x.shape[-1]
    gg = g_out * gain
    dx = gg * inv - x * (inv ** 3) * (_dot_last(gg, x, keepdims=True) / d)
    dgain = _unbroadcast(g_out * (x * inv), gain.shape)
    return dx, dgain


def rms_norm(x: Tensor, gain: Tensor) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gain, per position over the last axis."""
    if gain.shape != x.shape[-1:]:
        raise ShapeError(f"gain shape {gain.shape} must match last dim of {x.shape}")
    normed, inv = _rms_forward(x.data)
    tape = _merged_tape(x, gain)
    out = Tensor(normed * gain.data, tape)
    if tape is not None:

        def backward(g, xd=x.data, inv=inv, gd=gain.data):
            return _rms_backward(g, xd, inv, gd)

        tape.record(out.uid, (_uid_or_none(x), _uid_or_none(gain)), backward)
    return out


def mean_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    count = x.shape[axis]
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims), x.tape)
    if x.tape is not None:

        def backward(g, axis=axis, keepdims=keepdims, count=count, sh=x.shape):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / count, sh).copy(),)

        x.tape.record(out.uid, (x.uid,), backward)
    return out


def mean_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.mean()), x.tape)
    if x.tape is not None:

        def backward(g, sh=x.shape, size=x.data.size):
            return (np.full(sh, g / size, dtype=g.dtype),)

        x.tape.record(out.uid, (x.uid,), backward)
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[ids[...]]; scatter-add on the way back."""
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= table.shape[0]:
        raise ShapeError("embedding ids outside the table")
    out = Tensor(table.data[ids], table.tape)
    if table.tape is not None:

        def backward(g, ids=ids, sh=table.shape, dtype=table.dtype):
            buf = np.zeros(sh, dtype=dtype)
            np.add.at(buf, ids, g)
            return (buf,)

        table.tape.record(out.uid, (table.uid,), backward)
    return out


def cross_entropy_tokens(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-position -log softmax(logits)[target]; shape = logits.shape[:-1]."""
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(
            f"targets shape {targets.shape} must equal {logits.shape[:-1]}"
        )
    vocab = logits.shape[-1]
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= vocab:
        raise IndexError("target index out of vocab")
    x = logits.data
    m = _max_last(x)
    lse = m + np.log(_sum_last(np.exp(x - m), keepdims=True))
    picked = np.take_along_axis(x, targets[..., None], axis=-1)
    out = Tensor((lse - picked).squeeze(-1), logits.tape)
    if logits.tape is not None:

        def backward(g, x=x, targets=targets):
            p = _softmax_raw(x)
            onehot = np.zeros_like(p)
            np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
            return ((p - onehot) * g[..., None],)

        logits.tape.record(out.uid, (logits.uid,), backward)
    return out


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over all positions of the per-token cross entropy (scalar)."""
    return mean_all(cross_entropy_tokens(logits, targets))


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross entropy on raw scores, numerically stable."""
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"targets shape {t.shape} must equal {logits.shape}")
    x = logits.data
    out = Tensor(np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x))), logits.tape)
    if logits.tape is not None:

        def backward(g, x=x, t=t):
            return ((_sigmoid_raw(x) - t) * g,)

        logits.tape.record(out.uid, (logits.uid,), backward)
    return out


# ---------------------------------------------------------------------------
# composite layers


def _split_heads(t: np.ndarray, n_heads: int) -> np.ndarray:
    lead, (seq, d) = t.shape[:-2], t.shape[-2:]
    return t.reshape(lead + (seq, n_heads, d // n_heads)).swapaxes(-3, -2)


def _merge_heads(t: np.ndarray) -> np.ndarray:
    lead = t.shape[:-3]
    h, seq, hd = t.shape[-3:]
    return np.ascontiguousarray(t.swapaxes(-3, -2)).reshape(lead + (seq, h * hd))


def multi_head_self_attention(
    x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, n_heads: int
) -> Tensor:
    """Unmasked scaled dot-product attention over the full sequence.

    x is (..., seq, d); heads are split from d, attended independently,
    concatenated, and projected back through wo. No biases, no mask.
    """
    seq, d = x.shape[-2], x.shape[-1]
    if d % n_heads != 0:
        raise ShapeError(f"width {d} not divisible by {n_heads} heads")
    hd = d // n_heads
    lead = x.shape[:-2]

    def split(t: Tensor) -> Tensor:
        return swapaxes(reshape(t, lead + (seq, n_heads, hd)), -3, -2)

    q = split(matmul(x, wq))
    k = split(matmul(x, wk))
    v = split(matmul(x, wv))
    scores = scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(hd))
    ctx = matmul(softmax(scores), v)
    ctx = reshape(swapaxes(ctx, -3, -2), lead + (seq, d))
    return matmul(ctx, wo)


def glu_ffn(x: Tensor, w_gate: Tensor, w_val: Tensor, w_down: Tensor) -> Tensor:
    """Gated feed-forward: (sigmoid(x w_gate) * (x w_val)) w_down, no biases."""
    return matmul(mul(sigmoid(matmul(x, w_gate)), matmul(x, w_val)), w_down)


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    hyper: AdamConfig,
) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected adaptive-moment update; deterministic, pure."""
    t = state.step + 1
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    new_params: dict[str, Tensor] = {}
    b1, b2 = hyper.beta1, hyper.beta2
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape} for {name}")
        g = g.astype(p.dtype, copy=False)
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        step = hyper.learning_rate * m_hat / (np.sqrt(v_hat) + hyper.eps)
        new_params[name] = Tensor(p.data - step.astype(p.dtype, copy=False))
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(step=t, m=new_m, v=new_v)


# ---------------------------------------------------------------------------
# gradient verification


def finite_diff_error(
    f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5
) -> float:
    """Max relative error between the tape gradient of scalar f and central
    differences. The numeric side only ever evaluates f on untaped tensors."""
    tape = Tape()
    watched = x.watched(tape)
    out = f(watched)
    if out.data.ndim != 0:
        raise ShapeError("finite_diff_error needs a scalar-valued f")
    (g,) = tape.gradients(out, [watched])
    numeric = np.zeros(x.data.size, dtype=np.float64)
    flat = x.data.astype(np.float64).ravel()
    for i in range(flat.size):
        plus = flat.copy()
        plus[i] += step
        minus = flat.copy()
        minus[i] -= step
        hi = float(f(Tensor(plus.reshape(x.shape))).data)
        lo = float(f(Tensor(minus.reshape(x.shape))).data)
        numeric[i] = (hi - lo) / (2.0 * step)
    analytic = g.astype(np.float64).ravel()
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())


def finite_diff_check(
    f: Callable[[Tensor], Tensor], x: Tensor, tol: float = 1e-4, step: float = 1e-5
) -> bool:
    """True iff the tape gradient of f at x matches central differences."""
    return finite_diff_error(f, x, step=step) < tol
