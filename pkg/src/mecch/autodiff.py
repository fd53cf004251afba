"""A small reverse-mode engine over float64 numpy arrays.

Operations executed inside ``with Tape() as tape:`` are recorded when any input
requires a gradient; ``backward(tape, loss)`` then walks the record in reverse.
Only the primitives the model needs are provided.
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ContractViolation, NonFiniteError, ShapeError

_active_tape = contextvars.ContextVar("mecch_active_tape", default=None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Op:
    name: str
    inputs: tuple
    output: Tensor
    backward: Callable  # upstream grad -> tuple of grads (None where not needed)


class Tape:
    """Append-only record of executed operations, in execution order."""

    def __init__(self):
        self.ops = []
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.ops)


def _result(name, data, inputs, backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{name} produced a non-finite value")
    out = Tensor(data)
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.ops.append(_Op(name, tuple(inputs), out, backward_fn))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- primitives

def linear(x, W, b=None) -> Tensor:
    """Rows of ``x`` mapped through ``W`` (d_out x d_in) plus bias ``b``."""
    x, W = _as_tensor(x), _as_tensor(W)
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[1]:
        raise ShapeError(f"linear: x {x.shape} incompatible with W {W.shape}")
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (W.shape[0],):
            raise ShapeError(f"linear: bias {b.shape} does not match W {W.shape}")
    out = x.data @ W.data.T
    if b is not None:
        out = out + b.data

    def back(g):
        return (g @ W.data, g.T @ x.data, None if b is None else g.sum(axis=0))

    inputs = (x, W) if b is None else (x, W, b)
    return _result("linear", out, inputs, lambda g: back(g)[: len(inputs)])


def segment_mean(values, offsets, index=None, weights=None) -> Tensor:
    """Per-segment mean of rows.

    Segment ``j`` covers positions ``offsets[j]:offsets[j+1]``; with ``index`` the
    rows at those positions are ``values[index[k]]``, otherwise ``values[k]``.
    With ``weights`` (a tensor over positions, summing to one per segment) the
    mean becomes that weighted average.

    Evaluated as ``first + sum_k w_k (row_k - first)`` where ``first`` is the
    segment's first row, so a segment of identical rows returns that row exactly.
    """
    values = _as_tensor(values)
    offsets = np.asarray(offsets, dtype=np.int64)
    if values.data.ndim != 2:
        raise ShapeError("segment_mean expects a 2-D value tensor")
    n_pos = int(offsets[-1]) if len(offsets) else 0
    if index is None:
        index = np.arange(values.shape[0], dtype=np.int64)
        if n_pos != values.shape[0] or offsets[0] != 0:
            raise ContractViolation("segments must cover all rows")
    index = np.asarray(index, dtype=np.int64)
    if len(index) != n_pos or offsets[0] != 0:
        raise ContractViolation("offsets do not match index length")
    sizes = np.diff(offsets)
    if np.any(sizes <= 0):
        raise ContractViolation("segment_mean over an empty segment")
    n_seg = len(sizes)
    seg_of = np.repeat(np.arange(n_seg), sizes)
    first = index[offsets[:-1]]
    if weights is None:
        w = np.repeat(1.0 / sizes, sizes)
    else:
        weights = _as_tensor(weights)
        if weights.shape != (n_pos,):
            raise ShapeError("segment weights must have one entry per position")
        w = weights.data
    diffs = values.data[index] - values.data[first][seg_of]
    pool = sp.csr_matrix((w, np.arange(n_pos), offsets), shape=(n_seg, n_pos))
    out = values.data[first] + pool @ diffs

    def back(g):
        n_rows = values.shape[0]
        wsum = np.asarray(pool.sum(axis=1)).ravel()
        spread = sp.csr_matrix((w, index, offsets), shape=(n_seg, n_rows))
        anchor = sp.csr_matrix((1.0 - wsum, first, np.arange(n_seg + 1)), shape=(n_seg, n_rows))
        gv = spread.T @ g + anchor.T @ g
        if weights is None:
            return (gv,)
        gw = np.einsum("kd,kd->k", g[seg_of], diffs)
        return (gv, gw)

    inputs = (values,) if weights is None else (values, weights)
    return _result("segment_mean", out, inputs, back)


def segment_softmax(scores, offsets) -> Tensor:
    """Softmax of a 1-D score vector within each segment."""
    scores = _as_tensor(scores)
    offsets = np.asarray(offsets, dtype=np.int64)
    sizes = np.diff(offsets)
    if np.any(sizes <= 0):
        raise ContractViolation("segment_softmax over an empty segment")
    seg_of = np.repeat(np.arange(len(sizes)), sizes)
    starts = offsets[:-1]
    shift = np.maximum.reduceat(scores.data, starts)
    e = np.exp(scores.data - shift[seg_of])
    denom = np.add.reduceat(e, starts)
    a = e / denom[seg_of]

    def back(g):
        dot = np.add.reduceat(g * a, starts)
        return (a * (g - dot[seg_of]),)

    return _result("segment_softmax", a, (scores,), back)


def scaled_sum(vectors: Sequence, scales: Sequence) -> Tensor:
    """Sum over ``i`` of ``scales[i]`` (a length-d vector, broadcast over rows)
    times ``vectors[i]`` (n x d)."""
    if not vectors or len(vectors) != len(scales):
        raise ShapeError("scaled_sum needs equal, non-empty lists")
    vectors = [_as_tensor(v) for v in vectors]
    scales = [_as_tensor(s) for s in scales]
    shape = vectors[0].shape
    for v, s in zip(vectors, scales):
        if v.shape != shape or s.shape != (shape[1],):
            raise ShapeError(f"scaled_sum: {v.shape} / {s.shape} against {shape}")
    out = np.zeros(shape)
    for v, s in zip(vectors, scales):
        out = out + v.data * s.data

    def back(g):
        gv = [g * s.data for s in scales]
        gs = [(g * v.data).sum(axis=0) for v in vectors]
        return tuple(gv + gs)

    return _result("scaled_sum", out, vectors + scales, back)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _result("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x, slope=0.2) -> Tensor:
    x = _as_tensor(x)
    factor = np.where(x.data > 0, 1.0, slope)
    return _result("leaky_relu", x.data * factor, (x,), lambda g: (g * factor,))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = _stable_sigmoid(x.data)
    return _result("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def _stable_sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def dropout(x, rate, training, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; identity when not training or when ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ContractViolation(f"dropout rate must be in [0, 1), got {rate}")
    x = _as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractViolation("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def gather(x, idx) -> Tensor:
    """Rows (or entries, for 1-D ``x``) at ``idx``."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result("gather", x.data[idx], (x,), back)


def concat_rows(parts: Sequence) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if len({p.shape[1:] for p in parts}) != 1:
        raise ShapeError("concat_rows: trailing shapes differ")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _result("concat_rows", np.concatenate([p.data for p in parts], axis=0), parts, back)


def matvec(x, q) -> Tensor:
    """``x @ q`` for x (n x d), q (d,)."""
    x, q = _as_tensor(x), _as_tensor(q)
    if x.data.ndim != 2 or q.shape != (x.shape[1],):
        raise ShapeError(f"matvec: {x.shape} @ {q.shape}")
    return _result("matvec", x.data @ q.data, (x, q), lambda g: (np.outer(g, q.data), x.data.T @ g))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def slice_vector(x, start, stop) -> Tensor:
    x = _as_tensor(x)

    def back(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _result("slice", x.data[start:stop], (x,), back)


def distmult(hu, hv, w) -> Tensor:
    """Row-wise bilinear score ``sum_i hu[i] * w[i] * hv[i]``."""
    hu, hv, w = _as_tensor(hu), _as_tensor(hv), _as_tensor(w)
    if hu.shape != hv.shape or hu.shape[-1:] != w.shape:
        raise ShapeError(f"distmult: {hu.shape}, {hv.shape}, {w.shape}")
    out = (hu.data * w.data * hv.data).sum(axis=-1)

    def back(g):
        g = np.asarray(g)[..., None]
        gw = g * hu.data * hv.data
        return (g * w.data * hv.data, g * w.data * hu.data, gw.reshape(-1, w.shape[0]).sum(axis=0))

    return _result("distmult", out, (hu, hv, w), back)


def total(x, weights=None) -> Tensor:
    """Sum of all entries, optionally weighted elementwise by a constant array."""
    x = _as_tensor(x)
    wts = np.ones_like(x.data) if weights is None else np.asarray(weights, dtype=np.float64)
    return _result("total", np.array(float((x.data * wts).sum())), (x,), lambda g: (g * wts,))


def scale(x, alpha: float) -> Tensor:
    x = _as_tensor(x)
    return _result("scale", alpha * x.data, (x,), lambda g: (alpha * g,))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under row-wise softmax."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, C = logits.shape
    if labels.shape != (n,):
        raise ShapeError("one label per logit row required")
    if np.any(labels < 0) or np.any(labels >= C):
        raise ContractViolation(f"labels must lie in [0, {C})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(n), labels]))

    def back(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _result("softmax_cross_entropy", np.array(loss), (logits,), back)


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def bce_with_logits(pos_scores, neg_scores) -> Tensor:
    """``-mean(log sigmoid(pos)) - mean(log sigmoid(-neg))``."""
    pos, neg = _as_tensor(pos_scores), _as_tensor(neg_scores)
    if pos.data.size == 0:
        raise ContractViolation("bce_with_logits needs at least one positive score")
    loss = -np.mean(_log_sigmoid(pos.data))
    if neg.data.size:
        loss = loss - np.mean(_log_sigmoid(-neg.data))

    def back(g):
        gp = -g * _stable_sigmoid(-pos.data) / pos.data.size
        gn = g * _stable_sigmoid(neg.data) / max(neg.data.size, 1)
        return (gp, gn)

    return _result("bce_with_logits", np.array(float(loss)), (pos, neg), back)


# ---------------------------------------------------------------- backward

def backward(tape: Tape, loss: Tensor, leaves: Optional[Sequence[Tensor]] = None) -> dict:
    """Reverse accumulation from a scalar ``loss``.

    Returns ``{leaf: gradient}`` for every requires-grad tensor on the tape that
    no recorded op produced, plus any explicitly listed ``leaves`` (zero when
    unused). Gradients are also stored on ``leaf.grad``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {loss: np.ones_like(loss.data)}
    produced, seen = set(), set()
    found = []
    for op in tape.ops:
        produced.add(op.output)
        for t in op.inputs:
            if t.requires_grad and t not in produced and t not in seen:
                seen.add(t)
                found.append(t)
    for op in reversed(tape.ops):
        g = grads.pop(op.output, None)
        if g is None:
            continue
        for t, gt in zip(op.inputs, op.backward(g)):
            if gt is None or not t.requires_grad:
                continue
            if t in grads:
                grads[t] = grads[t] + gt
            else:
                grads[t] = np.asarray(gt, dtype=np.float64)
    out = {}
    for leaf in found + [t for t in (leaves or []) if t not in seen]:
        g = grads.get(leaf)
        out[leaf] = np.zeros_like(leaf.data) if g is None else g.reshape(leaf.shape)
        leaf.grad = out[leaf]
    return out


def grad_check(f: Callable[[], Tensor], leaves: Sequence[Tensor], max_coords=200, seed=0) -> float:
    """Largest relative error between backward gradients and central finite
    differences, over up to ``max_coords`` sampled coordinates per leaf.

    The step is ``1e-5 * (1 + |x|)``; the error for one coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1)``.
    ``f`` must be deterministic and rebuild the computation on each call.
    """
    with Tape() as tape:
        loss = f()
    grads = backward(tape, loss, leaves)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for leaf in leaves:
        flat = leaf.data.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        analytic = grads[leaf].reshape(-1)
        for i in coords:
            x0 = flat[i]
            h = 1e-5 * (1.0 + abs(x0))
            flat[i] = x0 + h
            up = float(f().data)
            flat[i] = x0 - h
            down = float(f().data)
            flat[i] = x0
            numeric = (up - down) / (2 * h)
            err = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), 1.0)
            worst = max(worst, err)
    return worst
