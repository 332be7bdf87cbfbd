"""Minimal reverse-mode autodiff over dense rank-4 float64 tensors.

Only the primitives needed by the histogram networks are provided: 1x1
convolution, elementwise abs/relu, global average pooling, channel
concatenation with spatial broadcast, fully connected layers, a softmax
cross-entropy head and SGD with momentum and per-entry update locks.

All tensors are (N, C, H, W) float64 arrays. Ops are recorded on a global
tape in forward order; `backward` replays the tape in exact reverse order,
so gradient accumulation order is deterministic.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

IGNORE_LABEL = 255


class ShapeError(ValueError):
    """Raised when tensor shapes do not satisfy an op's contract."""


# --------------------------------------------------------------------------
# tape

class _TapeState(threading.local):
    """Per-thread op tape, so independent graphs may run on separate threads."""

    def __init__(self):
        self.tape: list["Tensor"] = []
        # When not None, abs/relu/histogram hinges append their pre-hinge
        # values here so a finite-difference checker can detect kink crossings.
        self.hinges: list[np.ndarray] | None = None


_STATE = _TapeState()


def reset_tape() -> None:
    _STATE.tape.clear()


def _record(t: "Tensor") -> None:
    _STATE.tape.append(t)


def _record_hinge(pre: np.ndarray) -> None:
    if _STATE.hinges is not None:
        _STATE.hinges.append(pre.ravel().copy())


class hinge_trace:
    """Context manager collecting pre-hinge values of abs/relu/histogram ops."""

    def __enter__(self) -> list[np.ndarray]:
        self._prev = _STATE.hinges
        _STATE.hinges = []
        return _STATE.hinges

    def __exit__(self, *exc) -> None:
        _STATE.hinges = self._prev


def backward(loss: "Tensor") -> None:
    """Seed the scalar loss with gradient 1 and replay the tape in reverse."""
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar tensor, got shape {loss.shape}")
    loss.grad[...] = 1.0
    for t in reversed(_STATE.tape):
        if t._backward is not None:
            t._backward()
    _STATE.tape.clear()


# --------------------------------------------------------------------------
# tensors

class Tensor:
    """Dense rank-4 float64 array with a gradient slot."""

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are rank-4 (N,C,H,W), got shape {arr.shape}")
        self.data = arr
        self.grad = np.zeros_like(arr)
        self._backward = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class Parameter(Tensor):
    """Tensor with an update-lock mask and a momentum buffer.

    Entries where lock_mask == 0 are structurally frozen: the optimizer
    never writes them, whatever the gradient says.
    """

    def __init__(self, value, lock_mask=None, name: str = ""):
        super().__init__(value)
        if lock_mask is None:
            self.lock_mask = np.ones_like(self.data)
        else:
            self.lock_mask = np.asarray(lock_mask, dtype=np.float64).reshape(self.data.shape)
        self.momentum_buf = np.zeros_like(self.data)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape})"


def _node(data: np.ndarray, backward_fn) -> Tensor:
    out = Tensor(data)
    out._backward = backward_fn
    _record(out)
    return out


# --------------------------------------------------------------------------
# primitives

def conv1x1(x: Tensor, weight: Parameter, bias: Parameter) -> Tensor:
    """Channel-mixing 1x1 convolution: out[n,o,i,j] = sum_c w[o,c] x[n,c,i,j] + b[o]."""
    n, cin, h, w = x.shape
    cout, cin_w = weight.shape[0], weight.shape[1]
    if cin_w != cin:
        raise ShapeError(
            f"conv1x1 weight expects {cin_w} input channels, input has {cin} "
            f"(input {x.shape}, weight {weight.shape})"
        )
    if bias.shape[0] != cout:
        raise ShapeError(f"conv1x1 bias has {bias.shape[0]} entries, weight has {cout} outputs")
    w2 = weight.data[:, :, 0, 0]
    out = np.tensordot(w2, x.data, axes=([1], [1])).transpose(1, 0, 2, 3)
    out += bias.data.reshape(1, cout, 1, 1)

    def _bw(out_t=None):
        g = node.grad
        x.grad += np.tensordot(w2.T, g, axes=([1], [1])).transpose(1, 0, 2, 3)
        weight.grad[:, :, 0, 0] += np.einsum("nohw,nchw->oc", g, x.data)
        bias.grad += g.sum(axis=(0, 2, 3)).reshape(bias.shape)

    node = _node(out, _bw)
    return node


def fully_connected(x: Tensor, weight: Parameter, bias: Parameter) -> Tensor:
    """Affine map on (N, D, 1, 1) vectors; weight is (Dout, D, 1, 1)."""
    n, d, h, w = x.shape
    if (h, w) != (1, 1):
        raise ShapeError(f"fully_connected expects spatial 1x1 input, got {x.shape}")
    return conv1x1(x, weight, bias)


def abs_elem(x: Tensor) -> Tensor:
    """Elementwise |x|; subgradient at 0 is 0."""
    _record_hinge(x.data)
    sgn = np.sign(x.data)

    def _bw():
        x.grad += sgn * node.grad

    node = _node(np.abs(x.data), _bw)
    return node


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at 0 is 0."""
    _record_hinge(x.data)
    mask = x.data > 0

    def _bw():
        x.grad += mask * node.grad

    node = _node(np.where(mask, x.data, 0.0), _bw)
    return node


def global_avg_pool(x: Tensor) -> Tensor:
    """Channel-wise spatial mean, (N,C,H,W) -> (N,C,1,1)."""
    n, c, h, w = x.shape
    if h * w < 1:
        raise ShapeError(f"global_avg_pool needs a nonempty spatial extent, got {x.shape}")
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def _bw():
        x.grad += node.grad / (h * w)

    node = _node(out, _bw)
    return node


def broadcast_concat(features: Tensor, context: Tensor) -> Tensor:
    """Tile a (N,D,1,1) context to every position of (N,C,H,W) and concat channels."""
    n, c, h, w = features.shape
    n2, d = context.shape[0], context.shape[1]
    if n2 != n:
        raise ShapeError(f"batch mismatch: features {features.shape} vs context {context.shape}")
    if context.shape[2] != 1 or context.shape[3] != 1:
        raise ShapeError(f"context must be (N,D,1,1), got {context.shape}")
    tiled = np.broadcast_to(context.data, (n, d, h, w))
    out = np.concatenate([features.data, tiled], axis=1)

    def _bw():
        g = node.grad
        features.grad += g[:, :c]
        context.grad += g[:, c:].sum(axis=(2, 3), keepdims=True)

    node = _node(out, _bw)
    return node


def _softmax_channels(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax(logits: Tensor) -> Tensor:
    """Channel softmax at every spatial position."""
    p = _softmax_channels(logits.data)

    def _bw():
        g = node.grad
        logits.grad += p * (g - (g * p).sum(axis=1, keepdims=True))

    node = _node(p, _bw)
    return node


def softmax_xent(logits: Tensor, labels: np.ndarray):
    """Per-position softmax cross-entropy.

    labels is an integer (N,H,W) map; IGNORE_LABEL positions are excluded
    from the loss. Returns (scalar loss, probability tensor); both are graph
    nodes, so gradients flow into the logits from either.
    """
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    valid = labels != IGNORE_LABEL
    if np.any((labels < 0) | ((labels >= k) & valid)):
        bad = labels[(labels < 0) | ((labels >= k) & valid)]
        raise ValueError(f"labels out of range [0,{k}): {np.unique(bad)}")
    count = int(valid.sum())
    if count == 0:
        raise ValueError("all positions carry the ignore label")

    probs = softmax(logits)
    p = probs.data
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(p, safe[:, None], axis=1)[:, 0]
    logp = np.log(picked, where=picked > 0, out=np.full_like(picked, -745.0))
    loss_val = -(logp * valid).sum() / count

    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)

    def _bw():
        g = loss_node.grad.reshape(-1)[0]
        logits.grad += (p - onehot) * valid[:, None] * (g / count)

    loss_node = _node(np.full((1, 1, 1, 1), loss_val), _bw)
    return loss_node, probs


def scalar_mean(terms: list[Tensor]) -> Tensor:
    """Mean of scalar tensors (used to aggregate per-stage losses)."""
    if not terms:
        raise ValueError("scalar_mean of an empty list")
    total = sum(t.item() for t in terms) / len(terms)

    def _bw():
        g = node.grad / len(terms)
        for t in terms:
            t.grad += g

    node = _node(np.full((1, 1, 1, 1), total), _bw)
    return node


def mean_tensors(terms: list[Tensor]) -> Tensor:
    """Elementwise mean of same-shape tensors (stage-probability averaging)."""
    if not terms:
        raise ValueError("mean_tensors of an empty list")
    out = terms[0].data.copy()
    for t in terms[1:]:
        out += t.data
    out /= len(terms)

    def _bw():
        g = node.grad / len(terms)
        for t in terms:
            t.grad += g

    node = _node(out, _bw)
    return node


# --------------------------------------------------------------------------
# optimization

def sgd_step(params: list[Parameter], lr: float, momentum: float = 0.0) -> None:
    """buf <- momentum*buf + grad; value <- value - lr*(buf * lock_mask).

    Locked entries (lock_mask == 0) are bit-identical before and after.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must lie in [0,1), got {momentum}")
    for p in params:
        p.momentum_buf *= momentum
        p.momentum_buf += p.grad
        step = p.momentum_buf * p.lock_mask
        step *= lr
        p.data -= step


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


# --------------------------------------------------------------------------
# finite-difference checking

@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    n_checked: int
    skipped: list = field(default_factory=list)


def _hinge_crossed(trace_a, trace_b, margin: float) -> bool:
    """True if the +-eps passes straddle a hinge anywhere the wiggled entry
    actually influences: a side flip, or a moving pre-hinge value inside the
    margin. Hinge inputs identical in both passes are unaffected and safe."""
    for pa, pb in zip(trace_a, trace_b):
        if np.any((pa > 0) != (pb > 0)):
            return True
        moved = pa != pb
        if np.any(moved & ((np.abs(pa) < margin) | (np.abs(pb) < margin))):
            return True
    return False


def grad_check(loss_fn, wiggle: Parameter, eps: float = 1e-4,
               kink_margin: float = 1e-3, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckResult:
    """Compare the analytic gradient of `loss_fn` w.r.t. `wiggle` against
    central finite differences, entry by entry.

    Entries whose +-eps forward passes land near or across an abs/relu/
    histogram hinge are skipped and reported rather than failed. Relative
    error uses a 1e-3 denominator floor so near-zero gradients compare
    absolutely.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")

    reset_tape()
    wiggle.zero_grad()
    loss = loss_fn()
    backward(loss)
    analytic = wiggle.grad.copy()

    indices = list(np.ndindex(wiggle.data.shape))
    if max_entries is not None and len(indices) > max_entries:
        if rng is None:
            rng = np.random.default_rng(0)
        chosen = rng.choice(len(indices), size=max_entries, replace=False)
        indices = [indices[i] for i in sorted(chosen)]

    max_rel = 0.0
    skipped = []
    checked = 0
    for idx in indices:
        orig = wiggle.data[idx]
        wiggle.data[idx] = orig + eps
        reset_tape()
        with hinge_trace() as tr_plus:
            f_plus = loss_fn().item()
        wiggle.data[idx] = orig - eps
        reset_tape()
        with hinge_trace() as tr_minus:
            f_minus = loss_fn().item()
        wiggle.data[idx] = orig

        if _hinge_crossed(tr_plus, tr_minus, kink_margin):
            skipped.append(idx)
            continue
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = analytic[idx]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
        max_rel = max(max_rel, rel)
        checked += 1
    reset_tape()
    return GradCheckResult(wiggle.name or "param", max_rel, checked, skipped)
