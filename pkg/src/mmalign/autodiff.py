"""Minimal reverse-mode autodiff over dense 2-D float64 matrices.

A Tape records every differentiable operation in forward order; backward()
replays the records strictly in reverse, accumulating gradients additively
into each tensor's .grad buffer. Parameters are plain DiffTensors with
requires_grad=True that survive across tapes, so separate backward passes
accumulate (the basis of gradient accumulation in the training loop).

Everything is 2-D: vectors are (n, 1) or (1, n) matrices. Broadcasting is
limited to row/column vectors in add().
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError


class DiffTensor:
    """A dense matrix plus an additively-accumulated gradient buffer."""

    __slots__ = ("values", "grad", "requires_grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise DimensionError(f"DiffTensor: expected 2-D values, got ndim={arr.ndim}")
        self.values = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"DiffTensor{tag}{self.values.shape} requires_grad={self.requires_grad}"


def constant(values, name: str = "") -> DiffTensor:
    return DiffTensor(values, requires_grad=False, name=name)


def parameter(values, name: str = "") -> DiffTensor:
    return DiffTensor(values, requires_grad=True, name=name)


def _needs_grad(*tensors: DiffTensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _out(values, inputs: Sequence[DiffTensor]) -> DiffTensor:
    return DiffTensor(values, requires_grad=_needs_grad(*inputs))


class Tape:
    """Ordered record of operations; backward() runs them in exact reverse."""

    def __init__(self):
        self._records: list[tuple[DiffTensor, Callable[[np.ndarray], None]]] = []

    def _record(self, out: DiffTensor, backward_fn) -> DiffTensor:
        if out.requires_grad:
            self._records.append((out, backward_fn))
        return out

    def backward(self, loss: DiffTensor):
        if loss.shape != (1, 1):
            raise DimensionError(f"backward: loss must be 1x1, got {loss.shape}")
        if not loss.requires_grad:
            return
        loss.grad[...] = 1.0
        for out, backward_fn in reversed(self._records):
            backward_fn(out.grad)

    # -- primitives ---------------------------------------------------------

    def matmul(self, a: DiffTensor, b: DiffTensor, transpose_b: bool = False) -> DiffTensor:
        bn, bm = (b.shape[1], b.shape[0]) if transpose_b else b.shape
        if a.shape[1] != bn:
            raise DimensionError(f"matmul: inner dims {a.shape} x {b.shape} (transpose_b={transpose_b})")
        vals = a.values @ (b.values.T if transpose_b else b.values)
        out = _out(vals, (a, b))

        def backward_fn(g):
            if a.requires_grad:
                a.grad += g @ (b.values if transpose_b else b.values.T)
            if b.requires_grad:
                b.grad += (g.T @ a.values) if transpose_b else (a.values.T @ g)

        return self._record(out, backward_fn)

    def add(self, a: DiffTensor, b: DiffTensor) -> DiffTensor:
        try:
            vals = a.values + b.values
        except ValueError:
            raise DimensionError(f"add: incompatible shapes {a.shape} + {b.shape}") from None

        def reduce_to(g, shape):
            if g.shape == shape:
                return g
            if shape[0] == 1 and g.shape[0] > 1:
                g = g.sum(axis=0, keepdims=True)
            if shape[1] == 1 and g.shape[1] > 1:
                g = g.sum(axis=1, keepdims=True)
            if g.shape != shape:
                raise DimensionError(f"add: cannot reduce grad {g.shape} to {shape}")
            return g

        out = _out(vals, (a, b))

        def backward_fn(g):
            if a.requires_grad:
                a.grad += reduce_to(g, a.shape)
            if b.requires_grad:
                b.grad += reduce_to(g, b.shape)

        return self._record(out, backward_fn)

    def scale(self, a: DiffTensor, c: float) -> DiffTensor:
        out = _out(a.values * c, (a,))

        def backward_fn(g):
            if a.requires_grad:
                a.grad += g * c

        return self._record(out, backward_fn)

    def scale_rows(self, a: DiffTensor, weights: np.ndarray) -> DiffTensor:
        """Multiply row i by the constant weights[i]; no gradient into weights."""
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != a.shape[0]:
            raise DimensionError(f"scale_rows: {w.shape[0]} weights for {a.shape[0]} rows")
        out = _out(a.values * w[:, None], (a,))

        def backward_fn(g):
            if a.requires_grad:
                a.grad += g * w[:, None]

        return self._record(out, backward_fn)

    def relu(self, a: DiffTensor) -> DiffTensor:
        keep = a.values > 0
        out = _out(np.where(keep, a.values, 0.0), (a,))

        def backward_fn(g):
            if a.requires_grad:
                a.grad += g * keep

        return self._record(out, backward_fn)

    def leaky_relu(self, a: DiffTensor, slope: float = 0.2) -> DiffTensor:
        keep = a.values > 0
        out = _out(np.where(keep, a.values, slope * a.values), (a,))

        def backward_fn(g):
            if a.requires_grad:
                a.grad += g * np.where(keep, 1.0, slope)

        return self._record(out, backward_fn)

    def softmax_rows(self, a: DiffTensor) -> DiffTensor:
        shifted = a.values - a.values.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=1, keepdims=True)
        out = _out(p, (a,))

        def backward_fn(g):
            if a.requires_grad:
                inner = (g * p).sum(axis=1, keepdims=True)
                a.grad += p * (g - inner)

        return self._record(out, backward_fn)

    def l2_normalize_rows(self, a: DiffTensor) -> DiffTensor:
        """Normalize each row to unit length; all-zero rows stay zero."""
        norms = np.linalg.norm(a.values, axis=1, keepdims=True)
        safe = np.where(norms > 0, norms, 1.0)
        y = a.values / safe
        out = _out(y, (a,))

        def backward_fn(g):
            if a.requires_grad:
                inner = (g * y).sum(axis=1, keepdims=True)
                a.grad += np.where(norms > 0, (g - y * inner) / safe, 0.0)

        return self._record(out, backward_fn)

    def concat_cols(self, tensors: Sequence[DiffTensor]) -> DiffTensor:
        rows = {t.shape[0] for t in tensors}
        if len(rows) != 1:
            raise DimensionError(f"concat_cols: differing row counts {sorted(rows)}")
        vals = np.concatenate([t.values for t in tensors], axis=1)
        out = _out(vals, tuple(tensors))
        offsets = np.cumsum([0] + [t.shape[1] for t in tensors])

        def backward_fn(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    t.grad += g[:, lo:hi]

        return self._record(out, backward_fn)

    def exp(self, a: DiffTensor) -> DiffTensor:
        e = np.exp(a.values)
        out = _out(e, (a,))

        def backward_fn(g):
            if a.requires_grad:
                a.grad += g * e

        return self._record(out, backward_fn)

    def log(self, a: DiffTensor) -> DiffTensor:
        out = _out(np.log(a.values), (a,))

        def backward_fn(g):
            if a.requires_grad:
                a.grad += g / a.values

        return self._record(out, backward_fn)

    def transpose(self, a: DiffTensor) -> DiffTensor:
        out = _out(a.values.T.copy(), (a,))

        def backward_fn(g):
            if a.requires_grad:
                a.grad += g.T

        return self._record(out, backward_fn)

    def gather_rows(self, a: DiffTensor, indices) -> DiffTensor:
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
            raise DimensionError(f"gather_rows: index out of range for {a.shape[0]} rows")
        out = _out(a.values[idx], (a,))

        def backward_fn(g):
            if a.requires_grad:
                np.add.at(a.grad, idx, g)

        return self._record(out, backward_fn)

    def masked_row_sum(self, a: DiffTensor, mask: np.ndarray) -> DiffTensor:
        """Per-row sum over entries selected by a constant 0/1 mask -> (n, 1)."""
        m = np.asarray(mask, dtype=np.float64)
        if m.shape != a.values.shape:
            raise DimensionError(f"masked_row_sum: mask {m.shape} vs values {a.shape}")
        out = _out((a.values * m).sum(axis=1, keepdims=True), (a,))

        def backward_fn(g):
            if a.requires_grad:
                a.grad += g * m

        return self._record(out, backward_fn)

    def sum_all(self, a: DiffTensor) -> DiffTensor:
        out = _out(np.array([[a.values.sum()]]), (a,))

        def backward_fn(g):
            if a.requires_grad:
                a.grad += g[0, 0]

        return self._record(out, backward_fn)

    def stop_gradient_rows(self, a: DiffTensor, row_mask) -> DiffTensor:
        """Identity forward; backward zeroes the gradient of rows with mask 0."""
        m = np.asarray(row_mask, dtype=np.float64).reshape(-1)
        if m.shape[0] != a.shape[0]:
            raise DimensionError(f"stop_gradient_rows: {m.shape[0]} flags for {a.shape[0]} rows")
        out = _out(a.values, (a,))

        def backward_fn(g):
            if a.requires_grad:
                a.grad += g * m[:, None]

        return self._record(out, backward_fn)


def cosine_similarity_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities; rows with zero norm yield 0 everywhere.

    Plain numpy, never tape-recorded: relevance scoring treats embeddings as
    constants.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"cosine_similarity_matrix: feature dims {a.shape[1]} vs {b.shape[1]}")
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    sims = (a / np.where(na > 0, na, 1.0)) @ (b / np.where(nb > 0, nb, 1.0)).T
    sims[na.reshape(-1) == 0, :] = 0.0
    sims[:, nb.reshape(-1) == 0] = 0.0
    return sims


def finite_difference_check(
    f: Callable[[Tape], DiffTensor],
    params: Sequence[DiffTensor],
    eps: float = 1e-5,
    max_samples: int = 25,
    seed: int = 0,
) -> float:
    """Compare analytic gradients of the scalar f against central differences.

    f must rebuild its computation from the current parameter values on every
    call. Returns the max over sampled coordinates of
    |analytic - central| / max(|analytic|, |central|, 1e-8).
    """

    def evaluate() -> float:
        return float(f(Tape()).values[0, 0])

    tape = Tape()
    for p in params:
        p.zero_grad()
    loss = f(tape)
    if loss.shape != (1, 1):
        raise DimensionError(f"finite_difference_check: f must return a 1x1 scalar, got {loss.shape}")
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, grad in zip(params, analytic):
        n_coords = p.values.size
        if n_coords <= max_samples:
            coords = np.arange(n_coords)
        else:
            coords = rng.choice(n_coords, size=max_samples, replace=False)
        flat = p.values.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            hi = evaluate()
            flat[c] = orig - eps
            lo = evaluate()
            flat[c] = orig
            fd = (hi - lo) / (2.0 * eps)
            an = grad.reshape(-1)[c]
            err = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
