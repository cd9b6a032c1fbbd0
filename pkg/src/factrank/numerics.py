"""Define-by-run reverse-mode differentiation on 64-bit numpy arrays.

A :class:`Tape` records every primitive applied to tensors that
(transitively) require gradients. ``Tape.backward`` walks the records once,
in reverse, accumulating into ``Tensor.grad``. Tapes are rebuilt for every
forward pass and each tape can be differentiated exactly once; a second
``backward`` call is rejected.

The primitive set is deliberately small: matrix product, addition with a
row-broadcast bias, last-axis concatenation and slicing, tanh / sigmoid /
Hadamard product, embedding-row gather, inverted dropout, softmax and
binary cross-entropy, cosine similarity (single pair and batched rows),
and the structured hinge used for margin training.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateInputError, ShapeError, UsageError

Array = np.ndarray


class Tensor:
    """A shaped float64 array with an optional gradient buffer.

    Leaf tensors created with ``requires_grad=True`` own a zero-filled
    gradient buffer from the start, so parameters untouched by a forward
    pass still report an all-zero gradient after ``backward``.
    """

    __slots__ = ("values", "requires_grad", "grad", "tape")

    def __init__(self, values, requires_grad: bool = False, tape: "Tape | None" = None):
        self.values: Array = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Array | None = (
            np.zeros_like(self.values) if requires_grad and tape is None else None
        )
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(values) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(values, requires_grad=True)


def constant(values) -> Tensor:
    """A non-trainable leaf tensor."""
    return Tensor(values, requires_grad=False)


def _accumulate(t: Tensor, g: Array) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += g


def _sum_to_shape(g: Array, shape: tuple[int, ...]) -> Array:
    """Undo numpy broadcasting: reduce ``g`` down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def stable_sigmoid(z: Array) -> Array:
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[Array], None]]] = []
        self._spent = False

    def __len__(self) -> int:
        return len(self._records)

    def _emit(self, values: Array, inputs: Sequence[Tensor], backward) -> Tensor:
        needs = any(i.requires_grad for i in inputs)
        out = Tensor(values, requires_grad=needs, tape=self if needs else None)
        if needs:
            self._records.append((out, backward))
        return out

    # ------------------------------------------------------------------
    # primitives
    # ------------------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
        values = a.values @ b.values

        def backward(g: Array) -> None:
            if a.requires_grad:
                _accumulate(a, g @ b.values.T)
            if b.requires_grad:
                _accumulate(b, a.values.T @ g)

        return self._emit(values, (a, b), backward)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise sum; ``b`` may be a bias vector broadcast over rows of ``a``."""
        bias = False
        if a.shape == b.shape:
            pass
        elif a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
            bias = True
        else:
            raise ShapeError(f"add shapes incompatible: {a.shape} + {b.shape}")
        values = a.values + b.values

        def backward(g: Array) -> None:
            if a.requires_grad:
                _accumulate(a, g)
            if b.requires_grad:
                _accumulate(b, g.sum(axis=0) if bias else g)

        return self._emit(values, (a, b), backward)

    def concat(self, parts: Sequence[Tensor]) -> Tensor:
        """Concatenate along the last axis."""
        if not parts:
            raise UsageError("concat needs at least one tensor")
        ndim = parts[0].ndim
        lead = parts[0].shape[:-1]
        for p in parts:
            if p.ndim != ndim or p.shape[:-1] != lead:
                raise ShapeError(
                    f"concat parts disagree on non-concat dims: {[p.shape for p in parts]}"
                )
        values = np.concatenate([p.values for p in parts], axis=-1)

        def backward(g: Array) -> None:
            start = 0
            for p in parts:
                width = p.shape[-1]
                if p.requires_grad:
                    _accumulate(p, g[..., start : start + width])
                start += width

        return self._emit(values, tuple(parts), backward)

    def slice_cols(self, x: Tensor, start: int, stop: int) -> Tensor:
        if x.ndim != 2:
            raise ShapeError(f"slice_cols needs a 2-d tensor, got {x.shape}")
        if not (0 <= start < stop <= x.shape[1]):
            raise UsageError(f"bad column range [{start}:{stop}] for shape {x.shape}")
        values = x.values[:, start:stop].copy()

        def backward(g: Array) -> None:
            if x.requires_grad:
                if x.grad is None:
                    x.grad = np.zeros_like(x.values)
                x.grad[:, start:stop] += g

        return self._emit(values, (x,), backward)

    def tanh(self, x: Tensor) -> Tensor:
        values = np.tanh(x.values)

        def backward(g: Array) -> None:
            if x.requires_grad:
                _accumulate(x, g * (1.0 - values * values))

        return self._emit(values, (x,), backward)

    def sigmoid(self, x: Tensor) -> Tensor:
        values = stable_sigmoid(x.values)

        def backward(g: Array) -> None:
            if x.requires_grad:
                _accumulate(x, g * values * (1.0 - values))

        return self._emit(values, (x,), backward)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        """Hadamard product with numpy broadcasting."""
        try:
            values = a.values * b.values
        except ValueError as exc:
            raise ShapeError(f"mul shapes incompatible: {a.shape} * {b.shape}") from exc

        def backward(g: Array) -> None:
            if a.requires_grad:
                _accumulate(a, _sum_to_shape(g * b.values, a.shape))
            if b.requires_grad:
                _accumulate(b, _sum_to_shape(g * a.values, b.shape))

        return self._emit(values, (a, b), backward)

    def tensor_sum(self, x: Tensor) -> Tensor:
        values = np.asarray(x.values.sum())

        def backward(g: Array) -> None:
            if x.requires_grad:
                _accumulate(x, np.full_like(x.values, float(g)))

        return self._emit(values, (x,), backward)

    def embedding(self, table: Tensor, ids) -> Tensor:
        """Gather rows of ``table``; backward scatter-adds into the table."""
        ids = np.asarray(ids, dtype=np.intp)
        if table.ndim != 2:
            raise ShapeError(f"embedding table must be 2-d, got {table.shape}")
        if ids.ndim != 1:
            raise ShapeError(f"embedding ids must be 1-d, got {ids.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise UsageError("embedding id out of range")
        values = table.values[ids]

        def backward(g: Array) -> None:
            if table.requires_grad:
                if table.grad is None:
                    table.grad = np.zeros_like(table.values)
                np.add.at(table.grad, ids, g)

        return self._emit(values, (table,), backward)

    def dropout(self, x: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
        """Inverted dropout: survivors scaled by 1/(1-rate); identity in eval mode."""
        if not 0.0 <= rate < 1.0:
            raise UsageError(f"dropout rate must be in [0, 1), got {rate}")
        if not train or rate == 0.0:
            return x
        if rng is None:
            raise UsageError("train-mode dropout needs an rng")
        mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
        values = x.values * mask

        def backward(g: Array) -> None:
            if x.requires_grad:
                _accumulate(x, g * mask)

        return self._emit(values, (x,), backward)

    def softmax_cross_entropy(self, logits: Tensor, labels) -> Tensor:
        """Mean negative log-likelihood of integer class labels."""
        labels = np.asarray(labels, dtype=np.intp)
        if logits.ndim != 2:
            raise ShapeError(f"logits must be 2-d, got {logits.shape}")
        n, k = logits.shape
        if labels.shape != (n,):
            raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise UsageError(f"class label out of range [0, {k})")
        shifted = logits.values - logits.values.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        total = exp.sum(axis=1)
        softmax = exp / total[:, None]
        rows = np.arange(n)
        values = np.asarray((np.log(total) - shifted[rows, labels]).mean())

        def backward(g: Array) -> None:
            if logits.requires_grad:
                d = softmax.copy()
                d[rows, labels] -= 1.0
                _accumulate(logits, (float(g) / n) * d)

        return self._emit(values, (logits,), backward)

    def binary_cross_entropy(self, logits: Tensor, labels) -> Tensor:
        """Mean stabilized sigmoid cross-entropy over 0/1 labels."""
        y = np.asarray(labels, dtype=np.float64).reshape(-1)
        z = logits.values.reshape(-1)
        if y.shape != z.shape:
            raise ShapeError(f"labels shape {y.shape} does not match logits {z.shape}")
        if y.size and not np.all((y == 0.0) | (y == 1.0)):
            raise UsageError("binary labels must be 0 or 1")
        per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
        values = np.asarray(per.mean())

        def backward(g: Array) -> None:
            if logits.requires_grad:
                d = (stable_sigmoid(z) - y) * (float(g) / z.size)
                _accumulate(logits, d.reshape(logits.shape))

        return self._emit(values, (logits,), backward)

    def cosine_similarity(self, u: Tensor, v: Tensor) -> Tensor:
        if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
            raise ShapeError(f"cosine needs matching 1-d tensors, got {u.shape}, {v.shape}")
        nu = float(np.linalg.norm(u.values))
        nv = float(np.linalg.norm(v.values))
        if nu == 0.0 or nv == 0.0:
            raise DegenerateInputError("cosine similarity of a zero-norm vector")
        s = float(np.dot(u.values, v.values) / (nu * nv))

        def backward(g: Array) -> None:
            gs = float(g)
            if u.requires_grad:
                _accumulate(u, gs * (v.values / (nu * nv) - s * u.values / (nu * nu)))
            if v.requires_grad:
                _accumulate(v, gs * (u.values / (nu * nv) - s * v.values / (nv * nv)))

        return self._emit(np.asarray(s), (u, v), backward)

    def cosine_rows(self, x: Tensor, rows: Array) -> Tensor:
        """Cosine of each batch row of ``x`` against a constant candidate block.

        ``rows`` has shape (batch, candidates, dim) and carries no gradient; a
        zero-norm candidate row scores ``-inf`` and receives no gradient flow.
        """
        rows = np.asarray(rows, dtype=np.float64)
        if x.ndim != 2 or rows.ndim != 3:
            raise ShapeError(f"cosine_rows needs (b,d) x (b,c,d), got {x.shape}, {rows.shape}")
        if rows.shape[0] != x.shape[0] or rows.shape[2] != x.shape[1]:
            raise ShapeError(f"cosine_rows shapes disagree: {x.shape} vs {rows.shape}")
        xnorm = np.linalg.norm(x.values, axis=1)
        if np.any(xnorm == 0.0):
            raise DegenerateInputError("cosine_rows got a zero-norm query row")
        rnorm = np.linalg.norm(rows, axis=2)
        valid = rnorm > 0.0
        safe_rnorm = np.where(valid, rnorm, 1.0)
        raw = np.einsum("bd,bcd->bc", x.values, rows)
        scores = np.where(valid, raw / (safe_rnorm * xnorm[:, None]), -np.inf)

        def backward(g: Array) -> None:
            if not x.requires_grad:
                return
            gv = np.where(valid, g, 0.0)
            w = gv / (safe_rnorm * xnorm[:, None])
            direct = np.einsum("bc,bcd->bd", w, rows)
            finite_scores = np.where(valid, scores, 0.0)
            along = (gv * finite_scores).sum(axis=1) / (xnorm * xnorm)
            _accumulate(x, direct - along[:, None] * x.values)

        return self._emit(scores, (x,), backward)

    def hinge(self, scores: Tensor, gt_index: int, margin: float = 1.0) -> Tensor:
        """Structured hinge over one candidate set.

        ``max_j(task_loss_j + s_j) - s_gt`` with task loss ``margin`` for every
        candidate except the groundtruth (task loss 0 there), so the result is
        never negative. The subgradient touches only the argmax candidate and
        the groundtruth entry.
        """
        if scores.ndim != 1:
            raise ShapeError(f"hinge needs a 1-d score vector, got {scores.shape}")
        n = scores.shape[0]
        if not 0 <= gt_index < n:
            raise UsageError(f"gt_index {gt_index} out of range for {n} candidates")
        if not np.isfinite(scores.values[gt_index]):
            raise DegenerateInputError("groundtruth candidate has a non-finite score")
        aug = scores.values + margin
        aug[gt_index] = scores.values[gt_index]
        j = int(np.argmax(aug))
        values = np.asarray(aug[j] - scores.values[gt_index])

        def backward(g: Array) -> None:
            if scores.requires_grad:
                gs = float(g)
                d = np.zeros(n)
                d[j] += gs
                d[gt_index] -= gs
                _accumulate(scores, d)

        return self._emit(values, (scores,), backward)

    def hinge_mean(self, scores: Tensor, gt_indices, margin: float = 1.0) -> Tensor:
        """Mean structured hinge over a batch of candidate rows."""
        gts = np.asarray(gt_indices, dtype=np.intp)
        if scores.ndim != 2:
            raise ShapeError(f"hinge_mean needs a 2-d score matrix, got {scores.shape}")
        b, n = scores.shape
        if gts.shape != (b,):
            raise ShapeError(f"gt_indices shape {gts.shape} does not match batch {b}")
        if gts.size and (gts.min() < 0 or gts.max() >= n):
            raise UsageError("gt index out of range")
        rows = np.arange(b)
        if not np.all(np.isfinite(scores.values[rows, gts])):
            raise DegenerateInputError("a groundtruth candidate has a non-finite score")
        aug = scores.values + margin
        aug[rows, gts] = scores.values[rows, gts]
        j = np.argmax(aug, axis=1)
        values = np.asarray((aug[rows, j] - scores.values[rows, gts]).mean())

        def backward(g: Array) -> None:
            if scores.requires_grad:
                gs = float(g) / b
                d = np.zeros_like(scores.values)
                np.add.at(d, (rows, j), gs)
                np.add.at(d, (rows, gts), -gs)
                _accumulate(scores, d)

        return self._emit(values, (scores,), backward)

    # ------------------------------------------------------------------
    # reverse pass
    # ------------------------------------------------------------------

    def backward(self, loss: Tensor) -> None:
        """Populate gradients for everything reachable from ``loss``.

        Each record is visited exactly once in reverse order. A tape can be
        differentiated only once; rebuild the forward pass to differentiate
        again.
        """
        if loss.tape is not self:
            raise UsageError("loss tensor was not produced on this tape")
        if loss.values.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._spent:
            raise UsageError("tape already differentiated; rebuild the forward pass")
        self._spent = True
        loss.grad = np.ones_like(loss.values)
        for out, bwd in reversed(self._records):
            if out.grad is not None:
                bwd(out.grad)


def zero_grads(params) -> None:
    """Reset gradient buffers of an iterable or mapping of tensors."""
    values = params.values() if hasattr(params, "values") else params
    for p in values:
        if p.grad is None:
            p.grad = np.zeros_like(p.values)
        else:
            p.grad[...] = 0.0
