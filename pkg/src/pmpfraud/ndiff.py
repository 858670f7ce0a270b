"""Dense tensors with reverse-mode differentiation over a fixed operator set.

The operator set is deliberately small: exactly what the message passing
model needs (matrix products, elementwise arithmetic, broadcast adds, the
two activations, segment reductions, dropout, concatenation, mean, and a
clamped cross-entropy). Each operator records its inputs and an adjoint
rule on the output tensor; ``backward`` replays the recorded graph once in
reverse topological order, accumulating gradients additively wherever a
value fans out.

Everything is float64 unless a tensor is constructed with an explicit
dtype. Operators validate shapes up front and refuse to emit non-finite
values instead of letting NaN or Inf propagate silently.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "GradientTape",
    "ShapeError",
    "NonFiniteError",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "add_rowvec",
    "row_scale",
    "affine",
    "sigmoid",
    "relu",
    "segment_sum",
    "gather_rows",
    "dropout",
    "concat",
    "mean",
    "binary_cross_entropy",
    "reshape",
    "grad_check",
    "GradCheckReport",
    "save_checkpoint",
    "load_checkpoint",
]

# Probabilities are clamped into this closed interval before any log.
PROB_CLAMP = 1e-12

_SIGMOID_LO = np.finfo(np.float64).tiny
_SIGMOID_HI = np.nextafter(1.0, 0.0)


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested operator."""


class NonFiniteError(ArithmeticError):
    """An operator produced NaN or Inf."""


class Tensor:
    """A dense array plus the adjoint rule of the operator that made it.

    Leaves are constructed directly (parameters pass requires_grad=True);
    every other tensor comes out of an operator below. ``grad`` is filled
    in by ``backward`` and has the same shape as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def _make(data, op: str, parents, vjp):
    """Wrap an operator result, keeping the graph only where gradients flow."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: non-finite result")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _require_2d(x: Tensor, op: str):
    if x.data.ndim != 2:
        raise ShapeError(f"{op}: expected 2-d operand, got shape {x.data.shape}")


def backward(output: Tensor, seed=None, trace=None):
    """Run the reverse pass from ``output``.

    Accumulates into ``.grad`` of every reachable tensor that requires
    gradients. ``seed`` is the upstream gradient of ``output``; omitted, it
    defaults to ones and requires a single-element output. ``trace``, if a
    list, collects the op name of each recorded operation as it is visited
    (each exactly once).
    """
    if not output.requires_grad:
        raise ValueError("backward: output does not depend on any gradient-enabled tensor")
    if seed is None:
        if output.data.size != 1:
            raise ShapeError("backward: implicit seed requires a single-element output")
        seed = np.ones_like(output.data)
    else:
        seed = np.asarray(seed, dtype=output.data.dtype)
        if seed.shape != output.data.shape:
            raise ShapeError(
                f"backward: seed shape {seed.shape} does not match output shape {output.data.shape}"
            )

    # Iterative post-order walk; parents land before children in ``topo``.
    topo = []
    seen = set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    output.grad = seed.copy() if output.grad is None else output.grad + seed
    for node in reversed(topo):
        if node._vjp is None:
            continue
        if trace is not None:
            trace.append(node.op)
        parent_grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


class GradientTape:
    """Named-parameter registry plus one reverse pass over a recorded graph.

    A tape is confined to one logical execution thread; independent tapes
    over disjoint graphs can run concurrently because all state lives on
    the tensors themselves.
    """

    def __init__(self, params: dict):
        for name, p in params.items():
            if not isinstance(p, Tensor) or not p.requires_grad:
                raise ValueError(f"GradientTape: parameter {name!r} is not a gradient-enabled Tensor")
        self.params = dict(params)

    def gradients(self, loss: Tensor, trace=None) -> dict:
        """Zero, run backward from ``loss``, and return grads keyed by name.

        Parameters the loss does not reach get exact zero gradients.
        """
        for p in self.params.values():
            p.grad = None
        backward(loss, trace=trace)
        return {
            name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in self.params.items()
        }


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_2d(a, "matmul")
    _require_2d(b, "matmul")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, "matmul", (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes differ, {a.data.shape} vs {b.data.shape}")
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub: shapes differ, {a.data.shape} vs {b.data.shape}")
    return _make(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes differ, {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def add_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """Add a length-d row vector to every row of an [n, d] matrix."""
    _require_2d(a, "add_rowvec")
    if v.data.ndim != 1 or v.data.shape[0] != a.data.shape[1]:
        raise ShapeError(f"add_rowvec: vector shape {v.data.shape} does not match {a.data.shape}")

    def vjp(g):
        return g, g.sum(axis=0)

    return _make(a.data + v.data[None, :], "add_rowvec", (a, v), vjp)


def row_scale(a: Tensor, s: Tensor) -> Tensor:
    """Scale row i of an [n, d] matrix by the i-th entry of a length-n vector."""
    _require_2d(a, "row_scale")
    if s.data.ndim != 1 or s.data.shape[0] != a.data.shape[0]:
        raise ShapeError(f"row_scale: scale shape {s.data.shape} does not match {a.data.shape}")
    ad, sd = a.data, s.data

    def vjp(g):
        return g * sd[:, None], (g * ad).sum(axis=1)

    return _make(ad * sd[:, None], "row_scale", (a, s), vjp)


def affine(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """Elementwise scale*x + shift with python-scalar coefficients."""
    scale = float(scale)
    return _make(scale * x.data + float(shift), "affine", (x,), lambda g: (scale * g,))


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic, clamped into the open interval (0, 1)."""
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    np.clip(out, _SIGMOID_LO, _SIGMOID_HI, out=out)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, "sigmoid", (x,), vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def segment_sum(values: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of [m, d] ``values`` into ``num_segments`` buckets.

    Empty segments come out as exact zero rows. The adjoint scatters the
    upstream segment gradient to every member row.
    """
    _require_2d(values, "segment_sum")
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.ndim != 1 or seg.shape[0] != values.data.shape[0]:
        raise ShapeError(f"segment_sum: ids shape {seg.shape} does not match values {values.data.shape}")
    if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
        raise ShapeError("segment_sum: segment id out of range")
    out = np.zeros((num_segments, values.data.shape[1]), dtype=values.data.dtype)
    np.add.at(out, seg, values.data)
    return _make(out, "segment_sum", (values,), lambda g: (g[seg],))


def gather_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows of a 2-d tensor; the adjoint scatter-adds them back."""
    _require_2d(x, "gather_rows")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: indices must be 1-d, got shape {idx.shape}")
    n = x.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError("gather_rows: index out of range")
    shape = x.data.shape

    def vjp(g):
        dx = np.zeros(shape, dtype=g.dtype)
        np.add.at(dx, idx, g)
        return (dx,)

    return _make(x.data[idx], "gather_rows", (x,), vjp)


def dropout(x: Tensor, p: float, training: bool, key) -> Tensor:
    """Inverted dropout with a counter-based mask.

    The mask is a pure function of ``key`` (an int, a tuple of ints, or a
    SeedSequence), so replaying the same key reproduces the same mask and
    finite differencing across a fixed key stays valid. With training off
    or p == 0 the input tensor is returned unchanged, which is the
    identity map with identity adjoint.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if isinstance(key, np.random.SeedSequence):
        seq = key
    elif isinstance(key, (tuple, list)):
        seq = np.random.SeedSequence(list(key))
    else:
        seq = np.random.SeedSequence(int(key))
    rng = np.random.Generator(np.random.Philox(seq))
    keep = rng.random(x.data.shape) >= p
    factor = keep.astype(x.data.dtype) / (1.0 - p)
    return _make(x.data * factor, "dropout", (x,), lambda g: (g * factor,))


def concat(tensors, axis: int) -> Tensor:
    """Concatenate along ``axis``; the adjoint splits the gradient back."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty input list")
    ndim = tensors[0].data.ndim
    for t in tensors:
        if t.data.ndim != ndim:
            raise ShapeError("concat: rank mismatch")
    sizes = [t.data.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), "concat", tuple(tensors), vjp)


def mean(x: Tensor) -> Tensor:
    """Mean over all elements, as a 0-d tensor."""
    if x.data.size == 0:
        raise ShapeError("mean: empty input")
    size = x.data.size
    shape = x.data.shape

    def vjp(g):
        return (np.full(shape, float(g) / size, dtype=x.data.dtype),)

    return _make(np.asarray(np.mean(x.data)), "mean", (x,), vjp)


def binary_cross_entropy(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise negated log likelihood of Bernoulli targets.

    Probabilities are clamped to [PROB_CLAMP, 1 - PROB_CLAMP] before the
    logs so the value stays finite at 0 and 1. The gradient is the analytic
    Bernoulli derivative -t/p + (1-t)/(1-p) taken at the unclamped input:
    composed with sigmoid the p*(1-p) factors cancel and a saturated score
    still receives the full p - t signal instead of going silent. A
    clip-style dead zone here stalls training the moment any logit passes
    ~|28|. The input only needs a guard against literal 0/1; sigmoid
    outputs already stay inside [_SIGMOID_LO, _SIGMOID_HI], and 1/tiny is
    still finite in float64.
    """
    t = np.asarray(targets, dtype=probs.data.dtype)
    if t.shape != probs.data.shape:
        raise ShapeError(f"binary_cross_entropy: target shape {t.shape} vs probs {probs.data.shape}")
    lo, hi = PROB_CLAMP, 1.0 - PROB_CLAMP
    pc = np.clip(probs.data, lo, hi)
    out = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc))
    pg = np.clip(probs.data, _SIGMOID_LO, _SIGMOID_HI)

    def vjp(g):
        return (g * (-t / pg + (1.0 - t) / (1.0 - pg)),)

    return _make(out, "binary_cross_entropy", (probs,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    return _make(np.reshape(x.data, shape).copy(), "reshape", (x,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Worst relative error per parameter block from central differences."""

    per_block: dict
    tolerance: float

    @property
    def max_relative_error(self) -> float:
        return max(self.per_block.values()) if self.per_block else 0.0

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return f"grad_check {status}: max relative error {self.max_relative_error:.3e} (tol {self.tolerance:.1e})"


def grad_check(function, parameters: dict, tolerance: float = 1e-4, step_scale: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients of a scalar ``function()`` against
    central finite differences over every entry of every parameter.

    ``function`` must be deterministic and must read the parameter tensors
    in ``parameters`` (their ``data`` is perturbed in place between calls).
    The step per entry is ``step_scale * max(1, |x|)``; errors are relative
    with a unit floor, |a - fd| / max(1, |a|, |fd|).
    """
    for p in parameters.values():
        p.grad = None
    out = function()
    if out.data.size != 1:
        raise ShapeError("grad_check: function must return a scalar tensor")
    backward(out)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in parameters.items()
    }

    per_block = {}
    for name, p in parameters.items():
        flat = p.data.reshape(-1)
        aflat = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            x0 = flat[i]
            h = step_scale * max(1.0, abs(x0))
            flat[i] = x0 + h
            f_plus = float(function().data)
            flat[i] = x0 - h
            f_minus = float(function().data)
            flat[i] = x0
            fd = (f_plus - f_minus) / (2.0 * h)
            rel = abs(aflat[i] - fd) / max(1.0, abs(aflat[i]), abs(fd))
            if rel > worst:
                worst = rel
        per_block[name] = worst
    return GradCheckReport(per_block=per_block, tolerance=tolerance)


# ---------------------------------------------------------------------------
# Parameter checkpoints
# ---------------------------------------------------------------------------

_MANIFEST_NAME = "manifest.json"
_BLOB_NAME = "params.bin"


def save_checkpoint(directory: str, params: dict) -> None:
    """Write a JSON manifest (names, shapes) and a little-endian f64 blob.

    The blob holds every parameter flattened row-major, concatenated in
    manifest order.
    """
    os.makedirs(directory, exist_ok=True)
    manifest = {"params": [{"name": k, "shape": list(v.data.shape)} for k, v in params.items()]}
    with open(os.path.join(directory, _MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=2)
    blob = np.concatenate([np.asarray(v.data, dtype="<f8").reshape(-1) for v in params.values()])
    blob.tofile(os.path.join(directory, _BLOB_NAME))


def load_checkpoint(directory: str) -> dict:
    """Read a checkpoint back as {name: float64 array} in manifest order."""
    with open(os.path.join(directory, _MANIFEST_NAME)) as fh:
        manifest = json.load(fh)
    blob = np.fromfile(os.path.join(directory, _BLOB_NAME), dtype="<f8")
    out = {}
    pos = 0
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        out[entry["name"]] = blob[pos : pos + size].reshape(shape).astype(np.float64)
        pos += size
    if pos != blob.size:
        raise ValueError(f"checkpoint blob has {blob.size} values, manifest expects {pos}")
    return out
