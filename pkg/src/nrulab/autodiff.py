"""Reverse-mode automatic differentiation over dense float64 tensors.

A ``Tape`` records every forward operation as an append-only list of nodes;
``backward`` replays the list in reverse, accumulating vector-Jacobian
products. The op set is intentionally minimal: exactly what recurrent cells
and their losses need. All values are 64-bit floats and shapes are strict;
the only permitted broadcast is the bias add inside ``affine``.

``finite_diff_check`` is the house gradient oracle: central differences
against the analytic gradients of any scalar objective built on a tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, EvaluationError

__all__ = [
    "Tensor",
    "Tape",
    "GradReport",
    "affine",
    "affine_multi",
    "relu",
    "sigmoid",
    "tanh_act",
    "add",
    "sub",
    "mul",
    "scale",
    "outer_product",
    "lp_normalize",
    "layer_norm",
    "softmax_cross_entropy",
    "concat",
    "slice_cols",
    "scaled_sum",
    "sum_all",
    "backward",
    "finite_diff_check",
]


def _as_f64(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Tensor:
    """A value recorded on a tape: float64 ndarray plus node bookkeeping."""

    __slots__ = ("tape", "id", "data", "name")

    def __init__(self, tape: "Tape", node_id: int, data: np.ndarray, name: str | None):
        self.tape = tape
        self.id = node_id
        self.data = data
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(id={self.id}, shape={self.shape}{label})"


class _Node:
    __slots__ = ("parents", "bwd", "name")

    def __init__(self, parents: tuple[int, ...], bwd, name: str | None):
        self.parents = parents
        self.bwd = bwd  # None for leaves; else grad_out -> tuple of parent grads
        self.name = name


class Tape:
    """Append-only record of forward ops; owns gradient storage after backward.

    One training run owns one tape; tapes are single-threaded. Node ids are
    assigned in creation order, so inputs always precede outputs.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.tensors: list[Tensor] = []
        self.gradients: list[np.ndarray | None] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name: str | None = None) -> Tensor:
        """Register an input/parameter tensor (no backward rule of its own)."""
        return self._record(_as_f64(value).copy(), (), None, name)

    def _record(self, value: np.ndarray, parents: tuple[int, ...], bwd, name=None) -> Tensor:
        node_id = len(self.nodes)
        t = Tensor(self, node_id, value, name)
        self.nodes.append(_Node(parents, bwd, name))
        self.tensors.append(t)
        return t

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward pass w.r.t. ``t`` (zeros if unused)."""
        g = self.gradients[t.id] if self.gradients else None
        if g is None:
            return np.zeros_like(t.data)
        return g


def _same_tape(*tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ContractError("operands were recorded on different tapes")
    return tape


# ---------------------------------------------------------------------------
# ops


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for x [B,Din], w [Din,Dout], b [Dout]."""
    tape = _same_tape(x, w, b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"affine: x {x.shape} incompatible with w {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"affine: bias {b.shape} != ({w.shape[1]},)")
    out = x.data @ w.data + b.data
    xd, wd = x.data, w.data

    def bwd(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return tape._record(out, (x.id, w.id, b.id), bwd)


def affine_multi(xs: Sequence[Tensor], ws: Sequence[Tensor], b: Tensor) -> Tensor:
    """sum_i xs[i] @ ws[i] + b, one node for a multi-input preactivation."""
    if len(xs) != len(ws) or not xs:
        raise DimensionError("affine_multi: need equally many inputs and weights")
    tape = _same_tape(*xs, *ws, b)
    rows = xs[0].shape[0]
    cols = ws[0].shape[1]
    for x, w in zip(xs, ws):
        if x.ndim != 2 or w.ndim != 2 or x.shape != (rows, w.shape[0]) or w.shape[1] != cols:
            raise DimensionError(
                f"affine_multi: x {x.shape} incompatible with w {w.shape}"
            )
    if b.shape != (cols,):
        raise DimensionError(f"affine_multi: bias {b.shape} != ({cols},)")
    out = b.data.copy()
    out = out + sum(x.data @ w.data for x, w in zip(xs, ws))
    xds = [x.data for x in xs]
    wds = [w.data for w in ws]

    def bwd(g):
        grads = []
        for xd, wd in zip(xds, wds):
            grads.append(g @ wd.T)
        for xd, wd in zip(xds, wds):
            grads.append(xd.T @ g)
        grads.append(g.sum(axis=0))
        return tuple(grads)

    parents = tuple(t.id for t in (*xs, *ws, b))
    return tape._record(out, parents, bwd)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at exactly 0 is 0."""
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return x.tape._record(np.where(mask, x.data, 0.0), (x.id,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic function."""
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return x.tape._record(out, (x.id,), bwd)


def tanh_act(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return x.tape._record(out, (x.id,), bwd)


def _binary(a: Tensor, b: Tensor, opname: str):
    tape = _same_tape(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} differ")
    return tape


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _binary(a, b, "add")

    def bwd(g):
        return g, g

    return tape._record(a.data + b.data, (a.id, b.id), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _binary(a, b, "sub")

    def bwd(g):
        return g, -g

    return tape._record(a.data - b.data, (a.id, b.id), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product of same-shape tensors."""
    tape = _binary(a, b, "mul")
    ad, bd = a.data, b.data

    def bwd(g):
        return g * bd, g * ad

    return tape._record(ad * bd, (a.id, b.id), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant (not differentiated through c)."""
    c = float(c)

    def bwd(g):
        return (g * c,)

    return x.tape._record(x.data * c, (x.id,), bwd)


def outer_product(p: Tensor, q: Tensor) -> Tensor:
    """Row-major vectorized outer product per batch row.

    p [B,r], q [B,s] -> out [B, r*s] with out[b, i*s + j] = p[b,i] * q[b,j].
    """
    tape = _same_tape(p, q)
    if p.ndim != 2 or q.ndim != 2 or p.shape[0] != q.shape[0]:
        raise DimensionError(f"outer_product: batch dims differ {p.shape} vs {q.shape}")
    B, r = p.shape
    s = q.shape[1]
    out = (p.data[:, :, None] * q.data[:, None, :]).reshape(B, r * s)
    pd, qd = p.data, q.data

    def bwd(g):
        G = g.reshape(B, r, s)
        return np.einsum("brs,bs->br", G, qd), np.einsum("brs,br->bs", G, pd)

    return tape._record(out, (p.id, q.id), bwd)


def lp_normalize(v: Tensor, p: int = 5, eps: float = 1e-12, groups: int = 1) -> Tensor:
    """Normalize each row (or each of `groups` equal chunks per row) to unit Lp norm.

    out = v / max(||v||_p, eps); eps keeps the zero vector at zero instead of
    producing NaN. With groups=k the row is treated as k independent chunks,
    each normalized on its own.
    """
    if p < 1:
        raise ContractError(f"lp_normalize: p must be >= 1, got {p}")
    if v.ndim != 2 or v.shape[1] % groups != 0:
        raise DimensionError(f"lp_normalize: cannot split {v.shape} into {groups} chunks")
    B, D = v.shape
    m = D // groups
    x = v.data.reshape(B, groups, m)
    absx = np.abs(x)
    norm = (absx**p).sum(axis=2, keepdims=True) ** (1.0 / p)
    denom = np.maximum(norm, eps)
    out = (x / denom).reshape(B, D)
    active = norm > eps  # where the norm, not eps, is differentiated through

    def bwd(g):
        G = g.reshape(B, groups, m)
        gx = G / denom
        # d||v||_p/dv = sign(v) |v|^{p-1} ||v||^{1-p}; zero rows keep only 1/eps
        inner = (G * x).sum(axis=2, keepdims=True)
        safe = np.where(active, norm, 1.0)
        dnorm = np.sign(x) * absx ** (p - 1) * np.where(active, safe ** (1 - p), 0.0)
        gx = gx - np.where(active, inner / denom**2, 0.0) * dnorm
        return (gx.reshape(B, D),)

    return v.tape._record(out, (v.id,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Per-row standardization: (x - mean)/sqrt(var + 1e-5) * gain + bias."""
    tape = _same_tape(x, gain, bias)
    if x.ndim != 2 or x.shape[1] < 2:
        raise DimensionError(f"layer_norm: need [B,D] with D >= 2, got {x.shape}")
    D = x.shape[1]
    if gain.shape != (D,) or bias.shape != (D,):
        raise DimensionError(f"layer_norm: gain/bias must be ({D},)")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + 1e-5)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data
    gd = gain.data

    def bwd(g):
        gg = g * gd  # gradient w.r.t. xhat
        mean_gg = gg.mean(axis=1, keepdims=True)
        mean_ggx = (gg * xhat).mean(axis=1, keepdims=True)
        dx = (gg - mean_gg - xhat * mean_ggx) * inv
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return tape._record(out, (x.id, gain.id, bias.id), bwd)


def softmax_cross_entropy(logits: Tensor, target, weights=None) -> Tensor:
    """Weighted cross-entropy of integer targets under softmax(logits).

    Defaults to the mean over rows (weights = 1/B each). With explicit
    ``weights`` the result is sum_i weights[i] * nll_i, which lets callers
    assemble masked means across time steps. Stabilized by max-subtraction.
    """
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be [B,C], got {logits.shape}")
    B, C = logits.shape
    t = np.asarray(target, dtype=np.int64)
    if t.shape != (B,):
        raise DimensionError(f"softmax_cross_entropy: target shape {t.shape} != ({B},)")
    if t.min(initial=0) < 0 or t.max(initial=0) >= C:
        raise IndexError(f"softmax_cross_entropy: target out of range [0,{C})")
    if weights is None:
        w = np.full(B, 1.0 / B)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (B,):
            raise DimensionError(f"softmax_cross_entropy: weights shape {w.shape} != ({B},)")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    nll = -logp[np.arange(B), t]
    out = np.asarray((w * nll).sum())
    softmax = np.exp(logp)

    def bwd(g):
        dlogits = softmax.copy()
        dlogits[np.arange(B), t] -= 1.0
        dlogits *= (g * w)[:, None]
        return (dlogits,)

    return logits.tape._record(out, (logits.id,), bwd)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Column-wise concatenation of [B,D_i] tensors."""
    if not parts:
        raise DimensionError("concat: no tensors given")
    tape = _same_tape(*parts)
    B = parts[0].shape[0]
    for t in parts:
        if t.ndim != 2 or t.shape[0] != B:
            raise DimensionError(f"concat: batch dims differ ({[t.shape for t in parts]})")
    out = np.concatenate([t.data for t in parts], axis=1)
    widths = [t.shape[1] for t in parts]
    edges = np.cumsum([0] + widths)

    def bwd(g):
        return tuple(g[:, edges[i] : edges[i + 1]] for i in range(len(widths)))

    return tape._record(out, tuple(t.id for t in parts), bwd)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Extract columns [start, stop) of a [B,D] tensor."""
    if x.ndim != 2 or not (0 <= start <= stop <= x.shape[1]):
        raise DimensionError(f"slice_cols: range [{start},{stop}) out of bounds for {x.shape}")
    out = x.data[:, start:stop].copy()
    D = x.shape[1]

    def bwd(g):
        gx = np.zeros((g.shape[0], D))
        gx[:, start:stop] = g
        return (gx,)

    return x.tape._record(out, (x.id,), bwd)


def scaled_sum(coeffs: Tensor, grouped: Tensor) -> Tensor:
    """sum_i coeffs[:, i] * chunk_i for a [B, k*m] tensor split into k chunks.

    Realizes sum_i alpha_i * v_i over a bank of per-head direction vectors
    in a single node.
    """
    tape = _same_tape(coeffs, grouped)
    if coeffs.ndim != 2 or grouped.ndim != 2 or coeffs.shape[0] != grouped.shape[0]:
        raise DimensionError(f"scaled_sum: batch dims differ {coeffs.shape} vs {grouped.shape}")
    B, k = coeffs.shape
    if grouped.shape[1] % k != 0:
        raise DimensionError(f"scaled_sum: cannot split {grouped.shape} into {k} chunks")
    m = grouped.shape[1] // k
    V = grouped.data.reshape(B, k, m)
    out = np.einsum("bk,bkm->bm", coeffs.data, V)
    cd = coeffs.data

    def bwd(g):
        dc = np.einsum("bm,bkm->bk", g, V)
        dV = cd[:, :, None] * g[:, None, :]
        return dc, dV.reshape(B, k * m)

    return tape._record(out, (coeffs.id, grouped.id), bwd)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar node."""
    shape = x.shape

    def bwd(g):
        return (np.full(shape, float(g)),)

    return x.tape._record(np.asarray(x.data.sum()), (x.id,), bwd)


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar loss; returns gradients of named leaves.

    Populates ``tape.gradients`` (node id -> ndarray) as a side effect so
    unnamed tensors, e.g. per-step inputs, can be queried via ``tape.grad``.
    Named leaves that the loss never touched report zeros.
    """
    if loss.tape is not tape:
        raise ContractError("loss was not recorded on this tape")
    if loss.data.ndim != 0:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[loss.id] = np.ones_like(loss.data)
    for node_id in range(loss.id, -1, -1):
        g = grads[node_id]
        node = tape.nodes[node_id]
        if g is None or node.bwd is None:
            continue
        for pid, pg in zip(node.parents, node.bwd(g)):
            if pg is None:
                continue
            if grads[pid] is None:
                grads[pid] = pg
            else:
                grads[pid] = grads[pid] + pg
    tape.gradients = grads
    named = {}
    for node_id, node in enumerate(tape.nodes):
        if node.name is not None and node.bwd is None:
            g = grads[node_id]
            named[node.name] = g if g is not None else np.zeros_like(tape.tensors[node_id].data)
    return named


@dataclass
class GradReport:
    """Analytic-vs-finite-difference comparison for one scalar objective."""

    max_rel_err: float
    per_param: dict[str, float] = field(default_factory=dict)
    h: float = 1e-5
    tol: float = 1e-6

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def finite_diff_check(
    f: Callable[[dict[str, np.ndarray]], Tensor],
    params: dict[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-6,
) -> GradReport:
    """Central-difference check of the analytic gradients of ``f``.

    ``f`` must build a fresh tape, register every entry of ``params`` as a
    named leaf, and return the scalar loss tensor; it must be deterministic
    for fixed params. Relative error per coordinate is
    |a - fd| / max(|a|, |fd|, 1e-8).
    """
    loss = f(params)
    if not np.isfinite(loss.data):
        raise EvaluationError("objective returned non-finite value at the base point")
    analytic = backward(loss.tape, loss)
    missing = set(params) - set(analytic)
    if missing:
        raise ContractError(f"objective did not register leaves for: {sorted(missing)}")

    def value_at(perturbed) -> float:
        out = f(perturbed)
        v = float(out.data)
        if not np.isfinite(v):
            raise EvaluationError("objective returned non-finite value during perturbation")
        return v

    per_param = {}
    for name, theta in params.items():
        theta = np.asarray(theta, dtype=np.float64)
        fd = np.zeros_like(theta)
        flat = theta.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            bump = np.array(theta)
            bump.reshape(-1)[i] = flat[i] + h
            fp = value_at({**params, name: bump})
            bump.reshape(-1)[i] = flat[i] - h
            fm = value_at({**params, name: bump})
            fd_flat[i] = (fp - fm) / (2.0 * h)
        a = analytic[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-8)
        per_param[name] = float((np.abs(a - fd) / denom).max(initial=0.0))
    worst = max(per_param.values(), default=0.0)
    return GradReport(max_rel_err=worst, per_param=per_param, h=h, tol=tol)
