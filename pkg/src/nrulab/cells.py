"""Recurrent cells behind one step-function contract.

Implements the non-saturating recurrent unit (NRU) — ReLU hidden state plus
an additively updated memory vector driven by k writing and k erasing heads
with L5-normalized, outer-product-factorized directions — alongside the
baselines it is compared against: LSTM (standard and chrono-initialized),
GRU, JANET, and vanilla tanh RNNs with orthogonal or identity recurrent
init. Parameter accounting and budget matching live here too, so models can
be compared at equal capacity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigError, DimensionError

__all__ = [
    "CellSpec",
    "CellState",
    "CELL_KINDS",
    "init_params",
    "zero_state",
    "step",
    "nru_step",
    "nru_head_directions",
    "lstm_step",
    "gru_step",
    "janet_step",
    "rnn_step",
    "init_orthogonal",
    "init_identity",
    "init_chrono",
    "xavier_uniform",
    "param_shapes",
    "count_params",
    "match_budget",
]

CELL_KINDS = ("nru", "lstm", "lstm_chrono", "gru", "janet", "rnn_orth", "rnn_id")
_CHRONO_KINDS = ("lstm_chrono", "janet")
_RNN_KINDS = ("rnn_orth", "rnn_id")

L5_EPS = 1e-12


def _is_perfect_square(n: int) -> bool:
    r = math.isqrt(n)
    return r * r == n


@dataclass(frozen=True)
class CellSpec:
    """Architecture choice plus the sizes that fix every parameter shape."""

    kind: str
    input_size: int
    hidden_size: int
    memory_size: int = 0
    num_heads: int = 0
    heads_use_relu: bool = False
    layer_norm: bool = False
    t_max: int = 0

    def __post_init__(self):
        if self.kind not in CELL_KINDS:
            raise ConfigError(f"unknown cell kind {self.kind!r}; choose from {CELL_KINDS}")
        if self.input_size < 1 or self.hidden_size < 1:
            raise ConfigError("input_size and hidden_size must be >= 1")
        if self.kind == "nru":
            if self.memory_size < 1 or self.num_heads < 1:
                raise ConfigError("nru requires memory_size >= 1 and num_heads >= 1")
            if not _is_perfect_square(self.num_heads * self.memory_size):
                raise ConfigError(
                    f"nru factorization requires num_heads*memory_size to be a perfect "
                    f"square, got {self.num_heads}*{self.memory_size}="
                    f"{self.num_heads * self.memory_size}"
                )
        else:
            if self.memory_size or self.num_heads or self.heads_use_relu:
                raise ConfigError(f"memory/head settings are only valid for nru, not {self.kind}")
        if self.layer_norm and self.kind not in _RNN_KINDS:
            raise ConfigError("layer_norm is only supported for rnn_orth/rnn_id")
        if self.kind in _CHRONO_KINDS:
            if self.t_max < 3:
                raise ConfigError(f"{self.kind} needs t_max >= 3 for chrono init")
        elif self.t_max:
            raise ConfigError(f"t_max is only meaningful for {_CHRONO_KINDS}")

    @property
    def factor_size(self) -> int:
        """Length of each factor vector: sqrt(num_heads * memory_size)."""
        return math.isqrt(self.num_heads * self.memory_size)


@dataclass
class CellState:
    """Per-sequence recurrent state as tape tensors."""

    h: Tensor
    m: Tensor | None = None  # nru memory
    c: Tensor | None = None  # lstm cell


# ---------------------------------------------------------------------------
# initializers


def xavier_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal matrix from QR of a standard normal, diag(R) made positive."""
    a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    return q * d


def init_identity(n: int) -> np.ndarray:
    return np.eye(n)


def init_chrono(t_max: int, size: int, rng: np.random.Generator):
    """Forget/input gate biases: b_f ~ log U[1, t_max-1], b_i = -b_f."""
    if t_max < 3:
        raise ConfigError(f"chrono init needs t_max >= 3, got {t_max}")
    b_f = np.log(rng.uniform(1.0, t_max - 1.0, size=size))
    return b_f, -b_f


# ---------------------------------------------------------------------------
# parameter shapes, counting, and init


def param_shapes(spec: CellSpec) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter of the cell (readout excluded)."""
    d, h = spec.input_size, spec.hidden_size
    if spec.kind == "nru":
        m, k, s = spec.memory_size, spec.num_heads, spec.factor_size
        D = d + h + m
        shapes = {
            "w_hh": (h, h),
            "w_ih": (d, h),
            "w_mh": (m, h),
            "b_h": (h,),
            "w_alpha": (D, k),
            "b_alpha": (k,),
            "w_beta": (D, k),
            "b_beta": (k,),
        }
        for name in ("pw", "qw", "pe", "qe"):
            shapes[f"w_{name}"] = (D, s)
            shapes[f"b_{name}"] = (s,)
        return shapes
    if spec.kind in ("lstm", "lstm_chrono"):
        return {"w_gates": (d + h, 4 * h), "b_gates": (4 * h,)}
    if spec.kind == "gru":
        return {
            "w_z": (d + h, h),
            "b_z": (h,),
            "w_r": (d + h, h),
            "b_r": (h,),
            "w_c": (d + h, h),
            "b_c": (h,),
        }
    if spec.kind == "janet":
        return {"w_f": (d + h, h), "b_f": (h,), "w_c": (d + h, h), "b_c": (h,)}
    # vanilla RNNs
    shapes = {"w_hh": (h, h), "w_xh": (d, h), "b_h": (h,)}
    if spec.layer_norm:
        shapes["ln_gain"] = (h,)
        shapes["ln_bias"] = (h,)
    return shapes


def count_params(spec: CellSpec) -> int:
    return sum(int(np.prod(shape)) for shape in param_shapes(spec).values())


def init_params(spec: CellSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh parameter tensors; deterministic for a given rng state.

    Weight matrices are Xavier-uniform except the vanilla-RNN recurrent
    matrix (orthogonal or identity by kind). Biases are zero except the
    LSTM forget gate (1.0), chrono-initialized gates, and the JANET forget
    gate (chrono).
    """
    d, h = spec.input_size, spec.hidden_size
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(spec).items():
        if len(shape) == 2:
            params[name] = xavier_uniform(shape[0], shape[1], rng)
        else:
            params[name] = np.zeros(shape)
    if spec.kind == "lstm":
        params["b_gates"][h : 2 * h] = 1.0
    elif spec.kind == "lstm_chrono":
        b_f, b_i = init_chrono(spec.t_max, h, rng)
        params["b_gates"][0:h] = b_i
        params["b_gates"][h : 2 * h] = b_f
    elif spec.kind == "janet":
        b_f, _ = init_chrono(spec.t_max, h, rng)
        params["b_f"] = b_f
    elif spec.kind == "rnn_orth":
        params["w_hh"] = init_orthogonal(h, rng)
    elif spec.kind == "rnn_id":
        params["w_hh"] = init_identity(h)
    if spec.layer_norm:
        params["ln_gain"] = np.ones(h)
    return params


def zero_state(spec: CellSpec, tape: Tape, batch: int) -> CellState:
    h = tape.leaf(np.zeros((batch, spec.hidden_size)))
    m = c = None
    if spec.kind == "nru":
        m = tape.leaf(np.zeros((batch, spec.memory_size)))
    elif spec.kind in ("lstm", "lstm_chrono"):
        c = tape.leaf(np.zeros((batch, spec.hidden_size)))
    return CellState(h=h, m=m, c=c)


# ---------------------------------------------------------------------------
# step functions


def _direction_bank(spec: CellSpec, p, cat: Tensor, which: str) -> Tensor:
    """All k direction vectors as one [B, k*m] tensor, chunkwise L5-normalized."""
    pf = ad.affine(cat, p[f"w_p{which}"], p[f"b_p{which}"])
    qf = ad.affine(cat, p[f"w_q{which}"], p[f"b_q{which}"])
    v = ad.outer_product(pf, qf)
    if spec.heads_use_relu:
        v = ad.relu(v)
    return ad.lp_normalize(v, p=5, eps=L5_EPS, groups=spec.num_heads)


def nru_head_directions(spec: CellSpec, p, x: Tensor, h_t: Tensor, m_prev: Tensor):
    """Per-head write and erase directions, each [B, m] with unit L5 norm.

    Factors come from linear maps of concat(x, h_t, m_prev); the k*m-element
    bank is the row-major outer product of the two factor vectors, optionally
    rectified, then normalized chunk by chunk.
    """
    cat = ad.concat([x, h_t, m_prev])
    m = spec.memory_size
    out = []
    for which in ("w", "e"):
        bank = _direction_bank(spec, p, cat, which)
        out.append([ad.slice_cols(bank, i * m, (i + 1) * m) for i in range(spec.num_heads)])
    return out[0], out[1]


def nru_step(spec: CellSpec, p, state: CellState, x: Tensor) -> CellState:
    """One NRU update.

    h_t = relu(W_hh h_{t-1} + W_ih x_t + W_mh m_{t-1} + b); the write/erase
    scalars and directions are functions of (x_t, h_t, m_{t-1}) — note the
    *new* hidden state — and the memory moves additively:
    m_t = m_{t-1} + sum_i alpha_i v_w_i - sum_i beta_i v_e_i.
    """
    h = ad.relu(
        ad.affine_multi([state.h, x, state.m], [p["w_hh"], p["w_ih"], p["w_mh"]], p["b_h"])
    )
    cat = ad.concat([x, h, state.m])
    alpha = ad.affine(cat, p["w_alpha"], p["b_alpha"])
    beta = ad.affine(cat, p["w_beta"], p["b_beta"])
    if spec.heads_use_relu:
        alpha = ad.relu(alpha)
        beta = ad.relu(beta)
    write = ad.scaled_sum(alpha, _direction_bank(spec, p, cat, "w"))
    erase = ad.scaled_sum(beta, _direction_bank(spec, p, cat, "e"))
    m = ad.sub(ad.add(state.m, write), erase)
    return CellState(h=h, m=m)


def lstm_step(spec: CellSpec, p, state: CellState, x: Tensor) -> CellState:
    """Standard LSTM with fused gate matrix, slice order (input, forget, cand, out)."""
    h_size = spec.hidden_size
    gates = ad.affine(ad.concat([x, state.h]), p["w_gates"], p["b_gates"])
    i = ad.sigmoid(ad.slice_cols(gates, 0, h_size))
    f = ad.sigmoid(ad.slice_cols(gates, h_size, 2 * h_size))
    g = ad.tanh_act(ad.slice_cols(gates, 2 * h_size, 3 * h_size))
    o = ad.sigmoid(ad.slice_cols(gates, 3 * h_size, 4 * h_size))
    c = ad.add(ad.mul(f, state.c), ad.mul(i, g))
    h = ad.mul(o, ad.tanh_act(c))
    return CellState(h=h, c=c)


def gru_step(spec: CellSpec, p, state: CellState, x: Tensor) -> CellState:
    """GRU: h_t = (1 - z) * h_{t-1} + z * candidate(reset-gated history)."""
    cat = ad.concat([x, state.h])
    z = ad.sigmoid(ad.affine(cat, p["w_z"], p["b_z"]))
    r = ad.sigmoid(ad.affine(cat, p["w_r"], p["b_r"]))
    cand = ad.tanh_act(ad.affine(ad.concat([x, ad.mul(r, state.h)]), p["w_c"], p["b_c"]))
    h = ad.add(ad.sub(state.h, ad.mul(z, state.h)), ad.mul(z, cand))
    return CellState(h=h)


def janet_step(spec: CellSpec, p, state: CellState, x: Tensor) -> CellState:
    """Forget-gate-only cell: h_t = s * h_{t-1} + (1 - s) * tanh candidate."""
    cat = ad.concat([x, state.h])
    s = ad.sigmoid(ad.affine(cat, p["w_f"], p["b_f"]))
    cand = ad.tanh_act(ad.affine(cat, p["w_c"], p["b_c"]))
    h = ad.add(ad.mul(s, state.h), ad.sub(cand, ad.mul(s, cand)))
    return CellState(h=h)


def rnn_step(spec: CellSpec, p, state: CellState, x: Tensor) -> CellState:
    """Vanilla tanh RNN, optionally layer-normalized before the activation."""
    z = ad.affine_multi([state.h, x], [p["w_hh"], p["w_xh"]], p["b_h"])
    if spec.layer_norm:
        z = ad.layer_norm(z, p["ln_gain"], p["ln_bias"])
    return CellState(h=ad.tanh_act(z))


_STEP_FNS = {
    "nru": nru_step,
    "lstm": lstm_step,
    "lstm_chrono": lstm_step,
    "gru": gru_step,
    "janet": janet_step,
    "rnn_orth": rnn_step,
    "rnn_id": rnn_step,
}


def step(spec: CellSpec, p, state: CellState, x: Tensor) -> CellState:
    """Advance any cell kind by one time step."""
    if x.ndim != 2 or x.shape[1] != spec.input_size:
        raise DimensionError(f"step: input {x.shape} does not match input_size {spec.input_size}")
    return _STEP_FNS[spec.kind](spec, p, state, x)


# ---------------------------------------------------------------------------
# budget matching


def _squarefree_part(k: int) -> int:
    out = 1
    n = k
    f = 2
    while f * f <= n:
        count = 0
        while n % f == 0:
            n //= f
            count += 1
        if count % 2:
            out *= f
        f += 1
    return out * n


def _memory_candidates(k: int, upto: int):
    """Memory sizes m with k*m a perfect square, ascending, m <= upto."""
    b = _squarefree_part(k)
    j = 1
    while b * j * j <= upto:
        yield b * j * j
        j += 1


def _spec_for(kind, input_size, h, m, k, **kw) -> CellSpec:
    if kind == "nru":
        return CellSpec(kind, input_size, h, memory_size=m, num_heads=k,
                        heads_use_relu=kw.get("heads_use_relu", False))
    return CellSpec(
        kind,
        input_size,
        h,
        layer_norm=kw.get("layer_norm", False),
        t_max=kw.get("t_max", 0),
    )


def match_budget(
    kind: str,
    input_size: int,
    target: int,
    tolerance: float = 0.02,
    max_hidden: int = 4096,
    **kw,
) -> CellSpec:
    """Pick sizes so count_params lands within ``tolerance`` of ``target``.

    Non-NRU kinds binary-search the hidden size. The NRU additionally scans
    head counts (4 preferred, then 1, 2, 8, 9, 16) and every memory size
    compatible with the perfect-square factorization constraint, preferring
    memories around 1.3x the hidden size as in the reference configurations.
    """
    if kind not in CELL_KINDS:
        raise ConfigError(f"unknown cell kind {kind!r}")

    def hidden_for(count_of_h):
        lo, hi = 1, max_hidden
        if count_of_h(hi) < target:
            return hi
        while lo < hi:
            mid = (lo + hi) // 2
            if count_of_h(mid) < target:
                lo = mid + 1
            else:
                hi = mid
        return lo

    best = None  # (abs rel err, preference index, spec)
    if kind == "nru":
        for pref, k in enumerate((4, 1, 2, 8, 9, 16)):
            for m in _memory_candidates(k, 4096):
                def count_h(h, m=m, k=k):
                    return count_params(_spec_for(kind, input_size, h, m, k, **kw))

                h_hi = hidden_for(count_h)
                for h in (h_hi - 1, h_hi):
                    if h < 1:
                        continue
                    # prefer memory comparable to (or a bit above) hidden size
                    shape_penalty = abs(m - 1.3 * h) / (1.3 * h)
                    err = abs(count_h(h) - target) / target
                    key = (err > tolerance, err + 1e-4 * shape_penalty, pref, m)
                    if best is None or key < best[0]:
                        best = (key, _spec_for(kind, input_size, h, m, k, **kw), err)
    else:
        def count_h(h):
            return count_params(_spec_for(kind, input_size, h, 0, 0, **kw))

        h_hi = hidden_for(count_h)
        for h in (h_hi - 1, h_hi):
            if h < 1:
                continue
            err = abs(count_h(h) - target) / target
            key = (err > tolerance, err, 0, 0)
            if best is None or key < best[0]:
                best = (key, _spec_for(kind, input_size, h, 0, 0, **kw), err)

    assert best is not None
    _, spec, err = best
    if err > tolerance:
        raise ConfigError(
            f"no {kind} configuration within {tolerance:.0%} of {target} parameters; "
            f"nearest achievable is {count_params(spec)} ({spec})"
        )
    return spec
