"""Cell semantics, initializers, parameter accounting, and gradient checks."""

import math

import numpy as np
import numpy.testing as npt
import pytest
import scipy.stats

from nrulab import autodiff as ad
from nrulab import cells
from nrulab.cells import CellSpec
from nrulab.errors import ConfigError


def nru_spec(d=3, h=4, m=9, k=1, relu_heads=False):
    return CellSpec("nru", d, h, memory_size=m, num_heads=k, heads_use_relu=relu_heads)


def bind(tape, params):
    return {name: tape.leaf(value, name=name) for name, value in params.items()}


def run_steps(spec, params, xs):
    """Unroll a cell over xs [T,B,d]; returns (tape, bound params, states)."""
    tape = ad.Tape()
    p = bind(tape, params)
    state = cells.zero_state(spec, tape, xs.shape[1])
    states = []
    for t in range(xs.shape[0]):
        state = cells.step(spec, p, state, tape.leaf(xs[t]))
        states.append(state)
    return tape, p, states


class TestCellSpec:
    def test_non_square_factorization_rejected_at_construction(self):
        with pytest.raises(ConfigError, match="perfect"):
            nru_spec(m=10, k=1)

    def test_square_factorizations_accepted(self):
        for k, m in [(1, 9), (4, 64), (4, 256), (9, 100), (16, 256), (2, 8)]:
            spec = nru_spec(m=m, k=k)
            assert spec.factor_size == math.isqrt(k * m)

    def test_chrono_kinds_need_t_max(self):
        with pytest.raises(ConfigError):
            CellSpec("lstm_chrono", 3, 4)
        with pytest.raises(ConfigError):
            CellSpec("janet", 3, 4, t_max=2)
        CellSpec("janet", 3, 4, t_max=3)

    def test_layer_norm_only_for_vanilla_rnn(self):
        CellSpec("rnn_orth", 3, 4, layer_norm=True)
        with pytest.raises(ConfigError):
            CellSpec("lstm", 3, 4, layer_norm=True)


class TestNru:
    def test_zero_heads_leave_memory_unchanged(self):
        spec = nru_spec()
        rng = np.random.default_rng(0)
        params = cells.init_params(spec, rng)
        for name in params:
            if name not in ("w_hh", "w_ih", "w_mh", "b_h"):
                params[name] = np.zeros_like(params[name])
        xs = rng.normal(size=(3, 2, spec.input_size))
        tape, p, states = run_steps(spec, params, xs)
        m0 = np.zeros((2, spec.memory_size))
        for state in states:
            assert state.m.data.tobytes() == m0.tobytes()

    def test_alpha_beta_zero_keeps_memory_bitwise(self):
        # zero magnitudes with nonzero directions: writes are exact zeros
        spec = nru_spec(m=4, k=1)
        rng = np.random.default_rng(1)
        params = cells.init_params(spec, rng)
        for name in ("w_alpha", "b_alpha", "w_beta", "b_beta"):
            params[name] = np.zeros_like(params[name])
        xs = rng.normal(size=(5, 2, spec.input_size))
        _, _, states = run_steps(spec, params, xs)
        reference = states[0].m.data.tobytes()
        for state in states[1:]:
            assert state.m.data.tobytes() == reference

    def test_zero_weights_give_zero_hidden(self):
        spec = nru_spec()
        params = {name: np.zeros(s) for name, s in cells.param_shapes(spec).items()}
        xs = np.random.default_rng(2).normal(size=(2, 3, spec.input_size))
        _, _, states = run_steps(spec, params, xs)
        npt.assert_array_equal(states[-1].h.data, np.zeros((3, spec.hidden_size)))

    def test_direction_bank_hand_value(self):
        # p = q = ones, k=1, m=4: outer = [1,1,1,1], L5 norm scales by 4^(-1/5)
        spec = nru_spec(d=2, h=2, m=4, k=1)
        shapes = cells.param_shapes(spec)
        params = {name: np.zeros(s) for name, s in shapes.items()}
        params["b_pw"] = np.ones_like(params["b_pw"])
        params["b_qw"] = np.ones_like(params["b_qw"])
        tape = ad.Tape()
        p = bind(tape, params)
        x = tape.leaf(np.zeros((1, 2)))
        h = tape.leaf(np.zeros((1, 2)))
        m_prev = tape.leaf(np.zeros((1, 4)))
        v_w, v_e = cells.nru_head_directions(spec, p, x, h, m_prev)
        expected = np.full((1, 4), 4.0 ** (-1.0 / 5.0))
        npt.assert_allclose(v_w[0].data, expected, rtol=1e-14)
        npt.assert_array_equal(v_e[0].data, np.zeros((1, 4)))  # zero pre-norm vector

    def test_relu_heads_all_negative_outer_is_zero_not_nan(self):
        spec = nru_spec(d=2, h=2, m=4, k=1, relu_heads=True)
        params = {name: np.zeros(s) for name, s in cells.param_shapes(spec).items()}
        params["b_pw"] = np.full(2, 1.0)
        params["b_qw"] = np.full(2, -1.0)  # outer product all -1
        tape = ad.Tape()
        p = bind(tape, params)
        zeros = lambda w: tape.leaf(np.zeros((1, w)))
        v_w, _ = cells.nru_head_directions(spec, p, zeros(2), zeros(2), zeros(4))
        npt.assert_array_equal(v_w[0].data, np.zeros((1, 4)))
        assert np.isfinite(v_w[0].data).all()

    def test_directions_have_unit_l5_norm(self):
        spec = nru_spec(d=3, h=5, m=16, k=4)
        rng = np.random.default_rng(3)
        params = cells.init_params(spec, rng)
        tape = ad.Tape()
        p = bind(tape, params)
        x = tape.leaf(rng.normal(size=(4, 3)))
        h = tape.leaf(rng.normal(size=(4, 5)))
        m_prev = tape.leaf(rng.normal(size=(4, 16)))
        v_w, v_e = cells.nru_head_directions(spec, p, x, h, m_prev)
        for v in (*v_w, *v_e):
            norms = (np.abs(v.data) ** 5).sum(axis=1) ** 0.2
            npt.assert_allclose(norms, np.ones(4), atol=1e-10)


class TestBaselineCells:
    def test_lstm_saturated_gates_carousel(self):
        spec = CellSpec("lstm", 3, 4)
        params = cells.init_params(spec, np.random.default_rng(4))
        params["b_gates"][0:4] = -50.0  # input gate shut
        params["b_gates"][4:8] = 50.0  # forget gate locked open
        params["w_gates"] *= 0.01
        tape = ad.Tape()
        p = bind(tape, params)
        c0 = np.random.default_rng(5).normal(size=(2, 4))
        state = cells.CellState(h=tape.leaf(np.zeros((2, 4))), c=tape.leaf(c0))
        out = cells.step(spec, p, state, tape.leaf(np.zeros((2, 3))))
        npt.assert_allclose(out.c.data, c0, atol=1e-10)

    def test_lstm_zero_params_zero_hidden(self):
        spec = CellSpec("lstm", 3, 4)
        params = {name: np.zeros(s) for name, s in cells.param_shapes(spec).items()}
        _, _, states = run_steps(spec, params, np.ones((2, 2, 3)))
        npt.assert_array_equal(states[-1].h.data, np.zeros((2, 4)))

    def test_gru_update_gate_shut_copies_state(self):
        spec = CellSpec("gru", 3, 4)
        params = cells.init_params(spec, np.random.default_rng(6))
        params["b_z"][:] = -50.0
        tape = ad.Tape()
        p = bind(tape, params)
        h0 = np.random.default_rng(7).normal(size=(2, 4))
        state = cells.CellState(h=tape.leaf(h0))
        out = cells.step(spec, p, state, tape.leaf(np.ones((2, 3))))
        npt.assert_allclose(out.h.data, h0, atol=1e-10)

    def test_gru_zero_params_zero_hidden(self):
        spec = CellSpec("gru", 3, 4)
        params = {name: np.zeros(s) for name, s in cells.param_shapes(spec).items()}
        _, _, states = run_steps(spec, params, np.ones((1, 2, 3)))
        npt.assert_array_equal(states[-1].h.data, np.zeros((2, 4)))

    @pytest.mark.parametrize("bias,expect", [(50.0, "retain"), (-50.0, "candidate")])
    def test_janet_forget_bias_extremes(self, bias, expect):
        spec = CellSpec("janet", 3, 4, t_max=10)
        params = cells.init_params(spec, np.random.default_rng(8))
        params["b_f"][:] = bias
        tape = ad.Tape()
        p = bind(tape, params)
        h0 = np.random.default_rng(9).normal(size=(2, 4))
        x = np.random.default_rng(10).normal(size=(2, 3))
        state = cells.CellState(h=tape.leaf(h0))
        out = cells.step(spec, p, state, tape.leaf(x))
        cand = np.tanh(np.concatenate([x, h0], axis=1) @ params["w_c"] + params["b_c"])
        if expect == "retain":
            npt.assert_allclose(out.h.data, h0, atol=1e-10)
        else:
            npt.assert_allclose(out.h.data, cand, atol=1e-10)

    def test_rnn_identity_recurrence_is_tanh_of_state(self):
        spec = CellSpec("rnn_id", 3, 4)
        params = {name: np.zeros(s) for name, s in cells.param_shapes(spec).items()}
        params["w_hh"] = np.eye(4)
        tape = ad.Tape()
        p = bind(tape, params)
        h0 = np.random.default_rng(11).uniform(-0.9, 0.9, size=(2, 4))
        state = cells.CellState(h=tape.leaf(h0))
        out = cells.step(spec, p, state, tape.leaf(np.zeros((2, 3))))
        npt.assert_allclose(out.h.data, np.tanh(h0), rtol=1e-12)

    def test_rnn_zero_params_zero_hidden(self):
        spec = CellSpec("rnn_orth", 3, 4)
        params = {name: np.zeros(s) for name, s in cells.param_shapes(spec).items()}
        _, _, states = run_steps(spec, params, np.ones((2, 2, 3)))
        npt.assert_array_equal(states[-1].h.data, np.zeros((2, 4)))


class TestInitializers:
    def test_orthogonal_is_orthogonal(self):
        q = cells.init_orthogonal(16, np.random.default_rng(12))
        npt.assert_allclose(q.T @ q, np.eye(16), atol=1e-10)

    def test_identity(self):
        npt.assert_array_equal(cells.init_identity(3), np.eye(3))

    def test_orthogonal_seed_dependence(self):
        q1 = cells.init_orthogonal(8, np.random.default_rng(1))
        q2 = cells.init_orthogonal(8, np.random.default_rng(2))
        assert not np.allclose(q1, q2)

    def test_chrono_range_and_negation(self):
        b_f, b_i = cells.init_chrono(100, 1000, np.random.default_rng(13))
        assert (b_f >= 0).all() and (b_f <= np.log(99.0)).all()
        npt.assert_array_equal(b_i, -b_f)

    def test_chrono_t_max_too_small(self):
        with pytest.raises(ConfigError):
            cells.init_chrono(2, 4, np.random.default_rng(0))

    def test_chrono_log_uniform_distribution(self):
        # e^{b_f} should be U[1, 99]: two-sided KS against that CDF
        b_f, _ = cells.init_chrono(100, 100_000, np.random.default_rng(14))
        stat = scipy.stats.kstest(np.exp(b_f), "uniform", args=(1.0, 98.0)).statistic
        assert stat < 0.01

    def test_init_params_deterministic(self):
        spec = nru_spec(m=16, k=4)
        p1 = cells.init_params(spec, np.random.default_rng(15))
        p2 = cells.init_params(spec, np.random.default_rng(15))
        assert p1.keys() == p2.keys()
        for name in p1:
            assert p1[name].tobytes() == p2[name].tobytes()


class TestParamAccounting:
    def test_vanilla_rnn_closed_form(self):
        d, h = 7, 13
        assert cells.count_params(CellSpec("rnn_orth", d, h)) == h * h + d * h + h
        assert (
            cells.count_params(CellSpec("rnn_orth", d, h, layer_norm=True))
            == h * h + d * h + h + 2 * h
        )

    def test_lstm_closed_form(self):
        d, h = 9, 21
        assert cells.count_params(CellSpec("lstm", d, h)) == 4 * (h * h + d * h + h)

    def test_gru_janet_closed_forms(self):
        d, h = 5, 11
        assert cells.count_params(CellSpec("gru", d, h)) == 3 * (h * h + d * h + h)
        assert cells.count_params(CellSpec("janet", d, h, t_max=10)) == 2 * (h * h + d * h + h)

    def test_nru_count_matches_shapes(self):
        spec = nru_spec(d=10, h=80, m=64, k=4)
        total = sum(np.prod(s) for s in cells.param_shapes(spec).values())
        assert cells.count_params(spec) == total

    @pytest.mark.parametrize("kind", ["lstm", "gru", "janet", "rnn_orth", "nru"])
    def test_match_budget_lands_within_two_percent(self, kind):
        kw = {"t_max": 100} if kind == "janet" else {}
        spec = cells.match_budget(kind, 9, 23500, **kw)
        count = cells.count_params(spec)
        assert abs(count - 23500) / 23500 < 0.02

    def test_match_budget_unreachable(self):
        with pytest.raises(ConfigError, match="nearest"):
            cells.match_budget("lstm", 2000, 10)

    def test_match_budget_nru_respects_square_constraint(self):
        spec = cells.match_budget("nru", 1, 165000)
        assert math.isqrt(spec.num_heads * spec.memory_size) ** 2 == (
            spec.num_heads * spec.memory_size
        )


def head_logits_loss(spec, params, xs, targets):
    """5-step unroll ending in a cross-entropy readout, for gradient checks."""
    tape = ad.Tape()
    p = bind(tape, {k: v for k, v in params.items() if not k.startswith("out_")})
    state = cells.zero_state(spec, tape, xs.shape[1])
    for t in range(xs.shape[0]):
        state = cells.step(spec, p, state, tape.leaf(xs[t]))
    w_out = tape.leaf(params["out_w"], name="out_w")
    b_out = tape.leaf(params["out_b"], name="out_b")
    return ad.softmax_cross_entropy(ad.affine(state.h, w_out, b_out), targets)


GRADCHECK_SPECS = {
    "nru": nru_spec(d=3, h=4, m=9, k=1),
    "nru_relu_heads": nru_spec(d=3, h=4, m=9, k=1, relu_heads=True),
    "lstm": CellSpec("lstm", 3, 4),
    "lstm_chrono": CellSpec("lstm_chrono", 3, 4, t_max=10),
    "gru": CellSpec("gru", 3, 4),
    "janet": CellSpec("janet", 3, 4, t_max=10),
    "rnn_orth": CellSpec("rnn_orth", 3, 4, layer_norm=True),
    "rnn_id": CellSpec("rnn_id", 3, 4, layer_norm=True),
}


@pytest.mark.parametrize("name", sorted(GRADCHECK_SPECS))
def test_five_step_gradient_check(name):
    spec = GRADCHECK_SPECS[name]
    rng = np.random.default_rng(42)
    params = cells.init_params(spec, rng)
    params["out_w"] = cells.xavier_uniform(spec.hidden_size, 3, rng)
    params["out_b"] = np.zeros(3)
    xs = rng.uniform(-1, 1, size=(5, 2, spec.input_size))
    targets = rng.integers(0, 3, size=2)

    report = ad.finite_diff_check(
        lambda p: head_logits_loss(spec, p, xs, targets), params, tol=1e-5
    )
    assert report.passed, (name, report.max_rel_err, report.per_param)


def test_nru_gradient_check_covers_inputs_too():
    spec = nru_spec(d=3, h=4, m=9, k=1)
    rng = np.random.default_rng(43)
    params = cells.init_params(spec, rng)
    params["out_w"] = cells.xavier_uniform(4, 3, rng)
    params["out_b"] = np.zeros(3)
    for t in range(5):
        params[f"x{t}"] = rng.uniform(-1, 1, size=(2, 3))
    targets = np.array([0, 2])

    def f(p):
        tape = ad.Tape()
        bound = bind(tape, {k: v for k, v in p.items() if not k.startswith("out_")})
        state = cells.zero_state(spec, tape, 2)
        for t in range(5):
            state = cells.step(spec, bound, state, bound[f"x{t}"])
        w_out = tape.leaf(p["out_w"], name="out_w")
        b_out = tape.leaf(p["out_b"], name="out_b")
        return ad.softmax_cross_entropy(ad.affine(state.h, w_out, b_out), targets)

    report = ad.finite_diff_check(f, params, tol=1e-5)
    assert report.passed, report.per_param
