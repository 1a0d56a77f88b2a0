"""Recurrent cells, attention, and evolution cells.

The backward passes are hand-derived, so every gradient surface here is
cross-checked against central finite differences; the step functions are
additionally checked against straight-line re-transcriptions of the gate
equations, and the cell identities (unit score, zero score) are exact.
"""

import numpy as np
import pytest

from dien.errors import ConfigError, DegenerateError, DomainError, ShapeError, UsageError
from dien.numerics import finite_diff_grad, max_rel_error, sigmoid
from dien.recurrent import (
    AGRU,
    AIGRU,
    AUGRU,
    AttentionParams,
    EVOLUTION_VARIANTS,
    GruParams,
    InterestTrace,
    agru_step,
    aigru_inputs,
    attention_backward,
    attention_forward,
    attention_scores,
    augru_step,
    evolve,
    evolve_backward,
    evolve_forward,
    gru_backward,
    gru_forward,
    gru_sequence,
    gru_step,
    step_masks,
)


def zero_params(n_input, n_hidden):
    z = np.zeros
    return GruParams(
        w_update=z((n_hidden, n_input)), u_update=z((n_hidden, n_hidden)), b_update=z(n_hidden),
        w_reset=z((n_hidden, n_input)), u_reset=z((n_hidden, n_hidden)), b_reset=z(n_hidden),
        w_cand=z((n_hidden, n_input)), u_cand=z((n_hidden, n_hidden)), b_cand=z(n_hidden),
    )


def rand_params(n_input, n_hidden, seed):
    return GruParams.init(n_input, n_hidden, np.random.default_rng(seed))


def reference_gru_step(p, x, h):
    """Independent transcription of the gate equations, kept deliberately
    flat so a transcription slip in the library shows up as a mismatch."""
    u = sigmoid(x @ p.w_update.T + h @ p.u_update.T + p.b_update)
    r = sigmoid(x @ p.w_reset.T + h @ p.u_reset.T + p.b_reset)
    c = np.tanh(x @ p.w_cand.T + r * (h @ p.u_cand.T) + p.b_cand)
    return (1.0 - u) * h + u * c


class TestStepFunctions:
    def test_zero_params_halve_state(self):
        # all-zero parameters: u = 1/2, cand = 0, so one step halves h_prev
        p = zero_params(2, 3)
        h = np.array([2.0, -4.0, 6.0])
        np.testing.assert_array_equal(gru_step(p, np.ones(2), h), 0.5 * h)

    def test_agru_midpoint_score(self):
        p = zero_params(2, 3)
        h = np.array([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(agru_step(p, np.zeros(2), h, 0.5), 0.5 * h)

    def test_matches_reference_transcription(self):
        rng = np.random.default_rng(31)
        p = rand_params(3, 4, seed=32)
        for _ in range(50):
            x = rng.standard_normal(3)
            h = rng.standard_normal(4)
            np.testing.assert_array_equal(gru_step(p, x, h), reference_gru_step(p, x, h))

    def test_augru_matches_reference(self):
        rng = np.random.default_rng(33)
        p = rand_params(3, 4, seed=34)
        for _ in range(50):
            x = rng.standard_normal(3)
            h = rng.standard_normal(4)
            a = rng.uniform(0.0, 1.0)
            u = sigmoid(x @ p.w_update.T + h @ p.u_update.T + p.b_update)
            r = sigmoid(x @ p.w_reset.T + h @ p.u_reset.T + p.b_reset)
            c = np.tanh(x @ p.w_cand.T + r * (h @ p.u_cand.T) + p.b_cand)
            expect = (1.0 - a * u) * h + a * u * c
            np.testing.assert_array_equal(augru_step(p, x, h, a), expect)

    def test_batched_rows_match_single(self):
        # a batch goes through GEMM rather than GEMV, so agreement is to
        # rounding, not bit for bit
        rng = np.random.default_rng(35)
        p = rand_params(3, 4, seed=36)
        xs = rng.standard_normal((6, 3))
        hs = rng.standard_normal((6, 4))
        batched = gru_step(p, xs, hs)
        for k in range(6):
            np.testing.assert_allclose(batched[k], gru_step(p, xs[k], hs[k]), atol=1e-12)

    def test_state_width_guard(self):
        p = rand_params(3, 4, seed=37)
        with pytest.raises(ShapeError):
            gru_step(p, np.ones(3), np.ones(5))
        with pytest.raises(ShapeError):
            gru_step(p, np.ones(2), np.ones(4))

    def test_score_domain_guard(self):
        p = rand_params(2, 2, seed=38)
        for bad in (-0.01, 1.01):
            with pytest.raises(DomainError):
                augru_step(p, np.ones(2), np.ones(2), bad)
            with pytest.raises(DomainError):
                agru_step(p, np.ones(2), np.ones(2), bad)


class TestCellIdentities:
    """Exact algebraic reductions between the cells, checked bitwise."""

    def test_unit_score_reduces_to_plain_step(self):
        rng = np.random.default_rng(40)
        p = rand_params(4, 4, seed=41)
        for _ in range(1000):
            x = rng.standard_normal(4)
            h = rng.standard_normal(4)
            np.testing.assert_array_equal(augru_step(p, x, h, 1.0), gru_step(p, x, h))

    def test_zero_score_is_identity(self):
        rng = np.random.default_rng(42)
        p = rand_params(4, 4, seed=43)
        for _ in range(1000):
            x = rng.standard_normal(4)
            h = rng.standard_normal(4)
            np.testing.assert_array_equal(augru_step(p, x, h, 0.0), h)
            np.testing.assert_array_equal(agru_step(p, x, h, 0.0), h)

    def test_unit_scores_make_input_scaling_plain(self):
        # score 1 leaves the scaled inputs bit-identical, so the whole
        # input-scaling evolution trace must equal a plain recurrence
        rng = np.random.default_rng(44)
        p = rand_params(4, 4, seed=45)
        states = rng.standard_normal((3, 7, 4))
        lens = np.array([7, 4, 1])
        ones = np.ones((3, 7))
        evolved, final, _ = evolve_forward(p, states, ones, lens, AIGRU)
        plain, _ = gru_forward(p, states, lens)
        np.testing.assert_array_equal(evolved, plain)
        np.testing.assert_array_equal(final[0], plain[0, 6])

    def test_input_scaling_values(self):
        rng = np.random.default_rng(46)
        states = rng.standard_normal((5, 3))
        scores = rng.uniform(0, 1, size=5)
        np.testing.assert_array_equal(aigru_inputs(states, scores), states * scores[:, None])
        with pytest.raises(ShapeError):
            aigru_inputs(states, scores[:4])


class TestSequenceEngine:
    def test_masks(self):
        np.testing.assert_array_equal(
            step_masks([2, 0, 3], 3, 3),
            [[1.0, 1.0, 0.0], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0]],
        )

    def test_batched_equals_per_row(self):
        rng = np.random.default_rng(50)
        p = rand_params(3, 4, seed=51)
        xs = rng.standard_normal((4, 6, 3))
        lens = np.array([6, 3, 1, 0])
        states, _ = gru_forward(p, xs, lens)
        for k in range(4):
            trace = gru_sequence(p, xs[k], None, int(lens[k]))
            np.testing.assert_allclose(states[k], trace.hidden, atol=1e-12)

    def test_frozen_rows_repeat_last_state(self):
        rng = np.random.default_rng(52)
        p = rand_params(2, 3, seed=53)
        xs = rng.standard_normal((1, 5, 2))
        states, _ = gru_forward(p, xs, [2])
        np.testing.assert_array_equal(states[0, 2], states[0, 1])
        np.testing.assert_array_equal(states[0, 4], states[0, 1])

    def test_zero_length_row_stays_at_h0(self):
        p = rand_params(2, 3, seed=54)
        xs = np.ones((1, 4, 2))
        h0 = np.array([1.0, 2.0, 3.0])
        states, _ = gru_forward(p, xs, [0], h0=h0)
        np.testing.assert_array_equal(states[0], np.broadcast_to(h0, (4, 3)))

    def test_input_shape_guards(self):
        p = rand_params(2, 3, seed=55)
        with pytest.raises(ShapeError):
            gru_forward(p, np.ones((2, 3)), [1, 1])
        with pytest.raises(ShapeError):
            gru_forward(p, np.ones((2, 3, 5)), [1, 1])

    def test_backward_rejects_foreign_cache(self):
        p = rand_params(2, 3, seed=56)
        with pytest.raises(UsageError):
            gru_backward(p, {"kind": "attention"}, np.zeros((1, 1, 3)))

    def test_one_step_zero_param_backward(self):
        # h1 = (1-u) h0 with u = 1/2 and cand independent of h0, so the
        # gradient of sum(h1) w.r.t. h0 is exactly one half per coordinate
        p = zero_params(2, 3)
        xs = np.ones((1, 1, 2))
        _, cache = gru_forward(p, xs, [1], h0=np.array([1.0, -2.0, 0.5]))
        _, _, d_h0 = gru_backward(p, cache, np.ones((1, 1, 3)))
        np.testing.assert_array_equal(d_h0, [[0.5, 0.5, 0.5]])


def flat_check(build_loss, arr, analytic, tol=1e-6):
    """Finite-difference a scalar loss along the entries of one array."""
    shape = arr.shape

    def f(flat):
        return build_loss(flat.reshape(shape))

    numeric = finite_diff_grad(f, arr.ravel().copy(), epsilon=1e-6)
    assert max_rel_error(numeric.reshape(shape), analytic, tol_floor=1e-4) < tol


class TestRecurrentGradients:
    """Every gradient surface of the sequence engine against central
    differences; ragged lengths keep the frozen-row logic honest."""

    def setup_method(self):
        rng = np.random.default_rng(60)
        self.p = rand_params(3, 4, seed=61)
        self.xs = rng.standard_normal((3, 5, 3))
        self.lens = np.array([5, 2, 4])
        self.h0 = rng.standard_normal(4)
        self.proj = rng.standard_normal((3, 5, 4))  # fixed upstream weights

    def loss_forward(self, xs=None, h0=None, params=None):
        states, _ = gru_forward(params or self.p,
                                self.xs if xs is None else xs,
                                self.lens,
                                h0=self.h0 if h0 is None else h0)
        return float((states * self.proj).sum())

    def test_input_gradient(self):
        _, cache = gru_forward(self.p, self.xs, self.lens, h0=self.h0)
        _, d_inputs, _ = gru_backward(self.p, cache, self.proj)
        flat_check(lambda a: self.loss_forward(xs=a), self.xs, d_inputs)

    def test_initial_state_gradient(self):
        _, cache = gru_forward(self.p, self.xs, self.lens, h0=self.h0)
        _, _, d_h0 = gru_backward(self.p, cache, self.proj)
        flat_check(lambda a: self.loss_forward(h0=a), self.h0, d_h0.sum(axis=0))

    def test_parameter_gradients(self):
        _, cache = gru_forward(self.p, self.xs, self.lens, h0=self.h0)
        grads, _, _ = gru_backward(self.p, cache, self.proj)
        for name, arr in self.p.arrays().items():
            def loss(a, name=name):
                fields = {k: v.copy() for k, v in self.p.arrays().items()}
                fields[name] = a
                return self.loss_forward(params=GruParams(**fields))

            flat_check(loss, arr, grads[name])


class TestEvolutionGradients:
    def setup_method(self):
        rng = np.random.default_rng(62)
        self.p = rand_params(4, 4, seed=63)
        self.states = rng.standard_normal((3, 5, 4))
        # keep a comfortable margin inside [0, 1] so FD bumps stay legal
        self.scores = rng.uniform(0.1, 0.9, size=(3, 5))
        self.lens = np.array([5, 3, 1])
        self.proj = rng.standard_normal((3, 5, 4))
        self.proj_final = rng.standard_normal((3, 4))

    def loss(self, variant, states=None, scores=None):
        evolved, final, _ = evolve_forward(
            self.p,
            self.states if states is None else states,
            self.scores if scores is None else scores,
            self.lens, variant,
        )
        return float((evolved * self.proj).sum() + (final * self.proj_final).sum())

    @pytest.mark.parametrize("variant", EVOLUTION_VARIANTS)
    def test_state_gradient(self, variant):
        _, _, cache = evolve_forward(self.p, self.states, self.scores, self.lens, variant)
        _, d_states, _ = evolve_backward(self.p, cache, self.proj, self.proj_final)
        flat_check(lambda a: self.loss(variant, states=a), self.states, d_states)

    @pytest.mark.parametrize("variant", EVOLUTION_VARIANTS)
    def test_score_gradient(self, variant):
        _, _, cache = evolve_forward(self.p, self.states, self.scores, self.lens, variant)
        _, _, d_scores = evolve_backward(self.p, cache, self.proj, self.proj_final)
        flat_check(lambda a: self.loss(variant, scores=a), self.scores, d_scores)

    @pytest.mark.parametrize("variant", EVOLUTION_VARIANTS)
    def test_parameter_gradients(self, variant):
        _, _, cache = evolve_forward(self.p, self.states, self.scores, self.lens, variant)
        grads, _, _ = evolve_backward(self.p, cache, self.proj, self.proj_final)
        for name, arr in self.p.arrays().items():
            def loss(a, name=name):
                fields = {k: v.copy() for k, v in self.p.arrays().items()}
                fields[name] = a
                p2 = GruParams(**fields)
                evolved, final, _ = evolve_forward(
                    p2, self.states, self.scores, self.lens, variant)
                return float((evolved * self.proj).sum()
                             + (final * self.proj_final).sum())

            if name.endswith("update") and variant == AGRU:
                # the gate-replacing cell never evaluates its update gate
                np.testing.assert_array_equal(grads[name], np.zeros_like(arr))
            else:
                flat_check(loss, arr, grads[name])

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            evolve_forward(self.p, self.states, self.scores, self.lens, "gru")

    def test_score_shape_guard(self):
        with pytest.raises(ShapeError):
            evolve_forward(self.p, self.states, self.scores[:, :4], self.lens, AUGRU)

    def test_cache_guard(self):
        with pytest.raises(UsageError):
            evolve_backward(self.p, {"kind": "gru"}, self.proj, None)


class TestAttention:
    def test_identity_weight_oracle(self):
        states = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        target = np.array([[1.0, 0.0]])
        scores, _ = attention_forward(states, target, AttentionParams(np.eye(2)), [2])
        np.testing.assert_allclose(scores[0], [0.7310586, 0.2689414], atol=1e-7)

    def test_rows_sum_to_one_masked_zero(self):
        rng = np.random.default_rng(70)
        params = AttentionParams.init(4, 3, rng)
        states = rng.standard_normal((4, 6, 4))
        targets = rng.standard_normal((4, 3))
        lens = np.array([6, 2, 1, 4])
        scores, _ = attention_forward(states, targets, params, lens)
        np.testing.assert_allclose(scores.sum(axis=1), 1.0, atol=1e-12)
        for k, n in enumerate(lens):
            np.testing.assert_array_equal(scores[k, n:], np.zeros(6 - n))
            assert np.all(scores[k, :n] > 0.0)

    def test_logit_shift_invariance(self):
        """Adding a constant to every valid logit leaves the weights alone.
        With a constant leading state coordinate, bumping the first row of
        the bilinear form shifts all logits equally."""
        rng = np.random.default_rng(71)
        w = rng.standard_normal((3, 2))
        target = np.array([2.0, -1.0])
        states = rng.standard_normal((1, 5, 3))
        states[..., 0] = 1.0
        shift = np.zeros((3, 2))
        shift[0] = 7.5 * target / float(target @ target)
        base, _ = attention_forward(states, target[None], AttentionParams(w), [5])
        bumped, _ = attention_forward(states, target[None], AttentionParams(w + shift), [5])
        np.testing.assert_allclose(base, bumped, atol=1e-12)

    def test_zero_valid_rejected(self):
        params = AttentionParams(np.eye(2))
        with pytest.raises(DegenerateError):
            attention_forward(np.ones((1, 3, 2)), np.ones((1, 2)), params, [0])

    def test_single_trace_wrapper(self):
        rng = np.random.default_rng(72)
        params = AttentionParams.init(3, 2, rng)
        trace = InterestTrace(hidden=rng.standard_normal((4, 3)), valid_len=3)
        target = rng.standard_normal(2)
        scores = attention_scores(trace, target, params)
        batch, _ = attention_forward(trace.hidden[None], target[None], params, [3])
        np.testing.assert_array_equal(scores, batch[0])
        with pytest.raises(DegenerateError):
            attention_scores(InterestTrace(trace.hidden, 0), target, params)

    def test_gradients(self):
        rng = np.random.default_rng(73)
        params = AttentionParams.init(4, 3, rng)
        states = rng.standard_normal((3, 5, 4))
        targets = rng.standard_normal((3, 3))
        lens = np.array([5, 2, 4])
        proj = rng.standard_normal((3, 5))
        _, cache = attention_forward(states, targets, params, lens)
        d_w, d_states, d_targets = attention_backward(params, cache, proj)

        def loss(w=None, s=None, t=None):
            got, _ = attention_forward(
                states if s is None else s, targets if t is None else t,
                AttentionParams(params.w if w is None else w), lens)
            return float((got * proj).sum())

        flat_check(lambda a: loss(w=a), params.w, d_w)
        flat_check(lambda a: loss(s=a), states, d_states)
        flat_check(lambda a: loss(t=a), targets, d_targets)

    def test_cache_guard(self):
        with pytest.raises(UsageError):
            attention_backward(AttentionParams(np.eye(2)), {"kind": "gru"}, np.zeros((1, 2)))


class TestSingleSequenceSurfaces:
    def test_gru_sequence_freezes_after_valid(self):
        rng = np.random.default_rng(80)
        p = rand_params(2, 3, seed=81)
        xs = rng.standard_normal((5, 2))
        trace = gru_sequence(p, xs, None, 2)
        assert trace.valid_len == 2
        np.testing.assert_array_equal(trace.hidden[2], trace.hidden[1])
        np.testing.assert_array_equal(trace.hidden[4], trace.hidden[1])

    def test_gru_sequence_bad_valid_len(self):
        p = rand_params(2, 3, seed=82)
        with pytest.raises(ShapeError):
            gru_sequence(p, np.ones((4, 2)), None, 5)

    @pytest.mark.parametrize("variant", EVOLUTION_VARIANTS)
    def test_evolve_matches_batched_engine(self, variant):
        rng = np.random.default_rng(83)
        p = rand_params(3, 3, seed=84)
        hidden = rng.standard_normal((6, 3))
        scores = rng.uniform(0, 1, size=6)
        trace = InterestTrace(hidden=hidden, valid_len=4)
        single = evolve(p, trace, scores, variant)
        batched, final, _ = evolve_forward(p, hidden[None], scores[None], [4], variant)
        np.testing.assert_allclose(single.evolved, batched[0], atol=1e-12)
        np.testing.assert_allclose(single.final, final[0], atol=1e-12)
        np.testing.assert_array_equal(single.final, single.evolved[3])

    def test_evolve_variant_and_shape_guards(self):
        p = rand_params(2, 2, seed=85)
        trace = InterestTrace(hidden=np.ones((3, 2)), valid_len=3)
        with pytest.raises(ConfigError):
            evolve(p, trace, np.full(3, 0.5), "bogus")
        with pytest.raises(ShapeError):
            evolve(p, trace, np.full(4, 0.5), AUGRU)


class TestParamContainers:
    def test_shape_validation_names_field(self):
        with pytest.raises(ShapeError, match="u_update"):
            GruParams(
                w_update=np.zeros((3, 2)), u_update=np.zeros((3, 4)), b_update=np.zeros(3),
                w_reset=np.zeros((3, 2)), u_reset=np.zeros((3, 3)), b_reset=np.zeros(3),
                w_cand=np.zeros((3, 2)), u_cand=np.zeros((3, 3)), b_cand=np.zeros(3),
            )

    def test_init_bound_and_determinism(self):
        a = GruParams.init(3, 9, np.random.default_rng(9))
        b = GruParams.init(3, 9, np.random.default_rng(9))
        for name, arr in a.arrays().items():
            assert np.all(np.abs(arr) <= 1.0 / 3.0)
            np.testing.assert_array_equal(arr, b.arrays()[name])

    def test_zero_grads_shapes(self):
        p = rand_params(2, 3, seed=86)
        grads = p.zero_grads()
        assert set(grads) == set(p.arrays())
        for name, arr in grads.items():
            assert arr.shape == p.arrays()[name].shape
            assert not np.any(arr)
