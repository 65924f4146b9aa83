import math

import numpy as np
import pytest

from fuselab.errors import (
    DimMismatchError,
    EmptySequenceError,
    LengthMismatchError,
    NegativeWeightError,
    NotADistributionError,
    TokenOutOfRangeError,
)
from fuselab.losses import (
    CostMatrix,
    LogitFrame,
    embedding_cost_matrix,
    generalized_weighted_loss,
    ot_sequence_loss,
    pairwise_fusion_loss,
    sft_loss,
    sinkhorn_ot,
    standardize,
    topk_select,
    uld_sequence_loss,
    unified_fusion_loss,
    uniform_cost_matrix,
    w1_closed_form,
)
from fuselab.numerics import finite_difference_gradient, softmax
from oracles import lp_transport, w1_bruteforce


def random_simplex(rng, size):
    return rng.dirichlet(np.ones(size))


class TestSftLoss:
    def test_uniform_logits(self):
        result = sft_loss([np.zeros(4)] * 3, [0, 1, 2])
        assert result.loss == pytest.approx(3 * math.log(4), abs=1e-12)

    def test_confident_correct(self):
        z = np.zeros(8)
        z[5] = 50.0
        result = sft_loss([z], [5])
        assert result.loss == pytest.approx(0.0, abs=1e-9)

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=6)
        result = sft_loss([z], [2])
        expected = softmax(z)
        expected[2] -= 1.0
        np.testing.assert_allclose(result.grads[0], expected, atol=1e-14)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            frames = [rng.normal(size=7) for _ in range(3)]
            targets = [int(rng.integers(0, 7)) for _ in range(3)]
            result = sft_loss(frames, targets)
            for t in range(3):
                def f(z, t=t):
                    probe = list(frames)
                    probe[t] = z
                    return sft_loss(probe, targets).loss

                fd = finite_difference_gradient(f, frames[t], 1e-5)
                assert np.max(np.abs(fd - result.grads[t])) < 1e-6

    def test_accepts_logit_frames(self):
        frame = LogitFrame(np.zeros(4), model_id="pivot", timestep=0)
        assert sft_loss([frame], [1]).loss == pytest.approx(math.log(4))

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatchError):
            sft_loss([np.zeros(4)], [0, 1])

    def test_target_out_of_range(self):
        with pytest.raises(TokenOutOfRangeError):
            sft_loss([np.zeros(4)], [4])


class TestW1ClosedForm:
    def test_identity(self):
        p = np.array([0.2, 0.5, 0.3])
        assert w1_closed_form(p, p).value == 0.0

    def test_two_point_example(self):
        result = w1_closed_form([0.7, 0.3], [0.6, 0.4])
        assert result.value == pytest.approx(0.2, abs=1e-12)
        assert result.value == pytest.approx(w1_bruteforce([0.7, 0.3], [0.6, 0.4]), abs=1e-12)

    def test_padding_example(self):
        result = w1_closed_form([1.0], [0.5, 0.5])
        assert result.value == pytest.approx(1.0, abs=1e-12)
        assert result.value == pytest.approx(w1_bruteforce([1.0], [0.5, 0.5]), abs=1e-12)
        assert result.grad_p.shape == (1,)

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            p = random_simplex(rng, int(rng.integers(1, 7)))
            q = random_simplex(rng, int(rng.integers(1, 7)))
            assert w1_closed_form(p, q).value == pytest.approx(w1_bruteforce(p, q), abs=1e-9)

    def test_metric_properties(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            sizes = rng.integers(2, 7, size=3)
            p, q, r = (random_simplex(rng, s) for s in sizes)
            d_pq = w1_closed_form(p, q).value
            d_qp = w1_closed_form(q, p).value
            d_pr = w1_closed_form(p, r).value
            d_qr = w1_closed_form(q, r).value
            assert d_pq >= 0
            assert d_pq == pytest.approx(d_qp, abs=1e-12)
            assert w1_closed_form(p, p).value == 0.0
            assert d_pr <= d_pq + d_qr + 1e-12

    def test_not_a_distribution(self):
        with pytest.raises(NotADistributionError):
            w1_closed_form([0.5, 0.6], [1.0])
        with pytest.raises(NotADistributionError):
            w1_closed_form([-0.1, 1.1], [1.0])


class TestUldSequenceLoss:
    def test_identical_models_zero(self):
        rng = np.random.default_rng(4)
        frames = [rng.normal(size=8) for _ in range(3)]
        result = uld_sequence_loss(frames, frames)
        assert result.loss == pytest.approx(0.0, abs=1e-12)

    def test_single_timestep_reduces_to_w1(self):
        rng = np.random.default_rng(5)
        z_o, z_s = rng.normal(size=5), rng.normal(size=7)
        seq = uld_sequence_loss([z_o], [z_s])
        direct = w1_closed_form(softmax(z_o), softmax(z_s))
        assert seq.loss == pytest.approx(direct.value, abs=1e-12)

    def test_truncates_to_min_length(self):
        rng = np.random.default_rng(6)
        pivot = [rng.normal(size=4) for _ in range(5)]
        source = [rng.normal(size=6) for _ in range(2)]
        result = uld_sequence_loss(pivot, source)
        two_step = uld_sequence_loss(pivot[:2], source)
        assert result.loss == pytest.approx(two_step.loss, abs=1e-12)
        for t in (2, 3, 4):
            np.testing.assert_array_equal(result.grads[t], np.zeros(4))

    def test_empty_rejected(self):
        with pytest.raises(EmptySequenceError):
            uld_sequence_loss([], [np.zeros(3)])


class TestTopkSelect:
    def test_example(self):
        sel = topk_select(np.array([3.0, 1.0, 2.0, 0.0]), 2)
        np.testing.assert_array_equal(sel.values, [3.0, 2.0])
        np.testing.assert_array_equal(sel.indices, [0, 2])

    def test_k_equals_vocab(self):
        z = np.array([1.0, 4.0, -2.0])
        sel = topk_select(z, 3)
        np.testing.assert_array_equal(sel.values, [4.0, 1.0, -2.0])

    def test_oversize_k_clamps(self):
        sel = topk_select(np.array([1.0, 2.0]), 10)
        assert sel.values.size == 2

    def test_tie_break_by_lower_token_id(self):
        sel = topk_select(np.array([5.0, 7.0, 5.0, 5.0]), 2)
        np.testing.assert_array_equal(sel.indices, [1, 0])

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            z = rng.normal(size=int(rng.integers(1, 20)))
            k = int(rng.integers(1, z.size + 3))
            sel = topk_select(z, k)
            expected = np.sort(z)[::-1][: min(k, z.size)]
            np.testing.assert_allclose(sel.values, expected)
            assert np.all(np.diff(sel.values) <= 0)
            assert len(set(sel.indices.tolist())) == sel.indices.size

    def test_peaked_frame_mass_concentrates(self):
        z = np.zeros(32)
        z[3] = 10.0
        probs = softmax(z)
        sel = topk_select(z, 10)
        assert float(np.sum(probs[sel.indices])) > 0.999

    def test_k_below_one_rejected(self):
        with pytest.raises(ValueError):
            topk_select(np.zeros(3), 0)


class TestStandardize:
    def test_hand_case(self):
        st = standardize(topk_select(np.array([2.0, 0.0, -2.0]), 3))
        np.testing.assert_allclose(st.values, np.array([2.0, 0.0, -2.0]) / math.sqrt(8 / 3), atol=1e-12)
        assert not st.degenerate

    def test_constant_frame_is_degenerate(self):
        st = standardize(topk_select(np.array([5.0, 5.0, 5.0]), 3))
        assert st.degenerate
        np.testing.assert_array_equal(st.values, np.zeros(3))

    def test_moments_of_output(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            st = standardize(rng.normal(size=10))
            assert abs(np.mean(st.values)) < 1e-9
            assert abs(np.std(st.values) - 1.0) < 1e-9

    def test_affine_invariance(self):
        rng = np.random.default_rng(9)
        v = rng.normal(size=8)
        a, b = 3.0, -7.0
        st = standardize(v)
        st_affine = standardize(a * v + b)
        np.testing.assert_allclose(st_affine.values, st.values, atol=1e-9)


class TestPairwiseFusionLoss:
    def test_identical_frames_zero(self):
        rng = np.random.default_rng(10)
        frames = [rng.normal(size=12) for _ in range(3)]
        result = pairwise_fusion_loss(frames, frames, k=5)
        assert result.loss == pytest.approx(0.0, abs=1e-12)
        for g in result.grads:
            np.testing.assert_allclose(g, 0.0, atol=1e-12)

    @pytest.mark.parametrize("a", [0.1, 1.0, 10.0])
    @pytest.mark.parametrize("b", [-5.0, 0.0, 7.0])
    def test_affine_invariance(self, a, b):
        rng = np.random.default_rng(11)
        frames = [rng.normal(size=16) for _ in range(2)]
        scaled = [a * z + b for z in frames]
        result = pairwise_fusion_loss(frames, scaled, k=6)
        assert result.loss <= 1e-9

    def test_gradient_matches_finite_differences(self):
        from fuselab.gradcheck import _tie_free_pairwise_frames

        rng = np.random.default_rng(12)
        for _ in range(10):
            (z_o,), (z_s,) = _tie_free_pairwise_frames(rng, 32, 24, 10, 1)
            result = pairwise_fusion_loss([z_o], [z_s], k=10)
            fd = finite_difference_gradient(
                lambda z: pairwise_fusion_loss([z], [z_s], k=10).loss, z_o, 1e-5
            )
            scale = max(np.max(np.abs(result.grads[0])), 1e-8)
            assert np.max(np.abs(fd - result.grads[0])) / scale < 1e-4

    def test_degenerate_frames_tallied(self):
        flat = np.ones(8)
        sharp = np.arange(8.0)
        result = pairwise_fusion_loss([flat, sharp], [sharp, sharp], k=4)
        assert result.degenerate_frames == 1
        np.testing.assert_array_equal(result.grads[0], np.zeros(8))

    def test_full_rank_mode(self):
        rng = np.random.default_rng(13)
        z_o, z_s = rng.normal(size=6), rng.normal(size=4)
        result = pairwise_fusion_loss([z_o], [z_s], k=None)
        st_o = standardize(topk_select(z_o, 4))
        st_s = standardize(topk_select(z_s, 4))
        assert result.loss == pytest.approx(float(np.sum(np.abs(st_o.values - st_s.values))))

    def test_raw_logit_mode(self):
        rng = np.random.default_rng(14)
        z_o, z_s = rng.normal(size=6), rng.normal(size=6)
        result = pairwise_fusion_loss([z_o], [z_s], k=3, standardize_frames=False)
        sel_o = topk_select(z_o, 3)
        sel_s = topk_select(z_s, 3)
        assert result.loss == pytest.approx(float(np.sum(np.abs(sel_o.values - sel_s.values))))


class TestUnifiedFusionLoss:
    def _random_case(self, seed, n_sources=1):
        rng = np.random.default_rng(seed)
        pivot = [rng.normal(size=10) for _ in range(3)]
        sources = [[rng.normal(size=8) for _ in range(3)] for _ in range(n_sources)]
        targets = [int(rng.integers(0, 10)) for _ in range(3)]
        return pivot, sources, targets

    def test_single_source_matches_manual_combination(self):
        pivot, sources, targets = self._random_case(15)
        lam, k = 0.3, 4
        result = unified_fusion_loss(pivot, sources, targets, lam, k)
        pair = pairwise_fusion_loss(pivot, sources[0], k)
        sft = sft_loss(pivot, targets)
        assert result.loss == pytest.approx(lam * pair.loss + (1 - lam) * sft.loss, rel=1e-12)
        for t in range(3):
            np.testing.assert_allclose(
                result.grads[t], lam * pair.grads[t] + (1 - lam) * sft.grads[t], atol=1e-12
            )

    def test_lambda_zero_is_exactly_sft(self):
        pivot, sources, targets = self._random_case(16)
        result = unified_fusion_loss(pivot, sources, targets, 0.0, 5)
        sft = sft_loss(pivot, targets)
        assert result.loss == sft.loss
        for t in range(3):
            np.testing.assert_array_equal(result.grads[t], sft.grads[t])

    def test_half_lambda_parts(self):
        pivot, sources, targets = self._random_case(17, n_sources=3)
        result = unified_fusion_loss(pivot, sources, targets, 0.5, 5)
        pair_sum = sum(pairwise_fusion_loss(pivot, s, 5).loss for s in sources)
        sft = sft_loss(pivot, targets).loss
        assert result.loss == pytest.approx(0.5 * pair_sum + 0.5 * sft, rel=1e-12)
        assert result.sft_term == pytest.approx(sft, rel=1e-12)
        assert result.fusion_term == pytest.approx(pair_sum, rel=1e-12)

    def test_lambda_range_enforced(self):
        pivot, sources, targets = self._random_case(18)
        with pytest.raises(ValueError):
            unified_fusion_loss(pivot, sources, targets, 1.5, 5)

    def test_needs_a_source(self):
        pivot, _, targets = self._random_case(19)
        with pytest.raises(EmptySequenceError):
            unified_fusion_loss(pivot, [], targets, 0.5, 5)


class TestGeneralizedWeightedLoss:
    def test_specialization_equals_unified(self):
        rng = np.random.default_rng(20)
        pivot = [rng.normal(size=9) for _ in range(2)]
        sources = [[rng.normal(size=7) for _ in range(2)] for _ in range(2)]
        targets = [1, 4]
        lam = 0.37
        unified = unified_fusion_loss(pivot, sources, targets, lam, 4)
        general = generalized_weighted_loss(pivot, sources, targets, 1 - lam, [lam, lam], 4)
        assert general.loss == unified.loss
        for a, b in zip(general.grads, unified.grads):
            np.testing.assert_array_equal(a, b)

    def test_appendix_identity(self):
        # lam0 = sum alpha*beta, lam_s = alpha_s (1 - beta_s)  ==>
        # equals the sum of the per-source objectives alpha_s beta_s SFT + alpha_s (1-beta_s) pair_s
        rng = np.random.default_rng(21)
        for _ in range(50):
            pivot = [rng.normal(size=8) for _ in range(2)]
            sources = [[rng.normal(size=6) for _ in range(2)] for _ in range(3)]
            targets = [int(rng.integers(0, 8)) for _ in range(2)]
            alpha = rng.dirichlet(np.ones(3))
            beta = rng.uniform(0.1, 0.9, size=3)
            lam0 = float(np.sum(alpha * beta))
            lam_s = alpha * (1 - beta)
            combined = generalized_weighted_loss(pivot, sources, targets, lam0, lam_s, 3)
            sft = sft_loss(pivot, targets).loss
            per_source = [
                alpha[s] * beta[s] * sft
                + lam_s[s] * pairwise_fusion_loss(pivot, sources[s], 3).loss
                for s in range(3)
            ]
            assert combined.loss == pytest.approx(math.fsum(per_source), abs=1e-12)

    def test_zero_weights_zero_loss(self):
        rng = np.random.default_rng(22)
        pivot = [rng.normal(size=5)]
        sources = [[rng.normal(size=5)]]
        result = generalized_weighted_loss(pivot, sources, [0], 0.0, [0.0], 2)
        assert result.loss == 0.0

    def test_negative_weight_rejected(self):
        with pytest.raises(NegativeWeightError):
            generalized_weighted_loss([np.zeros(4)], [[np.zeros(4)]], [0], -0.1, [0.5], 2)
        with pytest.raises(NegativeWeightError):
            generalized_weighted_loss([np.zeros(4)], [[np.zeros(4)]], [0], 0.1, [-0.5], 2)


class TestSinkhorn:
    def test_self_transport_zero_diagonal_cost(self):
        p = np.array([0.2, 0.3, 0.5])
        cost = 1.0 - np.eye(3)
        result = sinkhorn_ot(p, p, cost, reg=1e-3, max_iter=5000, tol=1e-10)
        assert result.cost == pytest.approx(0.0, abs=1e-3)

    def test_uniform_cost_is_constant(self):
        rng = np.random.default_rng(23)
        p, q = random_simplex(rng, 4), random_simplex(rng, 3)
        result = sinkhorn_ot(p, q, uniform_cost_matrix(4, 3), reg=1e-2, max_iter=2000, tol=1e-10)
        assert result.cost == pytest.approx(1.0, abs=1e-8)

    def test_matches_lp_oracle(self):
        rng = np.random.default_rng(24)
        for _ in range(10):
            p, q = random_simplex(rng, 3), random_simplex(rng, 3)
            cost = rng.uniform(0, 1, size=(3, 3))
            result = sinkhorn_ot(p, q, cost, reg=1e-3, max_iter=20000, tol=1e-9)
            assert result.cost == pytest.approx(lp_transport(p, q, cost), abs=1e-2)

    def test_total_variation_identity(self):
        # unit cost off the diagonal: transport cost equals the total
        # variation distance for same-support distributions as reg -> 0
        rng = np.random.default_rng(25)
        for _ in range(50):
            n = int(rng.integers(2, 6))
            p, q = random_simplex(rng, n), random_simplex(rng, n)
            cost = 1.0 - np.eye(n)
            result = sinkhorn_ot(p, q, cost, reg=2e-3, max_iter=50000, tol=1e-9)
            tv = 0.5 * float(np.sum(np.abs(p - q)))
            assert result.cost == pytest.approx(tv, abs=1e-3)

    def test_marginals_at_convergence(self):
        rng = np.random.default_rng(26)
        p, q = random_simplex(rng, 5), random_simplex(rng, 4)
        cost = rng.uniform(0, 2, size=(5, 4))
        result = sinkhorn_ot(p, q, cost, reg=1e-2, max_iter=5000, tol=1e-8)
        assert result.converged
        assert (
            np.sum(np.abs(result.plan.sum(axis=1) - p))
            + np.sum(np.abs(result.plan.sum(axis=0) - q))
        ) < 1e-8

    def test_no_convergence_flagged(self):
        rng = np.random.default_rng(27)
        p, q = random_simplex(rng, 4), random_simplex(rng, 4)
        cost = rng.uniform(0, 1, size=(4, 4))
        result = sinkhorn_ot(p, q, cost, reg=1e-4, max_iter=1, tol=1e-12)
        assert not result.converged
        assert result.iterations == 1
        assert np.all(np.isfinite(result.plan))

    def test_zero_mass_entries_handled(self):
        p = np.array([0.5, 0.0, 0.5])
        q = np.array([0.25, 0.75])
        cost = np.ones((3, 2))
        result = sinkhorn_ot(p, q, cost, reg=1e-2, max_iter=2000, tol=1e-10)
        np.testing.assert_array_equal(result.plan[1], np.zeros(2))
        assert result.cost == pytest.approx(1.0, abs=1e-8)

    def test_distribution_validation(self):
        with pytest.raises(NotADistributionError):
            sinkhorn_ot([0.5, 0.6], [1.0], np.ones((2, 1)))


class TestEmbeddingCostMatrix:
    def test_identical_tables_zero_diagonal(self):
        rng = np.random.default_rng(28)
        emb = rng.normal(size=(6, 4))
        cost = embedding_cost_matrix(emb, emb, "euclidean")
        np.testing.assert_allclose(np.diag(cost.entries), 0.0, atol=1e-9)
        np.testing.assert_allclose(cost.entries, cost.entries.T, atol=1e-9)

    def test_orthonormal_rows_cosine(self):
        emb = np.eye(4)
        cost = embedding_cost_matrix(emb, emb, "cosine-distance")
        np.testing.assert_allclose(np.diag(cost.entries), 0.0, atol=1e-12)
        off = cost.entries[~np.eye(4, dtype=bool)]
        np.testing.assert_allclose(off, 1.0, atol=1e-12)

    def test_cosine_range(self):
        rng = np.random.default_rng(29)
        cost = embedding_cost_matrix(rng.normal(size=(5, 3)), rng.normal(size=(7, 3)), "cosine-distance")
        assert np.all(cost.entries >= 0) and np.all(cost.entries <= 2)

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatchError):
            embedding_cost_matrix(np.zeros((3, 4)), np.zeros((3, 5)))

    def test_uniform_kind_validation(self):
        with pytest.raises(ValueError):
            CostMatrix(np.full((2, 2), 2.0), "uniform")


class TestOtSequenceLoss:
    def test_equals_summed_sinkhorn_costs(self):
        rng = np.random.default_rng(30)
        pivot = [rng.normal(size=4) for _ in range(2)]
        source = [rng.normal(size=5) for _ in range(2)]
        cost = embedding_cost_matrix(rng.normal(size=(4, 3)), rng.normal(size=(5, 3)))
        result = ot_sequence_loss(pivot, source, cost, reg=1e-2, max_iter=3000, tol=1e-10)
        parts = [
            sinkhorn_ot(softmax(z_o), softmax(z_s), cost, reg=1e-2, max_iter=3000, tol=1e-10)
            for z_o, z_s in zip(pivot, source)
        ]
        assert result.converged
        assert result.loss == pytest.approx(sum(p.reg_cost for p in parts), rel=1e-9)
        assert result.transport_cost == pytest.approx(sum(p.cost for p in parts), rel=1e-9)

    def test_dual_potential_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(31)
        z_o = rng.normal(size=4)
        z_s = rng.normal(size=5)
        cost = embedding_cost_matrix(rng.normal(size=(4, 3)), rng.normal(size=(5, 3)))
        kwargs = dict(reg=5e-2, max_iter=50000, tol=1e-13)
        result = ot_sequence_loss([z_o], [z_s], cost, **kwargs)
        assert result.converged
        fd = finite_difference_gradient(
            lambda z: ot_sequence_loss([z], [z_s], cost, **kwargs).loss, z_o, 1e-5
        )
        scale = max(np.max(np.abs(result.grads[0])), 1e-8)
        assert np.max(np.abs(fd - result.grads[0])) / scale < 1e-3
