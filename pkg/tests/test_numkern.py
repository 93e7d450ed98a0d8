import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from pgvc import numkern
from pgvc.errors import ContractError, ShapeError


def triple_loop_matmul(a, b):
    """Naive reference product, ascending-k accumulation per element."""
    m, kk = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for k in range(kk):
                acc = acc + a[i, k] * b[k, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 5))
        assert np.array_equal(numkern.matmul(np.eye(3), x), x)

    def test_hand_case(self):
        out = numkern.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[5.0], [6.0]]))
        assert np.array_equal(out, np.array([[17.0], [39.0]]))

    def test_matches_triple_loop_bitwise(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(8, 8))
        b = rng.normal(size=(8, 8))
        assert np.array_equal(numkern.matmul(a, b), triple_loop_matmul(a, b))

    def test_random_small_dims_bitwise(self):
        rng = np.random.default_rng(17)
        for _ in range(25):
            m, k, n = rng.integers(1, 17, size=3)
            a = rng.normal(size=(m, k)) * 10.0 ** rng.integers(-3, 4)
            b = rng.normal(size=(k, n))
            assert np.array_equal(numkern.matmul(a, b), triple_loop_matmul(a, b))

    def test_empty_dims(self):
        out = numkern.matmul(np.zeros((0, 4)), np.zeros((4, 3)))
        assert out.shape == (0, 3)
        out = numkern.matmul(np.zeros((2, 0)), np.zeros((0, 3)))
        assert np.array_equal(out, np.zeros((2, 3)))

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            numkern.matmul(np.zeros((2, 3)), np.zeros((4, 2)))
        with pytest.raises(ShapeError):
            numkern.matmul(np.zeros(3), np.zeros((3, 2)))


class TestMaskedSoftmax:
    def test_symmetric_row(self):
        out = numkern.masked_softmax(np.zeros((1, 2)), np.ones((1, 2), dtype=bool))
        assert np.array_equal(out, np.array([[0.5, 0.5]]))

    def test_single_survivor(self):
        out = numkern.masked_softmax(
            np.array([[5.0, 100.0]]), np.array([[True, False]])
        )
        assert np.array_equal(out, np.array([[1.0, 0.0]]))

    def test_matches_exp_sum_oracle(self):
        rng = np.random.default_rng(4)
        scores = rng.normal(size=(4, 4)) * 3
        mask = rng.random((4, 4)) < 0.6
        mask[:, 0] = True  # keep every row satisfiable
        out = numkern.masked_softmax(scores, mask)
        for i in range(4):
            e = np.array([math.exp(scores[i, j]) if mask[i, j] else 0.0 for j in range(4)])
            assert_allclose(out[i], e / e.sum(), rtol=0, atol=1e-12)

    def test_rows_sum_to_one_and_masked_zero(self):
        rng = np.random.default_rng(5)
        scores = rng.normal(size=(30, 17)) * 50
        mask = rng.random((30, 17)) < 0.4
        mask[:, 3] = True
        out = numkern.masked_softmax(scores, mask)
        assert_allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-12)
        assert np.all(out[~mask] == 0.0)

    def test_bitwise_independent_of_masked_values(self):
        rng = np.random.default_rng(6)
        scores = rng.normal(size=(5, 7))
        mask = rng.random((5, 7)) < 0.5
        mask[:, 2] = True
        base = numkern.masked_softmax(scores, mask)
        poisoned = scores.copy()
        poisoned[~mask] = np.array([1e300, -1e300, np.inf, -np.inf, np.nan] * 7)[
            : (~mask).sum()
        ]
        assert np.array_equal(numkern.masked_softmax(poisoned, mask), base)

    def test_fully_masked_row_rejected(self):
        mask = np.array([[True, True], [False, False]])
        with pytest.raises(ContractError):
            numkern.masked_softmax(np.zeros((2, 2)), mask)

    def test_huge_scores_stable(self):
        out = numkern.masked_softmax(
            np.array([[1e6, 1e6 - 1.0]]), np.ones((1, 2), dtype=bool)
        )
        assert np.all(np.isfinite(out))
        assert_allclose(out.sum(), 1.0, atol=1e-12)


class TestLayerNorm:
    def test_constant_vector_zeros(self):
        x = np.full((3, 8), 2.5)
        out = numkern.layer_norm(x, np.ones(8), np.zeros(8), eps=1e-5)
        assert np.array_equal(out, np.zeros((3, 8)))

    def test_already_normalized(self):
        out = numkern.layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2), eps=0.0)
        assert_allclose(out, [1.0, -1.0], atol=1e-15)

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(6, 5, 16)) * 4
        gamma = rng.normal(size=16)
        beta = rng.normal(size=16)
        eps = 1e-5
        out = numkern.layer_norm(x, gamma, beta, eps=eps)
        for idx in np.ndindex(6, 5):
            v = x[idx]
            mu = v.mean()
            var = ((v - mu) ** 2).mean()
            ref = (v - mu) / math.sqrt(var + eps) * gamma + beta
            assert_allclose(out[idx], ref, rtol=0, atol=1e-12)

    def test_zero_width_rejected(self):
        with pytest.raises(ShapeError):
            numkern.layer_norm(np.zeros((2, 0)), np.zeros(0), np.zeros(0))


class TestPointwise:
    def test_sigmoid_zero_exact(self):
        assert numkern.sigmoid(np.array([0.0]))[0] == 0.5

    def test_sigmoid_saturation(self):
        out = numkern.sigmoid(np.array([40.0, -40.0, 800.0, -800.0]))
        assert_allclose(out[0], 1.0, atol=1e-12)
        assert_allclose(out[1], 0.0, atol=1e-12)
        assert np.all(np.isfinite(out))

    def test_gelu_vs_erf_oracle(self):
        xs = np.linspace(-6, 6, 100)
        out = numkern.gelu(xs)
        ref = np.array([0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0))) for x in xs])
        assert np.max(np.abs(out - ref)) < 1e-10


class TestResampleDown:
    def test_constant_plane(self):
        x = np.full((2, 5, 7, 3), 3.25)
        out = numkern.resample_down(x, (2, 3))
        assert_allclose(out, 3.25, rtol=0, atol=1e-12)

    def test_global_mean(self):
        x = np.arange(1, 17, dtype=np.float64).reshape(1, 4, 4, 1)
        out = numkern.resample_down(x, (1, 1))
        assert_allclose(out[0, 0, 0, 0], 8.5, atol=1e-12)

    def test_fractional_overlap_oracle_6_to_4(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(1, 6, 6, 2))
        out = numkern.resample_down(x, (4, 4))
        scale = 6 / 4
        ref = np.zeros((1, 4, 4, 2))
        for oi in range(4):
            for oj in range(4):
                acc = np.zeros(2)
                for ii in range(6):
                    ovi = max(0.0, min((oi + 1) * scale, ii + 1) - max(oi * scale, ii))
                    if ovi <= 0:
                        continue
                    for jj in range(6):
                        ovj = max(
                            0.0, min((oj + 1) * scale, jj + 1) - max(oj * scale, jj)
                        )
                        if ovj > 0:
                            acc += x[0, ii, jj] * ovi * ovj
                ref[0, oi, oj] = acc / (scale * scale)
        assert_allclose(out, ref, rtol=0, atol=1e-12)

    def test_mean_preserved(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(3, 12, 10, 4))
        out = numkern.resample_down(x, (5, 7))
        for t in range(3):
            for c in range(4):
                assert_allclose(
                    out[t, :, :, c].mean(), x[t, :, :, c].mean(), rtol=0, atol=1e-12
                )

    def test_same_size_identity(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(1, 4, 4, 2))
        assert np.array_equal(numkern.resample_down(x, (4, 4)), x)

    def test_bad_targets(self):
        x = np.zeros((1, 4, 4, 1))
        with pytest.raises(ShapeError):
            numkern.resample_down(x, (0, 2))
        with pytest.raises(ContractError):
            numkern.resample_down(x, (8, 4))


class TestResampleUp:
    def test_identity_same_size_bitwise(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(2, 3, 5, 4))
        out = numkern.resample_up(x, (3, 5))
        assert np.array_equal(out, x)

    def test_constant_plane_exact(self):
        for v in (0.1, -2.7, 1 / 3):
            x = np.full((1, 2, 2, 1), v)
            out = numkern.resample_up(x, (7, 5))
            assert np.all(out == v)

    def test_hand_bilinear_2_to_4(self):
        # 1-D half-pixel weights for 2 -> 4: [x0, .75x0+.25x1, .25x0+.75x1, x1]
        x = np.array([[[[0.0], [4.0]], [[8.0], [12.0]]]])  # (1,2,2,1)
        out = numkern.resample_up(x, (4, 4))
        w = np.array([[1.0, 0.0], [0.75, 0.25], [0.25, 0.75], [0.0, 1.0]])
        ref = np.zeros((4, 4))
        src = np.array([[0.0, 4.0], [8.0, 12.0]])
        for i in range(4):
            for j in range(4):
                ref[i, j] = w[i] @ src @ w[j]
        assert_allclose(out[0, :, :, 0], ref, rtol=0, atol=1e-12)

    def test_down_then_up_constant_identity_dyadic(self):
        # integer-ratio weights are exact binary fractions -> bitwise identity
        x = np.full((1, 8, 4, 2), -0.625)
        down = numkern.resample_down(x, (2, 1))
        up = numkern.resample_up(down, (8, 4))
        assert np.all(up == -0.625)

    def test_down_then_up_constant_identity_fractional(self):
        # 8->3 weights involve 1/3: constant survives to within float rounding
        x = np.full((1, 8, 6, 2), -0.625)
        up = numkern.resample_up(numkern.resample_down(x, (3, 2)), (8, 6))
        assert_allclose(up, -0.625, rtol=0, atol=1e-12)

    def test_bad_targets(self):
        x = np.zeros((1, 4, 4, 1))
        with pytest.raises(ShapeError):
            numkern.resample_up(x, (4, 0))
        with pytest.raises(ContractError):
            numkern.resample_up(x, (2, 4))


class TestFiniteness:
    def test_outputs_finite_for_bounded_inputs(self):
        rng = np.random.default_rng(13)
        x = rng.uniform(-1e6, 1e6, size=(2, 6, 6, 3))
        for out in (
            numkern.resample_down(x, (3, 2)),
            numkern.resample_up(x, (9, 11)),
            numkern.sigmoid(x),
            numkern.gelu(x),
            numkern.layer_norm(x, np.ones(3), np.zeros(3)),
        ):
            assert np.all(np.isfinite(out))
