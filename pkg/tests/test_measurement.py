import numpy as np
import pytest

from leo_gfra.channel import slice_row_coords
from leo_gfra.grid import centered_mod, make_grid
from leo_gfra.measurement import (build_all_measurements, build_measurement, complex_noise,
                                  gen_pilots, snr_to_sigma2, synth_observation)

from conftest import crandn


def double_sum(pilots, h, l, grid):
    """y[k] = sum_u sum_l' sum_k' P_u[<k - k'>_N, (l - l') mod M] h[u, l', k'] by direct summation."""
    M, N = grid.M, grid.N
    ks = grid.doppler_indices()
    y = np.zeros(N, dtype=complex)
    for i, hi in enumerate(h):
        u, lp, kp_row = slice_row_coords(i, grid)
        kp = kp_row - grid.doppler_offset
        for k_row, k in enumerate(ks):
            y[k_row] += pilots[u][centered_mod(k - kp, N) + grid.doppler_offset, (l - lp) % M] * hi
    return y


class TestPilots:
    def test_shape_and_determinism(self, grid):
        a = gen_pilots(np.random.default_rng(5), 3, grid)
        b = gen_pilots(np.random.default_rng(5), 3, grid)
        assert len(a) == 3 and a[0].shape == (grid.N, grid.M)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert not np.array_equal(a[0], a[1])

    def test_variance(self, grid):
        # chi-square concentration: 560 entries, [0.7, 1.3] band holds with overwhelming probability
        for seed in range(50):
            p = gen_pilots(np.random.default_rng(seed), 1, grid)[0]
            assert 0.7 / 560 <= np.mean(np.abs(p) ** 2) <= 1.3 / 560

    def test_needs_a_device(self, grid, rng):
        with pytest.raises(ValueError):
            gen_pilots(rng, 0, grid)


class TestBuildMeasurement:
    def test_degenerate(self, rng):
        g = make_grid(1, 1, 1000.0, 0)
        p = gen_pilots(rng, 1, g)
        X = build_measurement(p, 0, g)
        assert X.shape == (1, 1) and X[0, 0] == p[0][0, 0]

    def test_two_by_two_circulant(self, rng):
        g = make_grid(1, 2, 1000.0, 0)     # k in {-1, 0}: rows 0, 1
        p = gen_pilots(rng, 1, g)[0]
        X = build_measurement([p], 0, g)
        # <k - k'>_2: (-1,-1)->0, (-1,0)->-1, (0,-1)->-1, (0,0)->0; storage row = value + 1
        expected = np.array([[p[1, 0], p[0, 0]], [p[0, 0], p[1, 0]]])
        assert np.array_equal(X, expected)

    def test_circulant_blocks(self, grid, rng):
        p = gen_pilots(rng, 2, grid)
        X = build_measurement(p, 5, grid)
        N = grid.N
        for col0 in (0, 7 * N, grid.M * N + 3 * N):
            block = X[:, col0:col0 + N]
            for r in range(1, N):
                assert np.array_equal(block[r], np.roll(block[r - 1], 1))

    def test_out_of_range(self, grid, rng):
        p = gen_pilots(rng, 1, grid)
        for l in (-1, grid.M):
            with pytest.raises(IndexError):
                build_measurement(p, l, grid)

    def test_double_sum_small(self, rng):
        g = make_grid(3, 5, 1000.0, 1)
        p = gen_pilots(rng, 2, g)
        for l in range(3):
            h = crandn(rng, 2 * 3 * 5)
            assert np.abs(build_measurement(p, l, g) @ h - double_sum(p, h, l, g)).max() < 1e-12

    def test_double_sum_full_size(self, grid, rng):
        p = gen_pilots(rng, 5, grid)
        for l in (0, 9):
            h = crandn(rng, 5 * grid.M * grid.N)
            assert np.abs(build_measurement(p, l, grid) @ h - double_sum(p, h, l, grid)).max() < 1e-10

    def test_stack(self, small_grid, rng):
        p = gen_pilots(rng, 2, small_grid)
        Xs = build_all_measurements(p, small_grid)
        assert Xs.shape == (small_grid.M, small_grid.N, 2 * small_grid.M * small_grid.N)
        assert np.array_equal(Xs[2], build_measurement(p, 2, small_grid))


class TestNoise:
    @pytest.mark.parametrize("snr, expected", [(0.0, 1 / 560), (10.0, 1.7857e-4)])
    def test_sigma2(self, grid, snr, expected):
        assert snr_to_sigma2(snr, grid) == pytest.approx(expected, rel=1e-4)

    def test_high_snr_limit(self, grid):
        assert snr_to_sigma2(300.0, grid) < 1e-30

    def test_noiseless(self, small_grid, rng):
        X = crandn(rng, 6, 20)
        H = crandn(rng, 20, 3)
        assert np.array_equal(synth_observation(rng, X, H, 0.0), X @ H)

    def test_noise_only_variance(self, rng):
        X = crandn(rng, 40, 10)
        Y = synth_observation(rng, X, np.zeros((10, 25)), 0.3)
        assert np.var(Y) == pytest.approx(0.3, rel=0.1)
        assert np.var(Y.real) == pytest.approx(0.15, rel=0.15)

    def test_deterministic(self, rng):
        X = crandn(rng, 4, 6)
        H = crandn(rng, 6, 2)
        a = synth_observation(np.random.default_rng(1), X, H, 0.1)
        b = synth_observation(np.random.default_rng(1), X, H, 0.1)
        assert np.array_equal(a, b)

    def test_shape_error(self, rng):
        with pytest.raises(ValueError):
            synth_observation(rng, np.ones((3, 4)), np.ones((5, 2)), 0.1)

    def test_unit_noise(self, rng):
        z = complex_noise(rng, (200, 200))
        assert np.mean(np.abs(z) ** 2) == pytest.approx(1.0, rel=0.02)
