import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from leo_gfra.gamp import GampDivergence
from leo_gfra.hyper import (EPSILON_FLOOR, EmOptions, Kernel2D, LearnedFilters, TrainingSchedule,
                            TrainingSet, correlate, dl_gamp_loss, fd_gradient, posterior_second_moment,
                            run_conv_gamp, run_dl_gamp, run_em_gamp, train_filters, update_alpha,
                            update_sigma2, update_theta)

from conftest import crandn


def direct_filter(field, w, sign):
    """Naive zero-padded loop; sign -1 convolution, +1 cross-correlation."""
    R, C = field.shape
    dx, dy = w.shape[0] // 2, w.shape[1] // 2
    out = np.zeros_like(field)
    for i in range(R):
        for j in range(C):
            for p in range(-dx, dx + 1):
                for q in range(-dy, dy + 1):
                    ii, jj = i + sign * p, j + sign * q
                    if 0 <= ii < R and 0 <= jj < C:
                        out[i, j] += w[p + dx, q + dy] * field[ii, jj]
    return out


def sparse_problem(rng, n_rows=16, n_unknowns=32, cols=1, k=1, batch=()):
    X = crandn(rng, *batch, n_rows, n_unknowns) / np.sqrt(n_rows)
    H = np.zeros((*batch, n_unknowns, cols), complex)
    for idx in np.ndindex(*batch):
        sup = rng.choice(n_unknowns, size=k, replace=False)
        H[idx][sup] = crandn(rng, k, cols) + 2
    return X, H


class TestKernel2D:
    def test_delta(self):
        k = Kernel2D.delta()
        assert k.beta.shape == (3, 3) and k.beta.sum() == 1 and k.beta[1, 1] == 1

    @pytest.mark.parametrize("beta", [0.5, 1.0])
    def test_uniform(self, beta):
        k = Kernel2D.uniform(beta)
        assert k.beta[1, 1] == 1 and k.beta.sum() == pytest.approx(1 + 8 * beta)

    @pytest.mark.parametrize("bad", [np.ones((2, 3)), np.full((3, 3), 1.5), np.zeros((3, 3)),
                                     -np.ones((3, 3))])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            Kernel2D(bad)


class TestSecondMoment:
    @pytest.mark.parametrize("h,g,want", [(0, 0.01, 0.01), (1 + 0j, 0.0, 1.0), (3 + 4j, 2.0, 27.0)])
    def test_examples(self, h, g, want):
        assert posterior_second_moment(np.full((2, 2), h, complex), g) == pytest.approx(np.full((2, 2), want))

    def test_literal_squares_variance(self):
        assert posterior_second_moment(np.array([[3 + 4j]]), 2.0, literal=True)[0, 0] == 29.0


class TestCorrelate:
    @pytest.mark.parametrize("mode", ["convolution", "correlation"])
    def test_delta_identity(self, rng, mode):
        f = rng.random((7, 9))
        assert np.array_equal(correlate(f, Kernel2D.delta().beta, mode), f)

    def test_block_of_ones(self):
        f = np.zeros((5, 6))
        f[2, 3] = 1.0
        out = correlate(f, np.ones((3, 3)))
        want = np.zeros((5, 6))
        want[1:4, 2:5] = 1.0
        assert np.array_equal(out, want)

    @pytest.mark.parametrize("shape", [(3, 3), (3, 5), (5, 3)])
    @pytest.mark.parametrize("mode,sign", [("convolution", -1), ("correlation", 1)])
    def test_against_direct_sum(self, rng, shape, mode, sign):
        f = rng.random((2, 8, 11))
        w = rng.standard_normal(shape)
        out = correlate(f, w, mode)
        for b in range(2):
            assert np.allclose(out[b], direct_filter(f[b], w, sign), atol=1e-13)

    def test_flip_relation(self, rng):
        f, w = rng.random((6, 6)), rng.random((3, 3))
        assert np.allclose(correlate(f, w, "convolution"), correlate(f, w[::-1, ::-1], "correlation"))

    @settings(max_examples=30, deadline=None)
    @given(arrays(float, (6, 7), elements=st.floats(0, 10)), arrays(float, (3, 3), elements=st.floats(0, 1)))
    def test_symmetric_kernel_equality(self, f, w):
        w = (w + w[::-1, ::-1]) / 2
        assert np.array_equal(correlate(f, w, "convolution"), correlate(f, w, "correlation"))

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            correlate(np.ones((3, 3)), np.ones((3, 3)), "fft")


class TestUpdates:
    def test_alpha_examples(self):
        assert update_alpha(0.0, 1.0, 1e-4) == pytest.approx(1e4)
        assert update_alpha(0.0, 0.3, 0.3) == 1.0
        assert update_alpha(1e300, 1.0, 1e-4) < 1e-299

    @settings(max_examples=50)
    @given(st.floats(0, 1e6), st.floats(1e-6, 1e3), st.floats(0.1, 5), st.floats(1e-6, 1))
    def test_alpha_monotone(self, omega, bump, a, b):
        assert update_alpha(omega + bump, a, b) < update_alpha(omega, a, b)

    def test_theta_delta_is_reciprocal(self, rng):
        alpha = rng.random((5, 4)) + 0.1
        assert np.array_equal(update_theta(alpha, Kernel2D.delta().beta), 1.0 / alpha)

    def test_theta_uniform_interior(self):
        w = Kernel2D.uniform(0.5).beta
        theta = update_theta(np.full((6, 6), 2.0), w)
        assert theta[2, 3] == pytest.approx(1.0 / (w.sum() * 2.0))

    def test_theta_floor(self):
        theta = update_theta(np.ones((4, 4)), -np.ones((3, 3)))
        assert np.all(theta == 1.0 / EPSILON_FLOOR)

    def test_sigma2_scalar(self):
        s2 = update_sigma2(np.array([[2.0 + 0j]]), np.array([[1.0 + 0j]]), np.array([[1.0 + 0j]]),
                           np.array([[0.5]]), np.array([[1.0]]), 1.0, r=0.0, s=0.0, count=1)
        assert s2 == pytest.approx(1.5)

    def test_sigma2_perfect_fit(self, rng):
        X = crandn(rng, 4, 6)
        h = crandn(rng, 6, 2)
        g = np.full((6, 2), 0.3)
        s2 = update_sigma2(X @ h, X, h, g, g, 1.0)
        assert s2 == pytest.approx(1e-4 / (8 + 1e-4))

    def test_sigma2_null_estimate(self, rng):
        X, Y = crandn(rng, 4, 6), crandn(rng, 4, 2)
        g = np.full((6, 2), 0.3)
        s2 = update_sigma2(Y, X, np.zeros((6, 2)), g, g, 1.0)
        assert s2 == pytest.approx((np.sum(np.abs(Y) ** 2) + 1e-4) / (8 + 1e-4))


class TestEstimators:
    def test_one_sparse_support(self, rng):
        for _ in range(5):
            X, H = sparse_problem(rng)
            res = run_conv_gamp(X, X @ H, Kernel2D.delta(), EmOptions(T_max=300, sigma2_init=1e-6))
            est = np.argmax(np.abs(res.h_hat[:, 0]))
            # exhaustive search over single-entry supports
            fits = [np.linalg.norm(X @ H - np.outer(X[:, i], np.linalg.lstsq(X[:, i:i + 1], X @ H, rcond=None)[0]))
                    for i in range(X.shape[1])]
            assert est == np.argmin(fits) == np.flatnonzero(H[:, 0])[0]
            off = np.delete(np.abs(res.h_hat[:, 0]), est)
            assert off.max() < 1e-2 * np.abs(res.h_hat[est, 0])

    @pytest.mark.parametrize("seed", range(5))
    def test_reduction_bit_identical(self, seed):
        rng = np.random.default_rng(seed)
        X, H = sparse_problem(rng, 12, 24, cols=4, k=3, batch=(2,))
        Y = X @ H + 0.05 * crandn(rng, 2, 12, 4)
        opts = EmOptions(T_max=40, a=1.1)
        em = run_em_gamp(X, Y, opts)
        conv = run_conv_gamp(X, Y, Kernel2D.delta(), opts)
        dl = run_dl_gamp(X, Y, LearnedFilters.from_kernel(Kernel2D.delta(), a=1.1), opts)
        for other in (conv, dl):
            assert np.array_equal(em.h_hat, other.h_hat)
            assert np.array_equal(em.gamma_hat, other.gamma_hat)
            assert np.array_equal(em.sigma2, other.sigma2)

    def test_dl_from_kernel_matches_conv(self, rng):
        X, H = sparse_problem(rng, 12, 24, cols=4, k=3)
        Y = X @ H + 0.05 * crandn(rng, 12, 4)
        k = Kernel2D(np.array([[0.2, 0.4, 0.1], [0.3, 1.0, 0.6], [0.0, 0.5, 0.9]]))
        conv = run_conv_gamp(X, Y, k, EmOptions(T_max=30))
        dl = run_dl_gamp(X, Y, LearnedFilters.from_kernel(k), EmOptions(T_max=30))
        assert np.allclose(conv.h_hat, dl.h_hat, rtol=1e-10, atol=1e-12)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**32 - 1), arrays(float, (3, 3), elements=st.floats(-1, 1)),
           arrays(float, (3, 3), elements=st.floats(-1, 1)), st.floats(0.2, 3))
    def test_positivity_any_filters(self, seed, W1, W2, a):
        rng = np.random.default_rng(seed)
        X, H = sparse_problem(rng, 10, 20, cols=4, k=2)
        Y = X @ H + 0.1 * crandn(rng, 10, 4)
        # degenerate filters (e.g. W2 = 0 puts theta at its ceiling) may be reported
        # as divergent; anything returned must be positive and finite
        try:
            res = run_dl_gamp(X, Y, LearnedFilters(W1, W2, a), EmOptions(T_max=15))
        except GampDivergence:
            return
        hp = res.diagnostics.hyper
        assert np.all(hp.alpha > 0) and np.all(hp.theta > 0) and np.all(res.sigma2 > 0)
        assert np.all(np.isfinite(res.h_hat))

    def test_tol_stops_early(self, rng):
        X, H = sparse_problem(rng, 16, 32, cols=2, k=2)
        res = run_em_gamp(X, X @ H, EmOptions(T_max=600, tol=1e-6))
        assert res.diagnostics.iterations < 600


class TestFilters:
    def test_json_round_trip(self, rng, tmp_path):
        f = LearnedFilters(rng.standard_normal((3, 5)), rng.standard_normal((3, 5)), 1.234, t_train=12)
        f.save(tmp_path / "f.json")
        g = LearnedFilters.load(tmp_path / "f.json")
        assert np.array_equal(f.W1, g.W1) and np.array_equal(f.W2, g.W2)
        assert (g.a_learned, g.t_train, g.d_x, g.d_y) == (1.234, 12, 1, 2)
        assert json.loads((tmp_path / "f.json").read_text())["d_y"] == 2

    def test_vector_round_trip(self, rng):
        f = LearnedFilters(rng.random((3, 3)), rng.random((3, 3)), 0.7)
        v = f.to_vector()
        assert v.size == 19 and np.array_equal(f.with_vector(v).to_vector(), v)

    @pytest.mark.parametrize("kw", [dict(W1=np.ones((3, 3)), W2=np.ones((3, 5))),
                                    dict(W1=np.ones((3, 3)), W2=np.ones((3, 3)), a_learned=0.0),
                                    dict(W1=np.full((3, 3), np.nan), W2=np.ones((3, 3)))])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            LearnedFilters(**kw)


def small_training_set(rng, n=8):
    X, H = sparse_problem(rng, 12, 24, cols=4, k=2, batch=(n,))
    return TrainingSet(X, X @ H + 0.05 * crandn(rng, n, 12, 4), H)


class TestTraining:
    def test_zero_steps_returns_init(self, rng):
        init = LearnedFilters.from_kernel(Kernel2D.uniform(0.5), a=1.1)
        out, curve = train_filters(small_training_set(rng), init, TrainingSchedule(steps=0))
        assert np.array_equal(out.to_vector(), init.to_vector()) and curve.step == []

    def test_uncoupled_data_stays_near_delta(self, rng):
        init = LearnedFilters.from_kernel(Kernel2D.delta(), a=1.1)
        sched = TrainingSchedule(steps=6, lr=1e-2, batch_size=4, t_train=10)
        out, curve = train_filters(small_training_set(rng), init, sched)
        assert len(curve.step) == 6
        assert np.abs(out.W2 - Kernel2D.delta().beta).max() < 0.2

    def test_early_stop_keeps_best(self, rng):
        data, val = small_training_set(rng), small_training_set(rng, 4)
        init = LearnedFilters.from_kernel(Kernel2D.delta(), a=1.1)
        # a huge step size makes validation loss worse immediately
        sched = TrainingSchedule(steps=20, lr=2.0, batch_size=4, t_train=8, t_val=8, eval_every=1, patience=2)
        out, curve = train_filters(data, init, sched, val)
        assert curve.stopped_early and len(curve.step) < 20
        assert dl_gamp_loss(out, val, 8) == pytest.approx(min(curve.val_loss))

    def test_validation_at_deployment_depth(self, rng):
        data, val = small_training_set(rng), small_training_set(rng, 4)
        init = LearnedFilters.from_kernel(Kernel2D.delta(), a=1.1)
        em = EmOptions(T_max=40)
        sched = TrainingSchedule(steps=1, lr=1e-3, batch_size=4, t_train=5, eval_every=1, em=em)
        _, curve = train_filters(data, init, sched, val)
        assert curve.val_loss[0] == pytest.approx(dl_gamp_loss(init, val, None, em))
        assert curve.val_loss[0] != pytest.approx(dl_gamp_loss(init, val, 5, em))

    def test_fd_gradient_step_robustness(self, rng):
        data = small_training_set(rng, 4)

        # two free parameters: the shared neighbour weight and a
        def loss(p):
            w = np.full((3, 3), p[0])
            w[1, 1] = 1.0
            return dl_gamp_loss(LearnedFilters(w, w, p[1]), data, 10)

        p0 = np.array([0.5, 1.1])
        g1 = fd_gradient(loss, p0, 1e-3)
        g2 = fd_gradient(loss, p0, 5e-4)
        assert np.allclose(g1, g2, rtol=0.05)

    def test_loss_retries_with_damping(self, rng, monkeypatch):
        from leo_gfra import hyper
        data = small_training_set(rng, 2)
        seen = []
        orig = hyper.run_dl_gamp

        def flaky(X, Y, filters, opts):
            seen.append(opts.damping)
            if opts.damping < 0.6:
                raise hyper.GampDivergence(2, [0])
            return orig(X, Y, filters, opts)

        monkeypatch.setattr(hyper, "run_dl_gamp", flaky)
        loss = dl_gamp_loss(LearnedFilters.from_kernel(Kernel2D.delta()), data, 5)
        assert seen == [0.0, 0.3, 0.6] and np.isfinite(loss)

    def test_loss_infinite_when_every_level_diverges(self, rng, monkeypatch):
        from leo_gfra import hyper

        def broken(X, Y, filters, opts):
            raise hyper.GampDivergence(1, [0])

        monkeypatch.setattr(hyper, "run_dl_gamp", broken)
        data = small_training_set(rng, 2)
        assert dl_gamp_loss(LearnedFilters.from_kernel(Kernel2D.delta()), data, 5) == np.inf

    def test_fd_gradient_ignores_divergent_side(self):
        g = fd_gradient(lambda p: np.inf if p[0] > 1.0 else float(p @ p), np.array([1.0, 2.0]), 1e-3)
        assert g[0] == 0.0 and g[1] == pytest.approx(4.0)

    def test_fd_gradient_quadratic(self):
        g = fd_gradient(lambda p: float(p @ p), np.array([1.0, -2.0, 3.0]), 1e-4, mask=np.array([1, 1, 0], bool))
        assert np.allclose(g, [2.0, -4.0, 0.0])
