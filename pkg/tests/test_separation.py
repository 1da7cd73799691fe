import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from sgmca import iae
from sgmca.matops import NumericalError, gaussian_matrix
from sgmca.metrics import evaluate, sad
from sgmca.separation import (IdentificationMap, NearestNeighborPrior, SeparationOptions,
                              SeparationResult, ThresholdPlan, compute_thresholds, estimate_noise_mad,
                              gmca, identify_spectra, project_unit_ball, sgmca, soft, soft_threshold,
                              update_mixing, update_sources, noise_levels, scale_noise_gains)
from sgmca.starlet import StarletCoeffs, starlet_forward, starlet_inverse
from sgmca.synthdata import SpectrumFamily

W = H = 16


def sparse_sources(I, seed, density=0.05, size=W):
    """Sources that are exactly sparse in the starlet detail domain."""
    rng = np.random.default_rng(seed)
    P = size * size
    d = rng.standard_normal((2, I, P)) * (rng.random((2, I, P)) < density)
    return starlet_inverse(StarletCoeffs(d, np.zeros((I, P)), size, size))


def family_bank(J=20, n=60):
    fams = [SpectrumFamily("powerlaw", J), SpectrumFamily("gaussian_line", J),
            SpectrumFamily("thermal_proxy", J)]
    return [NearestNeighborPrior(f.sample(n, 5 + k)[0], f.kind) for k, f in enumerate(fams)]


class TestThresholds:
    def test_mad_hand_value(self):
        assert estimate_noise_mad([1.0, 2.0, 3.0, 4.0, 100.0])[0] == pytest.approx(1 / 0.6745)

    def test_mad_gaussian(self):
        x = 2.0 * gaussian_matrix(1, 200_000, 3)
        assert estimate_noise_mad(x)[0] == pytest.approx(2.0, rel=0.02)

    def test_noise_gains_match_white_noise(self):
        # empirical std of each detail scale of unit white noise
        g = scale_noise_gains(128, 128, 3)
        d = starlet_forward(gaussian_matrix(1, 128 * 128, 8), 128, 128, 3).details[:, 0, :]
        np.testing.assert_allclose(d.std(axis=1), g, rtol=0.03)
        # known B3 starlet values
        np.testing.assert_allclose(g, [0.890, 0.201, 0.086], atol=2e-3)

    def test_noise_level_modes(self):
        d = starlet_forward(gaussian_matrix(2, 64 * 64, 9), 64, 64, 2).details
        per = noise_levels(d, 64, 64, "per_scale")
        np.testing.assert_allclose(per[1], estimate_noise_mad(d[1]))
        fin = noise_levels(d, 64, 64, "finest")
        np.testing.assert_allclose(fin[0], estimate_noise_mad(d[0]))
        g = scale_noise_gains(64, 64, 2)
        np.testing.assert_allclose(fin[1], fin[0] * g[1] / g[0])
        # on pure noise both estimates agree
        np.testing.assert_allclose(per, fin, rtol=0.1)
        with pytest.raises(ValueError):
            noise_levels(d, 64, 64, "bogus")

    def test_plain_and_reweighted(self):
        details = np.zeros((1, 1, 3))
        sigma = np.array([[2.0]])
        assert np.all(compute_thresholds(details, [[1.0]]).lambdas == 3.0)
        assert np.all(compute_thresholds(details, sigma).lambdas == 6.0)
        prev = np.array([[[0.0, 6.0, 1e9]]])
        lam = compute_thresholds(details, sigma, reweight=prev).lambdas[0, 0]
        np.testing.assert_allclose(lam[:2], [6.0, 3.0])
        assert 0 < lam[2] < 1e-6

    def test_plan_validates(self):
        with pytest.raises(ValueError):
            ThresholdPlan(np.array([[[-1.0]]]), np.ones((1, 1)))


class TestSoft:
    def test_identities(self):
        x = np.array([-3.0, -0.5, 0.0, 0.5, 3.0])
        np.testing.assert_array_equal(soft(x, 0.0), x)
        np.testing.assert_array_equal(soft(x, 1.0), [-2.0, 0.0, 0.0, 0.0, 2.0])
        np.testing.assert_array_equal(soft(x, np.abs(x)), 0.0)

    @settings(max_examples=100, deadline=None)
    @given(x=arrays(np.float64, 20, elements=st.floats(-1e3, 1e3)), lam=st.floats(0, 1e3))
    def test_properties(self, x, lam):
        y = soft(x, lam)
        assert np.all(np.abs(y) <= np.abs(x))
        assert np.all(np.abs(y - x) <= lam + 1e-9)
        assert np.all(y * x >= 0)
        assert np.all(y[np.abs(x) <= lam] == 0)

    @settings(max_examples=30, deadline=None)
    @given(x=st.floats(-5, 5), lam=st.floats(0, 3))
    def test_is_l1_prox(self, x, lam):
        z = np.linspace(-6, 6, 120001)
        best = z[np.argmin(0.5 * (z - x) ** 2 + lam * np.abs(z))]
        assert soft(x, lam) == pytest.approx(best, abs=2e-4)

    def test_coarse_passes_through(self):
        imgs = gaussian_matrix(2, W * H, 1)
        c = starlet_forward(imgs, W, H, 2)
        plan = ThresholdPlan(np.full(c.details.shape, 1e9), np.ones((2, 2)))
        out = soft_threshold(c, plan)
        np.testing.assert_array_equal(out.coarse, c.coarse)
        assert not np.any(out.details)
        with pytest.raises(ValueError):
            soft_threshold(c, ThresholdPlan(np.zeros((1, 2, W * H)), np.ones((1, 2))))


class TestUpdateSources:
    def test_exact_least_squares(self):
        S = sparse_sources(3, 0)
        A = np.abs(gaussian_matrix(8, 3, 1))
        plan = ThresholdPlan(np.zeros((2, 3, W * H)), np.ones((2, 3)))
        out, _ = update_sources(A @ S, A, W, H, 2, plan=plan)
        np.testing.assert_allclose(out, S, atol=1e-8)

    def test_orthonormal_mixing(self):
        Q = np.linalg.qr(gaussian_matrix(8, 3, 2))[0]
        X = Q @ sparse_sources(3, 1)
        plan = ThresholdPlan(np.zeros((2, 3, W * H)), np.ones((2, 3)))
        out, _ = update_sources(X, Q, W, H, 2, plan=plan)
        np.testing.assert_allclose(out, Q.T @ X, atol=1e-10)

    def test_sub_threshold_noise_removed(self):
        A = np.linalg.qr(gaussian_matrix(6, 2, 3))[0]
        N = 0.01 * gaussian_matrix(6, W * H, 4)
        out, details = update_sources(N, A, W, H, 2, k_mad=3.0)
        c = starlet_forward(A.T @ N, W, H, 2)
        g = scale_noise_gains(W, H, 2)
        sigma = np.outer(g / g[0], estimate_noise_mad(c.details[0]))
        lam = 3.0 * sigma[..., None]
        small = np.abs(c.details) <= lam
        assert np.all(details[small] == 0)
        np.testing.assert_allclose(np.abs(details[~small]), (np.abs(c.details) - lam)[~small], atol=1e-14)


class TestUnitBall:
    @settings(max_examples=50, deadline=None)
    @given(v=arrays(np.float64, 7, elements=st.floats(-100, 100)))
    def test_properties(self, v):
        p = project_unit_ball(v)
        assert np.linalg.norm(p) <= 1 + 1e-12
        if np.linalg.norm(v) <= 1:
            np.testing.assert_array_equal(p, v)
        else:
            np.testing.assert_allclose(p, v / np.linalg.norm(v))


class TestIdentification:
    def test_single_candidate(self):
        bank = family_bank()
        a = bank[1].spectra[7] * 3.0
        ident = identify_spectra(a[:, None], bank[1:2])
        assert ident.modeled == [0] and ident.model_of == {0: 0}
        assert ident.mu[0].shape == (0,)

    @pytest.mark.parametrize("perm", [(0, 1, 2), (2, 0, 1), (1, 2, 0)])
    def test_bijection(self, perm):
        bank = family_bank()
        A = np.column_stack([bank[m].spectra[3] for m in perm])
        ident = identify_spectra(A, bank)
        assert ident.model_of == {i: m for i, m in enumerate(perm)}

    def test_interference_instance(self):
        bank = family_bank()
        s1, s2 = bank[0].spectra[4], bank[1].spectra[9]
        A = np.column_stack([s1, s2 + 0.4 * s1])
        ident = identify_spectra(A, bank[:2])
        assert ident.modeled == [0, 1]
        assert ident.model_of == {0: 0, 1: 1}
        assert ident.mu[1] == pytest.approx([0.4])

    def test_signed_recovers_negated_column(self):
        bank = family_bank()
        A = np.column_stack([bank[0].spectra[4], -bank[1].spectra[9]])
        ident = identify_spectra(A, bank[:2], signed=True)
        assert ident.model_of == {0: 0, 1: 1}
        assert ident.sign == {0: 1, 1: -1}
        assert identify_spectra(A, bank[:2]).sign == {0: 1, 1: 1}

    def test_zero_column_excluded(self):
        bank = family_bank()
        A = np.column_stack([bank[0].spectra[0], np.zeros(20)])
        with pytest.warns(RuntimeWarning):
            ident = identify_spectra(A, bank[:2])
        assert 1 not in ident.model_of

    def test_map_validates(self):
        with pytest.raises(ValueError):
            IdentificationMap([0, 1], {0: 0, 1: 0})

    def test_with_learned_models(self):
        J = 24
        fams = [SpectrumFamily("gaussian_line", J), SpectrumFamily("powerlaw", J)]
        models = []
        for f in fams:
            X, _ = f.sample(100, 1)
            cfg = iae.IAETrainConfig(epochs=300, learning_rate=1e-3, validation_fraction=0.0)
            models.append(iae.train_iae(X, iae.AnchorSet(f.anchors()), cfg).model)
        A = np.column_stack([fams[1].spectrum(2.0, 5e-3), fams[0].spectrum(10.0)])
        ident = identify_spectra(A, models)
        assert ident.model_of == {0: 1, 1: 0}


class TestUpdateMixing:
    def test_orthonormal_sources(self):
        A = np.abs(gaussian_matrix(6, 3, 0))
        A /= np.linalg.norm(A, axis=0)
        S = np.linalg.qr(gaussian_matrix(50, 3, 1))[0].T
        out, ident, _, _ = update_mixing(A @ S, S, [], IdentificationMap(), SeparationOptions(5, 10))
        np.testing.assert_allclose(out, A, atol=1e-8)
        assert ident.model_of == {}

    def test_unit_ball_without_models(self):
        A = 5 * np.abs(gaussian_matrix(6, 3, 0))
        S = gaussian_matrix(3, 50, 1)
        out, _, _, _ = update_mixing(A @ S, S, [], None, SeparationOptions(5, 10))
        np.testing.assert_allclose(np.linalg.norm(out, axis=0), 1.0)

    def test_on_manifold_columns_unchanged(self):
        bank = family_bank()
        A = np.column_stack([bank[m].spectra[2] for m in range(3)])
        S = gaussian_matrix(3, 40, 2)
        out, ident, proj, scale = update_mixing(A @ S, S, bank, None, SeparationOptions(5, 8))
        np.testing.assert_allclose(out, A, atol=1e-10)
        assert set(proj) == {0, 1, 2} and all(v == 1.0 for v in scale.values())

    def test_keep_amplitude(self):
        bank = family_bank()
        A = 2.0 * np.column_stack([bank[m].spectra[2] for m in range(3)])
        S = gaussian_matrix(3, 40, 2)
        out, _, _, scale = update_mixing(A @ S, S, bank, None, SeparationOptions(5, 8, keep_amplitude=True))
        np.testing.assert_allclose(out, A, atol=1e-10)
        np.testing.assert_allclose(list(scale.values()), 2.0)


def _mixture(I=2, J=8, seed=0, snr=None, size=W):
    S = sparse_sources(I, seed, size=size)
    A = np.abs(gaussian_matrix(J, I, seed + 1)) + 0.05
    A /= np.linalg.norm(A, axis=0)
    X = A @ S
    if snr is not None:
        N = gaussian_matrix(J, S.shape[1], seed + 2)
        N *= np.linalg.norm(X) / np.linalg.norm(N) / 10 ** (snr / 20)
        X = X + N
    return X, A, S


class TestGmca:
    def test_separates_sparse_sources(self):
        X, A, S = _mixture(I=2, J=8, seed=3, snr=40, size=32)
        g = gmca(X, 2, SeparationOptions(32, 32))
        rep = evaluate(g.A, g.S, A, S)
        assert rep.sad_overall >= 10

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_noiseless_disjoint_recovery(self, seed):
        # isolated spikes keep most detail coefficients exactly zero, so the
        # MAD noise level and the final thresholds vanish
        rng = np.random.default_rng(seed)
        P = 32 * 32
        S = np.zeros((2, P))
        idx = rng.choice(P, 12, replace=False)
        S[0, idx[:6]] = rng.uniform(1, 2, 6)
        S[1, idx[6:]] = rng.uniform(1, 2, 6)
        A = np.array([[1.0, 0.2], [0.3, 1.0], [0.5, 0.5], [0.1, 0.9]])
        A /= np.linalg.norm(A, axis=0)
        g = gmca(A @ S, 2, SeparationOptions(32, 32))
        rep = evaluate(g.A, g.S, A, S)
        cols = g.A[:, rep.permutation] / np.linalg.norm(g.A[:, rep.permutation], axis=0)
        np.testing.assert_allclose(np.abs(cols), A, atol=1e-3)

    def test_row_permutation_equivariance(self):
        X, _, _ = _mixture(I=2, J=6, seed=5, snr=30)
        perm = np.array([3, 0, 5, 1, 4, 2])
        opts = SeparationOptions(W, H, gmca_iters=20)
        g1 = gmca(X, 2, opts)
        g2 = gmca(X[perm], 2, opts)
        np.testing.assert_allclose(g2.A, g1.A[perm], atol=1e-8)

    def test_deterministic(self):
        X, _, _ = _mixture(seed=1, snr=30)
        opts = SeparationOptions(W, H, init="random", seed=4, gmca_iters=10)
        np.testing.assert_array_equal(gmca(X, 2, opts).A, gmca(X, 2, opts).A)

    def test_zero_data(self):
        with pytest.raises(NumericalError):
            gmca(np.zeros((4, W * H)), 2, SeparationOptions(W, H))

    def test_options_validate(self):
        with pytest.raises(ValueError):
            SeparationOptions(W, H, init="pca")
        with pytest.raises(ValueError):
            SeparationOptions(W, H, mixing_domain="fourier")


class TestSgmca:
    def test_fixed_point_nearest_neighbour(self):
        bank = family_bank()
        A = np.column_stack([bank[m].spectra[2] for m in range(3)])
        S = sparse_sources(3, 0)
        opts = SeparationOptions(W, H, k_mad=0.0)
        start = SeparationResult(A.copy(), S.copy(), IdentificationMap(), 0, "max_iters")
        r = sgmca(A @ S, 3, bank, opts, init=start)
        np.testing.assert_allclose(r.A, A, atol=1e-10)
        np.testing.assert_allclose(r.S, S, atol=1e-8)
        assert r.stop_reason == "converged" and r.iterations == 1

    def test_fixed_point_learned_model(self):
        fam = SpectrumFamily("gaussian_line", 16)
        X, _ = fam.sample(100, 1)
        cfg = iae.IAETrainConfig(epochs=200, learning_rate=1e-3, validation_fraction=0.0)
        model = iae.train_iae(X, iae.AnchorSet(fam.anchors()), cfg).model
        a0 = iae.generate(model, [0.35, 0.65])
        a1 = np.abs(gaussian_matrix(16, 1, 3))[:, 0]
        a1 /= np.linalg.norm(a1)
        A = np.column_stack([a0, a1])
        S = sparse_sources(2, 2)
        start = SeparationResult(A.copy(), S.copy(), IdentificationMap(), 0, "max_iters")
        r = sgmca(A @ S, 2, [model], SeparationOptions(W, H, k_mad=0.0), init=start)
        assert r.ident.model_of == {0: 0}
        np.testing.assert_allclose(r.A, A, atol=1e-4)
        np.testing.assert_allclose(r.S, S, atol=1e-3 * np.abs(S).max())

    def test_no_models_matches_manual_refinement(self):
        X, _, _ = _mixture(I=2, J=8, seed=2, snr=30)
        opts = SeparationOptions(W, H, gmca_iters=10, max_iters=1)
        g = gmca(X, 2, opts)
        r = sgmca(X, 2, [], opts, init=g)
        S, details = update_sources(X, g.A, W, H, 2)
        Xd = np.concatenate(list(starlet_forward(X, W, H, 2).details), axis=1)
        A, _, _, _ = update_mixing(Xd, np.concatenate(list(details), axis=1), [], IdentificationMap(), opts)
        np.testing.assert_allclose(r.S, S, atol=1e-12)
        np.testing.assert_allclose(r.A, A, atol=1e-12)

    @pytest.mark.parametrize("iters", [1, 2, 4])
    def test_stopping_and_unit_ball(self, iters):
        X, _, _ = _mixture(I=3, J=8, seed=6, snr=20)
        bank = family_bank(J=8, n=30)
        r = sgmca(X, 3, bank[:1], SeparationOptions(W, H, gmca_iters=10, max_iters=iters))
        assert r.stop_reason in ("converged", "max_iters")
        assert len(r.history) == r.iterations <= iters
        if r.stop_reason == "max_iters":
            assert r.iterations == iters
        for i in range(3):
            if i not in r.ident.model_of:
                assert np.linalg.norm(r.A[:, i]) <= 1 + 1e-9

    def test_too_many_models(self):
        X, _, _ = _mixture()
        with pytest.raises(ValueError):
            sgmca(X, 2, family_bank(J=8), SeparationOptions(W, H))
