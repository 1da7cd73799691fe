import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgmca.matops import gaussian_matrix
from sgmca.metrics import DB_CAP, align, bss_decompose, bss_eval, evaluate, sad


class TestSad:
    def test_orthogonal(self):
        assert sad([1.0, 0.0], [0.0, 2.0]) == pytest.approx(-10 * np.log10(np.pi / 2), abs=1e-12)
        assert sad([1.0, 0.0], [0.0, 2.0]) == pytest.approx(-1.961, abs=1e-3)

    def test_identical_capped(self):
        a = np.array([0.3, 0.4, 0.5])
        assert sad(a, a) == DB_CAP

    def test_small_angle(self):
        a = np.array([1.0, 0.0])
        b = np.array([np.cos(0.003), np.sin(0.003)])
        assert sad(a, b) == pytest.approx(-10 * np.log10(0.003), abs=1e-6)
        assert sad(a, b) == pytest.approx(25.23, abs=0.01)

    def test_zero_rejected(self):
        with pytest.raises(ValueError):
            sad([0.0, 0.0], [1.0, 0.0])

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), c=st.floats(1e-3, 1e3))
    def test_symmetry_and_scale(self, seed, c):
        a, b = gaussian_matrix(2, 7, seed)
        assert sad(a, b) == pytest.approx(sad(b, a), abs=1e-9)
        assert sad(c * a, b) == pytest.approx(sad(a, b), abs=1e-6)


class TestAlign:
    def setup_method(self):
        self.A = np.abs(gaussian_matrix(6, 3, 1))
        self.S = gaussian_matrix(3, 50, 2)

    def test_swap_recovered(self):
        perm = [1, 0, 2]
        A, S, p, _ = align(self.A[:, perm], self.S[perm], self.A, self.S)
        np.testing.assert_allclose(S, self.S, atol=1e-12)
        np.testing.assert_allclose(A, self.A, atol=1e-12)
        r1 = evaluate(self.A[:, perm], self.S[perm], self.A, self.S).as_row()
        r0 = evaluate(self.A, self.S, self.A, self.S).as_row()
        assert r1 == r0

    def test_scale(self):
        A, S, _, scales = align(self.A / 2, 2 * self.S, self.A, self.S)
        np.testing.assert_allclose(scales, 0.5)
        np.testing.assert_allclose(A @ S, self.A @ self.S, atol=1e-12)
        np.testing.assert_allclose(A, self.A, atol=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(5)
        S_true = rng.standard_normal((3, 40))
        S_est = rng.standard_normal((3, 40)) + 0.8 * S_true[[2, 0, 1]]
        A_est = rng.standard_normal((5, 3))
        _, _, perm, _ = align(A_est, S_est, np.zeros((5, 3)), S_true)

        def score(p):
            return sum(abs(np.dot(S_true[i], S_est[p[i]]))
                       / (np.linalg.norm(S_true[i]) * np.linalg.norm(S_est[p[i]])) for i in range(3))

        best = max(itertools.permutations(range(3)), key=score)
        assert tuple(perm) == best


class TestBssEval:
    def setup_method(self):
        self.S = gaussian_matrix(3, 400, 10)
        self.N = 0.1 * gaussian_matrix(5, 400, 11)

    def test_perfect(self):
        assert bss_eval(self.S[0], self.S, self.N, 0) == (DB_CAP, DB_CAP, DB_CAP, DB_CAP)

    def test_equal_energy_interference(self):
        s1 = self.S[1] * np.linalg.norm(self.S[0]) / np.linalg.norm(self.S[1])
        # make the interferer exactly orthogonal to the target, as the oracle assumes
        s1 = s1 - (s1 @ self.S[0]) / (self.S[0] @ self.S[0]) * self.S[0]
        s1 *= np.linalg.norm(self.S[0]) / np.linalg.norm(s1)
        S = np.vstack([self.S[0], s1, self.S[2]])
        sdr, sir, snr, sar = bss_eval(S[0] + s1, S, self.N, 0)
        assert sir == pytest.approx(0.0, abs=1e-9)
        assert sar == DB_CAP
        assert snr == DB_CAP

    def test_artifact_only(self):
        g = gaussian_matrix(1, 400, 12)[0]
        basis = np.linalg.qr(np.vstack([self.S, self.N]).T)[0]
        g = g - basis @ (basis.T @ g)
        sdr, sir, snr, sar = bss_eval(self.S[0] + 0.1 * g, self.S, self.N, 0)
        assert sir == DB_CAP and snr == DB_CAP
        expected = 10 * np.log10((self.S[0] @ self.S[0]) / (0.01 * g @ g))
        assert sar == pytest.approx(expected, abs=1e-8)
        assert sdr == pytest.approx(expected, abs=1e-8)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), idx=st.integers(0, 2))
    def test_orthogonal_energy_conserving(self, seed, idx):
        est = gaussian_matrix(1, 400, seed)[0] + 2 * self.S[idx]
        parts = bss_decompose(est, self.S, self.N, idx)
        total = est @ est
        for a, b in itertools.combinations(parts, 2):
            assert abs(a @ b) <= 1e-8 * total
        assert sum(p @ p for p in parts) == pytest.approx(total, rel=1e-8)
        np.testing.assert_allclose(sum(parts), est, atol=1e-10)

    def test_clamped_range(self):
        vals = bss_eval(np.zeros(400), self.S, self.N, 0)
        assert all(-DB_CAP <= v <= DB_CAP for v in vals)

    def test_rank_deficient_warns(self):
        S = np.vstack([self.S[0], self.S[0] * 2, self.S[1]])
        with pytest.warns(RuntimeWarning):
            bss_eval(self.S[0], S, None, 0)


def test_evaluate_report_fields():
    A = np.abs(gaussian_matrix(6, 2, 3))
    S = gaussian_matrix(2, 64, 4)
    rep = evaluate(A, S, A, S)
    assert rep.sad_overall == DB_CAP
    assert sorted(rep.permutation) == [0, 1]
    assert set(rep.as_row()) == {"sad_overall", "sad_1", "sad_2", "sdr_1", "sdr_2", "sir_1", "sir_2",
                                 "snr_1", "snr_2", "sar_1", "sar_2"}
