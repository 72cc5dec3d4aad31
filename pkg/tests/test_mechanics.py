import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from baygds import mechanics as mech
from baygds.mechanics import (
    MechanicsError, SingularStateError, basis_stresses, build_schedule, diagonal_F, extract_obs, extract_tar,
    hydrostatic_pressure, invariants, observation_matrix, pk1_stress, pk1_stress_mismatched, rotate_F, sample_path,
    softplus, softplus_inverse, strain_energy, target_matrix, unconstrained_energy, unconstrained_stress,
)

F_TOY = np.diag([2.0, 1.0, 0.5])
stretch = st.floats(0.8, 1.6)
positive = st.floats(0.01, 5.0)


def F45(l1, l2):
    return rotate_F(diagonal_F(l1, l2), np.radians(45.0)).F


def random_states(rng, k):
    out = []
    for _ in range(k):
        s = diagonal_F(*rng.uniform(1.0, 1.5, 2))
        out.append(rotate_F(s, rng.uniform(0, np.pi)) if rng.random() < 0.5 else s)
    return out


class TestSoftplus:
    def test_values(self):
        assert softplus(0.0) == pytest.approx(np.log(2.0), abs=1e-15)
        assert softplus(50.0) == pytest.approx(50.0, rel=1e-12)
        assert softplus(-5.0) == pytest.approx(0.006715348489117967, rel=1e-12)

    def test_overflow_safe(self):
        assert np.isfinite(softplus(1e4))
        assert softplus(-800.0) >= 0.0

    @given(st.floats(-30, 40))
    def test_inverse_round_trip(self, xi):
        assert softplus_inverse(softplus(xi)) == pytest.approx(xi, abs=1e-9, rel=1e-9)

    def test_inverse_rejects_nonpositive(self):
        with pytest.raises(MechanicsError):
            softplus_inverse([1.0, 0.0])


class TestKinematics:
    def test_invariants_identity(self):
        assert invariants(np.eye(3)) == (3.0, 1.0, 1.0)

    def test_invariants_uniaxial(self):
        I1, I4, I6 = invariants(np.diag([1.5, 1.0, 1 / 1.5]))
        assert I1 == pytest.approx(2.25 + 1 + 1 / 2.25)
        assert (I4, I6) == pytest.approx((2.25, 1.0))

    def test_invariants_rotated_coincide(self):
        I1, I4, I6 = invariants(F45(1.5, 1.0))
        assert I4 == pytest.approx(1.625, abs=1e-14)
        assert I6 == pytest.approx(1.625, abs=1e-14)

    def test_compressible_rejected(self):
        with pytest.raises(MechanicsError, match="incompressibility"):
            invariants(np.diag([1.1, 1.0, 1.0]))

    def test_diagonal_F(self):
        assert np.array_equal(diagonal_F(1, 1).F, np.eye(3))
        assert diagonal_F(1.5, 1.5).F[2, 2] == pytest.approx(0.444444, abs=1e-6)

    @given(stretch, stretch)
    def test_det_one(self, l1, l2):
        assert abs(np.linalg.det(diagonal_F(l1, l2).F) - 1.0) < 1e-14

    def test_sample_path_table(self):
        tx = sample_path(mech.LoadingPath.named("Tension-x"))
        assert (tx[10].lambda1, tx[10].lambda2) == pytest.approx((1.25, 1.0))
        eb = sample_path(mech.LoadingPath.named("Equibiaxial"))
        assert (eb[20].lambda1, eb[20].lambda2) == pytest.approx((1.5, 1.5))
        oy = sample_path(mech.LoadingPath.named("Off-y"))
        assert (oy[4].lambda1, oy[4].lambda2) == pytest.approx((1.05, 1.10))

    def test_unknown_path(self):
        with pytest.raises(MechanicsError, match="unknown loading path"):
            mech.LoadingPath.named("Shear")

    def test_rotate(self):
        s = diagonal_F(1.5, 1.0)
        assert np.array_equal(rotate_F(s, 0.0).F, s.F)
        F = F45(1.5, 1.0)
        assert F[0, 0] == pytest.approx(1.25) and F[1, 1] == pytest.approx(1.25)
        assert F[0, 1] == pytest.approx(-0.25) and F[1, 0] == pytest.approx(-0.25)
        assert F[2, 2] == pytest.approx(1 / 1.5)
        Fe = F45(1.3, 1.3)
        assert abs(Fe[0, 1]) < 1e-15 and abs(Fe[1, 0]) < 1e-15

    def test_schedule_shape(self):
        sched = build_schedule()
        assert len(sched) == 105
        assert len(build_schedule(include_identity=False)) == 100
        for s in sched:
            assert abs(np.linalg.det(s.F) - 1) < 1e-10
            assert np.allclose(s.F, s.F.T)
        for s in build_schedule(beta_deg=45):
            _, I4, I6 = invariants(s.F)
            assert I4 == pytest.approx(I6, abs=1e-12)

    def test_schedule_key_tracks_F(self):
        assert build_schedule().key() == build_schedule().key()
        assert build_schedule().key() != build_schedule(beta_deg=45).key()


class TestConstitutive:
    def test_energy_examples(self):
        F = np.diag([1.5, 1.0, 1 / 1.5])
        assert strain_energy(np.eye(3), (3, 2, 1)) == 0.0
        assert strain_energy(F, (1, 0, 0)) == pytest.approx(0.694444, abs=1e-6)
        assert strain_energy(F, (0, 1, 0)) == pytest.approx(1.5625)

    def test_pressure_examples(self):
        assert hydrostatic_pressure(np.eye(3), 1.0) == 2.0
        assert hydrostatic_pressure(F_TOY, 1.0) == 0.5
        assert hydrostatic_pressure(F45(1.5, 1.5), 1.0) == pytest.approx(2 / 2.25**2, abs=1e-12)
        assert hydrostatic_pressure(F45(1.5, 1.5), 1.0) == pytest.approx(0.395062, abs=1e-6)

    def test_pressure_singular(self):
        with pytest.raises(SingularStateError):
            hydrostatic_pressure(np.diag([0.0, 1.0, 1.0]), 1.0)

    def test_pk1_hand_example_exact(self):
        P = pk1_stress(F_TOY, (1.0, 0.0, 0.0))
        assert (P[0, 0], P[1, 1], P[2, 2]) == (3.75, 1.5, 0.0)

    def test_reference_state_stress_free(self):
        assert np.array_equal(pk1_stress(np.eye(3), (2.0, 0.3, 0.7)), np.zeros((3, 3)))

    def test_plane_stress_over_schedule(self):
        rng = np.random.default_rng(1)
        sched = build_schedule()
        worst = 0.0
        for theta in rng.uniform(0.01, 5.0, (50, 3)):
            for s in sched:
                worst = max(worst, abs(pk1_stress(s.F, theta)[2, 2]))
        assert worst <= 1e-10

    @given(stretch, stretch, positive, positive, positive)
    def test_diagonal_loading_gives_diagonal_stress(self, l1, l2, t1, t4, t6):
        P = pk1_stress(diagonal_F(l1, l2).F, (t1, t4, t6))
        assert np.allclose(P - np.diag(np.diag(P)), 0.0, atol=0)

    @given(stretch, stretch, positive, positive, positive)
    def test_orthotropic_swap(self, l1, l2, t1, t4, t6):
        P = pk1_stress(diagonal_F(l1, l2).F, (t1, t4, t6))
        Q = pk1_stress(diagonal_F(l2, l1).F, (t1, t6, t4))
        assert P[0, 0] == pytest.approx(Q[1, 1], rel=1e-12, abs=1e-14)
        assert P[1, 1] == pytest.approx(Q[0, 0], rel=1e-12, abs=1e-14)

    @given(stretch, stretch, positive, positive, positive)
    def test_rotated_shear_asymmetry_closed_form(self, l1, l2, t1, t4, t6):
        # the 3-term ansatz is not frame-indifferent under rotation: P12 - P21 = 4 (I4 - 1) F12 (t6 - t4)
        F = F45(l1, l2)
        P = pk1_stress(F, (t1, t4, t6))
        _, I4, _ = invariants(F)
        assert P[0, 1] - P[1, 0] == pytest.approx(4 * (I4 - 1) * F[0, 1] * (t6 - t4), abs=1e-12)
        S = pk1_stress(F, (t1, t4, t4))
        assert abs(S[0, 1] - S[1, 0]) <= 1e-12

    def test_unconstrained_gradient_fd(self):
        rng = np.random.default_rng(7)
        h = 1e-6
        for s in random_states(rng, 100):
            theta = rng.uniform(0.05, 4.0, 3)
            G = unconstrained_stress(s.F, theta)
            fd = np.zeros((3, 3))
            for i in range(3):
                for j in range(3):
                    E = np.zeros((3, 3))
                    E[i, j] = h
                    fd[i, j] = (unconstrained_energy(s.F + E, theta) - unconstrained_energy(s.F - E, theta)) / (2 * h)
            scale = np.maximum(np.abs(G), 1.0)
            assert np.max(np.abs(fd - G) / scale) <= 1e-5

    @given(stretch, stretch, positive, positive, positive)
    def test_energy_nonnegative(self, l1, l2, t1, t4, t6):
        assert strain_energy(diagonal_F(l1, l2).F, (t1, t4, t6)) >= 0.0

    def test_linearity_in_theta(self):
        F = F45(1.4, 1.1)
        a, b = np.array([1.0, 0.2, 0.4]), np.array([0.5, 0.9, 0.1])
        assert np.allclose(pk1_stress(F, 2 * a + 3 * b), 2 * pk1_stress(F, a) + 3 * pk1_stress(F, b), atol=1e-13)

    def test_mismatched_reduces_to_model(self):
        F = F45(1.4, 1.2)
        theta = (1.3, 0.4, 0.2)
        assert np.allclose(pk1_stress_mismatched(F, theta, 0.0), pk1_stress(F, theta), atol=1e-14)
        Pm = pk1_stress_mismatched(F, theta, 0.3)
        assert abs(Pm[2, 2]) < 1e-12
        assert not np.allclose(Pm, pk1_stress(F, theta))


class TestExtraction:
    def test_extract(self):
        P = pk1_stress(F_TOY, (1, 0, 0))
        assert np.array_equal(extract_obs(np.zeros((3, 3))), [0, 0])
        assert np.array_equal(extract_tar(np.diag([1.0, 2.0, 0.0]), ["12"]), [0.0])
        assert np.array_equal(extract_tar(P, ["11", "22", "12"]), [3.75, 1.5, 0.0])
        assert np.array_equal(extract_tar(P, ["P22", "11"]), [3.75, 1.5])

    def test_bad_component(self):
        with pytest.raises(MechanicsError):
            extract_tar(np.eye(3), ["13"])
        with pytest.raises(MechanicsError):
            extract_tar(np.eye(3), [])

    def test_observation_matrix_is_the_stress_map(self):
        sched = build_schedule(n_increments=4)
        theta = np.array([1.7, 0.3, 0.6])
        A = observation_matrix(sched)
        direct = np.concatenate([extract_obs(pk1_stress(s.F, theta)) for s in sched])
        assert np.allclose(A @ theta, direct, atol=1e-13)
        T = target_matrix(build_schedule(n_increments=4, beta_deg=45), ["11", "12"])
        direct = np.stack([extract_tar(pk1_stress(s.F, theta), ["11", "12"])
                           for s in build_schedule(n_increments=4, beta_deg=45)])
        assert np.allclose(T @ theta, direct, atol=1e-13)

    def test_basis_shape(self):
        assert basis_stresses(F_TOY).shape == (3, 3, 3)


def test_csv_round_trip(tmp_path):
    sched = build_schedule(n_increments=3, beta_deg=45)
    mech.write_schedule_csv(sched, tmp_path / "s.csv", comment="stamp")
    back = mech.read_schedule_csv(tmp_path / "s.csv")
    assert np.allclose(back.F, sched.F, atol=1e-15)
    rows = [(7, s, pk1_stress(s.F, (1, 0.5, 0.2))) for s in sched]
    mech.write_stress_csv(rows, tmp_path / "p.csv", comment="stamp")
    got = mech.read_stress_csv(tmp_path / "p.csv")
    assert list(got) == [7]
    assert got[7][3][2][0] == rows[3][2][0, 0]
