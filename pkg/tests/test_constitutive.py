"""Degraded Mooney-Rivlin response against finite-difference oracles."""
import numpy as np
import pytest

from fe2frac import constitutive as co
from fe2frac import tensors
from fe2frac.errors import NonPhysicalStateError

MATRIX = co.MaterialParams(alpha=25.64e3, beta=12.82e3, lambda_vol=57.69e3,
                           g_c=2.5e4, length_scale=1.5625)
INCLUSION = co.MaterialParams(alpha=2.56e3, beta=1.28e3, lambda_vol=5.77e3,
                              g_c=1.25e4, length_scale=1.5625)


def rotation(t):
    return np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])


def random_state(rng, smin=0.0, smax=0.9):
    """Random (F, s) pair away from the unit-stretch split kink."""
    l1 = rng.uniform(1.05, 1.6)
    l2 = rng.uniform(0.55, 0.95) if rng.uniform() < 0.7 else rng.uniform(1.05, 1.5)
    F = rotation(rng.uniform(0, 2 * np.pi)) @ np.diag([l1, l2]) \
        @ rotation(rng.uniform(0, 2 * np.pi))
    return F, rng.uniform(smin, smax)


def test_material_validation():
    with pytest.raises(ValueError):
        co.MaterialParams(-1.0, 1.0, 1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        co.MaterialParams(1.0, 1.0, 1.0, 0.0, 1.0)


def test_energy_zero_iff_rotation():
    assert co.plane_strain_energy(np.eye(2), MATRIX) == 0.0
    assert co.plane_strain_energy(rotation(1.1), MATRIX) < 1e-18 * MATRIX.alpha
    rng = np.random.default_rng(5)
    for _ in range(50):
        F, _ = random_state(rng)
        assert co.plane_strain_energy(F, MATRIX) > 0.0


def test_energy_against_direct_expression():
    # independent evaluation of the plane-strain stored energy
    F = np.diag([1.2, 1.0])
    a, b, lv = MATRIX.alpha, MATRIX.beta, MATRIX.lambda_vol
    I, j = np.sum(F * F), np.linalg.det(F)
    direct = ((a + b) * (I - 2) + b * (j ** 2 - 1)
              - 2 * (a + 2 * b) * np.log(j) + lv / 2 * (j - 1) ** 2)
    assert co.plane_strain_energy(F, MATRIX) == pytest.approx(direct, rel=1e-14)
    assert direct == pytest.approx(5018.101135212015, rel=1e-12)


def test_energy_rejects_inverted_state():
    with pytest.raises(NonPhysicalStateError):
        co.plane_strain_energy(np.diag([1.0, -1.0]), MATRIX)


def test_zero_state_response():
    for s in (0.0, 0.4, 1.0):
        r = co.degraded_response(np.eye(2), s, 0.0, MATRIX)
        assert np.abs(r.P).max() == 0.0
        assert r.H_drive == 0.0
        assert r.psi == 0.0


def test_energy_nonnegative_random_states():
    rng = np.random.default_rng(31)
    for _ in range(300):
        F, s = random_state(rng)
        r = co.degraded_response(F, s, 0.0, MATRIX)
        assert r.psi >= 0.0


def test_degraded_energy_equals_energy_of_elastic_gradient():
    # the degraded energy is the undamaged energy at the elastic gradient
    rng = np.random.default_rng(37)
    for mode in ("principal", "isochoric"):
        for _ in range(40):
            F, s = random_state(rng)
            r = co.degraded_response(F, s, 0.0, MATRIX, split_mode=mode)
            Fe = tensors.degraded_gradient(F, s, mode)
            assert r.psi == pytest.approx(
                co.plane_strain_energy(Fe, MATRIX), rel=1e-12)


def test_uniaxial_degraded_stress_frozen_values():
    r = co.degraded_response(np.diag([1.44, 1.0]), 0.5, 0.0, MATRIX)
    assert r.P[0, 0] == pytest.approx(20476.388888888887, rel=1e-12)
    assert r.P[1, 1] == pytest.approx(25127.199999999997, rel=1e-12)
    assert r.P[0, 1] == 0.0 and r.P[1, 0] == 0.0
    assert r.H_drive == pytest.approx(-21503.73369450618, rel=1e-12)
    assert r.psi == pytest.approx(5018.101135212015, rel=1e-12)


def test_stress_matches_energy_differences():
    rng = np.random.default_rng(41)
    for mode in ("principal", "isochoric"):
        for _ in range(25):
            F, s = random_state(rng, smin=0.05)
            r = co.degraded_response(F, s, 0.0, MATRIX, split_mode=mode)
            fd = co.fd_stress(F, s, MATRIX, split_mode=mode)
            scale = np.abs(fd.P).max()
            assert np.abs(r.P - fd.P).max() <= 1e-7 * scale
            assert r.H_drive == pytest.approx(fd.H_drive, rel=1e-6, abs=1e-9 * scale)


def test_driving_force_sign_in_tension():
    # damage releases energy when both stretches are tensile; mixed
    # tension/volumetric-compression states carry no sign guarantee
    rng = np.random.default_rng(43)
    for _ in range(100):
        l1, l2 = rng.uniform(1.0, 1.6, size=2)
        F = rotation(rng.uniform(0, 2 * np.pi)) @ np.diag([l1, l2]) \
            @ rotation(rng.uniform(0, 2 * np.pi))
        r = co.degraded_response(F, rng.uniform(0, 0.9), 0.0, MATRIX)
        assert r.H_drive <= 1e-12 * MATRIX.alpha


def test_full_damage_transmits_no_tension():
    undamaged = co.degraded_response(np.diag([1.5, 1.0]), 0.0, 0.0, MATRIX)
    dead = co.degraded_response(np.diag([1.5, 1.0]), 0.0, 1.0, MATRIX)
    assert np.abs(dead.P).max() <= 1e-8 * np.abs(undamaged.P).max()


def test_compression_insensitivity_principal():
    F = np.diag([0.8, 0.9]) @ rotation(0.3)
    base = co.degraded_response(F, 0.0, 0.0, MATRIX)
    for s in (0.3, 0.9):
        r = co.degraded_response(F, s, 0.0, MATRIX)
        assert np.abs(r.P - base.P).max() <= 1e-12 * np.abs(base.P).max()
        assert abs(r.H_drive) <= 1e-12 * MATRIX.alpha


def test_phase_exclusivity_enforced():
    with pytest.raises(ValueError):
        co.degraded_response(np.eye(2), 0.3, 0.2, MATRIX)
    with pytest.raises(ValueError):
        co.degraded_response(np.eye(2), 1.2, 0.0, MATRIX)


def test_channels_enter_through_sum():
    F = np.diag([1.3, 0.9])
    via_macro = co.degraded_response(F, 0.45, 0.0, MATRIX)
    via_micro = co.degraded_response(F, 0.0, 0.45, MATRIX)
    assert np.abs(via_macro.P - via_micro.P).max() < 1e-12 * np.abs(via_macro.P).max()


def test_tangent_blocks_match_fd_both_modes():
    rng = np.random.default_rng(47)
    for mode in ("principal", "isochoric"):
        for mat in (MATRIX, INCLUSION):
            for _ in range(15):
                F, s = random_state(rng, smin=0.05)
                tb = co.tangent_blocks(F, s, 0.0, mat, split_mode=mode)
                fd = co.fd_tangent_blocks(F, s, mat, split_mode=mode)
                cs = np.abs(fd.dP_dF).max()
                assert np.abs(tb.dP_dF - fd.dP_dF).max() <= 1e-5 * cs
                ds = max(np.abs(fd.dP_ds).max(), 1e-8 * cs)
                assert np.abs(tb.dP_ds - fd.dP_ds).max() <= 1e-5 * ds
                qs = max(abs(fd.dH_ds), 1e-8 * cs)
                assert abs(tb.dH_ds - fd.dH_ds) <= 1e-5 * qs


def test_tangent_major_symmetry():
    rng = np.random.default_rng(53)
    for _ in range(50):
        F, s = random_state(rng)
        tb = co.tangent_blocks(F, s, 0.0, MATRIX)
        C = tb.dP_dF
        assert np.abs(C - np.transpose(C, (2, 3, 0, 1))).max() \
            <= 1e-12 * np.abs(C).max()


def test_mixed_block_is_cross_derivative_both_ways():
    # dP/ds and dH/dF are the same second derivative of the energy
    rng = np.random.default_rng(59)
    F, s = random_state(rng, smin=0.2)
    tb = co.tangent_blocks(F, s, 0.0, MATRIX)
    h = co.default_fd_step(F)
    dH_dF = np.zeros((2, 2))
    for i in range(2):
        for J in range(2):
            dF = np.zeros((2, 2))
            dF[i, J] = h
            rp = co.response_fields(F + dF, s, MATRIX.alpha, MATRIX.beta,
                                    MATRIX.lambda_vol, order=1)
            rm = co.response_fields(F - dF, s, MATRIX.alpha, MATRIX.beta,
                                    MATRIX.lambda_vol, order=1)
            dH_dF[i, J] = (rp["H"] - rm["H"]) / (2 * h)
    assert np.abs(tb.dP_ds - dH_dF).max() <= 1e-5 * np.abs(dH_dF).max()


def test_tangent_at_degenerate_stretches():
    # equal principal stretches hit the perturbed quotient branch
    F = 1.3 * rotation(0.25)
    for s in (0.0, 0.4):
        tb = co.tangent_blocks(F, s, 0.0, MATRIX)
        fd = co.fd_tangent_blocks(F, s, MATRIX)
        assert np.abs(tb.dP_dF - fd.dP_dF).max() <= 1e-6 * np.abs(fd.dP_dF).max()


def test_undamaged_tangent_has_no_phase_coupling_in_compression():
    F = np.diag([0.85, 0.95])
    tb = co.tangent_blocks(F, 0.3, 0.0, MATRIX)
    assert np.abs(tb.dP_ds).max() == 0.0
    assert tb.dH_ds == 0.0


def test_out_of_plane_stress_against_3d_embedding():
    # derivative of the 3D energy in the out-of-plane stretch, via FD
    rng = np.random.default_rng(61)

    def psi3d(F3, m):
        J = np.linalg.det(F3)
        I1 = np.sum(F3 * F3)
        H = J * np.linalg.inv(F3).T
        I2 = np.sum(H * H)
        return (m.alpha * (I1 - 3) + m.beta * (I2 - 3)
                - 2 * (m.alpha + 2 * m.beta) * np.log(J)
                + m.lambda_vol / 2 * (J - 1) ** 2)

    for _ in range(20):
        F, s = random_state(rng)
        Fe = tensors.degraded_gradient(F, s)
        h = 1e-6
        F3p, F3m = np.eye(3), np.eye(3)
        F3p[:2, :2] = F3m[:2, :2] = Fe
        F3p[2, 2] += h
        F3m[2, 2] -= h
        fd = (psi3d(F3p, MATRIX) - psi3d(F3m, MATRIX)) / (2 * h)
        P33 = co.out_of_plane_stress(F, s, MATRIX.alpha, MATRIX.beta,
                                     MATRIX.lambda_vol)
        assert P33 == pytest.approx(fd, rel=1e-6, abs=1e-4 * MATRIX.alpha)


def test_batched_response_matches_scalar():
    rng = np.random.default_rng(67)
    F = np.array([random_state(rng)[0] for _ in range(16)]).reshape(4, 4, 2, 2)
    s = rng.uniform(0, 0.8, size=(4, 4))
    batch = co.response_fields(F, s, MATRIX.alpha, MATRIX.beta,
                               MATRIX.lambda_vol, order=2)
    for i in range(4):
        for k in range(4):
            one = co.response_fields(F[i, k], s[i, k], MATRIX.alpha,
                                     MATRIX.beta, MATRIX.lambda_vol, order=2)
            assert np.allclose(batch["P"][i, k], one["P"], rtol=1e-14)
            assert np.allclose(batch["C"][i, k], one["C"], rtol=1e-14)
            assert np.allclose(batch["Q"][i, k], one["Q"], rtol=1e-14)


def test_tangent_blocks_inside_stretch_bridge():
    # states with a stretch inside the narrow bridge above lam = 1,
    # where the map picks up curvature in the phase variable
    rng = np.random.default_rng(53)
    dl = tensors.KINK_BLEND_WIDTH
    for _ in range(20):
        l1 = 1.0 + dl * rng.uniform(0.1, 0.9)
        l2 = rng.uniform(0.7, 0.95)
        F = rotation(rng.uniform(0, 2 * np.pi)) @ np.diag([l1, l2]) \
            @ rotation(rng.uniform(0, 2 * np.pi))
        s = rng.uniform(0.1, 0.9)
        tb = co.tangent_blocks(F, s, 0.0, MATRIX)
        fd = co.fd_tangent_blocks(F, s, MATRIX, step=1e-7)
        cs = np.abs(fd.dP_dF).max()
        assert np.abs(tb.dP_dF - fd.dP_dF).max() <= 1e-4 * cs
        ds = max(np.abs(fd.dP_ds).max(), 1e-8 * cs)
        assert np.abs(tb.dP_ds - fd.dP_ds).max() <= 1e-4 * ds
        qs = max(abs(fd.dH_ds), 1e-8 * cs)
        assert abs(tb.dH_ds - fd.dH_ds) <= 1e-4 * qs
