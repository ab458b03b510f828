"""Degraded plane-strain Mooney-Rivlin response in principal stretches.

The stored energy is the plane-strain reduction of a compressible
Mooney-Rivlin solid.  With F the in-plane deformation gradient, tensor
norm I = F:F and j = det F,

    psi = (alpha + beta) (I - 2) + beta (j^2 - 1)
          - 2 (alpha + 2 beta) ln j + lambda_vol / 2 (j - 1)^2,

which is the 3D energy evaluated at unit out-of-plane stretch; it is
stress free and zero at any rotation.

Damage enters through the spectral tension/compression split: the
tensile factor of each principal stretch is raised to the power
g = 1 - s_total, and the energy is evaluated at the resulting elastic
stretches.  Stress, phase driving force and the three tangent blocks
(d P / d F, d P / d s, d H / d s) follow from the chain rule through the
stretch map; the frames are fixed points of the degradation, so the only
frame-sensitive terms are the classical rotational quotients of the
first Piola tangent.  Those quotients are evaluated at slightly
perturbed stretches when the two principal stretches coalesce.

All routines are batched over arbitrary leading axes.  Material
constants may be scalars or arrays broadcastable against the point
shape, which is how per-element heterogeneity is driven.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensors
from .errors import NonPhysicalStateError


@dataclass(frozen=True)
class MaterialParams:
    """Constitutive and fracture constants of one material.

    Attributes
    ----------
    alpha, beta : float
        Mooney-Rivlin shear-type constants, N/mm^2.
    lambda_vol : float
        Volumetric penalty constant, N/mm^2.
    g_c : float
        Critical fracture energy density, N/mm.
    length_scale : float
        Phase-field regularization length, mm.
    """

    alpha: float
    beta: float
    lambda_vol: float
    g_c: float
    length_scale: float

    def __post_init__(self):
        for name in ("alpha", "beta", "lambda_vol", "g_c", "length_scale"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0.0:
                raise ValueError(f"MaterialParams.{name} must be positive, "
                                 f"got {value!r}")


@dataclass
class StressState:
    """First Piola stress, phase driving force and energy density."""

    P: np.ndarray
    H_drive: float | np.ndarray
    psi: float | np.ndarray


@dataclass
class TangentBlocks:
    """Analytic second derivatives of the degraded energy.

    dP_dF has minor dimensions (2, 2, 2, 2) with index order (iJkL);
    dP_ds is the mixed stress/phase block, equal by symmetry to the
    derivative of the driving force with respect to F; dH_ds is the
    scalar phase curvature.
    """

    dP_dF: np.ndarray
    dP_ds: np.ndarray
    dH_ds: float | np.ndarray


def plane_strain_energy(F: np.ndarray, mat: MaterialParams):
    """Undamaged stored energy density of a deformation gradient batch."""
    F = np.asarray(F, dtype=float)
    j = tensors.det(F)
    if np.any(j <= 0.0):
        raise NonPhysicalStateError("plane_strain_energy needs det F > 0")
    I = np.sum(F * F, axis=(-2, -1))
    a, b, lv = mat.alpha, mat.beta, mat.lambda_vol
    psi = ((a + b) * (I - 2.0) + b * (j ** 2 - 1.0)
           - 2.0 * (a + 2.0 * b) * np.log(j) + 0.5 * lv * (j - 1.0) ** 2)
    return psi if psi.ndim else float(psi)


def _phi_derivs(j, alpha, beta, lam_vol, order):
    """Volumetric part phi(j) and derivatives; see module docstring."""
    phi = (beta * (j ** 2 - 1.0) - 2.0 * (alpha + 2.0 * beta) * np.log(j)
           + 0.5 * lam_vol * (j - 1.0) ** 2)
    if order == 0:
        return phi, None, None
    dphi = 2.0 * beta * j - 2.0 * (alpha + 2.0 * beta) / j \
        + lam_vol * (j - 1.0)
    if order == 1:
        return phi, dphi, None
    ddphi = 2.0 * beta + 2.0 * (alpha + 2.0 * beta) / j ** 2 + lam_vol
    return phi, dphi, ddphi


def _stretch_energy_derivs(l1, l2, alpha, beta, lam_vol, order):
    """Energy in terms of elastic principal stretches, with partials.

    Returns a dict with keys psi and, depending on order, p1, p2 (first
    partials) and p11, p22, p12 (second partials).
    """
    j = l1 * l2
    ab = alpha + beta
    phi, dphi, ddphi = _phi_derivs(j, alpha, beta, lam_vol, order)
    out = {"psi": ab * (l1 ** 2 + l2 ** 2 - 2.0) + phi}
    if order >= 1:
        out["p1"] = 2.0 * ab * l1 + dphi * l2
        out["p2"] = 2.0 * ab * l2 + dphi * l1
    if order >= 2:
        out["p11"] = 2.0 * ab + ddphi * l2 ** 2
        out["p22"] = 2.0 * ab + ddphi * l1 ** 2
        out["p12"] = ddphi * j + dphi
    return out


def _stretch_map(lam, s_total, split_mode, order):
    """Elastic stretch map E_a(lam_1, lam_2, s) and its derivatives.

    All branches share the logarithmic form u_a = ln E_a, whose
    derivatives are simple rational/log expressions; products of the
    u-derivatives then give the E-derivatives.  Returns (E, U1, Us, U2,
    Usb, Uss) where U1[..., a, b] = d u_a / d lam_b, Us[..., a] =
    d u_a / d s, and U2[..., a, b, c], Usb[..., a, b], Uss[..., a] are
    the second derivatives.  Inside the bridge zone of the principal
    split (see tensors.KINK_BLEND_WIDTH) the map is s-curved, so Uss is
    nonzero there; every pure branch has Uss = 0.
    """
    lam1, lam2 = lam[..., 0], lam[..., 1]
    s = np.asarray(s_total, dtype=float)
    g = 1.0 - s
    shape = np.broadcast_shapes(lam1.shape, s.shape)
    U1 = np.zeros(shape + (2, 2))
    Us = np.zeros(shape + (2,))
    U2 = np.zeros(shape + (2, 2, 2)) if order >= 2 else None
    Usb = np.zeros(shape + (2, 2)) if order >= 2 else None
    Uss = np.zeros(shape + (2,)) if order >= 2 else None

    if split_mode == "principal":
        sp = tensors.split_stretch(lam)
        E = np.broadcast_to(sp.tensile ** g[..., None] * sp.compressive,
                            shape + (2,))
        tens = lam > 1.0
        zone = np.broadcast_to(
            tens & (lam < 1.0 + tensors.KINK_BLEND_WIDTH), shape + (2,))
        if zone.any():
            E = E.copy()
        coef = np.where(tens, g[..., None], 1.0)
        gb = np.broadcast_to(g, shape)
        for a in range(2):
            la = lam[..., a]
            U1[..., a, a] = coef[..., a] / la
            Us[..., a] = np.where(tens[..., a], -np.log(la), 0.0)
            if order >= 2:
                U2[..., a, a, a] = -coef[..., a] / la ** 2
                Usb[..., a, a] = np.where(tens[..., a], -1.0 / la, 0.0)
            za = zone[..., a]
            if not za.any():
                continue
            lz = np.broadcast_to(la, shape)[za]
            bl = tensors.tension_blend(lz, gb[za], order=order)
            y, y_l, y_s = bl[0], bl[1], bl[2]
            E[..., a][za] = y
            U1[..., a, a][za] = y_l / y
            Us[..., a][za] = y_s / y
            if order >= 2:
                y_ll, y_ls, y_ss = bl[3], bl[4], bl[5]
                U2[..., a, a, a][za] = (y_ll * y - y_l ** 2) / y ** 2
                Usb[..., a, a][za] = (y_ls * y - y_l * y_s) / y ** 2
                Uss[..., a][za] = (y_ss * y - y_s ** 2) / y ** 2
        return E, U1, Us, U2, Usb, Uss

    if split_mode == "isochoric":
        j = lam1 * lam2
        expanding = (j > 1.0)[..., None]
        E = np.where(expanding, lam ** g[..., None],
                     lam ** g[..., None] * j[..., None] ** (s[..., None] / 2.0))
        half_s = 0.5 * s
        for a in range(2):
            la = lam[..., a]
            Us[..., a] = np.where(expanding[..., 0], -np.log(la),
                                  0.5 * np.log(j) - np.log(la))
            for b in range(2):
                lb = lam[..., b]
                diag = 1.0 if a == b else 0.0
                U1[..., a, b] = np.where(
                    expanding[..., 0], diag * g / lb,
                    (diag * g + half_s) / lb)
                if order >= 2:
                    U2[..., a, b, b] = np.where(
                        expanding[..., 0], -diag * g / lb ** 2,
                        -(diag * g + half_s) / lb ** 2)
                    Usb[..., a, b] = np.where(
                        expanding[..., 0], -diag / lb,
                        (0.5 - diag) / lb)
        return np.broadcast_to(E, shape + (2,)), U1, Us, U2, Usb, Uss

    raise ValueError(f"unknown split_mode {split_mode!r}")


def _w_first_partials(lam, s_total, alpha, beta, lam_vol, split_mode):
    """First stretch-partials of the degraded energy W(lam_1, lam_2, s)."""
    E, U1 = _stretch_map(lam, s_total, split_mode, order=1)[:2]
    mr = _stretch_energy_derivs(E[..., 0], E[..., 1], alpha, beta,
                                lam_vol, order=1)
    pc = np.stack([mr["p1"], mr["p2"]], axis=-1)
    dE = E[..., :, None] * U1
    return np.einsum('...c,...ca->...a', pc, dE)


def response_fields(F, s_total, alpha, beta, lambda_vol, *,
                    split_mode="principal", order=2):
    """Batched degraded response at (F, s_total).

    Parameters
    ----------
    F : ndarray, shape (..., 2, 2)
    s_total : scalar or ndarray broadcastable to the batch shape
    alpha, beta, lambda_vol : scalar or broadcastable ndarray
    order : int
        0 returns psi only, 1 adds P and H, 2 adds the tangent fields
        C (..., 2, 2, 2, 2), D (..., 2, 2) and Q (...).

    Returns
    -------
    dict with keys psi, P, H, C, D, Q depending on order.
    """
    sd = tensors.spectral_decompose(F)
    lam = sd.stretches
    shape = np.broadcast_shapes(
        lam[..., 0].shape, np.shape(s_total), np.shape(alpha),
        np.shape(beta), np.shape(lambda_vol))
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), shape)
    beta = np.broadcast_to(np.asarray(beta, dtype=float), shape)
    lambda_vol = np.broadcast_to(np.asarray(lambda_vol, dtype=float), shape)

    E, U1, Us, U2, Usb, Uss = _stretch_map(lam, s_total, split_mode,
                                           order=order)
    mr = _stretch_energy_derivs(E[..., 0], E[..., 1], alpha, beta,
                                lambda_vol, order=order)
    out = {"psi": mr["psi"]}
    if order == 0:
        return out

    pc = np.stack([mr["p1"], mr["p2"]], axis=-1)
    dE = E[..., :, None] * U1                      # dE[..., c, a]
    dEs = E * Us                                   # dEs[..., c]
    W1 = np.einsum('...c,...ca->...a', pc, dE)     # dW/dlam_a
    Ws = np.einsum('...c,...c->...', pc, dEs)

    n, N = sd.left_dirs, sd.right_dirs
    out["P"] = np.einsum('...a,...ai,...aJ->...iJ', W1, n, N)
    out["H"] = Ws
    if order == 1:
        return out

    pcc = np.empty(shape + (2, 2))
    pcc[..., 0, 0] = mr["p11"]
    pcc[..., 1, 1] = mr["p22"]
    pcc[..., 0, 1] = pcc[..., 1, 0] = mr["p12"]

    d2E = E[..., :, None, None] * (U1[..., :, None] * U1[..., None, :] + U2)
    d2Es = E[..., :, None] * (U1 * Us[..., None] + Usb)
    d2Ess = E * (Us ** 2 + Uss)

    Wab = (np.einsum('...cd,...ca,...db->...ab', pcc, dE, dE)
           + np.einsum('...c,...cab->...ab', pc, d2E))
    Was = (np.einsum('...cd,...ca,...d->...a', pcc, dE, dEs)
           + np.einsum('...c,...ca->...a', pc, d2Es))
    Wss = (np.einsum('...cd,...c,...d->...', pcc, dEs, dEs)
           + np.einsum('...c,...c->...', pc, d2Ess))

    # Rotational quotients of the first Piola tangent.  Coalescent
    # stretches make them 0/0; the limit is taken by evaluating the
    # quotient at symmetric perturbations of the stretch pair.
    lam1, lam2 = lam[..., 0], lam[..., 1]
    mean = 0.5 * (lam1 + lam2)
    close = (lam1 - lam2) <= tensors.DEGENERACY_RTOL * mean
    eps = tensors.DEGENERACY_RTOL * mean
    l1q = np.where(close, lam1 + eps, lam1)
    l2q = np.where(close, lam2 - eps, lam2)
    W1q = _w_first_partials(np.stack([l1q, l2q], axis=-1), s_total,
                            alpha, beta, lambda_vol, split_mode)
    denom = l1q ** 2 - l2q ** 2
    A = (W1q[..., 0] * l1q - W1q[..., 1] * l2q) / denom
    B = (W1q[..., 0] * l2q - W1q[..., 1] * l1q) / denom

    M = np.einsum('...ai,...bJ->...abiJ', n, N)
    C = np.einsum('...ab,...ai,...aJ,...bk,...bL->...iJkL', Wab, n, N, n, N)
    M12, M21 = M[..., 0, 1, :, :], M[..., 1, 0, :, :]
    outer = lambda X, Y: np.einsum('...iJ,...kL->...iJkL', X, Y)
    C += A[..., None, None, None, None] * (outer(M12, M12) + outer(M21, M21))
    C += B[..., None, None, None, None] * (outer(M12, M21) + outer(M21, M12))

    out["C"] = C
    out["D"] = np.einsum('...a,...ai,...aJ->...iJ', Was, n, N)
    out["Q"] = Wss
    return out


def _check_phase_pair(s_macro, d_micro):
    s = np.asarray(s_macro, dtype=float)
    d = np.asarray(d_micro, dtype=float)
    if np.any(s < 0) or np.any(s > 1) or np.any(d < 0) or np.any(d > 1):
        raise ValueError("phase variables must lie in [0, 1]")
    if np.any((s > 0) & (d > 0)):
        raise ValueError("macro and micro phase cannot both be active")
    return s + d


def degraded_response(F, s_macro, d_micro, mat: MaterialParams,
                      split_mode="principal") -> StressState:
    """Stress, driving force and energy at a degraded state.

    Exactly one of s_macro / d_micro may be nonzero (the two fracture
    channels are exclusive); they enter only through their sum.
    """
    s_total = _check_phase_pair(s_macro, d_micro)
    r = response_fields(F, s_total, mat.alpha, mat.beta, mat.lambda_vol,
                        split_mode=split_mode, order=1)
    return StressState(P=r["P"], H_drive=r["H"], psi=r["psi"])


def tangent_blocks(F, s_macro, d_micro, mat: MaterialParams,
                   split_mode="principal") -> TangentBlocks:
    """Analytic tangent blocks of :func:`degraded_response`."""
    s_total = _check_phase_pair(s_macro, d_micro)
    r = response_fields(F, s_total, mat.alpha, mat.beta, mat.lambda_vol,
                        split_mode=split_mode, order=2)
    return TangentBlocks(dP_dF=r["C"], dP_ds=r["D"], dH_ds=r["Q"])


def default_fd_step(F) -> float:
    """Central-difference step used by the finite-difference fallback."""
    return 1e-6 * max(1.0, float(np.linalg.norm(F)))


def fd_stress(F, s_total, mat: MaterialParams, split_mode="principal",
              step=None) -> StressState:
    """Finite-difference stress and driving force from the energy alone."""
    F = np.asarray(F, dtype=float)
    h = default_fd_step(F) if step is None else step

    def psi(Fv, sv):
        return response_fields(Fv, sv, mat.alpha, mat.beta, mat.lambda_vol,
                               split_mode=split_mode, order=0)["psi"]

    P = np.zeros((2, 2))
    for i in range(2):
        for J in range(2):
            dF = np.zeros((2, 2))
            dF[i, J] = h
            P[i, J] = (psi(F + dF, s_total) - psi(F - dF, s_total)) / (2 * h)
    H = (psi(F, s_total + h) - psi(F, s_total - h)) / (2 * h)
    return StressState(P=P, H_drive=H, psi=psi(F, s_total))


def fd_tangent_blocks(F, s_total, mat: MaterialParams,
                      split_mode="principal", step=None) -> TangentBlocks:
    """Finite-difference tangent blocks; the test oracle for the
    analytic ones.  Central differences of the first derivatives with
    step 1e-6 max(1, ||F||) unless overridden."""
    F = np.asarray(F, dtype=float)
    h = default_fd_step(F) if step is None else step

    def first(Fv, sv):
        r = response_fields(Fv, sv, mat.alpha, mat.beta, mat.lambda_vol,
                            split_mode=split_mode, order=1)
        return r["P"], r["H"]

    C = np.zeros((2, 2, 2, 2))
    for k in range(2):
        for L in range(2):
            dF = np.zeros((2, 2))
            dF[k, L] = h
            Pp, _ = first(F + dF, s_total)
            Pm, _ = first(F - dF, s_total)
            C[:, :, k, L] = (Pp - Pm) / (2 * h)
    Pp, Hp = first(F, s_total + h)
    Pm, Hm = first(F, s_total - h)
    return TangentBlocks(dP_dF=C, dP_ds=(Pp - Pm) / (2 * h),
                         dH_ds=(Hp - Hm) / (2 * h))


def out_of_plane_stress(F, s_total, alpha, beta, lambda_vol,
                        split_mode="principal"):
    """Transmitted out-of-plane first Piola stress component.

    Evaluates the derivative of the parent 3D energy with respect to the
    out-of-plane stretch at the degraded in-plane state and unit
    out-of-plane stretch; used for the von Mises output field.
    """
    Fe = tensors.degraded_gradient(F, s_total, split_mode)
    je = tensors.det(Fe)
    Ie = np.sum(Fe * Fe, axis=(-2, -1))
    return 2.0 * beta * (Ie - 2.0) + lambda_vol * je * (je - 1.0)


def cauchy_von_mises(F, P, P33):
    """Von Mises stress of the 3D Cauchy tensor built from plane-strain
    homogenized quantities.

    The in-plane Cauchy block is symmetrized (it is symmetric only to
    the accuracy of balance at the evaluation point); the out-of-plane
    normal component comes from :func:`out_of_plane_stress`.
    """
    j = tensors.det(F)
    sig = np.einsum('...iJ,...kJ->...ik', P, F) / j[..., None, None]
    sig = 0.5 * (sig + np.swapaxes(sig, -1, -2))
    s11, s22, s12 = sig[..., 0, 0], sig[..., 1, 1], sig[..., 0, 1]
    s33 = P33 / j
    tr = (s11 + s22 + s33) / 3.0
    d11, d22, d33 = s11 - tr, s22 - tr, s33 - tr
    return np.sqrt(1.5 * (d11 ** 2 + d22 ** 2 + d33 ** 2 + 2.0 * s12 ** 2))
