"""Spectral kinematics for plane-strain finite deformation.

Deformation gradients are 2x2 arrays; arbitrary leading batch axes are
supported throughout so element/quadrature loops can stay inside numpy.

The tension/compression split acts on principal stretches: the part of a
stretch above one is tensile and subject to degradation, the part below
one is compressive and transmitted unchanged.  Degradation raises the
tensile factor to the power g = 1 - s with s the combined phase variable,
so s = 0 leaves the stretch intact and s = 1 removes the tensile excess.
A narrow cubic bridge replaces the corner of the degraded map just above
a stretch of one (see KINK_BLEND_WIDTH).  An alternative split degrades
the isochoric part of the stretches only; it is kept as a selectable
variant.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonPhysicalStateError

# Relative eigenvalue gap below which tangent quotients switch to the
# perturbed evaluation (coalescent principal stretches).
DEGENERACY_RTOL = 1e-8

# Relative gap below which the eigenframe itself is treated as arbitrary.
_FRAME_RTOL = 1e-14

# Width of the one-sided bridge over the corner of the tensile map at
# lam = 1.  For s > 0 the map lam -> max(lam, 1)**(1 - s) has a slope
# jump there, so the stress is set-valued on the kink and equilibria can
# pin quadrature points where no residual level is attainable.  Blending
# over (1, 1 + width) keeps both pure branches bit-exact outside the
# zone.
KINK_BLEND_WIDTH = 1e-3

SPLIT_MODES = ("principal", "isochoric")


def det(t: np.ndarray) -> np.ndarray:
    """Determinant of a batch of 2x2 tensors, shape (...,)."""
    return t[..., 0, 0] * t[..., 1, 1] - t[..., 0, 1] * t[..., 1, 0]


@dataclass
class SpectralData:
    """Principal stretches and directions of a deformation gradient.

    Attributes
    ----------
    stretches : ndarray, shape (..., 2)
        Principal stretches in descending order, both positive.
    left_dirs : ndarray, shape (..., 2, 2)
        ``left_dirs[..., a, :]`` is the spatial (deformed) unit direction
        belonging to stretch ``a``.
    right_dirs : ndarray, shape (..., 2, 2)
        ``right_dirs[..., a, :]`` is the referential unit direction.
    """

    stretches: np.ndarray
    left_dirs: np.ndarray
    right_dirs: np.ndarray


@dataclass
class StretchSplit:
    """Multiplicative tensile/compressive factors of principal stretches."""

    tensile: np.ndarray
    compressive: np.ndarray


def spectral_decompose(F: np.ndarray) -> SpectralData:
    """Closed-form spectral decomposition F = sum_a lam_a n_a (x) N_a.

    Parameters
    ----------
    F : ndarray, shape (..., 2, 2)
        Deformation gradients with positive determinant.

    Returns
    -------
    SpectralData
        Stretches sorted descending; the direction pairs (n_a, N_a) form
        proper orthonormal frames, so the decomposition is the 2D polar /
        singular value factorization with rotation determinant +1.

    Raises
    ------
    NonPhysicalStateError
        If any determinant is not strictly positive.
    """
    F = np.asarray(F, dtype=float)
    j = det(F)
    if np.any(j <= 0.0):
        bad = int(np.count_nonzero(j <= 0.0))
        raise NonPhysicalStateError(
            f"{bad} deformation state(s) with non-positive Jacobian "
            f"(min det = {j.min():.3e})")

    # Right Cauchy-Green tensor, eigenproblem solved in closed form.
    c11 = F[..., 0, 0] ** 2 + F[..., 1, 0] ** 2
    c22 = F[..., 0, 1] ** 2 + F[..., 1, 1] ** 2
    c12 = F[..., 0, 0] * F[..., 0, 1] + F[..., 1, 0] * F[..., 1, 1]
    half_tr = 0.5 * (c11 + c22)
    half_df = 0.5 * (c11 - c22)
    rad = np.hypot(half_df, c12)

    lam1 = np.sqrt(half_tr + rad)
    # lam1*lam2 = j exactly; dividing avoids cancellation in half_tr - rad.
    lam2 = j / lam1

    # Eigenvector of C for the larger eigenvalue; the two formulas are
    # algebraically equivalent but each is cancellation-safe on its branch.
    v1 = np.where(half_df >= 0.0, half_df + rad, c12)
    v2 = np.where(half_df >= 0.0, c12, rad - half_df)
    norm = np.hypot(v1, v2)
    degenerate = rad <= _FRAME_RTOL * half_tr
    safe = np.where(degenerate, 1.0, norm)
    N1 = np.stack([np.where(degenerate, 1.0, v1 / safe),
                   np.where(degenerate, 0.0, v2 / safe)], axis=-1)
    # Right-handed companion direction.
    N2 = np.stack([-N1[..., 1], N1[..., 0]], axis=-1)

    right = np.stack([N1, N2], axis=-2)
    stretches = np.stack([lam1, lam2], axis=-1)
    # n_a = F N_a / lam_a inherits orthonormality from C N_a = lam_a^2 N_a.
    left = np.einsum('...iJ,...aJ->...ai', F, right) / stretches[..., None]
    return SpectralData(stretches=stretches, left_dirs=left, right_dirs=right)


def split_stretch(stretches: np.ndarray) -> StretchSplit:
    """Split stretches into tensile and compressive factors.

    The factors multiply back to the input stretch; the tensile one is
    >= 1 and the compressive one <= 1, with exactly one of them equal to
    one unless the stretch itself is one.
    """
    lam = np.asarray(stretches, dtype=float)
    return StretchSplit(tensile=np.maximum(lam, 1.0),
                        compressive=np.minimum(lam, 1.0))


def tension_blend(lam: np.ndarray, g: np.ndarray, order: int = 2):
    """Cubic bridge of the degraded tension map across the kink at one.

    On (1, 1 + KINK_BLEND_WIDTH) the map lam -> lam**g is replaced by
    the cubic Hermite segment that matches value and slope of the
    compressive branch (identity) at the left end and of the degraded
    branch at the right end, making the resulting stress single valued
    through the kink.  Returns ``(y, y_l, y_s)`` and, for ``order >= 2``,
    additionally ``(y_ll, y_ls, y_ss)`` where subscripts denote partial
    derivatives with respect to the stretch and the phase variable
    (note dg/ds = -1 is already folded in).  Entries outside the blend
    interval are polynomial extrapolations; callers mask them.
    """
    dl = KINK_BLEND_WIDTH
    ln1p = np.log1p(dl)
    R = (1.0 + dl) ** g
    m1 = dl * g * R / (1.0 + dl)
    c2 = 3.0 * (R - 1.0) - 2.0 * dl - m1
    c3 = 2.0 - 2.0 * R + dl + m1
    t = (lam - 1.0) / dl
    y = 1.0 + dl * t + c2 * t ** 2 + c3 * t ** 3
    y_l = (dl + 2.0 * c2 * t + 3.0 * c3 * t ** 2) / dl
    Rs = -R * ln1p
    m1s = -dl * R * (1.0 + g * ln1p) / (1.0 + dl)
    c2s = 3.0 * Rs - m1s
    c3s = -2.0 * Rs + m1s
    y_s = c2s * t ** 2 + c3s * t ** 3
    if order < 2:
        return y, y_l, y_s
    y_ll = (2.0 * c2 + 6.0 * c3 * t) / dl ** 2
    y_ls = (2.0 * c2s * t + 3.0 * c3s * t ** 2) / dl
    Rss = R * ln1p ** 2
    m1ss = dl * R * ln1p * (2.0 + g * ln1p) / (1.0 + dl)
    y_ss = (3.0 * Rss - m1ss) * t ** 2 + (m1ss - 2.0 * Rss) * t ** 3
    return y, y_l, y_s, y_ll, y_ls, y_ss


def degraded_stretches(stretches: np.ndarray, s_total: np.ndarray,
                       split_mode: str = "principal") -> np.ndarray:
    """Elastic (degraded) principal stretches for a combined phase value.

    Parameters
    ----------
    stretches : ndarray, shape (..., 2)
    s_total : ndarray, shape (...)
        Combined phase variable in [0, 1].
    split_mode : {"principal", "isochoric"}
        "principal" degrades the tensile factor of each stretch;
        "isochoric" degrades the full stretch in expansion and the
        volume-compensated stretch otherwise.
    """
    lam = np.asarray(stretches, dtype=float)
    g = (1.0 - np.asarray(s_total, dtype=float))[..., None]
    if split_mode == "principal":
        sp = split_stretch(lam)
        le = sp.tensile ** g * sp.compressive
        zone = (lam > 1.0) & (lam < 1.0 + KINK_BLEND_WIDTH)
        if zone.any():
            gz = np.broadcast_to(g, lam.shape)[zone]
            le[zone] = tension_blend(lam[zone], gz, order=1)[0]
        return le
    if split_mode == "isochoric":
        j = (lam[..., 0] * lam[..., 1])[..., None]
        expanding = j > 1.0
        return np.where(expanding, lam ** g, lam ** g * j ** ((1.0 - g) / 2.0))
    raise ValueError(f"unknown split_mode {split_mode!r}")


def degraded_gradient(F: np.ndarray, s_total: np.ndarray,
                      split_mode: str = "principal") -> np.ndarray:
    """Degraded deformation gradient sum_a le_a n_a (x) N_a.

    Recomposes the spectral factorization of ``F`` with the elastic
    stretches from :func:`degraded_stretches`.  For ``s_total = 0`` this
    returns ``F`` to round-off.
    """
    sd = spectral_decompose(F)
    le = degraded_stretches(sd.stretches, s_total, split_mode)
    return np.einsum('...a,...ai,...aJ->...iJ', le, sd.left_dirs,
                     sd.right_dirs)
