"""Pairwise interaction tensors.

All tensors are 3x3 real symmetric matrices in MHz (ordinary frequency)
acting between spin vectors, ``H = J1 . T . J2``.  Dipolar tensors built
here carry the signed product of the gyromagnetic ratios, so an
electron-nucleus point-dipole tensor has the opposite overall sign to a
like-nucleus pair at the same geometry.
"""

import warnings

import numpy as np

from .constants import dipolar_prefactor_mhz_nm3
from .errors import SingularityError, ValidationError

SYMMETRY_RTOL = 1e-12
TRACE_RTOL = 1e-9


def require_symmetric(tensor, what="tensor"):
    """Validate and return a 3x3 symmetric array (relative tol 1e-12)."""
    t = np.asarray(tensor, dtype=float)
    if t.shape != (3, 3):
        raise ValidationError(f"{what} must be 3x3, got shape {t.shape}")
    scale = np.abs(t).max()
    if scale > 0 and np.abs(t - t.T).max() > SYMMETRY_RTOL * scale:
        raise ValidationError(f"{what} is not symmetric")
    return 0.5 * (t + t.T)


def is_traceless(tensor):
    t = np.asarray(tensor, dtype=float)
    norm = np.linalg.norm(t)
    return norm == 0 or abs(np.trace(t)) <= TRACE_RTOL * norm


def _dipolar_kernel(r):
    """(|r|^2 delta_ab - 3 r_a r_b) / |r|^5 for a displacement r in nm."""
    d2 = float(r @ r)
    if d2 == 0.0:
        raise SingularityError("coincident positions in dipolar kernel")
    return (d2 * np.eye(3) - 3.0 * np.outer(r, r)) / d2 ** 2.5


def dipolar_tensor(r_i, r_j, gamma_i, gamma_j):
    """Magnetic dipole-dipole coupling tensor between two point spins.

    Parameters
    ----------
    r_i, r_j : array_like, shape (3,)
        Positions in nm.
    gamma_i, gamma_j : float
        Gyromagnetic ratios in rad ms^-1 G^-1, signs included.

    Returns
    -------
    ndarray, shape (3, 3)
        Symmetric traceless tensor in MHz,
        ``mu0/(4 pi) * gamma_i * gamma_j * hbar *
        (|r|^2 delta_ab - 3 r_a r_b)/|r|^5``.
    """
    r = np.asarray(r_j, dtype=float) - np.asarray(r_i, dtype=float)
    return dipolar_prefactor_mhz_nm3(gamma_i, gamma_j) * _dipolar_kernel(r)


def point_dipole_hyperfine(pos, gamma_n, gamma_e):
    """Point-dipole hyperfine tensor for a nucleus at ``pos`` (nm) relative
    to an electron spin at the origin.

    The zz component equals ``-(G/r^3)(3 cos^2(theta) - 1)`` with theta the
    polar angle from z and G the signed electron-nucleus prefactor.
    """
    pos = np.asarray(pos, dtype=float)
    if not np.any(pos):
        raise SingularityError("nucleus coincides with the electron")
    return dipolar_prefactor_mhz_nm3(gamma_e, gamma_n) * _dipolar_kernel(pos)


def spin_exchange_sigma(tensor):
    """Conventional spin-exchange coupling sigma = -P_zz, in Hz.

    For equal-Larmor spin-1/2 pairs the actual flip-flop matrix element
    between |ud> and |du> is (P_xx + P_yy)/4, i.e. -P_zz/4 for a traceless
    tensor; sigma = -P_zz is the reported convention.
    """
    t = np.asarray(tensor, dtype=float)
    return -t[2, 2] * 1.0e6


class SpinDensityGrid:
    """Spin density sampled on a regular 3D grid.

    Attributes
    ----------
    origin : (3,) ndarray
        Position of the center of voxel (0, 0, 0), nm.
    axes : (3, 3) ndarray
        Rows are the grid step vectors, nm.
    values : (n0, n1, n2) ndarray
        Spin density, nm^-3.
    normalization : float
        Declared total integrated spin (e.g. 2S for a spin-S defect whose
        density counts unpaired electrons).
    """

    def __init__(self, origin, axes, values, normalization=1.0):
        self.origin = np.asarray(origin, dtype=float).reshape(3)
        self.axes = np.asarray(axes, dtype=float).reshape(3, 3)
        self.values = np.asarray(values, dtype=float)
        if self.values.ndim != 3:
            raise ValidationError("density values must be a 3D array")
        self.normalization = float(normalization)
        vol = self.voxel_volume
        if vol <= 0:
            raise ValidationError("grid axes are not right-handed / non-degenerate")

    @property
    def voxel_volume(self):
        return float(np.linalg.det(self.axes))

    @property
    def integrated(self):
        """Total spin contained in the grid."""
        return float(self.values.sum() * self.voxel_volume)

    def voxel_centers(self):
        """Voxel center positions, shape (n0, n1, n2, 3)."""
        n0, n1, n2 = self.values.shape
        idx = np.stack(np.meshgrid(np.arange(n0), np.arange(n1),
                                   np.arange(n2), indexing="ij"), axis=-1)
        return self.origin + idx @ self.axes

    def scaled_per_spin(self):
        """Copy with values divided by the declared normalization.

        An ingested defect density integrating to 2S becomes an effective
        one-spin density, which is the convention :func:`grid_hyperfine`
        integrates against.
        """
        return SpinDensityGrid(self.origin, self.axes,
                               self.values / self.normalization, 1.0)


def grid_hyperfine(pos, density, gamma_n, gamma_e, core_radius=None,
                   regularize=True):
    """Hyperfine tensor from a spin-density grid by midpoint quadrature.

    ``A = G_en * sum_v rho_v K(r_v - pos) dV`` with the same kernel and
    signed prefactor as :func:`point_dipole_hyperfine`; a delta-like
    density of unit weight therefore reproduces the point-dipole tensor,
    and the result is linear in the density.  Callers holding a density
    normalized to 2S should pass ``density.scaled_per_spin()``.

    Parameters
    ----------
    pos : (3,) array_like
        Nucleus position, nm.
    density : SpinDensityGrid
    core_radius : float, optional
        If set, reject ``pos`` within this distance of the density maximum
        unless ``regularize`` is true.
    regularize : bool
        Skip voxels closer to the nucleus than half a voxel diagonal
        (always on; this is the quadrature regularization) and, when a
        core violation occurs, proceed instead of raising.
    """
    pos = np.asarray(pos, dtype=float).reshape(3)
    centers = density.voxel_centers().reshape(-1, 3)
    rho = density.values.reshape(-1)

    if density.normalization:
        captured = density.integrated
        if abs(captured) < 0.99 * abs(density.normalization):
            warnings.warn(
                f"density grid integrates to {captured:.4g}, less than 99% of "
                f"the declared normalization {density.normalization:.4g}",
                stacklevel=2)

    if core_radius is not None:
        peak = centers[np.argmax(np.abs(rho))]
        if np.linalg.norm(pos - peak) < core_radius:
            if not regularize:
                raise SingularityError(
                    f"nucleus at {pos} lies within core radius "
                    f"{core_radius} nm of the density maximum")

    d = centers - pos
    d2 = np.einsum("va,va->v", d, d)
    half_diag = 0.5 * np.linalg.norm(density.axes.sum(axis=0))
    keep = d2 > half_diag ** 2
    d = d[keep]
    d2 = d2[keep]
    w = rho[keep] * density.voxel_volume / d2 ** 2.5

    # sum_v w_v (|d|^2 delta_ab - 3 d_a d_b)
    kernel = np.einsum("v,v->", w, d2) * np.eye(3) \
        - 3.0 * np.einsum("v,va,vb->ab", w, d, d)
    tensor = dipolar_prefactor_mhz_nm3(gamma_e, gamma_n) * kernel
    return 0.5 * (tensor + tensor.T)


def read_cube(path):
    """Read a spin-density grid in a Gaussian-cube-compatible layout.

    Layout (all distances in nm, densities in nm^-3): two comment lines
    (the second may carry ``normalization: X``), then ``natoms ox oy oz``,
    three lines ``n_i ax ay az`` with the step vectors, ``natoms`` atom
    lines (ignored), then the values with the last grid index fastest.
    """
    with open(path, "r", encoding="utf-8") as fh:
        fh.readline()
        second = fh.readline()
        normalization = 1.0
        if "normalization:" in second:
            normalization = float(second.split("normalization:")[1].split()[0])
        natoms_line = fh.readline().split()
        natoms = int(natoms_line[0])
        origin = np.array([float(x) for x in natoms_line[1:4]])
        counts = []
        axes = []
        for _ in range(3):
            parts = fh.readline().split()
            counts.append(int(parts[0]))
            axes.append([float(x) for x in parts[1:4]])
        for _ in range(abs(natoms)):
            fh.readline()
        data = np.array(fh.read().split(), dtype=float)
    expected = counts[0] * counts[1] * counts[2]
    if data.size != expected:
        raise ValidationError(
            f"cube file {path}: expected {expected} values, got {data.size}")
    values = data.reshape(counts)
    return SpinDensityGrid(origin, np.array(axes), values, normalization)


def write_cube(path, density, comment="spin density"):
    n0, n1, n2 = density.values.shape
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{comment}\n")
        fh.write(f"normalization: {density.normalization:.17g}\n")
        o = density.origin
        fh.write(f"0 {o[0]:.17g} {o[1]:.17g} {o[2]:.17g}\n")
        for n, ax in zip((n0, n1, n2), density.axes):
            fh.write(f"{n} {ax[0]:.17g} {ax[1]:.17g} {ax[2]:.17g}\n")
        flat = density.values.reshape(-1)
        for start in range(0, flat.size, 6):
            fh.write(" ".join(f"{v:.10e}" for v in flat[start:start + 6]))
            fh.write("\n")
