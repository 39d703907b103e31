"""Dense Hamiltonian assembly in explicit product bases.

Basis ordering is fixed everywhere: electron (when present), central
nucleus, then cluster spins by ascending bath index.  Each subsystem
basis is ordered by descending magnetic quantum number m.

Sign conventions: every spin couples to the field as ``H = -gamma B . J``
with the signed gyromagnetic ratio (so the nuclear Larmor frequency is
``w = -gamma B`` and the electron term, with gamma_e < 0, raises the
ms = +1 level).  The zero-field splitting enters as ``D Sz^2``.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .constants import RAD_PER_MS_TO_MHZ
from .couplings import dipolar_tensor, point_dipole_hyperfine
from .errors import DegeneracyError, EngineError, ValidationError

HERMITICITY_RTOL = 1e-12


@dataclass(frozen=True)
class SpinOperatorSet:
    """Spin matrices for one site, m ordered descending along sz."""

    dimension: int
    sx: np.ndarray
    sy: np.ndarray
    sz: np.ndarray
    sp: np.ndarray
    sm: np.ndarray


@lru_cache(maxsize=None)
def spin_operators(spin):
    """Operator set for total spin ``spin`` (half-integer or integer)."""
    twos = round(2 * spin)
    if twos != 2 * spin or spin <= 0:
        raise ValidationError(f"invalid spin quantum number {spin}")
    dim = int(twos) + 1
    m = spin - np.arange(dim)
    sz = np.diag(m).astype(complex)
    sp = np.zeros((dim, dim), dtype=complex)
    for k in range(1, dim):
        # <m+1| s+ |m> with m = spin - k
        sp[k - 1, k] = np.sqrt(spin * (spin + 1) - m[k] * (m[k] + 1))
    sm = sp.conj().T
    sx = 0.5 * (sp + sm)
    sy = -0.5j * (sp - sm)
    return SpinOperatorSet(dim, sx, sy, sz, sp, sm)


@dataclass(frozen=True)
class HamiltonianMatrix:
    """Dense Hermitian matrix (MHz) with its subsystem basis labels."""

    basis: tuple          # ((label, dim), ...)
    matrix: np.ndarray

    def __post_init__(self):
        dims = tuple(d for _, d in self.basis)
        n = int(np.prod(dims))
        if self.matrix.shape != (n, n):
            raise ValidationError(
                f"matrix shape {self.matrix.shape} does not match basis "
                f"dimensions {dims}")
        scale = np.abs(self.matrix).max()
        if scale > 0 and np.abs(self.matrix - self.matrix.conj().T).max() \
                > HERMITICITY_RTOL * scale * 100:
            raise ValidationError("matrix is not Hermitian")

    @property
    def dims(self):
        return tuple(d for _, d in self.basis)

    @property
    def dim(self):
        return self.matrix.shape[0]


@lru_cache(maxsize=256)
def _site_vectors(dims):
    """Embedded (Jx, Jy, Jz) triples for every site of a product space."""
    eyes = [np.eye(d) for d in dims]
    out = []
    for k, d in enumerate(dims):
        ops = spin_operators((d - 1) / 2)
        triple = []
        for comp in (ops.sx, ops.sy, ops.sz):
            full = comp
            for j in range(k - 1, -1, -1):
                full = np.kron(eyes[j], full)
            for j in range(k + 1, len(dims)):
                full = np.kron(full, eyes[j])
            triple.append(full)
        out.append(tuple(triple))
    return tuple(out)


def _coupling(jvec_i, tensor, jvec_j):
    """sum_ab T_ab J_a^i J_b^j for embedded component triples."""
    w = np.tensordot(np.asarray(tensor, float), np.array(jvec_j), axes=(1, 0))
    out = jvec_i[0] @ w[0]
    out += jvec_i[1] @ w[1]
    out += jvec_i[2] @ w[2]
    return out


def _zeeman(jvec, gamma, field):
    bx, by, bz = field
    f = -gamma * RAD_PER_MS_TO_MHZ
    return f * (bx * jvec[0] + by * jvec[1] + bz * jvec[2])


def hyperfine_tensor(system, spin):
    """Hyperfine tensor used for a bath spin: its stored tensor when set,
    the point-dipole form (electron at the origin) otherwise."""
    if spin.hyperfine is not None:
        return spin.hyperfine
    if system.electron is None:
        return None
    return point_dipole_hyperfine(spin.position, spin.gamma,
                                  system.electron.gamma)


def build_central(system):
    """Central-system Hamiltonian on electron (x) central-nucleus space.

    ``D Sz^2 - gamma_e B.S - gamma_n B.I0 + S.A0.I0``; without an electron
    only the nuclear Zeeman term survives.
    """
    nuc = system.central_nucleus
    if system.electron is None:
        vecs = _site_vectors((nuc.dim,))
        h = _zeeman(vecs[0], nuc.gamma, system.field)
        if nuc.quadrupole is not None:
            h = h + _coupling(vecs[0], nuc.quadrupole, vecs[0])
        return HamiltonianMatrix((("central", nuc.dim),), h)

    el = system.electron
    dims = (el.dim, nuc.dim)
    vecs = _site_vectors(dims)
    s, i0 = vecs
    h = el.d_mhz * (s[2] @ s[2])
    h = h + _zeeman(s, el.gamma, system.field)
    h = h + _zeeman(i0, nuc.gamma, system.field)
    h = h + _coupling(s, el.hyperfine_to_central, i0)
    if nuc.quadrupole is not None:
        h = h + _coupling(i0, nuc.quadrupole, i0)
    return HamiltonianMatrix((("electron", el.dim), ("central", nuc.dim)), h)


def build_cluster(system, bath, indices, mean_field=None, central=None):
    """Cluster Hamiltonian on (electron?) x central x cluster spins.

    Adds to the central-system Hamiltonian, for every cluster spin i:
    ``S.A_i.I_i + I0.P_0i.I_i - gamma_i B.I_i (+ I_i.Q_i.I_i)`` and for
    every pair ``I_i.P_ij.I_j``.  ``mean_field`` is an optional mapping
    site-label -> z-field shift in MHz (frozen outer spins acting as a
    static Ising field), added as ``shift * J_z``.  Pass a precomputed
    ``central`` Hamiltonian when building many clusters of one system.
    """
    indices = tuple(int(i) for i in indices)
    if central is None:
        central = build_central(system)
    cluster_spins = [bath.spins[i] for i in indices]
    basis = central.basis + tuple(
        (f"bath{i}", s.dim) for i, s in zip(indices, cluster_spins))
    dims = tuple(d for _, d in basis)
    vecs = _site_vectors(dims)

    n = int(np.prod(dims))
    h = np.zeros((n, n), dtype=complex)
    h += np.kron(central.matrix, np.eye(n // central.dim))

    has_electron = system.electron is not None
    s_vec = vecs[0] if has_electron else None
    i0_vec = vecs[1] if has_electron else vecs[0]
    offset = 2 if has_electron else 1
    nuc = system.central_nucleus

    for k, spin in enumerate(cluster_spins):
        jv = vecs[offset + k]
        if has_electron:
            a = hyperfine_tensor(system, spin)
            h += _coupling(s_vec, a, jv)
        p0 = dipolar_tensor(nuc.position, spin.position, nuc.gamma, spin.gamma)
        h += _coupling(i0_vec, p0, jv)
        h += _zeeman(jv, spin.gamma, system.field)
        if spin.quadrupole is not None:
            h += _coupling(jv, spin.quadrupole, jv)
        if mean_field:
            shift = mean_field.get(basis[offset + k][0], 0.0)
            if shift:
                h += shift * jv[2]

    for k in range(len(cluster_spins)):
        for l in range(k + 1, len(cluster_spins)):
            si, sj = cluster_spins[k], cluster_spins[l]
            p = dipolar_tensor(si.position, sj.position, si.gamma, sj.gamma)
            h += _coupling(vecs[offset + k], p, vecs[offset + l])

    if mean_field:
        for label, jv in (("electron", s_vec), ("central", i0_vec)):
            if label == "electron" and not has_electron:
                continue
            shift = mean_field.get(label, 0.0)
            if shift:
                h += shift * jv[2]

    return HamiltonianMatrix(basis, h)


def _product_index(dims, m_indices):
    idx = 0
    for d, k in zip(dims, m_indices):
        idx = idx * d + k
    return idx


def _fix_phase(vec, anchor):
    amp = vec[anchor]
    if amp == 0:
        # fall back to the largest component
        anchor = int(np.argmax(np.abs(vec)))
        amp = vec[anchor]
    return vec * (amp.conj() / abs(amp))


@dataclass(frozen=True)
class QubitLevels:
    """The two central-system eigenstates hosting the qubit.

    ``eigvals``/``eigvecs`` hold the full (phase-fixed) eigensystem of the
    central Hamiltonian; ``labels[k]`` is the product-basis index whose
    diabatic character eigenvector k carries.
    """

    level_a: int
    level_b: int
    eigvals: np.ndarray
    eigvecs: np.ndarray
    labels: np.ndarray
    dims: tuple

    @property
    def vec_a(self):
        return self.eigvecs[:, self.level_a]

    @property
    def vec_b(self):
        return self.eigvecs[:, self.level_b]

    @property
    def energy_a(self):
        return self.eigvals[self.level_a]

    @property
    def energy_b(self):
        return self.eigvals[self.level_b]


def _assign_diabatic(eigvecs):
    """Greedy one-to-one map eigenvector -> dominant product state."""
    n = eigvecs.shape[1]
    weight = np.abs(eigvecs) ** 2
    order = np.dstack(np.unravel_index(np.argsort(weight, axis=None)[::-1],
                                       weight.shape))[0]
    labels = -np.ones(n, dtype=int)
    used = np.zeros(n, dtype=bool)
    for prod, k in order:
        if labels[k] < 0 and not used[prod]:
            labels[k] = prod
            used[prod] = True
    return labels


def identify_levels(system, hamiltonian=None, overlap_threshold=0.5):
    """Locate the qubit pair among the central-system eigenstates.

    The designated diabatic states are |m_s, up> and |m_s, down> with m_s
    picked by ``system.electron_state`` ('pulsed' starts in m_s = 0) and
    up/down the two highest m_I of the central nucleus.  Each level must
    overlap its product state by more than ``overlap_threshold``.
    """
    if hamiltonian is None:
        hamiltonian = build_central(system)
    dims = hamiltonian.dims
    eigvals, eigvecs = np.linalg.eigh(hamiltonian.matrix)

    nuc_dim = system.central_nucleus.dim
    if system.electron is not None:
        ms = {"ms0": 0.0, "msM1": -1.0, "msP1": 1.0,
              "pulsed": 0.0}[system.electron_state]
        e_idx = round(system.electron.spin - ms)
        target_a = _product_index(dims, (e_idx, 0))
        target_b = _product_index(dims, (e_idx, 1))
    else:
        target_a, target_b = 0, 1
    if nuc_dim < 2:
        raise ValidationError("central nucleus has no qubit subspace")

    labels = _assign_diabatic(eigvecs)
    fixed = eigvecs.copy()
    for k in range(fixed.shape[1]):
        anchor = labels[k] if labels[k] >= 0 else int(np.argmax(np.abs(fixed[:, k])))
        fixed[:, k] = _fix_phase(fixed[:, k], anchor)

    picked = []
    for target in (target_a, target_b):
        k = int(np.argmax(np.abs(fixed[target, :]) ** 2))
        overlap = np.abs(fixed[target, k]) ** 2
        if overlap <= overlap_threshold:
            raise EngineError(
                f"no eigenstate overlaps diabatic product state {target} "
                f"by more than {overlap_threshold} (best {overlap:.3f}); "
                "levels are too strongly hybridized to label")
        picked.append(k)
    if picked[0] == picked[1]:
        raise EngineError("qubit levels collapsed onto one eigenstate")

    return QubitLevels(picked[0], picked[1], eigvals, fixed, labels, dims)


def conditioned_hamiltonian(h_cluster, levels, order=2,
                            degeneracy_threshold=1e-6):
    """Bath-space effective Hamiltonians conditioned on the qubit levels.

    Returns ``(H_a, H_b)`` acting on the cluster-spin space only:
    first-order projection ``<alpha|H_C|alpha>`` (with the qubit
    self-energy E_alpha subtracted, so an uncoupled cluster contributes
    no phase) plus, at ``order = 2``, the perturbative sum
    ``sum_i <alpha|H_C|i><i|H_C|alpha> / (E_alpha - E_i)`` over the
    remaining central-system eigenstates.  Only the central-bath coupling
    survives in those cross elements, which resolves the operator in the
    numerator; see tests against exact two-spin diagonalization.
    """
    if order not in (1, 2):
        raise ValidationError("perturbation order must be 1 or 2")
    d_cs = len(levels.eigvals)
    d_b = h_cluster.dim // d_cs
    h4 = h_cluster.matrix.reshape(d_cs, d_b, d_cs, d_b)

    out = []
    for alpha in (levels.level_a, levels.level_b):
        v = levels.eigvecs[:, alpha]
        e_alpha = levels.eigvals[alpha]
        h_eff = np.einsum("c,cbde,d->be", v.conj(), h4, v)
        h_eff -= e_alpha * np.eye(d_b)
        if order == 2:
            for i in range(d_cs):
                if i == alpha:
                    continue
                gap = e_alpha - levels.eigvals[i]
                if abs(gap) < degeneracy_threshold:
                    raise DegeneracyError(alpha, i, abs(gap),
                                          degeneracy_threshold)
                m = np.einsum("c,cbde,d->be", v.conj(), h4,
                              levels.eigvecs[:, i])
                h_eff = h_eff + (m @ m.conj().T) / gap
        out.append(h_eff)
    return out[0], out[1]
