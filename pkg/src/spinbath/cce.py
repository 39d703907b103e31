"""Cluster enumeration and both expansion engines.

The coherence function factorizes over clusters of bath spins,
``L = prod_C Vtilde_C`` with ``Vtilde_C = L_C / prod_{C' subset C}
Vtilde_C'`` computed recursively over the (closure-complete) cluster
set.  Two routes compute the per-cluster ``L_C``:

- conventional route ('cce'): the bath evolves under two effective
  Hamiltonians conditioned on the frozen qubit levels (pure dephasing;
  the deterministic qubit phase is excluded from every factor, so an
  uncoupled cluster contributes exactly 1);
- generalized route ('gcce'): the full central x cluster system evolves
  unitarily and the qubit off-diagonal element is read from the reduced
  density matrix; each factor is normalized by the bath-free trace,
  which multiplies the final product back in.
"""

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from .constants import CYCLES_PER_MHZ_MS, dipolar_prefactor_mhz_nm3
from .errors import DegeneracyError, EngineError, ValidationError
from .hamiltonian import (build_central, build_cluster,
                          conditioned_hamiltonian, hyperfine_tensor,
                          identify_levels)
from .propagation import CoherenceTrace, Evolver, SequenceRunner

_PHASE = 2.0 * math.pi * CYCLES_PER_MHZ_MS


@dataclass(frozen=True)
class Cluster:
    """Sorted tuple of bath-spin indices."""

    indices: tuple

    def __post_init__(self):
        idx = tuple(sorted(int(i) for i in self.indices))
        if len(set(idx)) != len(idx) or not idx:
            raise ValidationError("cluster indices must be unique, >= 1 of them")
        object.__setattr__(self, "indices", idx)

    @property
    def order(self):
        return len(self.indices)


class ClusterSet:
    """Clusters grouped by order with guaranteed hierarchy closure:
    every connected sub-cluster of an included cluster is included."""

    def __init__(self, by_order, connectivity_radius, caps=None):
        self.by_order = {k: sorted(v, key=lambda c: c.indices)
                         for k, v in by_order.items() if v}
        self.connectivity_radius = connectivity_radius
        self.caps = dict(caps) if caps else None
        self._members = {c.indices for cs in self.by_order.values()
                         for c in cs}

    def __contains__(self, indices):
        return tuple(indices) in self._members

    def __len__(self):
        return len(self._members)

    def counts(self):
        return {k: len(v) for k, v in sorted(self.by_order.items())}

    def ordered(self):
        """Deterministic iteration: ascending order, lexicographic."""
        for k in sorted(self.by_order):
            yield from self.by_order[k]

    def subclusters(self, cluster):
        """Proper sub-clusters of ``cluster`` present in the set."""
        out = []
        for size in range(1, cluster.order):
            for sub in itertools.combinations(cluster.indices, size):
                if sub in self._members:
                    out.append(sub)
        return out


def _adjacency(positions, radius):
    n = len(positions)
    adj = [set() for _ in range(n)]
    if n == 0 or radius <= 0:
        return adj
    # chunked pair scan keeps memory bounded for large baths
    chunk = max(1, int(2e7) // max(n, 1))
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        d2 = np.sum((positions[start:stop, None, :]
                     - positions[None, :, :]) ** 2, axis=-1)
        ii, jj = np.nonzero(d2 <= radius * radius)
        for i, j in zip(ii, jj):
            gi = start + i
            if gi != j:
                adj[gi].add(int(j))
    return adj


def _esu_extend(sub, ext, root, adj, max_order, out):
    ext = set(ext)
    while ext:
        w = ext.pop()
        new_sub = sub + (w,)
        out[len(new_sub)].append(tuple(sorted(new_sub)))
        if len(new_sub) < max_order:
            nbr_sub = set(sub)
            for s in sub:
                nbr_sub |= adj[s]
            new_ext = {u for u in ext}
            new_ext |= {u for u in adj[w]
                        if u > root and u not in nbr_sub}
            new_ext.discard(w)
            _esu_extend(new_sub, new_ext, root, adj, max_order, out)


def cluster_strength(bath, indices, adjacency=None, system=None):
    """Ranking key for cap filtering.

    Singletons rank by their coupling to the central system (Frobenius
    norm of the hyperfine tensor when an electron is present, otherwise
    the dipolar prefactor over distance cubed to the central nucleus);
    larger clusters by the summed internal pair-coupling magnitudes.
    """
    spins = [bath.spins[i] for i in indices]
    if len(spins) == 1:
        s = spins[0]
        if system is not None and system.electron is not None:
            a = hyperfine_tensor(system, s)
            return float(np.linalg.norm(a))
        if system is not None:
            r = np.linalg.norm(s.position - system.central_nucleus.position)
            if r == 0:
                return np.inf
            pref = dipolar_prefactor_mhz_nm3(system.central_nucleus.gamma,
                                             s.gamma)
            return abs(pref) / r ** 3
        return 0.0
    total = 0.0
    for a, b in itertools.combinations(range(len(spins)), 2):
        sa, sb = spins[a], spins[b]
        if adjacency is not None and indices[b] not in adjacency[indices[a]]:
            continue
        r = np.linalg.norm(sa.position - sb.position)
        total += abs(dipolar_prefactor_mhz_nm3(sa.gamma, sb.gamma)) / r ** 3
    return total


def enumerate_clusters(bath, max_order, connectivity_radius, caps=None,
                       system=None):
    """All connected bath-spin subsets up to ``max_order``.

    Connectivity is distance <= ``connectivity_radius`` (nm); every spin
    is an order-1 cluster.  When per-order ``caps`` are given, clusters
    are ranked by :func:`cluster_strength` (descending, ties broken
    lexicographically) and the closure invariant is preserved by keeping
    a cluster only if all of its connected sub-clusters survived.
    """
    if max_order < 1:
        raise ValidationError("max_order must be >= 1")
    positions = bath.positions
    n = len(positions)
    adj = _adjacency(positions, connectivity_radius)

    raw = defaultdict(list)
    for v in range(n):
        raw[1].append((v,))
        if max_order > 1:
            _esu_extend((v,), {u for u in adj[v] if u > v}, v, adj,
                        max_order, raw)

    by_order = {}
    kept = set()
    for order in sorted(raw):
        cands = sorted(raw[order])
        if order > 1:
            cands = [c for c in cands
                     if all(s in kept
                            for s in _connected_subsets(c, adj))]
        cap = (caps or {}).get(order)
        if cap is not None and len(cands) > cap:
            ranked = sorted(
                cands,
                key=lambda c: (-cluster_strength(bath, c, adj, system), c))
            cands = sorted(ranked[:cap])
        by_order[order] = [Cluster(c) for c in cands]
        kept.update(cands)

    return ClusterSet(by_order, connectivity_radius, caps)


def _connected_subsets(indices, adj):
    """Connected (order-1)-subsets of a connected index tuple."""
    out = []
    for drop in range(len(indices)):
        sub = indices[:drop] + indices[drop + 1:]
        if len(sub) == 1 or _is_connected(sub, adj):
            out.append(sub)
    return out


def _is_connected(indices, adj):
    todo = {indices[0]}
    seen = set()
    members = set(indices)
    while todo:
        x = todo.pop()
        seen.add(x)
        todo |= (adj[x] & members) - seen
    return seen == members


def sample_bath_states(bath, n_samples, seed):
    """Uniform product-state samples (infinite-temperature ensemble).

    Returns an (n_samples, n_spins) array of m projections; deterministic
    for a fixed seed.
    """
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    dims = np.array([s.dim for s in bath.spins])
    spins = np.array([s.spin for s in bath.spins])
    out = np.empty((n_samples, len(dims)))
    for j, (d, s) in enumerate(zip(dims, spins)):
        out[:, j] = s - rng.integers(0, d, size=n_samples)
    return out


def exhaustive_states(bath, limit=4096):
    """All product states when the bath state space fits within ``limit``,
    else None."""
    dims = [s.dim for s in bath.spins]
    space = int(np.prod(dims)) if dims else 1
    if space > limit:
        return None
    axes = [[s.spin - k for k in range(s.dim)] for s in bath.spins]
    if not axes:
        return np.zeros((1, 0))
    return np.array(list(itertools.product(*axes)))


@dataclass
class EngineParams:
    """Convergence and sampling knobs of the expansion engine."""

    method: str = "gcce"
    order: int = 2
    radius: float = 0.8
    caps: dict | None = None
    samples: int = 0
    seed: int | None = None
    pt_order: int = 2
    mean_field: bool = False
    clamp_threshold: float = 1e-5
    degeneracy_threshold_mhz: float = 1e-6
    degeneracy_fallback: str = "gcce"
    exhaustive_limit: int = 4096

    def __post_init__(self):
        if self.method not in ("cce", "gcce"):
            raise ValidationError("method must be 'cce' or 'gcce'")
        if self.degeneracy_fallback not in ("gcce", "error"):
            raise ValidationError("degeneracy_fallback must be 'gcce' or 'error'")


def assemble(cluster_values, cluster_set, clamp_threshold=1e-5):
    """Recursive tilde factors and their product.

    ``cluster_values`` maps index tuples to complex arrays L_C(t).
    Returns ``(values, n_clamped)``; a tilde factor whose magnitude
    falls below the threshold is clamped to 1 from that time onward
    (standard divergence guard) and counted.
    """
    tilde = {}
    n_clamped = 0
    product = None
    for cluster in cluster_set.ordered():
        l_c = cluster_values[cluster.indices]
        denom = np.ones_like(l_c)
        for sub in cluster_set.subclusters(cluster):
            denom = denom * tilde[sub]
        v = l_c / denom
        low = np.nonzero(np.abs(v) < clamp_threshold)[0]
        if low.size:
            v = v.copy()
            v[low[0]:] = 1.0
            n_clamped += 1
        tilde[cluster.indices] = v
        product = v if product is None else product * v
    if product is None:
        product = np.array([], dtype=complex)
    return product, n_clamped


def _state_to_ket_index(m_values, spins):
    idx = 0
    for m, s in zip(m_values, spins):
        idx = idx * s.dim + round(s.spin - m)
    return idx


class _MeanFieldContext:
    """Precomputed Ising fields of frozen outer spins.

    For a sampled product state m, cluster spin i feels
    ``sum_{k not in C} m_k P_ik,zz`` and the central system feels the
    analogous A_k,zz / P_0k,zz shifts.
    """

    def __init__(self, system, bath):
        self.system = system
        spins = bath.spins
        n = len(spins)
        pos = bath.positions
        gam = np.array([s.gamma for s in spins])
        self.azz = np.zeros(n)
        self.p0zz = np.zeros(n)
        nuc = system.central_nucleus
        for k, s in enumerate(spins):
            if system.electron is not None:
                self.azz[k] = hyperfine_tensor(system, s)[2, 2]
            d = s.position - nuc.position
            r2 = d @ d
            self.p0zz[k] = (dipolar_prefactor_mhz_nm3(nuc.gamma, s.gamma)
                            * (r2 - 3 * d[2] ** 2) / r2 ** 2.5)
        self.pzz = np.zeros((n, n))
        chunk = max(1, int(2e7) // max(n, 1))
        pref = dipolar_prefactor_mhz_nm3(1.0, 1.0) * np.outer(gam, gam)
        for start in range(0, n, chunk):
            stop = min(n, start + chunk)
            d = pos[start:stop, None, :] - pos[None, :, :]
            r2 = np.einsum("ijk,ijk->ij", d, d)
            with np.errstate(divide="ignore", invalid="ignore"):
                block = (r2 - 3 * d[..., 2] ** 2) / r2 ** 2.5
            block[~np.isfinite(block)] = 0.0
            self.pzz[start:stop] = pref[start:stop] * block

    def shifts(self, indices, m_values):
        m = np.asarray(m_values, dtype=float)
        inner = list(indices)
        tot_i = self.pzz[inner, :] @ m
        tot_i -= self.pzz[np.ix_(inner, inner)] @ m[inner]
        out = {f"bath{i}": tot_i[k] for k, i in enumerate(inner)}
        out["central"] = float(self.p0zz @ m - self.p0zz[inner] @ m[inner])
        if self.system.electron is not None:
            out["electron"] = float(self.azz @ m - self.azz[inner] @ m[inner])
        return out


def mean_field_correction(system, bath, cluster, m_values):
    """Diagonal z-field shifts (MHz) on cluster sites and the central
    system from the frozen outer spins of a sampled product state."""
    ctx = _MeanFieldContext(system, bath)
    return ctx.shifts(tuple(cluster.indices), m_values)


def _branch_hams(levels_pair, n_pulses):
    seq_a = [0]
    for _ in range(n_pulses):
        seq_a.append(1 - seq_a[-1])
    seq_b = [1 - h for h in seq_a]
    return seq_a, seq_b


def _cce_cluster_values(h_a, h_b, fractions, tgrid, ket_index=None):
    """Conventional-route L_C(t) from the two conditioned Hamiltonians.

    ``ket_index`` selects a product basis state of the cluster; None
    averages over all of them (infinite-temperature cluster state).
    Central pi pulses toggle which Hamiltonian applies; the branch
    overlap <chi_b | chi_a> is evaluated for the whole time grid at once.
    """
    evs = (Evolver(h_a), Evolver(h_b))
    d = h_a.shape[0]
    tgrid = np.asarray(tgrid, dtype=float)
    n_t = len(tgrid)
    labels_a, labels_b = _branch_hams((0, 1), len(fractions))
    bounds = [0.0, *fractions, 1.0]

    def run_branch(labels):
        if ket_index is None:
            state = np.broadcast_to(
                evs[labels[0]].eigvecs.conj().T,
                (n_t, d, d)).copy()
        else:
            ket = np.zeros(d, dtype=complex)
            ket[ket_index] = 1.0
            state = np.broadcast_to(evs[labels[0]].to_eigenbasis(ket),
                                    (n_t, d)).copy()[:, :, None]
        for seg in range(len(bounds) - 1):
            dt = tgrid * (bounds[seg + 1] - bounds[seg])
            ev = evs[labels[seg]]
            phases = np.exp(-1j * _PHASE * dt[:, None] * ev.eigvals[None, :])
            state *= phases[:, :, None]
            if seg + 1 < len(bounds) - 1:
                bridge = evs[labels[seg + 1]].eigvecs.conj().T @ ev.eigvecs
                state = bridge @ state
        return state, evs[labels[-1]].eigvecs

    sa, va = run_branch(labels_a)
    sb, vb = run_branch(labels_b)
    gram = vb.conj().T @ va
    overlap = np.einsum("tia,ij,tja->t", sb.conj(), gram, sa)
    n_kets = d if ket_index is None else 1
    return overlap / n_kets


def simulate(system, bath, seq, tgrid, params):
    """Coherence trace of the central spin in the given bath.

    Orchestrates level identification, cluster enumeration, bath-state
    sampling, per-cluster contributions and the recursive assembly;
    diagnostics (cluster counts, clamp counts, degeneracy fallbacks) are
    reported in the trace metadata.
    """
    tgrid = np.asarray(tgrid, dtype=float)
    central = build_central(system)
    levels = identify_levels(system, central)

    method = params.method
    if method == "cce" and "electron" in seq.targets():
        raise EngineError(
            "electron pulses require the generalized method (gcce); the "
            "conventional route conditions on frozen qubit levels")

    clusters = enumerate_clusters(bath, params.order, params.radius,
                                  params.caps, system)

    states, weights, sampling = _resolve_states(bath, params)
    mf_ctx = None
    if params.mean_field:
        if states is None:
            raise ValidationError(
                "mean-field corrections need sampled or exhaustive bath "
                "states (set samples > 0 or shrink the bath)")
        mf_ctx = _MeanFieldContext(system, bath)

    diagnostics = {
        "method": method,
        "order": params.order,
        "radius_nm": params.radius,
        "cluster_counts": clusters.counts(),
        "sampling": sampling,
        "n_states": 1 if states is None else len(states),
        "clamped": 0,
        "degeneracy_fallback": False,
    }

    try:
        values = _run_expansion(system, bath, seq, tgrid, params, central,
                                levels, clusters, states, weights, mf_ctx,
                                method, diagnostics)
    except DegeneracyError:
        if params.degeneracy_fallback != "gcce" or method == "gcce":
            raise
        diagnostics["degeneracy_fallback"] = True
        diagnostics["method"] = "gcce"
        values = _run_expansion(system, bath, seq, tgrid, params, central,
                                levels, clusters, states, weights, mf_ctx,
                                "gcce", diagnostics)

    meta = {"sequence": seq.name, "seed": params.seed, **diagnostics}
    return CoherenceTrace(tgrid, values, meta)


def _resolve_states(bath, params):
    """Bath states to average over: (states, weights, description)."""
    if params.samples:
        states = exhaustive_states(bath, params.exhaustive_limit)
        if states is not None:
            return states, np.full(len(states), 1 / len(states)), "exhaustive"
        states = sample_bath_states(bath, params.samples, params.seed)
        return states, np.full(len(states), 1 / len(states)), "monte-carlo"
    return None, None, "thermal"


def _cluster_kets(bath, indices, m_state):
    spins = [bath.spins[i] for i in indices]
    d_b = int(np.prod([s.dim for s in spins]))
    ket = np.zeros(d_b, dtype=complex)
    ket[_state_to_ket_index([m_state[i] for i in indices], spins)] = 1.0
    return ket


def _values_for_cluster(system, bath, seq, tgrid, params, central, levels,
                        cluster, state_list, mf_ctx, method, empty_values):
    """L_C(t) rows, one per bath state (a None state means thermal).

    Without mean-field corrections one Hamiltonian (and one
    eigendecomposition) serves every sampled state.
    """
    rows = np.empty((len(state_list), len(tgrid)), dtype=complex)
    shared = mf_ctx is None
    spins = [bath.spins[i] for i in cluster.indices]

    if shared and method == "gcce" and state_list[0] is not None:
        # one eigendecomposition, all sampled states in one vectorized pass
        h_c = build_cluster(system, bath, cluster.indices, central=central)
        runner = SequenceRunner(h_c, levels, seq)
        kets = np.stack([_cluster_kets(bath, cluster.indices, m)
                         for m in state_list], axis=1)
        return runner.coherence_matrix(tgrid, kets) / empty_values[None, :]

    h_c = pair = runner = None
    for s_idx, m_state in enumerate(state_list):
        mean_field = None
        if mf_ctx is not None and m_state is not None:
            mean_field = mf_ctx.shifts(cluster.indices, m_state)
        if h_c is None or not shared:
            h_c = build_cluster(system, bath, cluster.indices, mean_field,
                                central=central)
            pair = runner = None
        if method == "cce":
            if pair is None:
                pair = conditioned_hamiltonian(
                    h_c, levels, params.pt_order,
                    params.degeneracy_threshold_mhz)
            ket_index = None
            if m_state is not None:
                ket_index = _state_to_ket_index(
                    [m_state[i] for i in cluster.indices], spins)
            rows[s_idx] = _cce_cluster_values(pair[0], pair[1],
                                              seq.fractions, tgrid, ket_index)
        else:
            if runner is None:
                runner = SequenceRunner(h_c, levels, seq)
            if m_state is None:
                vals = runner.thermal_coherence(tgrid)
            else:
                vals = runner.coherence(
                    tgrid, _cluster_kets(bath, cluster.indices, m_state))
            rows[s_idx] = vals / empty_values
    return rows


def _run_expansion(system, bath, seq, tgrid, params, central, levels,
                   clusters, states, weights, mf_ctx, method, diagnostics):
    if method == "gcce":
        empty_values = SequenceRunner(central, levels, seq).coherence(tgrid)
    else:
        empty_values = np.ones(len(tgrid), dtype=complex)

    state_list = [None] if states is None else list(states)
    n_states = len(state_list)
    if weights is None:
        weights = np.full(n_states, 1.0 / n_states)

    per_cluster = {}
    for cluster in clusters.ordered():
        per_cluster[cluster.indices] = _values_for_cluster(
            system, bath, seq, tgrid, params, central, levels, cluster,
            state_list, mf_ctx, method, empty_values)

    total = np.zeros(len(tgrid), dtype=complex)
    for s_idx in range(n_states):
        cluster_values = {idx: rows[s_idx]
                          for idx, rows in per_cluster.items()}
        assembled, n_clamped = assemble(cluster_values, clusters,
                                        params.clamp_threshold)
        diagnostics["clamped"] += n_clamped
        if assembled.size == 0:
            assembled = np.ones(len(tgrid), dtype=complex)
        total += weights[s_idx] * assembled

    return empty_values * (total / weights.sum())
