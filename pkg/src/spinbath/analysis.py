"""Post-processing: coherence-time extraction, ensemble statistics,
frozen-core geometry, and concentration-scaling fits."""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import curve_fit

from . import bath as bath_mod
from . import cce
from .constants import (DIAMOND_LATTICE_CONSTANT_NM, GAMMA_13C,
                        GAMMA_ELECTRON, RAD_PER_MS_TO_MHZ,
                        dipolar_prefactor_mhz_nm3)
from .couplings import point_dipole_hyperfine
from .errors import ValidationError
from .hamiltonian import _site_vectors, build_central, identify_levels
from .propagation import CoherenceTrace, hahn_echo

INV_E = 1.0 / math.e


@dataclass
class T2Fit:
    t2_ms: float | None
    exponent: float | None
    residual: float | None
    threshold_t2_ms: float | None
    resolved: bool
    lower_bound_ms: float


def _first_crossing(x, y, level=INV_E):
    """First interpolated crossing of y(x) below ``level``."""
    below = np.nonzero(y <= level)[0]
    if below.size == 0:
        return None
    k = below[0]
    if k == 0:
        return float(x[0])
    x0, x1 = x[k - 1], x[k]
    y0, y1 = y[k - 1], y[k]
    if y1 == y0:
        return float(x1)
    return float(x0 + (y0 - level) * (x1 - x0) / (y0 - y1))


def fit_t2(trace, model="stretched"):
    """Coherence time from |L(t)|.

    The stretched model fits ``exp[-(t/T2)^n]`` with n in [0.5, 4]; the
    1/e threshold crossing is always co-reported.  When |L| never falls
    below 1/e the result is unresolved and carries the grid end as a
    lower bound.
    """
    if model not in ("stretched", "threshold"):
        raise ValidationError("model must be 'stretched' or 'threshold'")
    times = np.asarray(trace.times, dtype=float)
    mag = np.abs(np.asarray(trace.values))
    if len(times) < 3:
        raise ValidationError("need at least 3 points to extract T2")

    threshold_t2 = _first_crossing(times, mag)
    resolved = threshold_t2 is not None
    lower_bound = float(times[-1])

    if not resolved:
        return T2Fit(None, None, None, None, False, lower_bound)
    if model == "threshold":
        return T2Fit(threshold_t2, None, None, threshold_t2, True, lower_bound)

    def stretched(t, t2, n):
        return np.exp(-((t / t2) ** n))

    mask = times > 0
    try:
        popt, _ = curve_fit(
            stretched, times[mask], mag[mask],
            p0=[max(threshold_t2, times[mask][0]), 2.0],
            bounds=([times[mask][0] * 1e-3, 0.5], [times[-1] * 1e3, 4.0]),
            maxfev=20000)
        resid = float(np.sqrt(np.mean(
            (stretched(times[mask], *popt) - mag[mask]) ** 2)))
        return T2Fit(float(popt[0]), float(popt[1]), resid, threshold_t2,
                     True, lower_bound)
    except RuntimeError:
        return T2Fit(threshold_t2, None, None, threshold_t2, True,
                     lower_bound)


def ensemble_average(traces, fit=True):
    """Pointwise mean of complex L across configurations, plus each
    configuration's T2 for distribution plots."""
    if not traces:
        raise ValidationError("no traces to average")
    times = traces[0].times
    for tr in traces[1:]:
        if len(tr.times) != len(times) or np.abs(tr.times - times).max() > 0:
            raise ValidationError("traces live on different time grids")
    mean = np.mean([tr.values for tr in traces], axis=0)
    out = CoherenceTrace(times, mean, {"n_configs": len(traces),
                                       "kind": "ensemble-mean"})
    t2s = [fit_t2(tr) for tr in traces] if fit else []
    return out, t2s


def scaling_fit(concentrations, radii):
    """Log-log least squares of r(c) = A * c^exponent."""
    c = np.asarray(concentrations, dtype=float)
    r = np.asarray(radii, dtype=float)
    if len(c) < 4:
        raise ValidationError("need at least 4 concentration points")
    if np.any(c <= 0) or np.any(r <= 0):
        raise ValidationError("concentrations and radii must be positive")
    slope, intercept = np.polyfit(np.log(c), np.log(r), 1)
    return {"amplitude": float(np.exp(intercept)), "exponent": float(slope)}


# ---------------------------------------------------------------------------
# frozen-core spin-pair model

def generate_lattice_around(extent, center_conventional,
                            lattice_constant=DIAMOND_LATTICE_CONSTANT_NM):
    """Diamond sites in a box centered at an arbitrary point (given in
    conventional axes); output rotated to the [111] frame."""
    extent = np.asarray(extent, dtype=float).reshape(3)
    c = np.asarray(center_conventional, dtype=float).reshape(3)
    if np.any(extent <= 0):
        raise ValidationError("extent must be positive")
    lo = c - extent / 2
    hi = c + extent / 2
    n_lo = np.floor(lo / lattice_constant).astype(int) - 1
    n_hi = np.ceil(hi / lattice_constant).astype(int) + 1
    rng = [np.arange(a, b + 1) for a, b in zip(n_lo, n_hi)]
    cells = np.stack(np.meshgrid(*rng, indexing="ij"), axis=-1).reshape(-1, 3)
    sites = (cells[:, None, :]
             + bath_mod._DIAMOND_BASIS[None, :, :]).reshape(-1, 3)
    sites *= lattice_constant
    inside = np.all((sites >= lo) & (sites < hi), axis=1)
    sites = sites[inside]
    sites = sites[np.lexsort(sites.T)]
    return sites @ bath_mod.R111.T


def probe_bath_config(probe_pos, concentration, seed, bath_radius,
                      lattice_constant=DIAMOND_LATTICE_CONSTANT_NM):
    """Random lattice bath in a box around a probe position.

    Sites closer to the probe than one nearest-neighbor bond are dropped
    (the probe is taken to occupy a lattice site).
    """
    probe_pos = np.asarray(probe_pos, dtype=float)
    extent = np.full(3, 2.0 * bath_radius)
    center_conv = bath_mod.R111.T @ probe_pos
    sites = generate_lattice_around(extent, center_conv, lattice_constant)
    cfg = bath_mod.sample_isotopes(sites, concentration, seed)
    keep = [s for s in cfg.spins
            if np.linalg.norm(s.position - probe_pos)
            > 0.99 * lattice_constant * math.sqrt(3) / 4]
    return bath_mod.BathConfiguration(tuple(keep), seed=seed,
                                      abundance=concentration)


def relative_bath_positions(concentration, seed, bath_radius,
                            lattice_constant=DIAMOND_LATTICE_CONSTANT_NM):
    """Bath positions relative to a probe at the origin of its own box.

    One realization's pair set is reused at every probe position of a
    scan: the frozen-core model holds the pair geometry fixed and varies
    only the hyperfine gradient.
    """
    sites = bath_mod.generate_lattice(np.full(3, 2.0 * bath_radius),
                                      lattice_constant)
    cfg = bath_mod.sample_isotopes(sites, concentration, seed)
    pos = cfg.positions
    if len(pos) == 0:
        return pos
    keep = np.linalg.norm(pos, axis=1) \
        > 0.99 * lattice_constant * math.sqrt(3) / 4
    return pos[keep]


def _probe_system(probe_pos, field_g, with_electron, electron_state):
    nuc = bath_mod.make_spin("13C", probe_pos)
    electron = None
    if with_electron:
        hyperfine = point_dipole_hyperfine(probe_pos, nuc.gamma,
                                           GAMMA_ELECTRON)
        electron = bath_mod.ElectronSpec(hyperfine_to_central=hyperfine)
    else:
        electron_state = "ms0"
    return bath_mod.CentralSystem(nuc, electron,
                                  field=np.array([0.0, 0.0, field_g]),
                                  electron_state=electron_state)


def _level_expectations(system):
    """(<S>_a, <S>_b, <I0>_a, <I0>_b) of the qubit levels."""
    central = build_central(system)
    levels = identify_levels(system, central)
    vecs = _site_vectors(central.dims)
    with_electron = system.electron is not None
    svecs = vecs[0] if with_electron else None
    ivecs = vecs[1] if with_electron else vecs[0]

    def expect(ops, v):
        if ops is None:
            return np.zeros(3)
        return np.array([np.real(v.conj() @ (o @ v)) for o in ops])

    return (expect(svecs, levels.vec_a), expect(svecs, levels.vec_b),
            expect(ivecs, levels.vec_a), expect(ivecs, levels.vec_b))


def _dipolar_batch(rel, prefactor):
    """Batched dipolar tensors for displacement rows ``rel`` (n, 3)."""
    r2 = np.einsum("na,na->n", rel, rel)
    eye = np.eye(3)
    kern = (r2[:, None, None] * eye[None, :, :]
            - 3.0 * np.einsum("na,nb->nab", rel, rel))
    return np.asarray(prefactor) * kern / r2[:, None, None] ** 2.5


def _conditioned_fields(probe_pos, rel_pos, field_g, s_exp, i_exp,
                        with_electron):
    """Qubit-conditioned effective field (MHz) on each bath spin:
    Zeeman + <S>.A_s + <I0>.P_0s, with A_s the point-dipole hyperfine at
    the absolute position and P_0s the probe-bath dipolar tensor."""
    h = np.zeros((len(rel_pos), 3))
    h[:, 2] = -GAMMA_13C * RAD_PER_MS_TO_MHZ * field_g
    if with_electron:
        g_en = dipolar_prefactor_mhz_nm3(GAMMA_ELECTRON, GAMMA_13C)
        a = _dipolar_batch(probe_pos[None, :] + rel_pos, g_en)
        h += np.einsum("a,nab->nb", s_exp, a)
    g_nn = dipolar_prefactor_mhz_nm3(GAMMA_13C, GAMMA_13C)
    p0 = _dipolar_batch(rel_pos, g_nn)
    h += np.einsum("a,nab->nb", i_exp, p0)
    return h


_HALF_OPS = None


def _spin_half_components():
    global _HALF_OPS
    if _HALF_OPS is None:
        from .hamiltonian import spin_operators

        ops = spin_operators(0.5)
        comps = (ops.sx, ops.sy, ops.sz)
        eye = np.eye(2)
        single = np.array(comps)
        first = np.array([np.kron(c, eye) for c in comps])
        second = np.array([np.kron(eye, c) for c in comps])
        pair = np.array([[np.kron(a, b) for b in comps] for a in comps])
        _HALF_OPS = (single, first, second, pair)
    return _HALF_OPS


def _echo_time_average(h_a, h_b):
    """Long-time average of the Hahn-echo factor
    ``(1/d) Tr[Ub+ Ua+ Ub Ua]``: for generic non-degenerate spectra only
    the stationary phase pairs survive, giving ``(1/d) sum_ij |Q_ij|^4``
    with ``Q = Vb+ Va``."""
    _, va = np.linalg.eigh(h_a)
    _, vb = np.linalg.eigh(h_b)
    q = np.einsum("...ji,...jk->...ik", vb.conj(), va)
    w = np.abs(q) ** 2
    return np.einsum("...ik,...ik->...", w, w) / h_a.shape[-1]


def _echo_value_exact(h_a, h_b, t_ms):
    """Exact echo factor by direct propagator products (clarity path)."""
    t_ms = np.atleast_1d(np.asarray(t_ms, dtype=float))
    phase = 2.0 * math.pi * 1.0e3
    ea, va = np.linalg.eigh(h_a)
    eb, vb = np.linalg.eigh(h_b)
    d = h_a.shape[-1]
    out = np.empty((len(t_ms),) + h_a.shape[:-2], dtype=complex)
    for k, t in enumerate(t_ms):
        ua = np.einsum("...ik,...k,...jk->...ij", va,
                       np.exp(-1j * phase * ea * t / 2), va.conj())
        ub = np.einsum("...ik,...k,...jk->...ij", vb,
                       np.exp(-1j * phase * eb * t / 2), vb.conj())
        w_a = np.einsum("...ij,...jk->...ik", ub, ua)   # chi_a branch
        w_b = np.einsum("...ij,...jk->...ik", ua, ub)   # chi_b branch
        out[k] = np.einsum("...ij,...ij->...", w_b.conj(), w_a) / d
    return out


def pair_model_factors(probe_pos, rel_pos, field_g, pair_radius,
                       with_electron=True, electron_state="msM1"):
    """Conditioned 4x4 pair and 2x2 singleton Hamiltonians of the
    spin-pair model; returns (h_a, h_b) dicts keyed 'single'/'pair' plus
    the pair index arrays."""
    probe_pos = np.asarray(probe_pos, dtype=float)
    system = _probe_system(probe_pos, field_g, with_electron, electron_state)
    sa, sb, ia, ib = _level_expectations(system)
    fields_a = _conditioned_fields(probe_pos, rel_pos, field_g, sa, ia,
                                   with_electron)
    fields_b = _conditioned_fields(probe_pos, rel_pos, field_g, sb, ib,
                                   with_electron)

    single, first, second, pair = _spin_half_components()
    h_a = {"single": np.einsum("na,aij->nij", fields_a, single)}
    h_b = {"single": np.einsum("na,aij->nij", fields_b, single)}

    d2 = np.sum((rel_pos[:, None, :] - rel_pos[None, :, :]) ** 2, axis=-1)
    ii, jj = np.nonzero(np.triu(d2 <= pair_radius ** 2, k=1))
    if ii.size:
        g_nn = dipolar_prefactor_mhz_nm3(GAMMA_13C, GAMMA_13C)
        p_ij = _dipolar_batch(rel_pos[jj] - rel_pos[ii], g_nn)
        for h, f in ((h_a, fields_a), (h_b, fields_b)):
            hp = np.einsum("na,aij->nij", f[ii], first)
            hp += np.einsum("na,aij->nij", f[jj], second)
            hp += np.einsum("nab,abij->nij", p_ij, pair)
            h["pair"] = hp
    else:
        h_a["pair"] = h_b["pair"] = np.zeros((0, 4, 4))
    return h_a, h_b, ii, jj


def pair_model_plateau(probe_pos, rel_pos, field_g, pair_radius,
                       with_electron=True, electron_state="msM1",
                       brute_times=None):
    """Long-time Hahn-echo plateau of the spin-pair (CCE2) model.

    Assembles singleton factors and pair tilde corrections from the
    analytic per-cluster time averages; with ``brute_times`` given, the
    exact factors at those total times are multiplied instead (the
    brute-force cross-check path).
    """
    if len(rel_pos) == 0:
        return 1.0
    h_a, h_b, ii, jj = pair_model_factors(probe_pos, rel_pos, field_g,
                                          pair_radius, with_electron,
                                          electron_state)
    if brute_times is not None:
        singles = _echo_value_exact(h_a["single"], h_b["single"], brute_times)
        pairs = _echo_value_exact(h_a["pair"], h_b["pair"], brute_times)
        l_single = np.prod(singles, axis=-1)
        tilde = pairs / (singles[:, ii] * singles[:, jj])
        return np.abs(l_single * np.prod(tilde, axis=-1))

    singles = _echo_time_average(h_a["single"], h_b["single"])
    pairs = _echo_time_average(h_a["pair"], h_b["pair"])
    tilde = pairs / (singles[ii] * singles[jj])
    return float(np.prod(singles) * np.prod(tilde))


@dataclass
class FrozenCoreMap:
    """Limiting pair-model coherence sampled on rays from the defect."""

    samples: list = field(default_factory=list)
    r_fc: dict = field(default_factory=dict)
    warnings: dict = field(default_factory=dict)
    concentration: float = 0.0


def frozen_core_scan(rays, distances, concentration, field_g=500.0,
                     pair_radius=1.1, bath_radius=2.4, n_configs=8,
                     seed=1, with_electron=True, electron_state="msM1"):
    """Map the frozen-core boundary along rays of (theta, azimuth), deg.

    At each sample point a probe spin is placed, the mean long-time
    pair-model plateau over bath realizations is evaluated, and the 1/e
    crossing along each ray (moving outward) is interpolated as r_fc.
    Non-monotone rays are flagged and keep the first crossing.
    """
    result = FrozenCoreMap(concentration=concentration)
    distances = np.asarray(sorted(distances), dtype=float)
    baths = [relative_bath_positions(concentration, seed + 7919 * c,
                                     bath_radius) for c in range(n_configs)]
    for theta_deg, az_deg in rays:
        th = math.radians(theta_deg)
        az = math.radians(az_deg)
        ray = np.array([math.sin(th) * math.cos(az),
                        math.sin(th) * math.sin(az),
                        math.cos(th)])
        plateaus = np.empty(len(distances))
        for k, d in enumerate(distances):
            probe = d * ray
            vals = [pair_model_plateau(probe, rel, field_g, pair_radius,
                                       with_electron, electron_state)
                    for rel in baths]
            plateaus[k] = float(np.mean(vals))
            result.samples.append({
                "theta_deg": theta_deg, "azimuth_deg": az_deg,
                "distance_nm": float(d), "plateau": plateaus[k]})
        key = (theta_deg, az_deg)
        # plateau rises toward the defect; cross moving outward
        result.r_fc[key] = _first_crossing(distances, plateaus)
        diffs = np.diff(plateaus)
        result.warnings[key] = bool((diffs > 1e-3).any()
                                    and (diffs < -1e-3).any())
    return result


def frozen_core_volume(r_fc_by_theta, concentration,
                       lattice_constant=DIAMOND_LATTICE_CONSTANT_NM):
    """Spherical integral of r_fc(theta)^3/3 over the solid angle, and
    the mean enclosed spin count at the given concentration.

    ``r_fc_by_theta`` maps theta (deg) to r_fc (nm); the azimuthal
    dependence, negligible in the scans, is integrated out as constant.
    """
    thetas = np.array(sorted(r_fc_by_theta))
    radii = np.array([r_fc_by_theta[t] for t in thetas], dtype=float)
    if np.any(~np.isfinite(radii)):
        raise ValidationError("r_fc missing on some rays")
    th = np.radians(thetas)
    integrand = radii ** 3 / 3.0 * np.sin(th)
    volume = 2.0 * math.pi * float(np.trapezoid(integrand, th))
    site_density = 8.0 / lattice_constant ** 3
    return volume, volume * site_density * concentration


def t2_map(grid_points, concentration=0.011, n_configs=3, seed=7,
           t_max_ms=400.0, n_times=81, engine=None, field_rule=None,
           bath_radius=2.4, with_electron=True, electron_state="msM1"):
    """Ensemble-averaged T2 over (distance, theta_deg) grid points.

    The field is 1 T within 0.5 nm of the defect and 50 mT beyond
    (overridable via ``field_rule``); runs the conventional expansion at
    pair order with reduced ensembles.  Returns a list of row dicts.
    """
    if engine is None:
        engine = cce.EngineParams(method="cce", order=2, radius=0.85)
    if field_rule is None:
        def field_rule(d):
            return 1.0e4 if d <= 0.5 else 500.0

    rows = []
    for d, theta_deg in grid_points:
        th = math.radians(theta_deg)
        probe = np.array([d * math.sin(th), 0.0, d * math.cos(th)])
        field = np.array([0.0, 0.0, field_rule(d)])
        system = _probe_system(probe, field[2], with_electron,
                               electron_state)
        tgrid = np.linspace(0.0, t_max_ms, n_times)
        traces = []
        for c in range(n_configs):
            cfg = probe_bath_config(probe, concentration, seed + 997 * c,
                                    bath_radius)
            traces.append(cce.simulate(system, cfg, hahn_echo(), tgrid,
                                       engine))
        mean, _ = ensemble_average(traces, fit=False)
        fit = fit_t2(mean)
        rows.append({"distance_nm": float(d), "theta_deg": float(theta_deg),
                     "field_g": float(field[2]), "t2_ms": fit.t2_ms,
                     "exponent": fit.exponent,
                     "threshold_t2_ms": fit.threshold_t2_ms,
                     "resolved": fit.resolved,
                     "lower_bound_ms": fit.lower_bound_ms})
    return rows
