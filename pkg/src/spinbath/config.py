"""Run configuration: a strict, versioned YAML schema.

Every physical quantity carries its unit in the key name; unknown keys
are rejected (no silent typo absorption).  A full config describes one
pipeline run: central system, bath source, pulse protocol, engine
parameters, and output destination.
"""

import numpy as np
import yaml

from . import bath as bath_mod
from . import constants
from .cce import EngineParams
from .errors import ValidationError
from .propagation import Pulse, PulseSequence, electron_pulse_train, \
    hahn_echo, ramsey

SCHEMA_VERSION = 1


def _require_mapping(node, where):
    if not isinstance(node, dict):
        raise ValidationError(f"{where}: expected a mapping")
    return node


def _check_keys(node, allowed, where):
    unknown = set(node) - set(allowed)
    if unknown:
        raise ValidationError(
            f"{where}: unknown key(s) {sorted(unknown)}; allowed: "
            f"{sorted(allowed)}")


def _get(node, key, where, kind=None, default=None, required=False):
    if key not in node:
        if required:
            raise ValidationError(f"{where}: missing required key '{key}'")
        return default
    val = node[key]
    if kind is not None:
        try:
            if kind is float:
                val = float(val)
            elif kind is int:
                ival = int(val)
                if ival != val:
                    raise ValueError
                val = ival
            elif kind is bool:
                if not isinstance(val, bool):
                    raise ValueError
            elif kind is str:
                if not isinstance(val, str):
                    raise ValueError
            elif kind == "vec3":
                val = np.asarray(val, dtype=float).reshape(3)
            elif kind == "mat3":
                val = np.asarray(val, dtype=float).reshape(3, 3)
        except (TypeError, ValueError):
            raise ValidationError(
                f"{where}.{key}: cannot interpret {val!r} as {kind}") from None
    return val


def _build_field(node, where):
    has_g = "field_g" in node
    has_mt = "field_mt" in node
    if has_g and has_mt:
        raise ValidationError(f"{where}: give field_g or field_mt, not both")
    if has_mt:
        val = node["field_mt"]
        vec = np.asarray(val, dtype=float)
        if vec.size == 1:
            vec = np.array([0.0, 0.0, float(vec)])
        return vec.reshape(3) * 10.0   # mT -> G
    val = node.get("field_g", [0.0, 0.0, 0.0])
    vec = np.asarray(val, dtype=float)
    if vec.size == 1:
        vec = np.array([0.0, 0.0, float(vec)])
    return vec.reshape(3)


def parse_system(node):
    where = "system"
    node = _require_mapping(node, where)
    _check_keys(node, {"central_isotope", "central_position_nm",
                       "central_hyperfine_mhz", "electron", "field_g",
                       "field_mt", "electron_state"}, where)
    isotope = _get(node, "central_isotope", where, str, "13C")
    pos = _get(node, "central_position_nm", where, "vec3",
               np.zeros(3))
    field = _build_field(node, where)
    state = _get(node, "electron_state", where, str, None)

    electron = None
    if node.get("electron") is not None:
        enode = _require_mapping(node["electron"], f"{where}.electron")
        _check_keys(enode, {"spin", "d_mhz", "gamma_rad_per_ms_g",
                            "hyperfine_mhz"}, f"{where}.electron")
        hyper = _get(enode, "hyperfine_mhz", f"{where}.electron", "mat3",
                     None)
        gamma = _get(enode, "gamma_rad_per_ms_g", f"{where}.electron",
                     float, constants.GAMMA_ELECTRON)
        spin = _get(enode, "spin", f"{where}.electron", float, 1.0)
        d_mhz = _get(enode, "d_mhz", f"{where}.electron", float,
                     constants.NV_ZERO_FIELD_SPLITTING_MHZ)
        if hyper is None:
            from .couplings import point_dipole_hyperfine

            g_n = bath_mod.ISOTOPES[isotope][0]
            if not np.any(pos):
                raise ValidationError(
                    f"{where}: central at the defect origin needs an "
                    "explicit electron.hyperfine_mhz tensor")
            hyper = point_dipole_hyperfine(pos, g_n, gamma)
        electron = bath_mod.ElectronSpec(spin=spin, gamma=gamma,
                                         d_mhz=d_mhz,
                                         hyperfine_to_central=hyper)
        if state is None:
            state = "msM1"
    elif state is None:
        state = "ms0"

    central_hyper = _get(node, "central_hyperfine_mhz", where, "mat3", None)
    nuc = bath_mod.make_spin(isotope, pos, hyperfine=central_hyper)
    return bath_mod.CentralSystem(nuc, electron, field=field,
                                  electron_state=state)


def parse_bath(node):
    where = "bath"
    node = _require_mapping(node, where)
    _check_keys(node, {"source", "file", "extent_nm", "abundance", "seed",
                       "exclude_file", "cutoff_nm", "r_bath_nm",
                       "center_nm"}, where)
    source = _get(node, "source", where, str, required=True)
    if source not in ("generate", "file"):
        raise ValidationError(f"{where}.source must be 'generate' or 'file'")
    return dict(
        source=source,
        file=_get(node, "file", where, str, None),
        extent_nm=_get(node, "extent_nm", where, "vec3", None),
        abundance=_get(node, "abundance", where, float,
                       constants.NATURAL_13C_ABUNDANCE),
        seed=_get(node, "seed", where, int, 0),
        exclude_file=_get(node, "exclude_file", where, str, None),
        cutoff_nm=_get(node, "cutoff_nm", where, float, 0.56),
        r_bath_nm=_get(node, "r_bath_nm", where, float, None),
        center_nm=_get(node, "center_nm", where, "vec3", np.zeros(3)),
    )


def realize_bath(spec, central_position=None):
    """Materialize a BathConfiguration from a parsed bath spec."""
    if spec["source"] == "file":
        if not spec["file"]:
            raise ValidationError("bath.file required when source is 'file'")
        config = bath_mod.load_bath(spec["file"])
    else:
        if spec["extent_nm"] is None:
            raise ValidationError(
                "bath.extent_nm required when source is 'generate'")
        sites = bath_mod.generate_lattice(spec["extent_nm"])
        config = bath_mod.sample_isotopes(sites, spec["abundance"],
                                          spec["seed"])
    if spec["exclude_file"]:
        fixed = bath_mod.load_bath(spec["exclude_file"])
        config = bath_mod.apply_exclusion(config, list(fixed.spins),
                                          spec["cutoff_nm"])
    if spec["r_bath_nm"] is not None:
        center = spec["center_nm"]
        if central_position is not None:
            center = central_position
        keep = [i for i, s in enumerate(config.spins)
                if np.linalg.norm(s.position - center) <= spec["r_bath_nm"]]
        config = config.subset(keep)
    if central_position is not None:
        # the qubit site cannot also host a bath spin
        keep = [i for i, s in enumerate(config.spins)
                if np.linalg.norm(s.position - central_position) > 1e-9]
        config = config.subset(keep)
    return config


def parse_sequence(node):
    where = "sequence"
    node = _require_mapping(node, where)
    _check_keys(node, {"protocol", "delta", "n_pulses", "spacing", "seed",
                       "t_max_ms", "n_points"}, where)
    protocol = _get(node, "protocol", where, str, required=True)
    t_max = _get(node, "t_max_ms", where, float, required=True)
    n_points = _get(node, "n_points", where, int, 201)
    if t_max <= 0 or n_points < 2:
        raise ValidationError(f"{where}: t_max_ms must be > 0 and "
                              "n_points >= 2")
    if protocol == "ramsey":
        seq = ramsey()
    elif protocol == "hahn":
        seq = hahn_echo()
    elif protocol == "electron-pulsed":
        n_pulses = _get(node, "n_pulses", where, int, None)
        delta = _get(node, "delta", where, float, None)
        spacing = _get(node, "spacing", where, str, "constant")
        seed = _get(node, "seed", where, int, None)
        if (n_pulses is None) == (delta is None):
            raise ValidationError(
                f"{where}: electron-pulsed needs exactly one of "
                "'delta' (single pulse) or 'n_pulses' (train)")
        if delta is not None:
            seq = PulseSequence((Pulse("central", 0.5, "x"),
                                 Pulse("electron", delta)),
                                name=f"hahn+pi_e@{delta:g}")
        else:
            seq = electron_pulse_train(n_pulses, spacing, seed)
    else:
        raise ValidationError(
            f"{where}.protocol must be ramsey, hahn or electron-pulsed")
    tgrid = np.linspace(0.0, t_max, n_points)
    return seq, tgrid


def parse_engine(node):
    where = "engine"
    node = _require_mapping(node, where)
    _check_keys(node, {"method", "order", "radius_nm", "caps", "samples",
                       "seed", "pt_order", "mean_field", "clamp_threshold",
                       "degeneracy_threshold_mhz", "degeneracy_fallback",
                       "exhaustive_limit"}, where)
    caps = node.get("caps")
    if caps is not None:
        caps = {int(k): int(v) for k, v in
                _require_mapping(caps, f"{where}.caps").items()}
    return EngineParams(
        method=_get(node, "method", where, str, "gcce"),
        order=_get(node, "order", where, int, 2),
        radius=_get(node, "radius_nm", where, float, 0.8),
        caps=caps,
        samples=_get(node, "samples", where, int, 0),
        seed=_get(node, "seed", where, int, None),
        pt_order=_get(node, "pt_order", where, int, 2),
        mean_field=_get(node, "mean_field", where, bool, False),
        clamp_threshold=_get(node, "clamp_threshold", where, float, 1e-5),
        degeneracy_threshold_mhz=_get(node, "degeneracy_threshold_mhz",
                                      where, float, 1e-6),
        degeneracy_fallback=_get(node, "degeneracy_fallback", where, str,
                                 "gcce"),
        exhaustive_limit=_get(node, "exhaustive_limit", where, int, 4096),
    )


def parse_output(node):
    where = "output"
    node = _require_mapping(node, where) if node else {}
    _check_keys(node, {"directory", "prefix"}, where)
    return dict(directory=_get(node, "directory", where, str, "out"),
                prefix=_get(node, "prefix", where, str, "run"))


class RunConfig:
    """Validated view of one run configuration."""

    def __init__(self, raw):
        raw = _require_mapping(raw, "config")
        _check_keys(raw, {"schema_version", "system", "bath", "sequence",
                          "engine", "output"}, "config")
        version = raw.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValidationError(
                f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
        self.raw = raw
        self.system = parse_system(raw.get("system", {}))
        self.bath_spec = parse_bath(raw.get("bath", {}))
        self.sequence, self.tgrid = parse_sequence(raw.get("sequence", {}))
        self.engine = parse_engine(raw.get("engine", {}))
        self.output = parse_output(raw.get("output"))

    @classmethod
    def from_file(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
        if isinstance(raw, dict) and "config" in raw and \
                "schema_version" not in raw:
            raw = raw["config"]   # manifests embed the config verbatim
        return cls(raw)

    def bath(self):
        return realize_bath(self.bath_spec,
                            self.system.central_nucleus.position)
