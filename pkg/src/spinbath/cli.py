"""Command-line interface and run orchestration.

Data goes to files (or stdout); progress and diagnostics go to stderr.
Exit codes: 0 ok, 2 validation error, 3 engine error, 4 partial sweep
failure.
"""

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__, analysis, bath as bath_mod, cce, config as cfg
from . import couplings as coup
from . import oracles
from .constants import GAMMA_ELECTRON
from .errors import (EXIT_ENGINE, EXIT_OK, EXIT_PARTIAL, EXIT_VALIDATION,
                     EngineError, SpinBathError, ValidationError)
from .hamiltonian import build_central, identify_levels
from .propagation import hahn_echo, load_trace, save_trace

SWEEP_AXES = ("field", "distance", "concentration", "order")


def _log(msg):
    print(msg, file=sys.stderr)


def _write_manifest(path, config_raw, diagnostics, outputs):
    manifest = {
        "spinbath_version": __version__,
        "config": config_raw,
        "diagnostics": diagnostics,
        "outputs": sorted(outputs),
    }
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(manifest, fh, sort_keys=True,
                       default_flow_style=False)


def _plain(obj):
    """YAML-safe copy: numpy scalars/arrays to python types."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def _write_table(path_or_stdout, rows, columns, gnuplot=False):
    lines = []
    if gnuplot:
        lines.append("# " + " ".join(columns))
        sep = " "
    else:
        lines.append(",".join(columns))
        sep = ","
    for row in rows:
        cells = []
        for c in columns:
            v = row.get(c)
            cells.append("nan" if v is None else f"{v:.10g}"
                         if isinstance(v, float) else str(v))
        lines.append(sep.join(cells))
    text = "\n".join(lines) + "\n"
    if path_or_stdout is None:
        sys.stdout.write(text)
    else:
        Path(path_or_stdout).write_text(text, encoding="utf-8")


def cmd_generate_bath(args):
    extent = np.array([args.extent] * 3 if len(args.extent) == 1
                      else args.extent, dtype=float).reshape(3)
    sites = bath_mod.generate_lattice(extent)
    config = bath_mod.sample_isotopes(sites, args.abundance, args.seed)
    removed = 0
    if args.exclude_file:
        fixed = bath_mod.load_bath(args.exclude_file)
        config = bath_mod.apply_exclusion(config, list(fixed.spins),
                                          args.cutoff)
        removed = config.exclusion.removed
    bath_mod.save_bath(config, args.out)
    _log(f"generated {len(config)} spins from {len(sites)} sites "
         f"(abundance {args.abundance}, seed {args.seed}, "
         f"{removed} removed by exclusion) -> {args.out}")
    return EXIT_OK


def cmd_couplings(args):
    config = bath_mod.load_bath(args.bath)
    gamma_e = args.gamma_e
    density = None
    if args.density:
        density = coup.read_cube(args.density).scaled_per_spin()
    rows = []
    for spin in config.spins:
        if density is not None:
            a = coup.grid_hyperfine(spin.position, density, spin.gamma,
                                    gamma_e)
        else:
            a = coup.point_dipole_hyperfine(spin.position, spin.gamma,
                                            gamma_e)
        row = {"isotope": spin.isotope,
               "x_nm": float(spin.position[0]),
               "y_nm": float(spin.position[1]),
               "z_nm": float(spin.position[2])}
        for i, u in enumerate("xyz"):
            for j, v in enumerate("xyz"):
                row[f"A{u}{v}_mhz"] = float(a[i, j])
        rows.append(row)
    columns = ["isotope", "x_nm", "y_nm", "z_nm"] + \
        [f"A{u}{v}_mhz" for u in "xyz" for v in "xyz"]
    _write_table(args.out, rows, columns, args.gnuplot_compatible)
    _log(f"wrote hyperfine tensors for {len(rows)} spins")
    return EXIT_OK


def _run_pipeline(run, out_dir, prefix, overrides=None):
    engine = run.engine if not overrides else replace(run.engine, **overrides)
    bath = run.bath()
    trace = cce.simulate(run.system, bath, run.sequence, run.tgrid, engine)
    fit = analysis.fit_t2(trace)
    out_dir.mkdir(parents=True, exist_ok=True)
    trace_path = out_dir / f"{prefix}_trace.csv"
    trace.meta["n_bath_spins"] = len(bath)
    save_trace(trace, trace_path)
    diag = _plain(dict(trace.meta))
    diag["t2_ms"] = fit.t2_ms
    diag["t2_exponent"] = fit.exponent
    diag["t2_threshold_ms"] = fit.threshold_t2_ms
    return trace, diag, [str(trace_path)]


def cmd_simulate(args):
    run = cfg.RunConfig.from_file(args.config)
    overrides = {}
    for name, key in (("method", "method"), ("order", "order"),
                      ("samples", "samples"), ("seed", "seed")):
        val = getattr(args, name)
        if val is not None:
            overrides[key] = val
    out_dir = Path(args.out_dir or run.output["directory"])
    prefix = run.output["prefix"]
    trace, diag, outputs = _run_pipeline(run, out_dir, prefix, overrides)
    if args.out:
        save_trace(trace, args.out)
        outputs.append(args.out)
    _write_manifest(out_dir / f"{prefix}_manifest.yaml", _plain(run.raw),
                    diag, outputs)
    _log(f"simulate: {diag.get('method')} order {diag.get('order')}, "
         f"{diag.get('n_bath_spins')} spins, T2 = {diag.get('t2_ms')}")
    return EXIT_OK


def cmd_sweep_field(args):
    run = cfg.RunConfig.from_file(args.config)
    values = [float(v) for v in args.values]
    return _sweep(run, "field", values, args)


def _sweep(run, axis, values, args):
    if axis not in SWEEP_AXES:
        raise ValidationError(f"sweep axis must be one of {SWEEP_AXES}")
    if not values:
        raise ValidationError("empty sweep values")
    out_dir = Path(args.out_dir or run.output["directory"])
    out_dir.mkdir(parents=True, exist_ok=True)
    prefix = run.output["prefix"]
    rows = []
    outputs = []
    failures = 0
    for k, value in enumerate(values):
        label = f"{prefix}_{axis}{k:03d}"
        try:
            point = _sweep_point(run, axis, value)
            trace, diag, outs = _run_pipeline(point, out_dir, label)
            outputs.extend(outs)
            rows.append({axis: float(value), "t2_ms": diag["t2_ms"],
                         "t2_exponent": diag["t2_exponent"],
                         "t2_threshold_ms": diag["t2_threshold_ms"],
                         "error": ""})
            _log(f"{axis} = {value:g}: T2 = {diag['t2_ms']}")
        except SpinBathError as exc:
            failures += 1
            rows.append({axis: float(value), "t2_ms": None,
                         "t2_exponent": None, "t2_threshold_ms": None,
                         "error": str(exc).splitlines()[0]})
            _log(f"{axis} = {value:g}: FAILED ({exc})")
    table = out_dir / f"{prefix}_sweep_{axis}.csv"
    _write_table(table, rows,
                 [axis, "t2_ms", "t2_exponent", "t2_threshold_ms", "error"],
                 args.gnuplot_compatible)
    outputs.append(str(table))
    _write_manifest(out_dir / f"{prefix}_sweep_{axis}_manifest.yaml",
                    _plain(run.raw),
                    {"axis": axis, "values": values, "failures": failures},
                    outputs)
    return EXIT_PARTIAL if failures else EXIT_OK


def _sweep_point(run, axis, value):
    import copy

    point = copy.deepcopy(run)
    if axis == "field":
        point.system = replace(run.system,
                               field=np.array([0.0, 0.0, float(value)]))
    elif axis == "order":
        point.engine = replace(run.engine, order=int(value))
    elif axis == "concentration":
        point.bath_spec = dict(run.bath_spec, abundance=float(value))
    elif axis == "distance":
        nuc = run.system.central_nucleus
        direction = nuc.position
        norm = np.linalg.norm(direction)
        if norm == 0:
            raise ValidationError(
                "distance sweep needs a central spin away from the origin")
        newpos = direction / norm * float(value)
        hyper = None
        electron = run.system.electron
        if electron is not None:
            from .couplings import point_dipole_hyperfine

            hyper = point_dipole_hyperfine(newpos, nuc.gamma, electron.gamma)
            electron = replace(electron, hyperfine_to_central=hyper)
        point.system = replace(
            run.system, electron=electron,
            central_nucleus=bath_mod.BathSpin(nuc.isotope, newpos, nuc.gamma,
                                              nuc.spin))
    return point


def cmd_sweep(args):
    run = cfg.RunConfig.from_file(args.config)
    values = [float(v) for v in args.values]
    return _sweep(run, args.axis, values, args)


def cmd_t2_map(args):
    grid = []
    for d in args.distances:
        for th in args.thetas:
            grid.append((float(d), float(th)))
    rows = analysis.t2_map(grid, concentration=args.abundance,
                           n_configs=args.configs, seed=args.seed,
                           t_max_ms=args.t_max, n_times=args.points,
                           with_electron=not args.no_electron)
    _write_table(args.out, rows,
                 ["distance_nm", "theta_deg", "field_g", "t2_ms", "exponent",
                  "threshold_t2_ms", "resolved", "lower_bound_ms"],
                 args.gnuplot_compatible)
    _log(f"t2-map: {len(rows)} grid points")
    return EXIT_OK


def cmd_frozen_core(args):
    rays = [(float(t), float(args.azimuth)) for t in args.thetas]
    distances = np.arange(args.d_min, args.d_max + 1e-9, args.d_step)
    fc = analysis.frozen_core_scan(
        rays, distances, args.abundance, field_g=args.field_g,
        pair_radius=args.pair_radius, bath_radius=args.bath_radius,
        n_configs=args.configs, seed=args.seed,
        with_electron=not args.no_electron)
    rows = []
    for (theta, az), r in sorted(fc.r_fc.items()):
        rows.append({"theta_deg": theta, "azimuth_deg": az,
                     "r_fc_nm": r if r is not None else None,
                     "monotonicity_warning": fc.warnings[(theta, az)]})
    _write_table(args.out, rows,
                 ["theta_deg", "azimuth_deg", "r_fc_nm",
                  "monotonicity_warning"], args.gnuplot_compatible)
    if args.samples_out:
        _write_table(args.samples_out, fc.samples,
                     ["theta_deg", "azimuth_deg", "distance_nm", "plateau"],
                     args.gnuplot_compatible)
    _log(f"frozen-core: {len(rows)} rays at c = {args.abundance}")
    return EXIT_OK


def cmd_oracle(args):
    if args.kind == "two-spin":
        model = oracles.TwoSpinModel(args.w0, args.w1, args.sigma)
        t = np.linspace(0.0, args.t_max, args.points)
        values = oracles.two_spin_coherence(model, t)
        from .propagation import CoherenceTrace

        trace = CoherenceTrace(t, values,
                               {"method": "oracle-two-spin",
                                "w0_khz": args.w0, "w1_khz": args.w1,
                                "sigma_khz": args.sigma})
        save_trace(trace, args.out) if args.out else _dump_trace(trace)
    elif args.kind == "exact":
        run = cfg.RunConfig.from_file(args.config)
        trace = oracles.exact_l(run.system, run.bath(), run.sequence,
                                run.tgrid)
        save_trace(trace, args.out) if args.out else _dump_trace(trace)
    elif args.kind == "hybridization":
        run = cfg.RunConfig.from_file(args.config)
        fields = np.array([float(v) for v in args.fields_g])
        table = oracles.hybridization_t2(run.system, fields, args.c_ms)
        rows = [{"field_g": float(b), "t2_model_ms": float(m),
                 "t2_approx_ms": float(a), "capped": bool(c),
                 "gap": bool(g)}
                for b, m, a, c, g in zip(table["field_g"],
                                         table["t2_model_ms"],
                                         table["t2_approx_ms"],
                                         table["capped"], table["gap"])]
        _write_table(args.out, rows,
                     ["field_g", "t2_model_ms", "t2_approx_ms", "capped",
                      "gap"], args.gnuplot_compatible)
    return EXIT_OK


def _dump_trace(trace):
    sys.stdout.write("t_ms,re_L,im_L,abs_L\n")
    for t, v in zip(trace.times, trace.values):
        sys.stdout.write(f"{t:.17g},{v.real:.17g},{v.imag:.17g},"
                         f"{abs(v):.17g}\n")


def cmd_fit(args):
    trace = load_trace(args.trace)
    fit = analysis.fit_t2(trace, model=args.model)
    out = {"t2_ms": fit.t2_ms, "exponent": fit.exponent,
           "residual": fit.residual, "threshold_t2_ms": fit.threshold_t2_ms,
           "resolved": fit.resolved, "lower_bound_ms": fit.lower_bound_ms}
    yaml.safe_dump(_plain(out), sys.stdout, sort_keys=True)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="spinbath",
        description="Central nuclear spin coherence in dipolar spin baths "
                    "via cluster-correlation expansions")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-bath", help="random isotopic bath on the "
                                             "diamond lattice")
    p.add_argument("--extent", type=float, nargs="+", required=True,
                   metavar="NM", help="box side(s), nm (1 or 3 values)")
    p.add_argument("--abundance", type=float, default=0.011)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--exclude-file", default=None,
                   help="bath file with fixed spins to carve around")
    p.add_argument("--cutoff", type=float, default=0.56,
                   help="exclusion radius, nm")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_bath)

    p = sub.add_parser("couplings", help="per-spin hyperfine tensors")
    p.add_argument("--bath", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--density", default=None, help="spin-density cube file")
    g.add_argument("--point-dipole", action="store_true")
    p.add_argument("--gamma-e", type=float, default=GAMMA_ELECTRON,
                   help="electron gyromagnetic ratio, rad/ms/G")
    p.add_argument("--out", default=None)
    p.add_argument("--gnuplot-compatible", action="store_true")
    p.set_defaults(func=cmd_couplings)

    p = sub.add_parser("simulate", help="run the full pipeline from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--method", choices=["cce", "gcce"], default=None)
    p.add_argument("--order", type=int, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="extra copy of the trace CSV")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep-field", help="T2 versus magnetic field")
    p.add_argument("--config", required=True)
    p.add_argument("--values", nargs="+", required=True, metavar="G")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--gnuplot-compatible", action="store_true")
    p.set_defaults(func=cmd_sweep_field)

    p = sub.add_parser("sweep", help="sweep along a named axis")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", choices=SWEEP_AXES, required=True)
    p.add_argument("--values", nargs="+", required=True)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--gnuplot-compatible", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("t2-map", help="T2 over (distance, angle) grid")
    p.add_argument("--distances", type=float, nargs="+", required=True)
    p.add_argument("--thetas", type=float, nargs="+", required=True)
    p.add_argument("--abundance", type=float, default=0.011)
    p.add_argument("--configs", type=int, default=3)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--t-max", type=float, default=400.0)
    p.add_argument("--points", type=int, default=81)
    p.add_argument("--no-electron", action="store_true")
    p.add_argument("--out", default=None)
    p.add_argument("--gnuplot-compatible", action="store_true")
    p.set_defaults(func=cmd_t2_map)

    p = sub.add_parser("frozen-core", help="pair-model frozen-core radius")
    p.add_argument("--thetas", type=float, nargs="+", required=True)
    p.add_argument("--azimuth", type=float, default=0.0)
    p.add_argument("--d-min", type=float, default=1.0)
    p.add_argument("--d-max", type=float, default=6.0)
    p.add_argument("--d-step", type=float, default=0.25)
    p.add_argument("--abundance", type=float, default=0.011)
    p.add_argument("--field-g", type=float, default=500.0)
    p.add_argument("--pair-radius", type=float, default=1.1)
    p.add_argument("--bath-radius", type=float, default=2.4)
    p.add_argument("--configs", type=int, default=8)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--no-electron", action="store_true")
    p.add_argument("--out", default=None)
    p.add_argument("--samples-out", default=None)
    p.add_argument("--gnuplot-compatible", action="store_true")
    p.set_defaults(func=cmd_frozen_core)

    p = sub.add_parser("oracle", help="independent reference computations")
    osub = p.add_subparsers(dest="kind", required=True)
    o = osub.add_parser("two-spin")
    o.add_argument("--w0", type=float, required=True, help="kHz")
    o.add_argument("--w1", type=float, required=True, help="kHz")
    o.add_argument("--sigma", type=float, required=True, help="kHz")
    o.add_argument("--t-max", type=float, default=40.0)
    o.add_argument("--points", type=int, default=201)
    o.add_argument("--out", default=None)
    o.set_defaults(func=cmd_oracle)
    o = osub.add_parser("exact")
    o.add_argument("--config", required=True)
    o.add_argument("--out", default=None)
    o.set_defaults(func=cmd_oracle)
    o = osub.add_parser("hybridization")
    o.add_argument("--config", required=True)
    o.add_argument("--fields-g", nargs="+", required=True)
    o.add_argument("--c-ms", type=float, default=0.31)
    o.add_argument("--out", default=None)
    o.add_argument("--gnuplot-compatible", action="store_true")
    o.set_defaults(func=cmd_oracle)

    p = sub.add_parser("fit", help="extract T2 from a trace CSV")
    p.add_argument("--trace", required=True)
    p.add_argument("--model", choices=["stretched", "threshold"],
                   default="stretched")
    p.set_defaults(func=cmd_fit)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        _log(f"validation error: {exc}")
        return EXIT_VALIDATION
    except EngineError as exc:
        _log(f"engine error: {exc}")
        return EXIT_ENGINE
    except SpinBathError as exc:
        _log(f"error: {exc}")
        return EXIT_ENGINE


if __name__ == "__main__":
    sys.exit(main())
