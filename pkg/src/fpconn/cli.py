"""Command line driver.

Every verb reads an optional JSON config, applies flag overrides, writes its
outputs plus ``manifest.json`` (resolved config, hashes of inputs and
outputs, seeds) to ``--out`` and returns an exit code:

    0 ok, 2 configuration error, 3 solver non-convergence, 4 I/O error.
"""

import argparse
import copy
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .connectivity import connectivity_matrix, log_display, trail_image, trail_integral, linear_reweighted
from .domain import build_steered_grids, speed_from_peaks
from .errors import (AssemblyError, CalibrationError, ConfigError, DegenerateRegionError, DomainError,
                     FPConnError, NonConvergenceError, ParameterError, SpecError, VolumeFormatError)
from .io import read_mask, read_peaks, read_volume, sha256_file, write_mask, write_peaks, write_volume
from .metrics import PairedMeasurements, agreement_curve, pair_iccs, write_agreement_csv, write_icc_csv
from .operator import assemble_H, calibrate_A, continuum_rms_angle
from .phantom import PhantomSpec, build_phantom
from .solver import solve_steady
from .sphere import generate_directions
from .walkers import (DirectionLattice, GridSpeed, WalkerConfig, behrens_walk, langevin_paths,
                      normalize_matrix, random_unit_vectors, sample_region)

log = logging.getLogger("fpconn")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4

DEFAULTS = {
    "phantom": None,
    "mask": None,
    "peaks": None,
    "regions": None,
    "labels": None,
    "N": 128,
    "sphere_seed": None,
    "h": 1.0,
    "oversample": 1,
    "sigma_n": float(np.pi / 12),
    "sigma_r": 0.0,
    "kappa": 0.0,
    "A": "calibrate",
    "exponent": 25,
    "epsilon": 0.02,
    "rule": "symmetric",
    "tol": 1e-6,
    "restart": 30,
    "maxiter": 5,
    "jacobi": False,
    "variant": "plain",
    "log_display": False,
    "pair": [1, 2],
    "seed": 0,
    "walker": {"step": 1.0, "sigma": 0.2, "n_walkers": 5000, "max_angle": 80.0,
               "allow_revisits": True, "length_bias_correction": True, "max_steps": 1000},
    "langevin": {"region": 1, "n_paths": 100000, "dt": 0.05, "t_max": 60.0, "lattice": False, "weighted": True},
    "c1": None,
    "c2": None,
}


# --------------------------------------------------------------------------
# configuration


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set(cfg, dotted, value):
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config section {k!r}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[keys[-1]] = value


def _merge(base, update, prefix=""):
    for k, v in update.items():
        if k not in base:
            raise ConfigError(f"unknown config key {prefix + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, prefix + k + ".")
        else:
            base[k] = v


FLAG_KEYS = ("N", "oversample", "sigma_n", "sigma_r", "kappa", "A", "tol", "restart", "maxiter", "variant", "seed")


def load_config(args):
    """Defaults, then the JSON file, then ``--set`` pairs, then explicit flags."""
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        try:
            data = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        _merge(cfg, data)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        _set(cfg, k.strip(), _parse_value(v))
    for k in FLAG_KEYS:
        v = getattr(args, k.lower(), None)
        if v is not None:
            cfg[k] = v
    if cfg["variant"] not in ("plain", "kappa", "linear"):
        raise ConfigError(f"unknown variant {cfg['variant']!r}")
    if cfg["variant"] == "kappa" and not cfg["kappa"] > 0:
        raise ConfigError("variant 'kappa' needs kappa > 0")
    if cfg["A"] != "calibrate" and not isinstance(cfg["A"], (int, float)):
        raise ConfigError("A must be a number or 'calibrate'")
    return cfg


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------------
# inputs


def _phantom_spec(value):
    if value is None or value is True:
        return PhantomSpec()
    if isinstance(value, dict):
        return PhantomSpec.from_dict(value)
    if isinstance(value, str):
        try:
            return PhantomSpec.from_dict(json.loads(Path(value).read_text()))
        except FileNotFoundError as exc:
            raise ConfigError(f"phantom spec not found: {value}") from exc
    raise ConfigError("phantom must be a spec object, a path or true")


def load_inputs(cfg):
    """Return ``(mask, peaks, regions, labels, input_paths)``."""
    paths = []
    if cfg["mask"] or cfg["peaks"]:
        if not (cfg["mask"] and cfg["peaks"]):
            raise ConfigError("mask and peaks must be given together")
        mask, peaks = read_mask(cfg["mask"]), read_peaks(cfg["peaks"])
        paths += [Path(cfg["mask"]).with_suffix(".raw"), Path(cfg["peaks"]).with_suffix(".raw")]
        if tuple(mask.dims) != tuple(peaks.dims):
            raise ConfigError("mask and peak dimensions differ")
        regions = None
    else:
        mask, peaks, regions = build_phantom(_phantom_spec(cfg["phantom"]))
    if cfg["regions"]:
        regions = []
        for p in cfg["regions"]:
            v, _ = read_volume(p)
            if v.shape != tuple(mask.dims):
                raise ConfigError(f"region {p} does not match the mask dimensions")
            regions.append(v.astype(bool))
            paths.append(Path(p).with_suffix(".raw"))
    if regions is None:
        raise ConfigError("no seed regions: give 'regions' or use the phantom")
    labels = cfg["labels"] or [str(i + 1) for i in range(len(regions))]
    if len(labels) != len(regions):
        raise ConfigError("one label per region required")
    return mask, peaks, regions, [str(x) for x in labels], paths


def build_operator(cfg, mask, peaks):
    dirs = generate_directions(cfg["N"], seed=cfg["sphere_seed"])
    t0 = time.perf_counter()
    A = calibrate_A(dirs, cfg["sigma_n"]) if cfg["A"] == "calibrate" else float(cfg["A"])
    grids = build_steered_grids(mask, dirs, cfg["h"], cfg["oversample"])
    speed = speed_from_peaks(peaks, grids, cfg["exponent"], cfg["epsilon"])
    op = assemble_H(speed, cfg["sigma_n"], cfg["sigma_r"], cfg["kappa"], A, cfg["rule"])
    op.metadata["assembly_seconds"] = time.perf_counter() - t0
    return op


def solver_kw(cfg):
    return {"tol": cfg["tol"], "restart": cfg["restart"], "maxiter": cfg["maxiter"], "jacobi": cfg["jacobi"]}


# --------------------------------------------------------------------------
# outputs


class Run:
    """Collects outputs of one command and writes the manifest."""

    def __init__(self, command, out, cfg, inputs=()):
        self.command = command
        self.out = Path(out)
        self.cfg = cfg
        self.inputs = [Path(p) for p in inputs]
        self.outputs = []
        self.seeds = {}
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise VolumeFormatError(f"cannot create output directory {out}: {exc}") from exc

    def volume(self, name, values, spacing=1.0, dtype="<f4"):
        raw = write_volume(self.out / name, values, spacing, dtype=dtype)
        self.outputs += [raw, raw.with_suffix(".json")]

    def file(self, name):
        p = self.out / name
        self.outputs.append(p)
        return p

    def json(self, name, data, hashed=True):
        p = self.out / name
        p.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
        if hashed:
            self.outputs.append(p)

    def finish(self):
        manifest = {
            "command": self.command,
            "version": __version__,
            "config": self.cfg,
            "config_sha256": config_hash(self.cfg),
            "inputs": {str(p): sha256_file(p) for p in self.inputs},
            "outputs": {p.name: sha256_file(p) for p in self.outputs},
            "seeds": self.seeds,
        }
        self.json("manifest.json", manifest, hashed=False)


def _report(op, reports, extra=None):
    out = {
        "U": int(op.U),
        "N": int(op.metadata["N"]),
        "A": op.metadata["A"],
        "assembly_seconds": op.metadata["assembly_seconds"],
        "solve_seconds": float(sum(r.wall_time for r in reports.values())),
        "solves": {k: r.to_dict() for k, r in reports.items()},
    }
    out.update(extra or {})
    return out


# --------------------------------------------------------------------------
# commands


def cmd_phantom(args):
    spec = _phantom_spec(args.spec) if args.spec else PhantomSpec()
    over = {}
    if args.sigma_nz is not None:
        over["sigma_nz"] = args.sigma_nz
    if args.noise_seed is not None:
        over["noise_seed"] = args.noise_seed
    if over:
        spec = PhantomSpec.from_dict({**json.loads(spec.to_json()), **over})
    mask, peaks, regions = build_phantom(spec)
    cfg = json.loads(spec.to_json())
    run = Run("phantom", args.out, cfg, [args.spec] if args.spec else [])
    run.seeds["noise_seed"] = spec.noise_seed
    raw = write_mask(run.out / "mask", mask)
    run.outputs += [raw, raw.with_suffix(".json")]
    raw = write_peaks(run.out / "peaks", peaks)
    run.outputs += [raw, raw.with_suffix(".json")]
    for i, reg in enumerate(regions):
        run.volume(f"seed_{i + 1}", reg, mask.voxel_size, dtype="|u1")
    run.file("spec.json").write_text(spec.to_json() + "\n")
    run.finish()
    print(f"phantom {mask.dims} with {int(mask.values.sum())} voxels -> {run.out}")
    return EXIT_OK


def _solve_all(op, regions, labels, cfg, run):
    reports, maps = {}, {}
    for lab, reg in zip(labels, regions):
        try:
            p, rep = solve_steady(op, op.domain.region_seed(reg), **solver_kw(cfg))
        except NonConvergenceError as exc:
            reports[lab] = exc.report
            run.json("report.json", _report(op, reports, {"failed_region": lab}))
            run.finish()
            raise
        reports[lab] = rep
        maps[lab] = p
    return maps, reports


def cmd_solve(args):
    cfg = load_config(args)
    mask, peaks, regions, labels, inputs = load_inputs(cfg)
    run = Run("solve", args.out, cfg, inputs)
    op = build_operator(cfg, mask, peaks)
    maps, reports = _solve_all(op, regions, labels, cfg, run)
    for lab, p in maps.items():
        run.volume(f"amplitude_{lab}", op.domain.to_native(p.values), mask.voxel_size)
    run.json("report.json", _report(op, reports))
    run.finish()
    print(f"U={op.U} assembled in {op.metadata['assembly_seconds']:.2f}s; {len(maps)} solves")
    return EXIT_OK


def cmd_connmat(args):
    cfg = load_config(args)
    mask, peaks, regions, labels, inputs = load_inputs(cfg)
    run = Run("connmat", args.out, cfg, inputs)
    op = build_operator(cfg, mask, peaks)
    t0 = time.perf_counter()
    try:
        cm = connectivity_matrix(op, regions, labels, variant=cfg["variant"], **solver_kw(cfg))
    except NonConvergenceError as exc:
        run.json("report.json", _report(op, {"failed": exc.report}))
        run.finish()
        raise
    cm.to_csv(run.file("c.csv"), "c")
    sym = cm.symmetrized()
    sym.to_csv(run.file("cn.csv"), "cn")
    if cfg["log_display"]:
        with open(run.file("cn_log.csv"), "w") as fh:
            np.savetxt(fh, log_display(sym.cn), delimiter=",")
    run.json("report.json", {"U": int(op.U), "assembly_seconds": op.metadata["assembly_seconds"],
                             "solve_seconds": time.perf_counter() - t0, "asymmetry": cm.asymmetry(),
                             "variant": cfg["variant"]})
    run.finish()
    print(f"{len(labels)}x{len(labels)} {cfg['variant']} matrix, asymmetry {cm.asymmetry():.2e}")
    return EXIT_OK


def _pair_index(labels, item):
    s = str(item)
    if s in labels:
        return labels.index(s)
    try:
        k = int(item) - 1
    except ValueError as exc:
        raise ConfigError(f"unknown region {item!r}") from exc
    if not 0 <= k < len(labels):
        raise ConfigError(f"region index {item!r} out of range")
    return k


def cmd_trail(args):
    cfg = load_config(args)
    if args.pair:
        cfg["pair"] = list(args.pair)
    mask, peaks, regions, labels, inputs = load_inputs(cfg)
    i, j = (_pair_index(labels, x) for x in cfg["pair"])
    run = Run("trail", args.out, cfg, inputs)
    op = build_operator(cfg, mask, peaks)
    a, b = op.domain.region_seed(regions[i]), op.domain.region_seed(regions[j])
    tau = trail_image(op, a, b, **solver_kw(cfg))
    total = trail_integral(tau)
    clin = linear_reweighted(op, a, b, **solver_kw(cfg))
    run.volume(f"trail_{labels[i]}_{labels[j]}", op.domain.to_native(tau.values), mask.voxel_size)
    run.json("report.json", {"U": int(op.U), "pair": [labels[i], labels[j]], "trail_integral": total,
                             "c_linear": clin, "assembly_seconds": op.metadata["assembly_seconds"]})
    run.finish()
    print(f"trail {labels[i]}-{labels[j]}: sum {total:.6e}, c_lin {clin:.6e}")
    return EXIT_OK


def _walker_cfg(cfg):
    w = dict(cfg["walker"])
    return WalkerConfig(seed=int(cfg["seed"]), **w)


def cmd_walker(args):
    cfg = load_config(args)
    mask, peaks, regions, labels, inputs = load_inputs(cfg)
    run = Run("walker", args.out, cfg, inputs)
    wc = _walker_cfg(cfg)
    run.seeds["walker"] = {lab: wc.seed * 1000 + k for k, lab in enumerate(labels)}
    pms = []
    for k, lab in enumerate(labels):
        sub = WalkerConfig(**{**wc.__dict__, "seed": wc.seed * 1000 + k})
        pms.append(behrens_walk(peaks, mask, sub, regions[k]).pm)
        run.volume(f"pm_{lab}", pms[-1], mask.voxel_size)
    R = len(regions)
    directed = np.array([[pms[i][regions[j]].sum() for j in range(R)] for i in range(R)])
    c = 0.5 * (directed + directed.T)
    for name, values in (("walker_c.csv", c), ("walker_cn.csv", normalize_matrix(c)), ("walker_directed.csv", directed)):
        with open(run.file(name), "w") as fh:
            fh.write("," + ",".join(labels) + "\n")
            for lab, row in zip(labels, values):
                fh.write(lab + "," + ",".join(repr(float(v)) for v in row) + "\n")
    run.finish()
    print(f"walker matrix over {len(labels)} regions written to {run.out}")
    return EXIT_OK


def cmd_langevin(args):
    cfg = load_config(args)
    mask, peaks, regions, labels, inputs = load_inputs(cfg)
    lc = cfg["langevin"]
    k = _pair_index(labels, lc["region"])
    run = Run("langevin", args.out, cfg, inputs)
    speed = GridSpeed(peaks, mask, cfg["exponent"], cfg["epsilon"])
    lattice = None
    if lc["lattice"]:
        dirs = generate_directions(cfg["N"], seed=cfg["sphere_seed"])
        A = calibrate_A(dirs, cfg["sigma_n"]) if cfg["A"] == "calibrate" else float(cfg["A"])
        lattice = DirectionLattice.calibrated(dirs, cfg["sigma_n"], A)
    region = regions[k]
    vs = mask.voxel_size

    def start(rng, n):
        return sample_region(rng, region, n, vs), random_unit_vectors(rng, n)

    run.seeds["langevin"] = int(cfg["seed"])
    t0 = time.perf_counter()
    res = langevin_paths(speed, cfg["sigma_n"], lc["dt"], lc["t_max"], int(lc["n_paths"]), seed=int(cfg["seed"]),
                         start=start, dims=mask.dims, voxel_size=vs, sigma_r=cfg["sigma_r"],
                         weighted=lc["weighted"], lattice=lattice)
    run.volume(f"occupation_{labels[k]}", res.occupation, vs)
    run.json("report.json", {"n_paths": res.n_paths, "alive_at_end": int(res.alive.sum()),
                             "mean_lifetime": float(np.mean(np.minimum(res.lifetimes, lc["t_max"]))),
                             "seconds": time.perf_counter() - t0}, hashed=False)
    run.finish()
    print(f"{res.n_paths} paths from region {labels[k]} -> {run.out}")
    return EXIT_OK


def _read_table(path):
    try:
        lines = Path(path).read_text().strip().splitlines()
    except FileNotFoundError as exc:
        raise VolumeFormatError(f"missing table {path}") from exc
    header = lines[0].split(",")
    try:
        rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    except ValueError as exc:
        raise ConfigError(f"non-numeric entry in {path}") from exc
    if rows.ndim != 2 or rows.shape[1] != len(header):
        raise ConfigError(f"{path} must be a (subjects x pairs) table with a header row")
    return header, rows


def cmd_metrics(args):
    cfg = load_config(args)
    cfg["c1"] = args.c1 or cfg["c1"]
    cfg["c2"] = args.c2 or cfg["c2"]
    if not (cfg["c1"] and cfg["c2"]):
        raise ConfigError("metrics needs two measurement tables c1 and c2")
    h1, t1 = _read_table(cfg["c1"])
    h2, t2 = _read_table(cfg["c2"])
    if h1 != h2 or t1.shape != t2.shape:
        raise ConfigError("c1 and c2 tables differ in shape or pair labels")
    run = Run("metrics", args.out, cfg, [cfg["c1"], cfg["c2"]])
    write_icc_csv(run.file("icc.csv"), h1, pair_iccs(t1, t2))
    write_agreement_csv(run.file("agreement.csv"), agreement_curve(PairedMeasurements(t1.ravel(), t2.ravel())))
    run.finish()
    print(f"ICC for {len(h1)} pairs and agreement curve -> {run.out}")
    return EXIT_OK


def cmd_calibrate(args):
    cfg = load_config(args)
    dirs = generate_directions(cfg["N"], seed=cfg["sphere_seed"])
    A = calibrate_A(dirs, cfg["sigma_n"])
    result = {"N": dirs.N, "sigma_n": cfg["sigma_n"], "A": A, "target_rms": continuum_rms_angle(cfg["sigma_n"])}
    if args.out:
        run = Run("calibrate", args.out, cfg)
        run.json("calibration.json", result)
        run.finish()
    print(json.dumps(result))
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def _common(p, out_default="fpconn_out"):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dotted for sections)")
    p.add_argument("--N", dest="n", type=int)
    p.add_argument("--oversample", type=int)
    p.add_argument("--sigma-n", type=float)
    p.add_argument("--sigma-r", type=float)
    p.add_argument("--kappa", type=float)
    p.add_argument("--A", dest="a", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--restart", type=int)
    p.add_argument("--maxiter", type=int)
    p.add_argument("--variant", choices=("plain", "kappa", "linear"))
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="worker cap (the engines are single-threaded)")
    p.add_argument("--deterministic", action="store_true", help="order-stable reductions (always on)")


def build_parser():
    ap = argparse.ArgumentParser(prog="fpconn", description="Symmetric structural connectivity from steady-state "
                                 "Fokker-Planck solves.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write the numerical phantom")
    p.add_argument("--spec", help="phantom spec JSON")
    p.add_argument("--out", default="phantom")
    p.add_argument("--sigma-nz", type=float)
    p.add_argument("--noise-seed", type=int)
    p.set_defaults(func=cmd_phantom)

    for name, func, hlp in (("solve", cmd_solve, "steady-state amplitude maps per region"),
                            ("connmat", cmd_connmat, "region connectivity matrices"),
                            ("trail", cmd_trail, "trail image of one region pair"),
                            ("walker", cmd_walker, "reference random-walk baseline"),
                            ("langevin", cmd_langevin, "Langevin path occupation"),
                            ("metrics", cmd_metrics, "ICC and agreement of two measurement tables"),
                            ("calibrate", cmd_calibrate, "angular calibration factor A")):
        p = sub.add_parser(name, help=hlp)
        _common(p, out_default=None if name == "calibrate" else "fpconn_out")
        if name == "trail":
            p.add_argument("--pair", nargs=2)
        if name == "metrics":
            p.add_argument("--c1")
            p.add_argument("--c2")
        p.set_defaults(func=func)
    return ap


CONFIG_ERRORS = (ConfigError, ParameterError, SpecError, DomainError, DegenerateRegionError, CalibrationError,
                 AssemblyError)


def main(argv=None):
    args = build_parser().parse_args(argv)
    for k in FLAG_KEYS:
        # argparse stores --N and --A under lower-case names
        if not hasattr(args, k.lower()):
            setattr(args, k.lower(), None)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NonConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (VolumeFormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FPConnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
