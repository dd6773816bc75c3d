"""Command-line front end: ``stpsm synth | optimize | lds-fit | eval | modes``.

Configuration comes from one YAML file whose top-level sections mirror the
commands. Command-line flags override the file, which overrides the
built-in defaults. Only the standard library is imported at module level so
that ``--threads`` can cap the numerical libraries before they load.
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

from .errors import ConfigError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_OPTIMIZE = 3
EXIT_LDS = 4
EXIT_EVAL = 5

DEFAULTS = {
    "seed": 0,
    "threads": None,
    "input": None,
    "inputs": None,
    "synth": {
        "n_subjects": 8,
        "n_timepoints": 10,
        "radii_mean": [1.0, 0.75, 0.5],
        "radii_std": [0.08, 0.06, 0.04],
        "amplitude": [0.2, 0.0, 0.0],
        "phase": [0.0, 0.0, 0.0],
        "noise_stdev": 0.0,
        "n_points": 256,
        "seed": None,
    },
    "optimize": {
        "alpha_start": 100.0,
        "alpha_end": 0.1,
        "alpha_schedule": "geometric",
        "iterations_per_split": 100,
        "target_particles": 256,
        "step_size": 0.5,
        "step_decay": 1.0,
        "max_halvings": 5,
        "sampling_kernel": {"neighbors": 8, "sigma_min": 1e-3, "sigma_max": 0.25},
        "procrustes_cadence": 32,
        "split_offset": 0.01,
        "mode": "spatiotemporal",
        "rng_seed": None,
        "checkpoint_every": 50,
    },
    "lds": {"L": 64, "iters": 50, "scale": True},
    "eval": {
        "folds": 5,
        "L": 64,
        "iters": 50,
        "mask_fractions": [0.25],
        "trials": 1,
        "n_samples": 100,
        "masked_only": True,
        "scale": True,
    },
    "modes": {"k": 2, "align": True},
}

# Sections whose keys are free-form labels rather than settings.
_FREE_FORM = {"inputs"}


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{where}.{key}" if where else str(key)
        if key not in base:
            raise ConfigError(f"unknown config key: {path}")
        if isinstance(base[key], dict) and key not in _FREE_FORM:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path} must be a mapping")
            out[key] = _merge(base[key], value, path)
        else:
            out[key] = value
    return out


def load_config(path: str | None) -> dict:
    """Defaults merged with the YAML file at ``path`` (unknown keys rejected)."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    import yaml

    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config file must contain a mapping")
    return _merge(DEFAULTS, doc)


def _apply_flags(cfg: dict, args) -> dict:
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        cfg["threads"] = args.threads
    if getattr(args, "input", None):
        cfg["input"] = args.input
    return cfg


def _cap_threads(n) -> None:
    if not n:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(int(n))


def _stage_seed(cfg: dict, explicit, *labels) -> int:
    from .seeds import derive_seed

    return int(explicit) if explicit is not None else derive_seed(int(cfg["seed"]), *labels)


# ---------------------------------------------------------------------------
# Validation (no output is touched before these pass)

def _synth_spec(cfg: dict):
    from .errors import InvalidSpec
    from .surfaces import SynthSpec

    s = dict(cfg["synth"])
    s["seed"] = _stage_seed(cfg, s["seed"], "synth")
    for key in ("radii_mean", "radii_std", "amplitude", "phase"):
        s[key] = tuple(float(v) for v in s[key])
    try:
        spec = SynthSpec(**s)
        spec.validate()
    except (InvalidSpec, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid synth section: {exc}") from None
    return spec


def _optimizer_config(cfg: dict):
    from .errors import InvalidSpec
    from .psm_opt import OptimizerConfig

    o = dict(cfg["optimize"])
    o.pop("checkpoint_every")
    o["rng_seed"] = _stage_seed(cfg, o["rng_seed"], "optimize")
    try:
        return OptimizerConfig(**o)
    except (InvalidSpec, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid optimize section: {exc}") from None


def _require_manifest(path, what="input") -> Path:
    if not path:
        raise ConfigError(f"missing '{what}': path to a cohort manifest")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} manifest not found: {p}")
    return p


def _positive(section: dict, *keys, where: str) -> None:
    for key in keys:
        value = section[key]
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            raise ConfigError(f"{where}.{key} must be a positive integer, got {value!r}")


# ---------------------------------------------------------------------------
# Commands

def cmd_synth(cfg: dict, out: Path) -> int:
    spec = _synth_spec(cfg)
    from .core import particle_filename, write_manifest, write_particles
    from .surfaces import generate_synthetic_cohort, save_domain

    cohort = generate_synthetic_cohort(spec)
    (out / "domains").mkdir(parents=True, exist_ok=True)
    (out / "truth").mkdir(parents=True, exist_ok=True)
    dom_files, part_files = [], []
    for n, row in enumerate(cohort.domains):
        drow, prow = [], []
        for t, dom in enumerate(row):
            dpath = out / "domains" / particle_filename(n + 1, t + 1).replace(".particles", ".json")
            ppath = out / "truth" / particle_filename(n + 1, t + 1)
            save_domain(dpath, dom)
            write_particles(ppath, cohort.truth[n, t])
            drow.append(dpath)
            prow.append(ppath)
        dom_files.append(drow)
        part_files.append(prow)
    write_manifest(out / "manifest.json", part_files, dom_files)
    (out / "synth.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    print(f"wrote {len(part_files) * len(part_files[0])} shapes to {out}")
    return EXIT_OK


def cmd_optimize(cfg: dict, out: Path, resume: bool = False) -> int:
    config = _optimizer_config(cfg)
    manifest = _require_manifest(cfg["input"])
    every = cfg["optimize"]["checkpoint_every"]
    if not isinstance(every, int) or every < 0:
        raise ConfigError("optimize.checkpoint_every must be a non-negative integer")
    from .core import particle_filename, read_manifest, write_manifest, write_particles
    from .errors import StpsmError
    from .psm_opt import Mode, optimize, write_trace_csv
    from .surfaces import load_domain

    doc = read_manifest(manifest)
    if not doc.get("domains"):
        raise ConfigError(f"manifest {manifest} lists no domain files")
    try:
        domains = [[load_domain(p) for p in row] for row in doc["domains"]]
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load domains: {exc}") from None
    out.mkdir(parents=True, exist_ok=True)
    try:
        res = optimize(domains, config, checkpoint_path=out / "checkpoint.npz",
                       checkpoint_every=every, resume=resume, dump_dir=out,
                       subject_ids=doc.get("subjects") or (), time_labels=doc.get("times") or ())
    except StpsmError as exc:
        dump = getattr(exc, "dump_path", None)
        print(f"optimization failed: {exc}" + (f" (state dumped to {dump})" if dump else ""),
              file=sys.stderr)
        return EXIT_OPTIMIZE
    (out / "particles").mkdir(exist_ok=True)
    pts = res.pdm.points
    files = []
    for n in range(pts.shape[0]):
        row = []
        for t in range(pts.shape[1]):
            path = out / "particles" / particle_filename(n + 1, t + 1)
            write_particles(path, pts[n, t])
            row.append(path)
        files.append(row)
    doms = doc["domains"]
    if config.mode is Mode.CROSS_SECTIONAL:
        doms = [row[:1] for row in doms]
    write_manifest(out / "manifest.json", files, doms, subject_ids=res.pdm.subject_ids or None,
                   time_labels=res.pdm.time_labels or None)
    write_trace_csv(out / "trace.csv", res.trace)
    last = res.trace[-1]
    summary = {"mode": config.mode.value, "n_subjects": int(pts.shape[0]), "n_times": int(pts.shape[1]),
               "n_particles": int(pts.shape[2]), "config": config.to_dict(),
               "final": {"total": last.total, "inter_entropy": last.inter_subject_entropy_sum,
                         "intra_entropy": last.intra_subject_entropy_sum,
                         "sampling_entropy": last.sampling_entropy_sum, "alpha": last.alpha,
                         "iteration": last.iteration}}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"optimized {pts.shape[0]}x{pts.shape[1]} shapes with {pts.shape[2]} particles ({config.mode.value})")
    return EXIT_OK


def cmd_lds(cfg: dict, out: Path) -> int:
    sec = cfg["lds"]
    _positive(sec, "L", "iters", where="lds")
    manifest = _require_manifest(cfg["input"])
    from .core import load_cohort
    from .errors import StpsmError
    from .lds import UniformScaler, em_fit, save_params, write_loglik_csv

    try:
        cohort = load_cohort(manifest)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load cohort: {exc}") from None
    x = cohort.observations()
    scaler = UniformScaler.fit(x) if sec["scale"] else None
    data = scaler.transform(x) if scaler else x
    out.mkdir(parents=True, exist_ok=True)
    try:
        params, trace = em_fit(data, sec["L"], sec["iters"], init_seed=_stage_seed(cfg, None, "lds"))
    except (StpsmError, ValueError, ArithmeticError) as exc:
        print(f"EM failed: {exc}", file=sys.stderr)
        return EXIT_LDS
    save_params(out / "lds_params.npz", params, scaler)
    write_loglik_csv(out / "loglik.csv", trace)
    print(f"fitted L={sec['L']} over {sec['iters']} iterations; final loglik {trace[-1]:.6f}")
    return EXIT_OK


def cmd_eval(cfg: dict, out: Path) -> int:
    sec = cfg["eval"]
    _positive(sec, "folds", "L", "iters", "trials", where="eval")
    if not isinstance(sec["n_samples"], int) or sec["n_samples"] < 0:
        raise ConfigError("eval.n_samples must be a non-negative integer")
    fractions = [float(f) for f in sec["mask_fractions"]]
    if any(not 0.0 < f < 1.0 for f in fractions):
        raise ConfigError("eval.mask_fractions must lie in (0, 1)")
    inputs = cfg["inputs"] or ({"pdm": cfg["input"]} if cfg["input"] else None)
    if not inputs:
        raise ConfigError("missing 'input' or 'inputs': cohort manifest(s) to evaluate")
    manifests = {str(label): _require_manifest(path, f"inputs.{label}") for label, path in inputs.items()}
    from .core import load_cohort
    from .errors import StpsmError
    from .evaluation import evaluate_cohort, summary_row, write_long_csv, write_summary_json

    cohorts = {}
    for label, path in manifests.items():
        try:
            cohorts[label] = load_cohort(path)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load cohort {label}: {exc}") from None
        if sec["folds"] > cohorts[label].n_subjects:
            raise ConfigError(f"eval.folds={sec['folds']} exceeds the {cohorts[label].n_subjects} subjects of {label}")
    seed = _stage_seed(cfg, None, "eval")
    out.mkdir(parents=True, exist_ok=True)
    rows, long = [], {}
    try:
        for label, cohort in cohorts.items():
            res = evaluate_cohort(cohort, folds=sec["folds"], L=sec["L"], iters=sec["iters"], seed=seed,
                                  scale=sec["scale"], mask_fractions=fractions, trials=sec["trials"],
                                  n_samples=sec["n_samples"], masked_only=sec["masked_only"])
            rows.append(summary_row(label, res))
            reports = list(res["full"]) + list(res["specificity"])
            for f in fractions:
                reports += res["partial"][f]
            long[label] = reports
    except (StpsmError, ValueError, ArithmeticError) as exc:
        print(f"evaluation failed: {exc}", file=sys.stderr)
        return EXIT_EVAL
    write_long_csv(out / "metrics_long.csv", long)
    write_summary_json(out / "summary.json", rows)
    for row in rows:
        print(json.dumps(row))
    return EXIT_OK


def cmd_modes(cfg: dict, out: Path) -> int:
    sec = cfg["modes"]
    _positive(sec, "k", where="modes")
    manifest = _require_manifest(cfg["input"])
    from .core import load_cohort, unflatten_points, write_particles
    from .errors import StpsmError
    from .evaluation import modes_of_variation

    try:
        cohort = load_cohort(manifest)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load cohort: {exc}") from None
    try:
        modes = modes_of_variation(cohort, sec["k"], align=bool(sec["align"]))
    except StpsmError as exc:
        print(f"mode computation failed: {exc}", file=sys.stderr)
        return EXIT_EVAL
    out.mkdir(parents=True, exist_ok=True)
    d = cohort.dim
    write_particles(out / "mean.particles", unflatten_points(modes.mean_shape, d))
    for i in range(modes.modes.shape[0]):
        for j, k in enumerate(range(-2, 3)):
            write_particles(out / f"mode{i + 1}_{k:+d}sd.particles", unflatten_points(modes.sweep[i, j], d))
    doc = {"eigenvalues": modes.eigenvalues.tolist(), "total_variance": modes.total_variance,
           "explained_ratio": modes.explained_ratio.tolist()}
    (out / "modes.json").write_text(json.dumps(doc, indent=2) + "\n")
    print(f"wrote {modes.modes.shape[0]} modes to {out}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "optimize": cmd_optimize,
    "lds-fit": cmd_lds,
    "eval": cmd_eval,
    "modes": cmd_modes,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stpsm", description="Spatiotemporal shape modeling pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML configuration file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--threads", type=int, help="cap on numerical worker threads")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--dry-run", action="store_true", help="print the resolved configuration and exit")
        if name != "synth":
            p.add_argument("--input", help="cohort manifest (overrides the config)")
        if name == "optimize":
            p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    return parser


def resolved_config(cfg: dict) -> dict:
    """Configuration as it will be used, with derived stage seeds filled in."""
    from .seeds import derive_seed

    view = copy.deepcopy(cfg)
    if view["synth"]["seed"] is None:
        view["synth"]["seed"] = derive_seed(int(cfg["seed"]), "synth")
    if view["optimize"]["rng_seed"] is None:
        view["optimize"]["rng_seed"] = derive_seed(int(cfg["seed"]), "optimize")
    return view


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _apply_flags(load_config(args.config), args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _cap_threads(cfg["threads"])
    if args.dry_run:
        import yaml

        print(yaml.safe_dump(resolved_config(cfg), sort_keys=False), end="")
        return EXIT_OK
    out = Path(args.out or cfg.get("out") or f"stpsm_{args.command.replace('-', '_')}")
    try:
        if args.command == "optimize":
            return cmd_optimize(cfg, out, resume=args.resume)
        return COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
