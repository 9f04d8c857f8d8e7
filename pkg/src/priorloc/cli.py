"""Command-line entry point: ``priorloc <subcommand> ...``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 infeasible scenario.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .estimators import (DegenerateDataError, knn_locate, load_noise_model, pme_locate, posterior,
                         save_noise_model, train_gaussian, train_histogram)
from .experiment import (ConfigError, ExperimentConfig, FileSource, SyntheticSource, emit_report,
                         file_pairs, load_config, run_experiment, synthetic_pairs)
from .gridmap import (RadioMapFormatError, import_rasters, load_radio_map_set,
                      save_radio_map_set, window_mask)
from .priors import (PRIOR_KINDS, EmptySupportError, approx_prior_strongest, full_prior,
                     perfect_prior_random, perfect_prior_strongest, uniform_prior)
from .scenario import InfeasibleScenarioError, Measurement
from .synthgen import PlacementInfeasibleError

EXIT_CONFIG, EXIT_DATA, EXIT_INFEASIBLE = 1, 2, 3

log = logging.getLogger("priorloc")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e


def _synthetic_from(d: dict, base: Path) -> SyntheticSource:
    block = d.get("maps", d)
    cfg = ExperimentConfig.from_dict({"maps": {"synthetic": block.get("synthetic", block)}}, base)
    return cfg.maps


def cmd_gen_maps(args) -> int:
    src = _synthetic_from(_read_json(args.config), Path(args.config).parent)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for pair in synthetic_pairs(src):
        stem = pair.label.replace("/", "_")
        est, meas = out / f"{stem}_estimated.rms", out / f"{stem}_measured.rms"
        save_radio_map_set(pair.estimated, est)
        save_radio_map_set(pair.measured, meas)
        files.append({"estimated": est.name, "measured": meas.name})
    (out / "manifest.json").write_text(json.dumps({"maps": {"files": files}}, indent=1))
    print(f"wrote {len(files)} map pairs to {out}")
    return 0


def cmd_train_noise(args) -> int:
    base = Path(args.config).parent
    d = _read_json(args.config)
    kind = d.get("kind", "histogram")
    if kind not in ("gaussian", "histogram"):
        raise ConfigError(f"unknown noise model kind {kind!r}")
    if "pairs" in d:
        pairs = file_pairs([FileSource(str(base / p["estimated"]), str(base / p["measured"]))
                            for p in d["pairs"]])
    else:
        pairs = synthetic_pairs(_synthetic_from(d, base))
    if not pairs:
        raise ConfigError("no training maps")
    region = None
    if "window" in d:
        region = window_mask(pairs[0].estimated.geometry, d["window"]["width"], d["window"]["height"])
    est = [p.estimated for p in pairs]
    meas = [p.measured for p in pairs]
    if any(m is None for m in meas):
        raise ConfigError("every training pair needs measured maps")
    if kind == "gaussian":
        model = train_gaussian(est, meas, region)
    else:
        model = train_histogram(est, meas, region, n_bins=int(d.get("n_bins", 511)),
                                center=bool(d.get("center", False)))
    save_noise_model(model, args.output)
    print(f"wrote {kind} noise model to {args.output}")
    return 0


def cmd_locate(args) -> int:
    maps = load_radio_map_set(args.maps)
    ref = load_radio_map_set(args.ref_maps) if args.ref_maps else maps
    m = Measurement.from_dict(_read_json(args.measurement))
    w, h = args.window if args.window else (maps.geometry.width, maps.geometry.height)
    window = window_mask(maps.geometry, w, h)
    n = len(m.tx_ids)
    prior = {
        "uniform_full": lambda: full_prior(maps.geometry),
        "window": lambda: uniform_prior(window),
        "perfect_random": lambda: perfect_prior_random(ref, window, n),
        "perfect_strongest": lambda: perfect_prior_strongest(ref, window, m.tx_ids),
        "approx_strongest": lambda: approx_prior_strongest(maps, window, m.tx_ids),
    }[args.prior]()
    result = {"prior": args.prior, "support_size": len(prior.support)}
    if args.knn:
        est = knn_locate(m, maps, prior.support, args.knn)
        result.update(estimator="knn", k=args.knn)
    else:
        if not args.noise:
            raise ConfigError("--noise is required unless --knn is given")
        post = posterior(m, maps, prior, load_noise_model(args.noise))
        est = pme_locate(post)
        result["estimator"] = "pme"
        if args.posterior_out:
            xs, ys = post.support.coordinates()
            dump = {"x": xs.tolist(), "y": ys.tolist(), "mass": post.mass.tolist()}
            Path(args.posterior_out).write_text(json.dumps(dump))
    result.update(x=est.x, y=est.y)
    if m.truth is not None:
        result["error"] = float(np.hypot(est.x - m.truth.x, est.y - m.truth.y))
    print(json.dumps(result))
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    report = run_experiment(cfg, workers=args.workers)
    fmt = args.format or ("csv" if str(args.output).endswith(".csv") else "json")
    emit_report(report, fmt, args.output)
    for r in report.rows:
        print(f"{r.estimator:6s} {r.prior:18s} N={r.n_tx}  MAE {r.MAE:8.3f}  RMSE {r.RMSE:8.3f}  ({r.trials} trials)")
    for s in report.skipped:
        print(f"skipped {s}", file=sys.stderr)
    if not report.rows:
        return EXIT_INFEASIBLE
    return 0


def cmd_import_raster(args) -> int:
    maps = import_rasters(args.directory)
    save_radio_map_set(maps, args.output)
    print(f"imported {maps.n_tx} maps of {maps.geometry.width}x{maps.geometry.height} into {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="priorloc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-maps", help="generate synthetic estimated/measured map pairs")
    g.add_argument("config")
    g.add_argument("-o", "--output", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_maps)

    t = sub.add_parser("train-noise", help="fit a mismatch noise model on training map pairs")
    t.add_argument("config")
    t.add_argument("-o", "--output", required=True)
    t.set_defaults(func=cmd_train_noise)

    loc = sub.add_parser("locate", help="locate a single measurement")
    loc.add_argument("--maps", required=True, help="estimated radio map set (.rms)")
    loc.add_argument("--measurement", required=True, help="JSON with tx_ids, rss and optional truth")
    loc.add_argument("--prior", choices=PRIOR_KINDS, default="uniform_full")
    loc.add_argument("--noise", help="noise model JSON")
    loc.add_argument("--ref-maps", help="measurement-side maps for the perfect priors")
    loc.add_argument("--window", type=int, nargs=2, metavar=("W", "H"))
    loc.add_argument("--knn", type=int, metavar="K", help="use kNN with K neighbours instead of the PME")
    loc.add_argument("--posterior-out", help="write the posterior mass per support cell as JSON")
    loc.set_defaults(func=cmd_locate)

    r = sub.add_parser("run", help="run a full experiment")
    r.add_argument("config")
    r.add_argument("-o", "--output", required=True)
    r.add_argument("--format", choices=("csv", "json"))
    r.add_argument("--workers", type=int)
    r.set_defaults(func=cmd_run)

    im = sub.add_parser("import-raster", help="pack per-Tx greyscale images into a map set")
    im.add_argument("directory")
    im.add_argument("-o", "--output", required=True)
    im.set_defaults(func=cmd_import_raster)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (InfeasibleScenarioError, PlacementInfeasibleError, EmptySupportError) as e:
        print(f"infeasible scenario: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (RadioMapFormatError, DegenerateDataError, OSError, IndexError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
