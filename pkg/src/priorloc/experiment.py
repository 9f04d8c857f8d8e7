"""Monte Carlo experiment runner producing MAE/RMSE tables."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from ._rng import stream
from .estimators import (GaussianNoiseModel, HistogramNoiseModel, knn_locate, pme,
                         train_gaussian, train_histogram)
from .gridmap import CellSet, RadioMapFormatError, RadioMapSet, load_radio_map_set, window_mask
from .priors import (PRIOR_KINDS, EmptySupportError, Prior, approx_prior_strongest, full_prior,
                     perfect_prior_random, perfect_prior_strongest, uniform_prior)
from .scenario import AssignmentStrategy, InfeasibleScenarioError, NoiseScenario, draw_trial
from .synthgen import CityGenParams, PropagationParams, generate_scenario_maps

log = logging.getLogger(__name__)

ESTIMATOR_KINDS = ("pme_gaussian", "pme_histogram", "knn")
LABELS = {"pme_gaussian": "PME_G", "pme_histogram": "PME_H", "knn": "kNN"}
REPORT_COLUMNS = ("estimator", "prior", "n_tx", "MAE", "RMSE", "trials", "seed")


class ConfigError(ValueError):
    pass


# -- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSource:
    city: CityGenParams = field(default_factory=CityGenParams)
    estimated: PropagationParams = field(default_factory=PropagationParams)
    measured: PropagationParams | None = None  # None: estimated.mismatched()
    car_density: float = 0.05
    n_maps: int = 6
    deployments: int = 5

    def measured_params(self) -> PropagationParams:
        return self.measured if self.measured is not None else self.estimated.mismatched()


@dataclass(frozen=True)
class FileSource:
    estimated: str
    measured: str | None = None


@dataclass(frozen=True)
class EstimatorSpec:
    kind: str
    k: int | None = None              # kNN; None picks 200 for the full grid, 300 otherwise
    train_samples: int = 100_000      # PME_H in the Gaussian scenario
    n_bins: int = 511
    center: bool = False

    def __post_init__(self):
        if self.kind not in ESTIMATOR_KINDS:
            raise ConfigError(f"unknown estimator {self.kind!r}; choose from {ESTIMATOR_KINDS}")

    @property
    def label(self) -> str:
        return LABELS[self.kind]

    def k_for(self, prior_kind: str) -> int:
        if self.k is not None:
            return self.k
        return 200 if prior_kind == "uniform_full" else 300


@dataclass(frozen=True)
class ExperimentConfig:
    maps: SyntheticSource | tuple[FileSource, ...] = field(default_factory=SyntheticSource)
    assignment: AssignmentStrategy = AssignmentStrategy("random_positive", 1)
    noise_kind: str = "gaussian"
    sigma2: float | None = 5.0
    window: tuple[int, int] = (41, 41)
    strongest_on: str = "true"
    priors: tuple[str, ...] = ("uniform_full", "window", "perfect_random")
    estimators: tuple[EstimatorSpec, ...] = (EstimatorSpec("pme_gaussian"),)
    trials: int = 200
    train_ratio: float = 84 / 99
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        if not self.estimators:
            raise ConfigError("at least one estimator is required")
        for p in self.priors:
            if p not in PRIOR_KINDS:
                raise ConfigError(f"unknown prior kind {p!r}; choose from {PRIOR_KINDS}")
        if not self.priors:
            raise ConfigError("at least one prior is required")
        if self.noise_kind not in ("gaussian", "map_mismatch"):
            raise ConfigError(f"unknown noise kind {self.noise_kind!r}")
        if self.noise_kind == "gaussian" and not (self.sigma2 and self.sigma2 > 0):
            raise ConfigError("gaussian noise needs sigma2 > 0")
        if self.strongest_on not in ("true", "noisy"):
            raise ConfigError("strongest_on must be 'true' or 'noisy'")
        if not 0 <= self.train_ratio < 1:
            raise ConfigError("train_ratio must lie in [0, 1)")

    def to_dict(self) -> dict:
        if isinstance(self.maps, SyntheticSource):
            maps = {"synthetic": asdict(self.maps)}
        else:
            maps = {"files": [asdict(f) for f in self.maps]}
        noise: dict[str, Any] = {"kind": self.noise_kind}
        if self.noise_kind == "gaussian":
            noise["sigma2"] = self.sigma2
        return {
            "maps": maps,
            "scenario": {
                "assignment": {"kind": self.assignment.kind, "n_tx": self.assignment.n_tx},
                "noise": noise,
                "window": {"width": self.window[0], "height": self.window[1]},
                "strongest_on": self.strongest_on,
            },
            "priors": list(self.priors),
            "estimators": [asdict(e) for e in self.estimators],
            "trials": self.trials,
            "train_ratio": self.train_ratio,
            "seed": self.seed,
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | os.PathLike = ".") -> "ExperimentConfig":
        try:
            return cls._from_dict(d, Path(base_dir))
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid experiment config: {e}") from e

    @classmethod
    def _from_dict(cls, d: dict, base: Path) -> "ExperimentConfig":
        maps_d = d.get("maps", {"synthetic": {}})
        if "files" in maps_d:
            def resolve(p):
                return None if p is None else str(base / p)
            maps: Any = tuple(FileSource(resolve(f["estimated"]), resolve(f.get("measured")))
                              for f in maps_d["files"])
            if not maps:
                raise ConfigError("empty map file list")
        else:
            s = dict(maps_d.get("synthetic", {}))
            meas = s.pop("measured", None)
            maps = SyntheticSource(
                city=CityGenParams(**s.pop("city", {})),
                estimated=PropagationParams(**s.pop("estimated", {})),
                measured=PropagationParams(**meas) if meas is not None else None,
                **s)
        sc = d.get("scenario", {})
        a = sc.get("assignment", {})
        noise = sc.get("noise", {"kind": "gaussian", "sigma2": 5.0})
        win = sc.get("window", {"width": 41, "height": 41})
        return cls(
            maps=maps,
            assignment=AssignmentStrategy(a.get("kind", "random_positive"), int(a.get("n_tx", 1))),
            noise_kind=noise.get("kind", "gaussian"),
            sigma2=noise.get("sigma2"),
            window=(int(win["width"]), int(win["height"])),
            strongest_on=sc.get("strongest_on", "true"),
            priors=tuple(d.get("priors", ("uniform_full", "window", "perfect_random"))),
            estimators=tuple(EstimatorSpec(**e) for e in d.get("estimators", [{"kind": "pme_gaussian"}])),
            trials=int(d.get("trials", 200)),
            train_ratio=float(d.get("train_ratio", 84 / 99)),
            seed=int(d.get("seed", 0)),
            workers=int(d.get("workers", 1)),
        )


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    return ExperimentConfig.from_dict(d, path.parent)


# -- map sources ---------------------------------------------------------------

@dataclass(frozen=True)
class MapPair:
    label: str
    city: int
    estimated: RadioMapSet
    measured: RadioMapSet | None


def synthetic_pairs(src: SyntheticSource) -> list[MapPair]:
    pairs = []
    for i in range(src.n_maps):
        city = CityGenParams(**{**asdict(src.city), "seed": src.city.seed + i})
        for dep in range(src.deployments):
            est, meas = generate_scenario_maps(city, src.estimated, src.measured_params(),
                                               src.car_density, deployment=dep)
            pairs.append(MapPair(f"city{i:03d}/dep{dep:02d}", i, est, meas))
    return pairs


def file_pairs(files: Sequence[FileSource]) -> list[MapPair]:
    pairs = []
    for i, f in enumerate(files):
        est = load_radio_map_set(f.estimated)
        meas = load_radio_map_set(f.measured) if f.measured else None
        pairs.append(MapPair(Path(f.estimated).stem, i, est, meas))
    return pairs


def split_cities(n_cities: int, train_ratio: float) -> tuple[list[int], list[int]]:
    """Whole-map split; the test side always keeps at least one map."""
    n_train = min(int(round(n_cities * train_ratio)), n_cities - 1)
    return list(range(n_train)), list(range(n_train, n_cities))


# -- metrics & report -----------------------------------------------------------

def compute_metrics(errors) -> tuple[float, float]:
    e = np.asarray(errors, dtype=np.float64).reshape(-1, 2)
    if e.shape[0] == 0:
        raise ValueError("no errors to summarize")
    norms = np.hypot(e[:, 0], e[:, 1])
    return float(norms.mean()), float(np.sqrt((norms ** 2).mean()))


@dataclass(frozen=True)
class ReportRow:
    estimator: str
    prior: str
    n_tx: int
    MAE: float
    RMSE: float
    trials: int
    seed: int
    map: str | None = None


@dataclass(eq=False)
class EvalReport:
    rows: list[ReportRow]
    config_hash: str = ""
    per_map: list[ReportRow] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    errors: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, EvalReport):
            return NotImplemented
        return (self.rows == other.rows and self.per_map == other.per_map
                and self.config_hash == other.config_hash and self.skipped == other.skipped)

    def row(self, estimator: str, prior: str) -> ReportRow:
        for r in self.rows:
            if r.estimator == estimator and r.prior == prior:
                return r
        raise KeyError((estimator, prior))

    def distances(self, estimator: str, prior: str) -> np.ndarray:
        e = self.errors[(estimator, prior)]
        return np.hypot(e[:, 0], e[:, 1])

    def gap(self, better: tuple[str, str], worse: tuple[str, str]) -> tuple[float, float]:
        """Mean paired difference MAE(worse) - MAE(better) and its standard error."""
        d = self.distances(*worse) - self.distances(*better)
        se = float(d.std(ddof=1) / math.sqrt(len(d))) if len(d) > 1 else 0.0
        return float(d.mean()), se

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash,
                "rows": [asdict(r) for r in self.rows],
                "per_map": [asdict(r) for r in self.per_map],
                "skipped": list(self.skipped)}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(rows=[ReportRow(**r) for r in d.get("rows", [])],
                   config_hash=d.get("config_hash", ""),
                   per_map=[ReportRow(**r) for r in d.get("per_map", [])],
                   skipped=list(d.get("skipped", [])))


def _check_row(r: ReportRow):
    if not (r.MAE >= 0 and r.RMSE >= r.MAE * (1 - 1e-12)):
        raise AssertionError(f"RMSE < MAE in row {r}")


def report_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in report.rows:
        _check_row(r)
        w.writerow([r.estimator, r.prior, r.n_tx, repr(r.MAE), repr(r.RMSE), r.trials, r.seed])
    return buf.getvalue()


def report_json(report: EvalReport) -> str:
    for r in report.rows + report.per_map:
        _check_row(r)
    return json.dumps(report.to_dict(), indent=1)


def emit_report(report: EvalReport, fmt: str, path: str | os.PathLike) -> None:
    if fmt == "csv":
        text = report_csv(report)
    elif fmt == "json":
        text = report_json(report)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    Path(path).write_text(text)


# -- running -----------------------------------------------------------------------

@dataclass(frozen=True)
class _Unit:
    index: int
    pair: MapPair


def _methods(cfg: ExperimentConfig) -> list[tuple[EstimatorSpec, str]]:
    return [(e, p) for e in cfg.estimators for p in cfg.priors]


def _noise_models(cfg: ExperimentConfig, train: list[MapPair], window: CellSet | None):
    """Trained or known noise model per estimator kind."""
    models: dict[str, Any] = {}
    for spec in cfg.estimators:
        if spec.kind == "knn" or spec.kind in models:
            continue
        if cfg.noise_kind == "gaussian":
            if spec.kind == "pme_gaussian":
                models[spec.kind] = GaussianNoiseModel(0.0, float(cfg.sigma2))
            else:
                z = stream(cfg.seed, 7).normal(0.0, math.sqrt(cfg.sigma2), size=spec.train_samples)
                models[spec.kind] = HistogramNoiseModel.fit(z, n_bins=spec.n_bins, center=spec.center)
            continue
        if not train:
            raise ConfigError("the robustness scenario needs at least one training map")
        est = [p.estimated for p in train]
        meas = [p.measured for p in train]
        if spec.kind == "pme_gaussian":
            models[spec.kind] = train_gaussian(est, meas, window)
        else:
            models[spec.kind] = train_histogram(est, meas, window, n_bins=spec.n_bins, center=spec.center)
    return models


def _build_prior(kind: str, est: RadioMapSet, ref: RadioMapSet, window: CellSet,
                 n_tx: int, tx_ids, true_ids, cache: dict) -> Prior:
    if kind in cache:
        return cache[kind]
    if kind == "uniform_full":
        prior = cache[kind] = full_prior(est.geometry)
    elif kind == "window":
        prior = cache[kind] = uniform_prior(window)
    elif kind == "perfect_random":
        prior = cache[kind] = perfect_prior_random(ref, window, n_tx)
    elif kind == "perfect_strongest":
        # oracle knowledge: the noiseless ordered strongest list at the true Rx
        prior = perfect_prior_strongest(ref, window, true_ids)
    else:
        prior = approx_prior_strongest(est, window, tx_ids)
    return prior


def _run_unit(cfg: ExperimentConfig, unit: _Unit, models: dict) -> dict[tuple[str, str], np.ndarray]:
    pair = unit.pair
    est = pair.estimated
    if cfg.noise_kind == "gaussian":
        scenario = NoiseScenario("gaussian", sigma2=cfg.sigma2)
    else:
        if pair.measured is None:
            raise RadioMapFormatError(f"{pair.label}: robustness scenario needs measured maps")
        scenario = NoiseScenario("map_mismatch", measured_maps=pair.measured)
    ref = scenario.reference_maps(est)
    window = window_mask(est.geometry, *cfg.window)
    methods = _methods(cfg)
    errs = {(s.label, p): np.empty((cfg.trials, 2)) for s, p in methods}
    static: dict[str, Prior] = {}
    for t in range(cfg.trials):
        m = draw_trial(scenario, cfg.assignment, est, window,
                       stream(cfg.seed, unit.index, t), cfg.strongest_on)
        fp = m.fingerprint()
        true_ids = [int(t) for t in ref.ranking[:cfg.assignment.n_tx, m.truth.y, m.truth.x]]
        priors: dict[str, Prior] = dict(static)
        for spec, kind in methods:
            prior = _build_prior(kind, est, ref, window, cfg.assignment.n_tx, m.tx_ids, true_ids, priors)
            if kind in ("uniform_full", "window", "perfect_random"):
                static[kind] = prior
            if spec.kind == "knn":
                p = knn_locate(m, est, prior.support, spec.k_for(kind))
            else:
                p = pme(m, est, prior, models[spec.kind])
            errs[(spec.label, kind)][t] = (p.x - m.truth.x, p.y - m.truth.y)
        if m.fingerprint() != fp:
            raise AssertionError("an estimator modified the shared measurement")
    return errs


def _run_unit_star(args):
    cfg, unit, models = args
    try:
        return unit.index, _run_unit(cfg, unit, models), None
    except (InfeasibleScenarioError, EmptySupportError, RadioMapFormatError) as e:
        return unit.index, None, f"{unit.pair.label}: {e}"


def run_experiment(cfg: ExperimentConfig, pairs: list[MapPair] | None = None,
                   workers: int | None = None) -> EvalReport:
    """Evaluate every (estimator, prior) pair on shared measurements over the test maps.

    Noise models are trained on the training cities only.  Maps that make
    sampling infeasible are listed in ``skipped`` and the run continues.
    """
    if pairs is None:
        pairs = synthetic_pairs(cfg.maps) if isinstance(cfg.maps, SyntheticSource) else file_pairs(cfg.maps)
    cities = sorted({p.city for p in pairs})
    # the Gaussian scenario learns nothing from maps, so every city is a test city
    ratio = cfg.train_ratio if cfg.noise_kind == "map_mismatch" else 0.0
    train_idx, _ = split_cities(len(cities), ratio)
    train_c = {cities[i] for i in train_idx}
    train = [p for p in pairs if p.city in train_c]
    test = [p for p in pairs if p.city not in train_c]
    window = window_mask(pairs[0].estimated.geometry, *cfg.window) if pairs else None
    models = _noise_models(cfg, train, window)
    units = [_Unit(i, p) for i, p in enumerate(test)]
    jobs = [(cfg, u, models) for u in units]
    workers = cfg.workers if workers is None else workers
    if workers > 1 and len(units) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_unit_star, jobs))
    else:
        results = [_run_unit_star(j) for j in jobs]

    n_tx = cfg.assignment.n_tx
    methods = [(s.label, p) for s, p in _methods(cfg)]
    pooled: dict[tuple[str, str], list[np.ndarray]] = {k: [] for k in methods}
    per_map, skipped = [], []
    for (idx, errs, problem), unit in zip(sorted(results, key=lambda r: r[0]), units):
        if problem is not None:
            log.warning("skipping %s", problem)
            skipped.append(problem)
            continue
        for key in methods:
            pooled[key].append(errs[key])
            mae, rmse = compute_metrics(errs[key])
            per_map.append(ReportRow(key[0], key[1], n_tx, mae, rmse, len(errs[key]), cfg.seed,
                                     unit.pair.label))
    rows, all_errors = [], {}
    for key in methods:
        if not pooled[key]:
            continue
        e = np.concatenate(pooled[key])
        all_errors[key] = e
        mae, rmse = compute_metrics(e)
        rows.append(ReportRow(key[0], key[1], n_tx, mae, rmse, len(e), cfg.seed))
    return EvalReport(rows, cfg.fingerprint(), per_map, skipped, all_errors)
