"""Posterior-mean and kNN location estimators and mismatch noise models."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from ._rng import SeedLike, stream
from .gridmap import CellSet, GridGeometry, RadioMapSet
from .priors import Prior
from .scenario import AssignmentStrategy, Measurement, NoiseScenario, draw_trial

GREY_SPAN = 255.5


class DegenerateDataError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianNoiseModel:
    mu: float
    sigma2: float

    def __post_init__(self):
        if not (self.sigma2 > 0 and math.isfinite(self.sigma2)):
            raise DegenerateDataError(f"sigma2 must be positive and finite, got {self.sigma2}")

    def log_likelihood(self, z: np.ndarray) -> np.ndarray:
        """Sum over Tx (axis 0) of the Gaussian log density, constants dropped."""
        d = z - self.mu
        return -(d * d).sum(axis=0) / (2.0 * self.sigma2)

    def to_dict(self) -> dict:
        return {"kind": "gaussian", "mu": self.mu, "sigma2": self.sigma2}


@dataclass(frozen=True, eq=False)
class HistogramNoiseModel:
    """Binned mismatch law over [-255.5, 255.5]; 511 bins gives one bin per integer difference.

    With ``center`` set, the training mean ``mu`` is subtracted before
    binning, both when fitting and when scoring.
    """

    probs: np.ndarray
    center: bool = False
    mu: float = 0.0
    log_probs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64).ravel()
        if p.size < 1 or np.any(p <= 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("histogram probabilities must be positive and sum to 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)
        lp = np.log(p)
        lp.setflags(write=False)
        object.__setattr__(self, "log_probs", lp)

    @property
    def n_bins(self) -> int:
        return self.probs.size

    @property
    def bin_edges(self) -> np.ndarray:
        return np.linspace(-GREY_SPAN, GREY_SPAN, self.n_bins + 1)

    @staticmethod
    def bin_index(z, n_bins: int = 511) -> np.ndarray:
        width = 2 * GREY_SPAN / n_bins
        idx = np.floor((np.asarray(z, dtype=np.float64) + GREY_SPAN) / width)
        return np.clip(idx, 0, n_bins - 1).astype(np.intp)

    @classmethod
    def fit(cls, z, n_bins: int = 511, center: bool = False) -> "HistogramNoiseModel":
        """Laplace add-one smoothed histogram of the mismatch samples ``z``."""
        z = np.asarray(z, dtype=np.float64).ravel()
        if z.size == 0:
            raise DegenerateDataError("no mismatch samples to fit")
        mu = float(z.mean()) if center else 0.0
        counts = np.bincount(cls.bin_index(z - mu, n_bins), minlength=n_bins) + 1.0
        return cls(counts / counts.sum(), center=center, mu=mu)

    def log_likelihood(self, z: np.ndarray) -> np.ndarray:
        if self.center:
            z = z - self.mu
        return self.log_probs[self.bin_index(z, self.n_bins)].sum(axis=0)

    def to_dict(self) -> dict:
        return {"kind": "histogram", "n_bins": self.n_bins, "center": self.center,
                "mu": self.mu, "probs": self.probs.tolist()}

    def __eq__(self, other):
        if not isinstance(other, HistogramNoiseModel):
            return NotImplemented
        return (self.center == other.center and self.mu == other.mu
                and np.array_equal(self.probs, other.probs))

    __hash__ = None


NoiseModel = GaussianNoiseModel | HistogramNoiseModel


def noise_model_from_dict(d: Mapping) -> NoiseModel:
    kind = d.get("kind")
    if kind == "gaussian":
        return GaussianNoiseModel(float(d["mu"]), float(d["sigma2"]))
    if kind == "histogram":
        model = HistogramNoiseModel(np.asarray(d["probs"], dtype=np.float64),
                                    center=bool(d.get("center", False)), mu=float(d.get("mu", 0.0)))
        if "n_bins" in d and int(d["n_bins"]) != model.n_bins:
            raise ValueError(f"n_bins {d['n_bins']} disagrees with {model.n_bins} probabilities")
        return model
    raise ValueError(f"unknown noise model kind {kind!r}")


def save_noise_model(model: NoiseModel, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=1))


def load_noise_model(path: str | os.PathLike) -> NoiseModel:
    return noise_model_from_dict(json.loads(Path(path).read_text()))


# -- training ----------------------------------------------------------------

def _pairs(est_maps, measured_maps):
    if isinstance(est_maps, RadioMapSet):
        est_maps, measured_maps = [est_maps], [measured_maps]
    if len(est_maps) != len(measured_maps):
        raise ValueError("need one measured map set per estimated map set")
    return list(zip(est_maps, measured_maps))


def mismatch_samples(est_maps: RadioMapSet | Sequence[RadioMapSet],
                     measured_maps: RadioMapSet | Sequence[RadioMapSet],
                     sample_region: CellSet | None = None) -> np.ndarray:
    """Integer differences measured - estimated over (Tx, cell) pairs where either is positive."""
    out = []
    for est, meas in _pairs(est_maps, measured_maps):
        if est.geometry != meas.geometry or est.n_tx != meas.n_tx:
            raise ValueError("estimated and measured map sets differ in geometry or Tx count")
        region = CellSet.full(est.geometry).membership if sample_region is None else sample_region.membership
        e = est.planes[:, region].astype(np.int16)
        m = meas.planes[:, region].astype(np.int16)
        keep = (e > 0) | (m > 0)
        out.append((m - e)[keep])
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int16)


def train_gaussian(est_maps, measured_maps, sample_region: CellSet | None = None) -> GaussianNoiseModel:
    z = mismatch_samples(est_maps, measured_maps, sample_region).astype(np.float64)
    if z.size < 2:
        raise DegenerateDataError("need at least two mismatch samples")
    var = float(z.var(ddof=1))
    if var == 0:
        raise DegenerateDataError(f"all mismatch samples equal {z[0]:g}; variance is zero")
    return GaussianNoiseModel(float(z.mean()), var)


def train_histogram(est_maps, measured_maps, sample_region: CellSet | None = None,
                    n_bins: int = 511, center: bool = False) -> HistogramNoiseModel:
    return HistogramNoiseModel.fit(mismatch_samples(est_maps, measured_maps, sample_region),
                                   n_bins=n_bins, center=center)


# -- estimation --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Posterior:
    support: CellSet
    log_weights: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.log_weights)):
            raise FloatingPointError("non-finite posterior log-weight")
        if abs(self.mass.sum() - 1.0) > 1e-10:
            raise FloatingPointError("posterior mass does not sum to 1")

    def as_grid(self) -> np.ndarray:
        grid = np.zeros(self.support.geometry.shape)
        grid[self.support.membership] = self.mass
        return grid


@dataclass(frozen=True)
class PositionEstimate:
    x: float
    y: float
    posterior: Posterior | None = field(default=None, compare=False, repr=False)


def normalize_log_weights(log_weights: np.ndarray) -> np.ndarray:
    """exp(log_weights) / sum, shifted by the maximum so nothing overflows."""
    shifted = np.exp(log_weights - log_weights.max())
    return shifted / shifted.sum()


def _fingerprints(est_maps: RadioMapSet, tx_ids: Sequence[int], support: CellSet) -> np.ndarray:
    ids = list(tx_ids)
    for t in ids:
        if not 0 <= t < est_maps.n_tx:
            raise IndexError(f"Tx {t} out of range")
    return est_maps.planes[ids][:, support.membership].astype(np.float64)


def posterior(m: Measurement, est_maps: RadioMapSet, prior: Prior, noise: NoiseModel) -> Posterior:
    """Bayes posterior over the prior support.

    Each candidate cell y is scored with its own mismatch r - c(y); the
    weight is prior(y) * prod_i likelihood(r_i - c_i(y)).  Cells where a map
    reads 0 are scored like any other value.
    """
    if len(prior.support) == 0:
        raise ValueError("prior support is empty")
    c = _fingerprints(est_maps, m.tx_ids, prior.support)
    z = m.rss[:, None] - c
    log_w = prior.log_mass + noise.log_likelihood(z)
    return Posterior(prior.support, log_w, normalize_log_weights(log_w))


def pme_locate(post: Posterior) -> PositionEstimate:
    xs, ys = post.support.coordinates()
    return PositionEstimate(float(np.dot(post.mass, xs)), float(np.dot(post.mass, ys)), post)


def pme(m: Measurement, est_maps: RadioMapSet, prior: Prior, noise: NoiseModel) -> PositionEstimate:
    return pme_locate(posterior(m, est_maps, prior, noise))


def knn_locate(m: Measurement, est_maps: RadioMapSet, candidates: CellSet, k: int) -> PositionEstimate:
    """Unweighted centroid of the k candidates whose fingerprints are closest to the reading."""
    if len(candidates) == 0:
        raise ValueError("no kNN candidates")
    if k < 1:
        raise ValueError("k must be at least 1")
    c = _fingerprints(est_maps, m.tx_ids, candidates)
    d2 = ((m.rss[:, None] - c) ** 2).sum(axis=0)
    nearest = np.argsort(d2, kind="stable")[:k]
    xs, ys = candidates.coordinates()
    return PositionEstimate(float(xs[nearest].mean()), float(ys[nearest].mean()))


Estimator = Callable[[Measurement], PositionEstimate]


def mse_optimality_audit(est_maps: RadioMapSet, window: CellSet, sigma2: float,
                         assignment: AssignmentStrategy, estimators: Mapping[str, Estimator],
                         trials: int, seed: int) -> dict[str, tuple[float, float]]:
    """Monte Carlo mean squared error and its standard error per estimator.

    Rx are drawn uniformly from the covered window cells and readings get
    i.i.d. N(0, sigma2) noise, so a PME given that prior and sigma2 is the
    MMSE estimator and should not be beaten beyond sampling error.
    """
    scenario = NoiseScenario("gaussian", sigma2=sigma2)
    sq = {name: np.empty(trials) for name in estimators}
    for t in range(trials):
        m = draw_trial(scenario, assignment, est_maps, window, stream(seed, t))
        for name, est in estimators.items():
            p = est(m)
            sq[name][t] = (p.x - m.truth.x) ** 2 + (p.y - m.truth.y) ** 2
    return {name: (float(v.mean()), float(v.std(ddof=1) / np.sqrt(trials)) if trials > 1 else 0.0)
            for name, v in sq.items()}
