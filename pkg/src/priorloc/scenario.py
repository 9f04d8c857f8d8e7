"""Rx sampling, Tx assignment and measurement synthesis."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from ._rng import SeedLike, as_rng
from .gridmap import Cell, CellSet, RadioMapSet


class InfeasibleScenarioError(ValueError):
    """No Rx location or Tx subset satisfies the sampling constraints."""


@dataclass(frozen=True, eq=False)
class Measurement:
    tx_ids: tuple[int, ...]
    rss: np.ndarray
    truth: Cell | None = None

    def __post_init__(self):
        ids = tuple(int(t) for t in self.tx_ids)
        rss = np.array(self.rss, dtype=np.float64).ravel()
        if not ids:
            raise ValueError("a measurement needs at least one Tx")
        if len(ids) != len(rss):
            raise ValueError(f"{len(ids)} Tx IDs but {len(rss)} RSS values")
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate Tx IDs in {ids}")
        rss.setflags(write=False)
        object.__setattr__(self, "tx_ids", ids)
        object.__setattr__(self, "rss", rss)
        if self.truth is not None:
            object.__setattr__(self, "truth", Cell(*self.truth))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.tx_ids, dtype=np.int64).tobytes())
        h.update(self.rss.tobytes())
        if self.truth is not None:
            h.update(np.asarray(self.truth, dtype=np.int64).tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        d = {"tx_ids": list(self.tx_ids), "rss": self.rss.tolist()}
        if self.truth is not None:
            d["truth"] = list(self.truth)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Measurement":
        truth = d.get("truth")
        return cls(tuple(d["tx_ids"]), d["rss"], Cell(*truth) if truth is not None else None)

    def __eq__(self, other):
        if not isinstance(other, Measurement):
            return NotImplemented
        return (self.tx_ids == other.tx_ids and self.truth == other.truth
                and np.array_equal(self.rss, other.rss))

    __hash__ = None


@dataclass(frozen=True)
class AssignmentStrategy:
    kind: Literal["random_positive", "strongest"]
    n_tx: int

    def __post_init__(self):
        if self.kind not in ("random_positive", "strongest"):
            raise ValueError(f"unknown assignment kind {self.kind!r}")
        if self.n_tx < 1:
            raise ValueError("n_tx must be at least 1")


@dataclass(frozen=True, eq=False)
class NoiseScenario:
    kind: Literal["gaussian", "map_mismatch"]
    sigma2: float | None = None
    measured_maps: RadioMapSet | None = None

    def __post_init__(self):
        if self.kind == "gaussian":
            if self.sigma2 is None or not self.sigma2 > 0:
                raise ValueError("gaussian noise needs sigma2 > 0")
        elif self.kind != "map_mismatch":
            raise ValueError(f"unknown noise kind {self.kind!r}")

    def reference_maps(self, est_maps: RadioMapSet) -> RadioMapSet:
        """Maps holding the true (pre-noise) RSS at every location."""
        if self.kind == "map_mismatch":
            if self.measured_maps is None:
                raise ValueError("map_mismatch scenario without measured maps")
            return self.measured_maps
        return est_maps


def eligible_cells(maps: RadioMapSet, window: CellSet, n_tx: int) -> CellSet:
    """Window cells with a positive grey level on at least ``n_tx`` maps."""
    return CellSet(maps.geometry, window.membership & (maps.positive_count >= n_tx))


def sample_rx(maps: RadioMapSet, window: CellSet, n_tx: int, seed: SeedLike) -> Cell:
    xs, ys = eligible_cells(maps, window, n_tx).coordinates()
    if len(xs) == 0:
        raise InfeasibleScenarioError(f"no cell in the window is covered by {n_tx} Tx")
    i = int(as_rng(seed).integers(len(xs)))
    return Cell(int(xs[i]), int(ys[i]))


def positive_tx(maps: RadioMapSet, rx: Cell) -> np.ndarray:
    return np.flatnonzero(maps.planes[:, rx.y, rx.x] > 0)


def assign_random_tx(maps: RadioMapSet, rx: Cell, n_tx: int, seed: SeedLike) -> list[int]:
    pos = positive_tx(maps, rx)
    if len(pos) < n_tx:
        raise InfeasibleScenarioError(f"{rx} has positive RSS from {len(pos)} Tx, need {n_tx}")
    return [int(t) for t in as_rng(seed).choice(pos, size=n_tx, replace=False)]


def strongest_order(values: np.ndarray) -> np.ndarray:
    """Indices by descending value; equal values keep ascending index order."""
    return np.argsort(-np.asarray(values, dtype=np.float64), kind="stable")


def assign_strongest_tx(maps: RadioMapSet, rx: Cell, n_tx: int) -> list[int]:
    if len(positive_tx(maps, rx)) < n_tx:
        raise InfeasibleScenarioError(f"{rx} has positive RSS from fewer than {n_tx} Tx")
    return [int(t) for t in maps.ranking[:n_tx, rx.y, rx.x]]


def measure(scenario: NoiseScenario, est_maps: RadioMapSet, rx: Cell,
            tx_ids: Sequence[int], seed: SeedLike) -> Measurement:
    ids = [int(t) for t in tx_ids]
    for t in ids:
        if not 0 <= t < est_maps.n_tx:
            raise IndexError(f"Tx {t} out of range")
    ref = scenario.reference_maps(est_maps)
    true_rss = ref.planes[ids, rx.y, rx.x].astype(np.float64)
    if scenario.kind == "gaussian":
        rss = true_rss + as_rng(seed).normal(0.0, np.sqrt(scenario.sigma2), size=len(ids))
    else:
        rss = true_rss
    return Measurement(tuple(ids), rss, rx)


def draw_trial(scenario: NoiseScenario, assignment: AssignmentStrategy, est_maps: RadioMapSet,
               window: CellSet, seed: SeedLike, strongest_on: str = "true") -> Measurement:
    """One Rx draw, Tx assignment and measurement, all from the same generator.

    ``strongest_on="noisy"`` ranks every covering Tx by its noisy reading
    instead of the noiseless reference value (Gaussian scenario only).
    """
    rng = as_rng(seed)
    ref = scenario.reference_maps(est_maps)
    rx = sample_rx(ref, window, assignment.n_tx, rng)
    if assignment.kind == "random_positive":
        ids = assign_random_tx(ref, rx, assignment.n_tx, rng)
        return measure(scenario, est_maps, rx, ids, rng)
    if strongest_on == "noisy" and scenario.kind == "gaussian":
        full = measure(scenario, est_maps, rx, positive_tx(ref, rx), rng)
        keep = strongest_order(full.rss)[:assignment.n_tx]
        return Measurement(tuple(full.tx_ids[i] for i in keep), full.rss[keep], rx)
    ids = assign_strongest_tx(ref, rx, assignment.n_tx)
    return measure(scenario, est_maps, rx, ids, rng)
