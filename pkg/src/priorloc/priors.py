"""Uniform-over-a-set priors on the Rx location."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .gridmap import CellSet, GridGeometry, RadioMapSet, window_mask

PRIOR_KINDS = ("uniform_full", "window", "perfect_random", "perfect_strongest", "approx_strongest")


class EmptySupportError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Prior:
    """Probability mass over ``support``; ``mass`` follows the row-major member order."""

    geometry: GridGeometry
    support: CellSet
    mass: np.ndarray

    def __post_init__(self):
        mass = np.array(self.mass, dtype=np.float64).ravel()
        if mass.shape != (len(self.support),):
            raise ValueError(f"{mass.size} masses for {len(self.support)} support cells")
        if np.any(mass < 0) or abs(mass.sum() - 1.0) > 1e-12:
            raise ValueError("prior mass must be non-negative and sum to 1")
        mass.setflags(write=False)
        object.__setattr__(self, "mass", mass)

    @property
    def log_mass(self) -> np.ndarray:
        return np.log(self.mass)

    def as_grid(self) -> np.ndarray:
        grid = np.zeros(self.geometry.shape)
        grid[self.support.membership] = self.mass
        return grid


def uniform_prior(cells: CellSet) -> Prior:
    n = len(cells)
    if n == 0:
        raise EmptySupportError("uniform prior over an empty set")
    return Prior(cells.geometry, cells, np.full(n, 1.0 / n))


def full_prior(geometry: GridGeometry) -> Prior:
    return uniform_prior(CellSet.full(geometry))


def window_prior(geometry: GridGeometry, w: int, h: int) -> Prior:
    return uniform_prior(window_mask(geometry, w, h))


def perfect_random_support(ref_maps: RadioMapSet, window: CellSet, n_tx: int) -> CellSet:
    return CellSet(ref_maps.geometry, window.membership & (ref_maps.positive_count >= n_tx))


def perfect_prior_random(ref_maps: RadioMapSet, window: CellSet, n_tx: int) -> Prior:
    support = perfect_random_support(ref_maps, window, n_tx)
    if not len(support):
        raise EmptySupportError(f"no window cell is covered by {n_tx} Tx")
    return uniform_prior(support)


def _top(maps: RadioMapSet, n: int) -> np.ndarray:
    if not 1 <= n <= maps.n_tx:
        raise EmptySupportError(f"cannot match {n} strongest Tx among {maps.n_tx}")
    return maps.ranking[:n]


def ordered_strongest_support(maps: RadioMapSet, window: CellSet, tx_ids: Sequence[int]) -> CellSet:
    ids = np.asarray(tx_ids, dtype=np.int32)
    top = _top(maps, len(ids))
    match = np.all(top == ids[:, None, None], axis=0)
    return CellSet(maps.geometry, match & perfect_random_support(maps, window, len(ids)).membership)


def unordered_strongest_support(maps: RadioMapSet, window: CellSet, tx_ids: Sequence[int]) -> CellSet:
    ids = np.sort(np.asarray(tx_ids, dtype=np.int32))
    top = np.sort(_top(maps, len(ids)), axis=0)
    match = np.all(top == ids[:, None, None], axis=0)
    return CellSet(maps.geometry, match & perfect_random_support(maps, window, len(ids)).membership)


def perfect_prior_strongest(ref_maps: RadioMapSet, window: CellSet, tx_ids: Sequence[int]) -> Prior:
    """Cells whose ordered strongest-Tx list on the true maps equals ``tx_ids``.

    Cells must also be covered by at least ``len(tx_ids)`` Tx, as every
    sampled Rx is.
    """
    if len(tx_ids) == 0:
        raise ValueError("tx_ids must be nonempty")
    support = ordered_strongest_support(ref_maps, window, tx_ids)
    if not len(support):
        raise EmptySupportError(f"no window cell has strongest Tx list {list(tx_ids)}")
    return uniform_prior(support)


def approx_prior_strongest(est_maps: RadioMapSet, window: CellSet, tx_ids: Sequence[int]) -> Prior:
    """Cells whose strongest-Tx set on the estimated maps equals set(tx_ids).

    Falls back to the uniform prior over ``window`` when no cell matches.
    """
    if len(tx_ids) == 0:
        raise ValueError("tx_ids must be nonempty")
    if len(tx_ids) <= est_maps.n_tx:
        support = unordered_strongest_support(est_maps, window, tx_ids)
        if len(support):
            return uniform_prior(support)
    return uniform_prior(window)
