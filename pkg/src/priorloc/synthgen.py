"""Procedural urban layouts and a dominant-path style pathloss surrogate.

The surrogate runs a single-source shortest path over the 8-connected grid.
Each step costs its geometric length (1 or sqrt(2) cells, times the cell
size) plus a fixed penalty for every building or car cell it enters.  The
penalty is an equivalent path length, so the whole cost stays additive and
the grey level is a decreasing function of it::

    value = round(ref_level - exponent * log2(1 + cost))

clamped to 0..255 and zeroed below ``noise_floor``.  Building cells
themselves read 0 unless ``zero_buildings`` is off.  Because penalties are
non-negative, adding obstacles can only lower a cell's value.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from ._rng import SeedLike, as_rng, stream
from .gridmap import Cell, GridGeometry, RadioMap, RadioMapSet, window_offset

FREE, BUILDING, CAR = 0, 1, 2

# (dx, dy, step length in cells)
NEIGHBOURS = tuple((dx, dy, math.hypot(dx, dy))
                   for dy in (-1, 0, 1) for dx in (-1, 0, 1) if dx or dy)


class PlacementInfeasibleError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class EnvironmentMap:
    geometry: GridGeometry
    occupancy: np.ndarray  # uint8 labels FREE / BUILDING / CAR, shape (height, width)

    def __post_init__(self):
        occ = np.array(self.occupancy, dtype=np.uint8).reshape(self.geometry.shape)
        if occ.size and occ.max() > CAR:
            raise ValueError("occupancy labels must be FREE, BUILDING or CAR")
        occ.setflags(write=False)
        object.__setattr__(self, "occupancy", occ)

    def label(self, cell: Cell) -> int:
        return int(self.occupancy[cell.y, cell.x])

    def __eq__(self, other):
        if not isinstance(other, EnvironmentMap):
            return NotImplemented
        return self.geometry == other.geometry and np.array_equal(self.occupancy, other.occupancy)

    def __hash__(self):
        return hash((self.geometry, self.occupancy.tobytes()))


@dataclass(frozen=True)
class PropagationParams:
    ref_level: float = 250.0
    exponent: float = 54.0       # grey levels lost per doubling of (1 + path cost)
    wall_penalty: float = 12.0   # equivalent path length added per building cell entered
    car_penalty: float = 0.0     # same, per car cell entered
    noise_floor: float = 0.0
    zero_buildings: bool = True  # building cells read 0, as receivers are never placed indoors

    def __post_init__(self):
        if not 0 < self.ref_level <= 255:
            raise ValueError("ref_level must lie in (0, 255]")
        if min(self.exponent, self.wall_penalty, self.car_penalty) < 0:
            raise ValueError("exponent and penalties must be non-negative")
        if not 0 <= self.noise_floor < 255:
            raise ValueError("noise_floor must lie in [0, 255)")

    def mismatched(self, scale: float = 1.15) -> "PropagationParams":
        """Measurement-side parameters for the robustness surrogate."""
        wall = self.wall_penalty * scale
        return replace(self, exponent=self.exponent * scale, wall_penalty=wall, car_penalty=wall / 2)


@dataclass(frozen=True)
class CityGenParams:
    seed: int = 0
    width: int = 64
    height: int = 64
    cell_size: float = 1.0
    block_size: int = 10
    street_width: int = 3
    building_density: float = 0.7
    tx_count: int = 20
    tx_inner_square: int = 40
    tx_min_separation: float = 6.0
    max_attempts: int = 50

    def __post_init__(self):
        if self.tx_count < 1:
            raise ValueError("tx_count must be at least 1")
        if self.tx_min_separation < 0:
            raise ValueError("tx_min_separation must be non-negative")
        if not 0 <= self.building_density <= 1:
            raise ValueError("building_density must lie in [0, 1]")
        if self.block_size < 1 or self.street_width < 0:
            raise ValueError("block_size must be >= 1 and street_width >= 0")

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry(self.width, self.height, self.cell_size)

    def to_dict(self) -> dict:
        return asdict(self)


def _lots(lo: int, hi: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Split [lo, hi) in two with a one-cell alley when there is room."""
    if hi - lo < 5:
        return [(lo, hi)]
    cut = int(rng.integers(lo + 2, hi - 2))
    return [(lo, cut), (cut + 1, hi)]


def generate_city(params: CityGenParams) -> EnvironmentMap:
    """Axis-aligned building blocks separated by a street lattice."""
    rng = stream(params.seed, 0)
    g = params.geometry
    occ = np.full(g.shape, FREE, dtype=np.uint8)
    period = params.block_size + params.street_width
    ox, oy = (int(v) for v in rng.integers(0, period, size=2))
    for by in range(oy - period, g.height, period):
        for bx in range(ox - period, g.width, period):
            for y0, y1 in _lots(by, by + params.block_size, rng):
                for x0, x1 in _lots(bx, bx + params.block_size, rng):
                    if rng.random() < params.building_density:
                        occ[max(y0, 0):max(y1, 0), max(x0, 0):max(x1, 0)] = BUILDING
    return EnvironmentMap(g, occ)


def place_transmitters(env: EnvironmentMap, params: CityGenParams, seed: SeedLike) -> list[Cell]:
    """Rejection-sample Tx on free cells of the central square with a minimum separation."""
    rng = as_rng(seed)
    g = env.geometry
    side_w = min(params.tx_inner_square, g.width)
    side_h = min(params.tx_inner_square, g.height)
    ox, oy = window_offset(g, side_w, side_h)
    sub = env.occupancy[oy:oy + side_h, ox:ox + side_w]
    ys, xs = np.nonzero(sub == FREE)
    cand = np.column_stack([xs + ox, ys + oy])
    if len(cand) < params.tx_count:
        raise PlacementInfeasibleError(
            f"only {len(cand)} free cells in the central square for {params.tx_count} Tx")
    sep2 = float(params.tx_min_separation) ** 2
    for _ in range(params.max_attempts):
        chosen = np.empty((params.tx_count, 2), dtype=np.int64)
        n = 0
        for i in rng.permutation(len(cand)):
            p = cand[i]
            if n and np.min(((chosen[:n] - p) ** 2).sum(axis=1)) < sep2:
                continue
            chosen[n] = p
            n += 1
            if n == params.tx_count:
                return [Cell(int(x), int(y)) for x, y in chosen]
    raise PlacementInfeasibleError(
        f"could not place {params.tx_count} Tx at separation {params.tx_min_separation} "
        f"in {params.max_attempts} attempts")


def generate_environment(params: CityGenParams, deployment: int = 0) -> tuple[EnvironmentMap, list[Cell]]:
    env = generate_city(params)
    return env, place_transmitters(env, params, stream(params.seed, 1, deployment))


def perturb_with_cars(env: EnvironmentMap, seed: SeedLike, car_density: float) -> EnvironmentMap:
    if not 0 <= car_density <= 1:
        raise ValueError("car_density must lie in [0, 1]")
    rng = as_rng(seed)
    draw = rng.random(env.geometry.shape) < car_density
    occ = env.occupancy.copy()
    occ[draw & (occ == FREE)] = CAR
    return EnvironmentMap(env.geometry, occ)


def _grid_graph(env: EnvironmentMap, params: PropagationParams) -> csr_matrix:
    g = env.geometry
    h, w = g.shape
    penalty = np.zeros(g.shape)
    penalty[env.occupancy == BUILDING] = params.wall_penalty
    penalty[env.occupancy == CAR] = params.car_penalty
    idx = np.arange(h * w).reshape(h, w)
    rows, cols, weights = [], [], []
    for dx, dy, step in NEIGHBOURS:
        ys = slice(max(0, -dy), h - max(0, dy))
        xs = slice(max(0, -dx), w - max(0, dx))
        yt = slice(max(0, dy), h - max(0, -dy))
        xt = slice(max(0, dx), w - max(0, -dx))
        rows.append(idx[ys, xs].ravel())
        cols.append(idx[yt, xt].ravel())
        weights.append((step * g.cell_size + penalty[yt, xt]).ravel())
    return csr_matrix((np.concatenate(weights), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(h * w, h * w))


def path_costs(env: EnvironmentMap, txs: list[Cell], params: PropagationParams) -> np.ndarray:
    """Minimum additive path cost from each Tx to every cell, shape (n_tx, height, width)."""
    for tx in txs:
        if not env.geometry.contains(tx):
            raise ValueError(f"Tx {tx} outside the grid")
        if env.label(tx) == BUILDING:
            raise ValueError(f"Tx {tx} is inside a building")
    if not txs:
        return np.zeros((0,) + env.geometry.shape)
    w = env.geometry.width
    sources = [t.y * w + t.x for t in txs]
    dist = dijkstra(_grid_graph(env, params), directed=True, indices=sources)
    return dist.reshape((len(txs),) + env.geometry.shape)


def cost_to_grey(cost: np.ndarray, params: PropagationParams) -> np.ndarray:
    level = params.ref_level - params.exponent * np.log2(1.0 + cost)
    level = np.clip(np.floor(level + 0.5), 0, 255)
    level[level < params.noise_floor] = 0
    return level.astype(np.uint8)


def _grey(env: EnvironmentMap, txs: list[Cell], params: PropagationParams) -> np.ndarray:
    grey = cost_to_grey(path_costs(env, txs, params), params)
    if params.zero_buildings:
        grey[:, env.occupancy == BUILDING] = 0
    return grey


def simulate_pathloss(env: EnvironmentMap, tx: Cell, params: PropagationParams) -> RadioMap:
    return RadioMap(env.geometry, _grey(env, [Cell(*tx)], params)[0])


def simulate_map_set(env: EnvironmentMap, txs: list[Cell], params: PropagationParams) -> RadioMapSet:
    txs = [Cell(*t) for t in txs]
    return RadioMapSet(env.geometry, tuple(txs), _grey(env, txs, params))


def generate_scenario_maps(params: CityGenParams, est_params: PropagationParams,
                           meas_params: PropagationParams, car_density: float,
                           deployment: int = 0) -> tuple[RadioMapSet, RadioMapSet]:
    """Estimated maps on the clean city, measured maps on the same city with random cars."""
    env, txs = generate_environment(params, deployment)
    estimated = simulate_map_set(env, txs, est_params)
    cars = perturb_with_cars(env, stream(params.seed, 2, deployment), car_density)
    measured = simulate_map_set(cars, txs, meas_params)
    return estimated, measured
