"""Grid geometry, radio maps and the binary radio-map-set file format.

Grey levels are 8-bit: 0 means the signal is below the noise floor, 255 is
the strongest level.  Cells are indexed row-major with the origin at the
top-left corner, so ``values[y, x]`` is the grey level of cell ``(x, y)``.

File layout (``RMS1``)::

    b"RMS1"
    uint32 little-endian   length of the JSON header in bytes
    JSON header            {"cell_size", "height", "tx_positions", "width"}
    n_tx planes            width * height raw bytes each, row-major, Tx order
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

MAGIC = b"RMS1"
_LEN = struct.Struct("<I")


class RadioMapFormatError(ValueError):
    """Base class for problems reading a radio map set file."""


class MalformedHeaderError(RadioMapFormatError):
    pass


class GeometryMismatchError(RadioMapFormatError):
    pass


class TruncatedDataError(RadioMapFormatError):
    pass


@dataclass(frozen=True)
class GridGeometry:
    width: int
    height: int
    cell_size: float = 1.0

    def __post_init__(self):
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.width}x{self.height}")
        if not self.cell_size > 0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")

    @property
    def shape(self) -> tuple[int, int]:
        """Array shape ``(height, width)``."""
        return (self.height, self.width)

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def contains(self, cell: "Cell") -> bool:
        return 0 <= cell.x < self.width and 0 <= cell.y < self.height


class Cell(NamedTuple):
    x: int
    y: int


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RadioMap:
    geometry: GridGeometry
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.size != self.geometry.n_cells:
            raise GeometryMismatchError(
                f"{values.size} values for a {self.geometry.width}x{self.geometry.height} grid")
        if values.dtype != np.uint8:
            if values.size and (values.min() < 0 or values.max() > 255):
                raise ValueError("grey levels must lie in 0..255")
        values = _frozen(np.array(values, dtype=np.uint8).reshape(self.geometry.shape))
        object.__setattr__(self, "values", values)

    def __eq__(self, other):
        if not isinstance(other, RadioMap):
            return NotImplemented
        return self.geometry == other.geometry and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.geometry, self.values.tobytes()))


@dataclass(frozen=True, eq=False)
class RadioMapSet:
    """Per-Tx radio maps over a common grid.  Tx IDs are the plane indices.

    ``planes`` is the stacked ``(n_tx, height, width)`` uint8 array; it is
    read-only, like everything else here.
    """

    geometry: GridGeometry
    tx_positions: tuple[Cell, ...]
    planes: np.ndarray

    def __post_init__(self):
        planes = np.asarray(self.planes)
        tx = tuple(Cell(int(x), int(y)) for x, y in self.tx_positions)
        if planes.ndim == 2 and planes.shape[0] == 0:
            planes = planes.reshape((0,) + self.geometry.shape)
        if planes.ndim != 3 or planes.shape[1:] != self.geometry.shape:
            raise GeometryMismatchError(
                f"planes of shape {planes.shape} do not match grid {self.geometry.shape}")
        if planes.shape[0] != len(tx):
            raise GeometryMismatchError(
                f"{len(tx)} Tx positions but {planes.shape[0]} planes")
        for c in tx:
            if not self.geometry.contains(c):
                raise ValueError(f"Tx position {c} outside the grid")
        if planes.dtype != np.uint8:
            if planes.size and (planes.min() < 0 or planes.max() > 255):
                raise ValueError("grey levels must lie in 0..255")
            planes = planes.astype(np.uint8)
        object.__setattr__(self, "tx_positions", tx)
        object.__setattr__(self, "planes", _frozen(np.array(planes, dtype=np.uint8)))

    @classmethod
    def from_maps(cls, tx_positions: Sequence[Cell], maps: Sequence[RadioMap]) -> "RadioMapSet":
        if not maps:
            raise ValueError("need at least one map to infer the geometry")
        geometry = maps[0].geometry
        for m in maps:
            if m.geometry != geometry:
                raise GeometryMismatchError("maps do not share one geometry")
        return cls(geometry, tuple(tx_positions), np.stack([m.values for m in maps]))

    @property
    def n_tx(self) -> int:
        return self.planes.shape[0]

    @property
    def maps(self) -> list[RadioMap]:
        return [RadioMap(self.geometry, p) for p in self.planes]

    @cached_property
    def positive_count(self) -> np.ndarray:
        """Number of Tx with a grey level above 0, per cell."""
        return _frozen((self.planes > 0).sum(axis=0))

    @cached_property
    def ranking(self) -> np.ndarray:
        """Tx IDs per cell sorted by descending grey level, ties by ascending ID.

        Shape ``(n_tx, height, width)``; ``ranking[0]`` is the strongest Tx.
        """
        order = np.argsort(-self.planes.astype(np.int16), axis=0, kind="stable")
        return _frozen(order.astype(np.int32))

    def __eq__(self, other):
        if not isinstance(other, RadioMapSet):
            return NotImplemented
        return (self.geometry == other.geometry
                and self.tx_positions == other.tx_positions
                and np.array_equal(self.planes, other.planes))

    def __hash__(self):
        return hash((self.geometry, self.tx_positions, self.planes.tobytes()))


@dataclass(frozen=True, eq=False)
class CellSet:
    """A subset of the grid cells, stored as a boolean mask of shape (height, width)."""

    geometry: GridGeometry
    membership: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.membership, dtype=bool)
        if mask.shape != self.geometry.shape:
            mask = mask.reshape(self.geometry.shape)
        object.__setattr__(self, "membership", _frozen(np.array(mask)))

    @classmethod
    def full(cls, geometry: GridGeometry) -> "CellSet":
        return cls(geometry, np.ones(geometry.shape, dtype=bool))

    @classmethod
    def empty(cls, geometry: GridGeometry) -> "CellSet":
        return cls(geometry, np.zeros(geometry.shape, dtype=bool))

    @classmethod
    def from_cells(cls, geometry: GridGeometry, cells) -> "CellSet":
        mask = np.zeros(geometry.shape, dtype=bool)
        for x, y in cells:
            mask[y, x] = True
        return cls(geometry, mask)

    def __len__(self) -> int:
        return int(self.membership.sum())

    def __contains__(self, cell) -> bool:
        x, y = cell
        return self.geometry.contains(Cell(x, y)) and bool(self.membership[y, x])

    def __iter__(self) -> Iterator[Cell]:
        ys, xs = np.nonzero(self.membership)
        return (Cell(int(x), int(y)) for y, x in zip(ys, xs))

    def __and__(self, other: "CellSet") -> "CellSet":
        self._check(other)
        return CellSet(self.geometry, self.membership & other.membership)

    def __or__(self, other: "CellSet") -> "CellSet":
        self._check(other)
        return CellSet(self.geometry, self.membership | other.membership)

    def __le__(self, other: "CellSet") -> bool:
        self._check(other)
        return not np.any(self.membership & ~other.membership)

    def __eq__(self, other):
        if not isinstance(other, CellSet):
            return NotImplemented
        return self.geometry == other.geometry and np.array_equal(self.membership, other.membership)

    def __hash__(self):
        return hash((self.geometry, self.membership.tobytes()))

    def _check(self, other: "CellSet"):
        if self.geometry != other.geometry:
            raise GeometryMismatchError("cell sets live on different grids")

    def coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        """Member ``(xs, ys)`` in row-major order."""
        ys, xs = np.nonzero(self.membership)
        return xs, ys


def rss_at(maps: RadioMapSet, tx: int, cell: Cell) -> int:
    if not 0 <= tx < maps.n_tx:
        raise IndexError(f"Tx {tx} out of range 0..{maps.n_tx - 1}")
    x, y = cell
    if not maps.geometry.contains(Cell(x, y)):
        raise IndexError(f"cell {cell} outside the {maps.geometry.width}x{maps.geometry.height} grid")
    return int(maps.planes[tx, y, x])


def window_offset(geometry: GridGeometry, window_width: int, window_height: int) -> Cell:
    """Top-left corner of the centred window; odd slack rounds towards the origin."""
    if not (1 <= window_width <= geometry.width and 1 <= window_height <= geometry.height):
        raise ValueError(
            f"window {window_width}x{window_height} does not fit a "
            f"{geometry.width}x{geometry.height} grid")
    return Cell((geometry.width - window_width) // 2, (geometry.height - window_height) // 2)


def window_mask(geometry: GridGeometry, window_width: int, window_height: int) -> CellSet:
    ox, oy = window_offset(geometry, window_width, window_height)
    mask = np.zeros(geometry.shape, dtype=bool)
    mask[oy:oy + window_height, ox:ox + window_width] = True
    return CellSet(geometry, mask)


# -- serialization -----------------------------------------------------------

def _header_bytes(maps: RadioMapSet) -> bytes:
    header = {
        "width": maps.geometry.width,
        "height": maps.geometry.height,
        "cell_size": maps.geometry.cell_size,
        "tx_positions": [[c.x, c.y] for c in maps.tx_positions],
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def dumps_radio_map_set(maps: RadioMapSet) -> bytes:
    header = _header_bytes(maps)
    return MAGIC + _LEN.pack(len(header)) + header + maps.planes.tobytes(order="C")


def save_radio_map_set(maps: RadioMapSet, path: str | os.PathLike) -> None:
    Path(path).write_bytes(dumps_radio_map_set(maps))


def loads_radio_map_set(data: bytes) -> RadioMapSet:
    if len(data) < len(MAGIC) + _LEN.size:
        raise MalformedHeaderError("file too short for a radio map set header")
    if data[:4] != MAGIC:
        raise MalformedHeaderError(f"bad magic bytes {data[:4]!r}")
    (hlen,) = _LEN.unpack_from(data, 4)
    start = 4 + _LEN.size
    if start + hlen > len(data):
        raise TruncatedDataError("header extends past the end of the file")
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
        geometry = GridGeometry(int(header["width"]), int(header["height"]),
                                float(header.get("cell_size", 1.0)))
        tx = tuple(Cell(int(x), int(y)) for x, y in header["tx_positions"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise MalformedHeaderError(f"unreadable header: {e}") from e

    body = memoryview(data)[start + hlen:]
    plane = geometry.n_cells
    if len(body) % plane:
        raise TruncatedDataError(
            f"{len(body)} data bytes is not a whole number of {plane}-byte planes")
    if len(body) // plane != len(tx):
        raise GeometryMismatchError(
            f"header lists {len(tx)} Tx but the file holds {len(body) // plane} planes")
    planes = np.frombuffer(body, dtype=np.uint8).reshape((len(tx),) + geometry.shape)
    return RadioMapSet(geometry, tx, planes.copy())


def load_radio_map_set(path: str | os.PathLike) -> RadioMapSet:
    return loads_radio_map_set(Path(path).read_bytes())


def import_rasters(directory: str | os.PathLike, sidecar: str = "tx_positions.json") -> RadioMapSet:
    """Build a map set from one 8-bit greyscale image per Tx plus a JSON sidecar.

    The sidecar holds ``tx_positions`` and optionally ``cell_size`` and
    ``images`` (file names in Tx order).  Without ``images`` every other
    image file in the directory is used, sorted by name.
    """
    from PIL import Image

    directory = Path(directory)
    meta_path = directory / sidecar
    try:
        meta = json.loads(meta_path.read_text())
        tx = [Cell(int(x), int(y)) for x, y in meta["tx_positions"]]
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise MalformedHeaderError(f"bad sidecar {meta_path}: {e}") from e
    names = meta.get("images")
    if names is None:
        names = sorted(p.name for p in directory.iterdir()
                       if p.suffix.lower() in {".png", ".bmp", ".tif", ".tiff", ".pgm"})
    planes = []
    for name in names:
        with Image.open(directory / name) as im:
            if im.mode not in ("L", "P", "1"):
                raise RadioMapFormatError(f"{name}: expected an 8-bit greyscale image, got mode {im.mode}")
            planes.append(np.asarray(im.convert("L"), dtype=np.uint8))
    if len(planes) != len(tx):
        raise GeometryMismatchError(f"{len(tx)} Tx positions but {len(planes)} images")
    if not planes:
        raise RadioMapFormatError("no images found")
    shapes = {p.shape for p in planes}
    if len(shapes) != 1:
        raise GeometryMismatchError(f"images differ in size: {sorted(shapes)}")
    h, w = planes[0].shape
    geometry = GridGeometry(w, h, float(meta.get("cell_size", 1.0)))
    return RadioMapSet(geometry, tuple(tx), np.stack(planes))
