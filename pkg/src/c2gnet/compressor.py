"""Object-to-grid compression.

Objects are binned to the nearest node of a square grid with spacing ``d``;
nodes that receive several objects are resolved by PriorityShift: the object
closest to the node stays, the others move to a free 8-neighbour chosen from
a fixed preference table, or are dropped when no neighbour is free.

Neighbour preference table
--------------------------
Offsets from the conflicted node ``G`` are named by compass direction with
``+x`` east and ``+y`` north. The object's offset from the continuous node
centre ``d * G`` falls in one of eight 45-degree sectors ("quadrant halves"),
numbered counter-clockwise from east; sector ``k`` spans ``[45k, 45k + 45)``
degrees. Within a sector the axis-aligned neighbour bounding it is always the
nearest candidate, so it is tried first, followed by the neighbours at
increasing angular distance from that axis, nearer side first::

    sector 0 (  0- 45):  E  NE SE N  S  NW SW W
    sector 1 ( 45- 90):  N  NE NW E  W  SE SW S
    sector 2 ( 90-135):  N  NW NE W  E  SW SE S
    sector 3 (135-180):  W  NW SW N  S  NE SE E
    sector 4 (180-225):  W  SW NW S  N  SE NE E
    sector 5 (225-270):  S  SW SE W  E  NW NE N
    sector 6 (270-315):  S  SE SW E  W  NE NW N
    sector 7 (315-360):  E  SE NE S  N  SW NW W

An object sitting exactly on the node centre counts as sector 0.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .core import C2GImage, GridSpec, ObjectImage
from .errors import DataError, EmptyBatch, MixedChannelCounts, NonPositiveDensity

log = logging.getLogger(__name__)

E, NE, N, NW, W, SW, S, SE = (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)

PRIORITY_TABLE: tuple[tuple[tuple[int, int], ...], ...] = (
    (E, NE, SE, N, S, NW, SW, W),
    (N, NE, NW, E, W, SE, SW, S),
    (N, NW, NE, W, E, SW, SE, S),
    (W, NW, SW, N, S, NE, SE, E),
    (W, SW, NW, S, N, SE, NE, E),
    (S, SW, SE, W, E, NW, NE, N),
    (S, SE, SW, E, W, NE, NW, N),
    (E, SE, NE, S, N, SW, NW, W),
)


class Disposition(str, Enum):
    KEPT = "kept-in-place"
    SHIFTED = "shifted-to-neighbor"
    DELETED = "deleted"


@dataclass(frozen=True)
class Assignment:
    index: int
    origin: tuple[int, int]
    node: tuple[int, int] | None
    disposition: Disposition


@dataclass(frozen=True)
class BatchStats:
    densities: tuple[float, ...]

    def __post_init__(self):
        if len(self.densities) == 0:
            raise EmptyBatch("grid spacing needs at least one image")
        for rho in self.densities:
            if not (rho > 0 and math.isfinite(rho)):
                raise NonPositiveDensity(f"object density must be positive, got {rho}")

    @property
    def n(self) -> int:
        return len(self.densities)

    @classmethod
    def from_images(cls, imgs: Iterable[ObjectImage]) -> "BatchStats":
        return cls(tuple(img.density for img in imgs))


def round_half_away(v):
    """Conventional rounding: halves go away from zero (``2.5 -> 3``)."""
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def estimate_grid_spacing(stats: BatchStats | Sequence[float], round_to_int: bool = False) -> float:
    """Half the mean object extent ``sqrt(1/rho)`` over a batch of images."""
    if not isinstance(stats, BatchStats):
        stats = BatchStats(tuple(float(r) for r in stats))
    d = 0.5 * float(np.mean([math.sqrt(1.0 / rho) for rho in stats.densities]))
    if round_to_int:
        d = max(1.0, float(round_half_away(d)))
    return d


def bin_nodes(coords: np.ndarray, d_um: float, dims: tuple[int, int] | None = None) -> np.ndarray:
    """Grid node of every object, ``(n, 2)`` int.

    With ``dims`` given, nodes past the last grid line are clamped onto it;
    this only affects objects within ``d/2`` of the far edges.
    """
    if not d_um > 0:
        raise DataError(f"grid spacing must be positive, got {d_um}")
    nodes = round_half_away(np.asarray(coords, dtype=np.float64) / d_um).astype(np.int64)
    if dims is not None:
        np.clip(nodes, 0, np.array(dims) - 1, out=nodes)
    return nodes.reshape(-1, 2)


def bin_objects(img: ObjectImage, d_um: float) -> dict[tuple[int, int], list[int]]:
    """Map each grid node to the objects binned onto it, in input order."""
    spec = GridSpec.for_image(img, d_um)
    binned: dict[tuple[int, int], list[int]] = {}
    for i, (gx, gy) in enumerate(bin_nodes(img.coords, d_um, (spec.kx, spec.ky)).tolist()):
        binned.setdefault((gx, gy), []).append(i)
    return binned


def sector(dx: float, dy: float) -> int:
    """Index of the 45-degree sector containing offset ``(dx, dy)``."""
    if dx > 0 and dy >= 0:
        return 0 if dy < dx else 1
    if dx <= 0 and dy > 0:
        return 2 if -dx < dy else 3
    if dx < 0 and dy <= 0:
        return 4 if -dy < -dx else 5
    if dx >= 0 and dy < 0:
        return 6 if dx < -dy else 7
    return 0


def priority_shift(
    binned: dict[tuple[int, int], list[int]],
    coords: np.ndarray,
    grid_dims: tuple[int, int],
    d_um: float,
) -> list[Assignment]:
    """Resolve binning conflicts; returns one :class:`Assignment` per object.

    Conflicted nodes are visited in row-major order of ``(gx, gy)``. Distance
    ties at a node go to the lower object index.
    """
    kx, ky = grid_dims
    occupied = np.zeros((kx, ky), dtype=bool)
    for gx, gy in binned:
        occupied[gx, gy] = True

    out: dict[int, Assignment] = {}
    for g in sorted(binned):
        members = binned[g]
        if len(members) == 1:
            out[members[0]] = Assignment(members[0], g, g, Disposition.KEPT)
            continue
        gx, gy = g
        idx = np.asarray(members)
        offsets = coords[idx] - d_um * np.array([gx, gy], dtype=np.float64)
        dist = np.hypot(offsets[:, 0], offsets[:, 1])
        order = np.lexsort((idx, dist))

        first = int(idx[order[0]])
        out[first] = Assignment(first, g, g, Disposition.KEPT)
        free = {
            (gx + ox, gy + oy)
            for ox, oy in PRIORITY_TABLE[0]
            if 0 <= gx + ox < kx and 0 <= gy + oy < ky and not occupied[gx + ox, gy + oy]
        }
        for k in order[1:]:
            i = int(idx[k])
            if not free:
                out[i] = Assignment(i, g, None, Disposition.DELETED)
                continue
            for ox, oy in PRIORITY_TABLE[sector(*offsets[k])]:
                target = (gx + ox, gy + oy)
                if target in free:
                    break
            free.discard(target)
            occupied[target] = True
            out[i] = Assignment(i, g, target, Disposition.SHIFTED)
    return [out[i] for i in sorted(out)]


@dataclass(frozen=True)
class CompressionResult:
    image: C2GImage
    assignments: list[Assignment] = field(repr=False)

    @property
    def counts(self) -> dict[str, int]:
        c = {d.value: 0 for d in Disposition}
        for a in self.assignments:
            c[a.disposition.value] += 1
        return c


def compress_detailed(img: ObjectImage, d_um: float) -> CompressionResult:
    spec = GridSpec.for_image(img, d_um)
    binned = bin_objects(img, d_um)
    assignments = priority_shift(binned, img.coords, (spec.kx, spec.ky), spec.d_um)

    data = np.zeros(spec.shape, dtype=np.float32)
    occ = np.zeros((spec.kx, spec.ky), dtype=bool)
    placed = [a for a in assignments if a.node is not None]
    if placed:
        rows = np.array([a.index for a in placed])
        nodes = np.array([a.node for a in placed])
        data[nodes[:, 0], nodes[:, 1]] = img.props[rows].astype(np.float32)
        occ[nodes[:, 0], nodes[:, 1]] = True

    n_deleted = sum(a.disposition is Disposition.DELETED for a in assignments)
    meta = {
        "source_id": img.id,
        "label": img.label,
        "objects_in": img.n_objects,
        "kept": img.n_objects - n_deleted,
        "shifted": sum(a.disposition is Disposition.SHIFTED for a in assignments),
        "deleted": n_deleted,
        "conflicts": sum(len(v) > 1 for v in binned.values()),
        "width_um": img.width_um,
        "height_um": img.height_um,
    }
    return CompressionResult(C2GImage(spec, data, occ, meta), assignments)


def compress(img: ObjectImage, d_um: float) -> C2GImage:
    """Compress one object image onto a grid of spacing ``d_um``."""
    return compress_detailed(img, d_um).image


@dataclass
class BatchReport:
    d_um: float
    d_estimated: bool
    images: list[dict]

    def totals(self) -> dict[str, int]:
        keys = ("objects_in", "kept", "shifted", "deleted", "conflicts")
        return {k: sum(m[k] for m in self.images) for k in keys}

    def to_dict(self) -> dict:
        return {
            "d_um": self.d_um,
            "d_estimated": self.d_estimated,
            "n_images": len(self.images),
            "totals": self.totals(),
            "images": self.images,
        }


def _compress_one(args):
    img, d = args
    return compress(img, d)


def compress_batch(
    imgs: Sequence[ObjectImage],
    d_override: float | None = None,
    round_to_int: bool = False,
    jobs: int = 1,
) -> tuple[list[C2GImage], BatchReport]:
    """Compress a batch on one shared grid spacing.

    The spacing is estimated from the batch's densities unless ``d_override``
    is given. ``jobs > 1`` fans images out to worker processes; results are
    identical either way.
    """
    if not imgs:
        raise EmptyBatch("nothing to compress")
    channels = {img.channels for img in imgs}
    if len(channels) > 1:
        raise MixedChannelCounts(f"images disagree on channel count: {sorted(channels)}")
    if d_override is None:
        d = estimate_grid_spacing(BatchStats.from_images(imgs), round_to_int)
    else:
        d = float(d_override)
    log.info("compressing %d images at d=%.4g um", len(imgs), d)

    work = [(img, d) for img in imgs]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            out = list(pool.map(_compress_one, work))
    else:
        out = [_compress_one(w) for w in work]
    report = BatchReport(d, d_override is None, [dict(c.meta) for c in out])
    return out, report
