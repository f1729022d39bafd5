"""Domain types, object-table ingestion and the binary grid-image container.

Coordinates are kept in micrometres throughout. A grid image is stored as a
``kx x ky x P`` float32 tensor where axis 0 runs along x and axis 1 along y.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

import numpy as np

from .errors import (
    BadChannelIndex,
    BadMagic,
    DataError,
    DimensionMismatch,
    EmptyFile,
    MissingColumn,
    NonFinite,
    OutOfBounds,
    RowError,
    TruncatedFile,
)

C2G_MAGIC = b"C2G-GRID-IMAGE\r\n"
C2G_VERSION = 1
# magic, version, kx, ky, P, d_um
_HEADER = struct.Struct("<16sBIIId")


@dataclass(frozen=True)
class ObjectRecord:
    x: float
    y: float
    props: tuple[float, ...]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ObjectImage:
    """All objects found in one source image.

    Objects are held column-wise (``coords`` is ``(n, 2)``, ``props`` is
    ``(n, P)``); iterate :attr:`objects` for per-object records.
    """

    coords: np.ndarray
    props: np.ndarray
    width_um: float
    height_um: float
    resolution_um_per_px: float = 0.5
    label: int | None = None
    id: str = ""

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        props = np.asarray(self.props, dtype=np.float64)
        if props.ndim != 2 or props.shape[0] != coords.shape[0]:
            raise DimensionMismatch(
                f"props shape {props.shape} does not match {coords.shape[0]} objects"
            )
        if not (self.width_um > 0 and self.height_um > 0):
            raise DataError("image extent must be positive")
        if not (np.isfinite(coords).all() and np.isfinite(props).all()):
            raise DataError("object coordinates and properties must be finite")
        inside = (
            (coords[:, 0] >= 0)
            & (coords[:, 0] < self.width_um)
            & (coords[:, 1] >= 0)
            & (coords[:, 1] < self.height_um)
        )
        if not inside.all():
            bad = int(np.flatnonzero(~inside)[0])
            raise OutOfBounds(f"object at {tuple(coords[bad])} outside extent", row=bad)
        if self.label is not None and self.label not in (0, 1):
            raise DataError(f"label must be 0, 1 or None, got {self.label!r}")
        object.__setattr__(self, "coords", _frozen(coords))
        object.__setattr__(self, "props", _frozen(props))

    @property
    def n_objects(self) -> int:
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.props.shape[1]

    @property
    def area_um2(self) -> float:
        return self.width_um * self.height_um

    @property
    def density(self) -> float:
        """Objects per square micrometre."""
        return self.n_objects / self.area_um2

    @property
    def objects(self) -> Iterator[ObjectRecord]:
        for (x, y), p in zip(self.coords, self.props):
            yield ObjectRecord(float(x), float(y), tuple(float(v) for v in p))

    @classmethod
    def from_records(cls, records: Sequence[ObjectRecord], channels: int, **kw) -> "ObjectImage":
        coords = np.array([(r.x, r.y) for r in records], dtype=np.float64).reshape(-1, 2)
        props = np.array([r.props for r in records], dtype=np.float64).reshape(-1, channels)
        return cls(coords=coords, props=props, **kw)


def grid_extent(length_um: float, d_um: float) -> int:
    """Number of grid lines covering ``length_um`` at spacing ``d_um``."""
    # round() guards against 1.1 / 0.1 == 11.000000000000002
    return max(1, math.ceil(round(length_um / d_um, 9)))


@dataclass(frozen=True)
class GridSpec:
    d_um: float
    kx: int
    ky: int
    channels: int

    def __post_init__(self):
        if not self.d_um > 0:
            raise DataError(f"grid spacing must be positive, got {self.d_um}")
        if self.kx < 1 or self.ky < 1 or self.channels < 1:
            raise DataError(f"grid dimensions must be positive: {self}")

    @classmethod
    def for_image(cls, img: ObjectImage, d_um: float) -> "GridSpec":
        if not d_um > 0:
            raise DataError(f"grid spacing must be positive, got {d_um}")
        return cls(
            d_um=float(d_um),
            kx=grid_extent(img.width_um, d_um),
            ky=grid_extent(img.height_um, d_um),
            channels=img.channels,
        )

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.kx, self.ky, self.channels)


@dataclass(frozen=True, eq=False)
class C2GImage:
    """A compressed grid image: one object per occupied node, zeros elsewhere."""

    spec: GridSpec
    data: np.ndarray
    occupancy: np.ndarray
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        occ = np.asarray(self.occupancy, dtype=bool)
        if data.shape != self.spec.shape:
            raise DimensionMismatch(f"data shape {data.shape} != spec {self.spec.shape}")
        if occ.shape != self.spec.shape[:2]:
            raise DimensionMismatch(f"occupancy shape {occ.shape} != {self.spec.shape[:2]}")
        if not np.isfinite(data).all():
            raise DataError("grid image values must be finite")
        if np.any(data[~occ] != 0):
            raise DataError("unoccupied grid nodes must hold all-zero vectors")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "occupancy", _frozen(occ))
        object.__setattr__(self, "meta", dict(self.meta))

    @property
    def n_occupied(self) -> int:
        return int(self.occupancy.sum())

    @property
    def label(self) -> int | None:
        return self.meta.get("label")

    def with_arrays(self, data: np.ndarray, occupancy: np.ndarray) -> "C2GImage":
        return C2GImage(self.spec, data, occupancy, self.meta)

    def equals(self, other: "C2GImage") -> bool:
        """Bit-exact comparison of spec, payload and occupancy."""
        return (
            self.spec == other.spec
            and self.data.tobytes() == other.data.tobytes()
            and np.array_equal(self.occupancy, other.occupancy)
        )


# ---------------------------------------------------------------------------
# object tables


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for an object table.

    ``props=None`` takes every column other than the coordinate columns, in
    header order.
    """

    x: str = "x_um"
    y: str = "y_um"
    props: tuple[str, ...] | None = None


@dataclass(frozen=True)
class RowRejection:
    line: int
    reason: str
    error: RowError


def sidecar_path(csv_path: Path) -> Path:
    return Path(csv_path).with_suffix(".json")


def read_sidecar(csv_path: str | Path) -> dict:
    path = sidecar_path(Path(csv_path))
    if not path.exists():
        raise DataError(f"no image metadata for {csv_path} (expected {path})")
    with open(path) as fh:
        return json.load(fh)


def read_object_table(
    path: str | Path,
    schema: CsvSchema | None = None,
    meta: Mapping[str, Any] | None = None,
) -> tuple[ObjectImage, list[RowRejection]]:
    """Parse an object table, collecting bad rows instead of raising.

    Line numbers in rejections count the header as line 1. ``meta`` supplies
    ``width_um``, ``height_um`` and optionally ``resolution_um_per_px``,
    ``label`` and ``id``; when omitted it is read from the JSON sidecar.
    """
    path = Path(path)
    schema = schema or CsvSchema()
    meta = dict(meta) if meta is not None else read_sidecar(path)
    try:
        width, height = float(meta["width_um"]), float(meta["height_um"])
    except KeyError as exc:
        raise DataError(f"image metadata lacks {exc.args[0]}") from None

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise EmptyFile(f"{path} has no header row")
        header = [h.strip() for h in header]
        for col in (schema.x, schema.y):
            if col not in header:
                raise MissingColumn(f"{path}: column {col!r} not found")
        prop_cols = schema.props
        if prop_cols is None:
            prop_cols = tuple(h for h in header if h not in (schema.x, schema.y))
        missing = [c for c in prop_cols if c not in header]
        if missing:
            raise MissingColumn(f"{path}: property columns {missing} not found")
        ix, iy = header.index(schema.x), header.index(schema.y)
        ip = [header.index(c) for c in prop_cols]

        coords, props, rejected = [], [], []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                x, y = float(row[ix]), float(row[iy])
                vals = [float(row[i]) for i in ip]
            except (ValueError, IndexError):
                err = NonFinite("unparseable value", row=line)
                rejected.append(RowRejection(line, "unparseable", err))
                continue
            if not (math.isfinite(x) and math.isfinite(y) and all(map(math.isfinite, vals))):
                rejected.append(RowRejection(line, "non-finite", NonFinite("non-finite value", row=line)))
                continue
            if not (0 <= x < width and 0 <= y < height):
                err = OutOfBounds(f"({x}, {y}) outside [0, {width}) x [0, {height})", row=line)
                rejected.append(RowRejection(line, "out-of-bounds", err))
                continue
            coords.append((x, y))
            props.append(vals)

    img = ObjectImage(
        coords=np.array(coords, dtype=np.float64).reshape(-1, 2),
        props=np.array(props, dtype=np.float64).reshape(-1, len(prop_cols)),
        width_um=width,
        height_um=height,
        resolution_um_per_px=float(meta.get("resolution_um_per_px", 0.5)),
        label=meta.get("label"),
        id=str(meta.get("id", path.stem)),
    )
    return img, rejected


def load_object_csv(
    path: str | Path,
    schema: CsvSchema | None = None,
    meta: Mapping[str, Any] | None = None,
) -> ObjectImage:
    """Load an object table, raising on the first invalid row."""
    img, rejected = read_object_table(path, schema, meta)
    if rejected:
        raise rejected[0].error
    return img


def write_object_csv(img: ObjectImage, path: str | Path, prop_names: Sequence[str] | None = None) -> None:
    """Write an object table plus its JSON sidecar."""
    path = Path(path)
    names = list(prop_names or [f"ch{i}" for i in range(img.channels)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x_um", "y_um", *names])
        for (x, y), p in zip(img.coords, img.props):
            w.writerow([repr(float(x)), repr(float(y)), *(repr(float(v)) for v in p)])
    sidecar = {
        "id": img.id,
        "width_um": img.width_um,
        "height_um": img.height_um,
        "resolution_um_per_px": img.resolution_um_per_px,
        "label": img.label,
    }
    with open(sidecar_path(path), "w") as fh:
        json.dump(sidecar, fh, indent=2)


# ---------------------------------------------------------------------------
# binary container


def c2g_to_bytes(img: C2GImage) -> bytes:
    s = img.spec
    meta = json.dumps(img.meta, sort_keys=True).encode()
    bits = np.packbits(img.occupancy.ravel(), bitorder="little")
    return b"".join(
        [
            _HEADER.pack(C2G_MAGIC, C2G_VERSION, s.kx, s.ky, s.channels, s.d_um),
            img.data.astype("<f4").tobytes(),
            bits.tobytes(),
            struct.pack("<I", len(meta)),
            meta,
        ]
    )


def c2g_from_bytes(buf: bytes) -> C2GImage:
    if len(buf) < len(C2G_MAGIC):
        raise TruncatedFile("file shorter than the magic number")
    if buf[: len(C2G_MAGIC)] != C2G_MAGIC:
        raise BadMagic("not a C2G grid image")
    if len(buf) < _HEADER.size:
        raise TruncatedFile("header truncated")
    _, version, kx, ky, p, d_um = _HEADER.unpack_from(buf)
    if version != C2G_VERSION:
        raise BadMagic(f"unsupported container version {version}")
    if kx == 0 or ky == 0 or p == 0:
        raise DimensionMismatch(f"zero dimension in header ({kx}, {ky}, {p})")
    n = kx * ky * p
    off = _HEADER.size
    nbits = (kx * ky + 7) // 8
    if len(buf) < off + 4 * n + nbits + 4:
        raise TruncatedFile(f"payload for {kx}x{ky}x{p} truncated")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(kx, ky, p)
    off += 4 * n
    bits = np.frombuffer(buf, dtype=np.uint8, count=nbits, offset=off)
    occ = np.unpackbits(bits, count=kx * ky, bitorder="little").astype(bool).reshape(kx, ky)
    off += nbits
    (mlen,) = struct.unpack_from("<I", buf, off)
    off += 4
    if len(buf) < off + mlen:
        raise TruncatedFile("metadata block truncated")
    if len(buf) > off + mlen:
        raise DimensionMismatch("trailing bytes after metadata block")
    meta = json.loads(buf[off : off + mlen].decode()) if mlen else {}
    return C2GImage(GridSpec(d_um, kx, ky, p), data.astype(np.float32), occ, meta)


def write_c2g(img: C2GImage, path: str | Path) -> None:
    Path(path).write_bytes(c2g_to_bytes(img))


def read_c2g(path: str | Path) -> C2GImage:
    return c2g_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# rasters


def preview_array(img: C2GImage, channel_map: Sequence[int] = (0, 1, 2)) -> np.ndarray:
    """False-colour RGB preview, shape ``(ky, kx, 3)`` uint8, one pixel per node."""
    if len(channel_map) != 3:
        raise BadChannelIndex("channel_map needs exactly three channel indices")
    for c in channel_map:
        if not 0 <= c < img.spec.channels:
            raise BadChannelIndex(f"channel {c} not in [0, {img.spec.channels})")
    rgb = np.zeros(img.spec.shape[:2] + (3,), dtype=np.float64)
    for k, c in enumerate(channel_map):
        plane = img.data[:, :, c].astype(np.float64)
        lo, hi = plane.min(), plane.max()
        if hi > lo:
            rgb[:, :, k] = (plane - lo) / (hi - lo)
    out = np.round(rgb * 255).astype(np.uint8)
    # image rows run along y
    return np.ascontiguousarray(out.transpose(1, 0, 2))


def export_preview(img: C2GImage, channel_map: Sequence[int], path: str | Path) -> None:
    from PIL import Image

    Image.fromarray(preview_array(img, channel_map)).save(path, format="PNG")


def export_tiff(img: C2GImage, path: str | Path) -> None:
    """Multi-channel float32 TIFF, channel-first planes of ``(ky, kx)``.

    Convenience export only; the ``.c2g`` container is the format of record.
    """
    import tifffile

    tifffile.imwrite(path, np.ascontiguousarray(img.data.transpose(2, 1, 0)), photometric="minisblack")
