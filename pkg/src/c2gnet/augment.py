"""Training-time augmentation for grid images.

Grid pixels are whole objects, so nothing here interpolates: pixels are
moved, copied (translation fill), zeroed or scaled. Methods run in a fixed
order: translate, reflect, rotate, blackout, shuffle, channel brightness,
global brightness, delete.

Array-level functions work on ``data`` (``kx, ky, P``) and ``occ``
(``kx, ky``) and return new arrays.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .core import C2GImage
from .errors import DataError, WindowLargerThanImage


@dataclass(frozen=True)
class AugmentConfig:
    translate_p: float = 1.0
    max_dx: int = 30
    max_dy: int = 20
    reflect_p: float = 1.0
    rotate_p: float = 1.0
    blackout_p: float = 0.8
    blackout_size: int = 25
    shuffle_p: float = 1.0
    shuffle_windows: int = 50
    shuffle_size: int = 3
    channel_brightness_p: float = 0.1
    channel_brightness_range: tuple[float, float] = (0.9, 1.1)
    global_brightness_p: float = 1.0
    global_brightness_range: tuple[float, float] = (0.8, 1.2)
    delete_p: float = 1.0
    delete_count: int = 100
    rng_seed: int | None = None

    def __post_init__(self):
        for f in fields(self):
            if f.name.endswith("_p"):
                p = getattr(self, f.name)
                if not 0.0 <= p <= 1.0:
                    raise DataError(f"{f.name}={p} is not a probability")
        if self.max_dx < 0 or self.max_dy < 0 or self.delete_count < 0 or self.shuffle_windows < 0:
            raise DataError("translation limits and counts must be non-negative")
        if self.blackout_size < 1 or self.shuffle_size < 1:
            raise DataError("window sizes must be positive")
        for name in ("channel_brightness_range", "global_brightness_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise DataError(f"{name} must be ordered, got {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))

    @classmethod
    def disabled(cls, **overrides) -> "AugmentConfig":
        """Config with every method switched off, then ``overrides`` applied."""
        off = {f.name: 0.0 for f in fields(cls) if f.name.endswith("_p")}
        off.update(overrides)
        return cls(**off)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown augmentation keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def translate(data, occ, dx: int, dy: int):
    """Shift content by ``(dx, dy)`` pixels; vacated strips mirror the edge."""
    kx, ky = occ.shape
    px, py = abs(dx), abs(dy)
    pad = ((px, px), (py, py))
    d = np.pad(data, pad + ((0, 0),), mode="symmetric")
    o = np.pad(occ, pad, mode="symmetric")
    x0, y0 = px - dx, py - dy
    return d[x0 : x0 + kx, y0 : y0 + ky].copy(), o[x0 : x0 + kx, y0 : y0 + ky].copy()


def reflect(data, occ, flip_x: bool, flip_y: bool):
    axes = tuple(a for a, f in ((0, flip_x), (1, flip_y)) if f)
    if not axes:
        return data.copy(), occ.copy()
    return np.flip(data, axes).copy(), np.flip(occ, axes).copy()


def _fit_center(a: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Center-crop or zero-pad the first two axes of ``a`` to ``shape``."""
    out = np.zeros(shape + a.shape[2:], dtype=a.dtype)
    src, dst = [], []
    for have, want in zip(a.shape[:2], shape):
        if have >= want:
            s = (have - want) // 2
            src.append(slice(s, s + want))
            dst.append(slice(0, want))
        else:
            s = (want - have) // 2
            src.append(slice(0, have))
            dst.append(slice(s, s + have))
    out[tuple(dst)] = a[tuple(src)]
    return out


def rotate90(data, occ, k: int):
    """Rotate by ``k * 90`` degrees, keeping the original plane size."""
    k %= 4
    d = np.rot90(data, k, axes=(0, 1))
    o = np.rot90(occ, k, axes=(0, 1))
    if d.shape[:2] != occ.shape:
        return _fit_center(d, occ.shape), _fit_center(o, occ.shape)
    return d.copy(), o.copy()


def _check_window(size: int, occ) -> None:
    if size > occ.shape[0] or size > occ.shape[1]:
        raise WindowLargerThanImage(f"{size}x{size} window does not fit a {occ.shape} image")


def blackout(data, occ, cx: int, cy: int, size: int):
    """Zero the ``size x size`` window centred on ``(cx, cy)``, clipped at borders."""
    h = size // 2
    xs = slice(max(cx - h, 0), max(cx - h + size, 0))
    ys = slice(max(cy - h, 0), max(cy - h + size, 0))
    data, occ = data.copy(), occ.copy()
    data[xs, ys] = 0
    occ[xs, ys] = False
    return data, occ


def local_shuffle(data, occ, corners, perms, size: int):
    """Permute the pixels of each ``size x size`` window, in sequence."""
    data, occ = data.copy(), occ.copy()
    for (x, y), perm in zip(corners, perms):
        w = (slice(x, x + size), slice(y, y + size))
        block = data[w].reshape(size * size, -1)
        data[w] = block[perm].reshape(size, size, -1)
        occ[w] = occ[w].reshape(-1)[perm].reshape(size, size)
    return data, occ


def scale_channels(data, occ, factors):
    return (data * np.asarray(factors, dtype=data.dtype)).astype(data.dtype), occ.copy()


def delete_pixels(data, occ, flat_idx):
    data, occ = data.copy(), occ.copy()
    xs, ys = np.unravel_index(np.asarray(flat_idx, dtype=np.int64), occ.shape)
    data[xs, ys] = 0
    occ[xs, ys] = False
    return data, occ


def augment_arrays(data, occ, cfg: AugmentConfig, rng: np.random.Generator):
    """Apply the stochastic pipeline to raw arrays."""
    data = np.asarray(data, dtype=np.float32)
    occ = np.asarray(occ, dtype=bool)
    kx, ky = occ.shape

    if rng.random() < cfg.translate_p:
        dx = int(rng.integers(-cfg.max_dx, cfg.max_dx + 1))
        dy = int(rng.integers(-cfg.max_dy, cfg.max_dy + 1))
        data, occ = translate(data, occ, dx, dy)
    if rng.random() < cfg.reflect_p:
        flip_x, flip_y = rng.random(2) < 0.5
        data, occ = reflect(data, occ, bool(flip_x), bool(flip_y))
    if rng.random() < cfg.rotate_p:
        data, occ = rotate90(data, occ, int(rng.integers(4)))
    if rng.random() < cfg.blackout_p:
        _check_window(cfg.blackout_size, occ)
        data, occ = blackout(data, occ, int(rng.integers(kx)), int(rng.integers(ky)), cfg.blackout_size)
    if rng.random() < cfg.shuffle_p and cfg.shuffle_windows:
        s = cfg.shuffle_size
        _check_window(s, occ)
        n = cfg.shuffle_windows
        corners = np.stack([rng.integers(kx - s + 1, size=n), rng.integers(ky - s + 1, size=n)], axis=1)
        perms = [rng.permutation(s * s) for _ in range(n)]
        data, occ = local_shuffle(data, occ, corners, perms, s)
    # one draw per channel, always consumed so the stream does not depend on p
    pick = rng.random(data.shape[2]) < cfg.channel_brightness_p
    factors = rng.uniform(*cfg.channel_brightness_range, size=data.shape[2])
    if pick.any():
        data, occ = scale_channels(data, occ, np.where(pick, factors, 1.0))
    if rng.random() < cfg.global_brightness_p:
        f = rng.uniform(*cfg.global_brightness_range)
        data, occ = scale_channels(data, occ, np.full(data.shape[2], f))
    if rng.random() < cfg.delete_p and cfg.delete_count:
        n = min(cfg.delete_count, kx * ky)
        data, occ = delete_pixels(data, occ, rng.choice(kx * ky, size=n, replace=False))
    return data, occ


def augment(img: C2GImage, cfg: AugmentConfig, rng: np.random.Generator | int | None = None) -> C2GImage:
    """Return an augmented copy of ``img``.

    ``rng`` may be a generator or a seed; when omitted ``cfg.rng_seed`` is used.
    """
    if rng is None:
        rng = cfg.rng_seed
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    data, occ = augment_arrays(img.data, img.occupancy, cfg, rng)
    return img.with_arrays(data, occ)
