"""Permeability rasters: text I/O and synthetic high-contrast generators.

Raster row ``j`` holds the cells with y index ``j`` counted from the bottom,
so ``values.ravel()`` matches the fine-grid cell numbering.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, PermeabilityParseError

KINDS = ("inclusions", "channels", "fractures", "lognormal")
FORMATS = ("auto", "matrix", "column")


@dataclass(frozen=True)
class PermeabilityRaster:
    values: np.ndarray  # (height, width)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ConfigurationError("permeability raster must be two-dimensional")
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise ConfigurationError("permeability must be finite and positive")
        v = np.ascontiguousarray(v)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def cells(self) -> np.ndarray:
        return self.values.ravel()

    @property
    def contrast(self) -> float:
        return float(self.values.max() / self.values.min())

    def check_shape(self, nx: int, ny: int) -> None:
        if (self.width, self.height) != (nx, ny):
            raise ConfigurationError(f"permeability is {self.width}x{self.height}, grid is {nx}x{ny}")

    def hash(self) -> str:
        return field_hash(self.values)


def field_hash(values) -> str:
    """sha256 of the float64 bytes in row-major order."""
    return hashlib.sha256(np.ascontiguousarray(values, dtype=np.float64).tobytes()).hexdigest()


def _parse_number(tok: str, loc):
    try:
        v = float(tok)
    except ValueError:
        raise PermeabilityParseError(f"not a number {tok!r} at {loc}", loc) from None
    if not np.isfinite(v) or v <= 0:
        raise PermeabilityParseError(f"nonpositive or non-finite permeability {tok} at {loc}", loc)
    return v


def _tokens(line: str) -> list:
    return line.replace(",", " ").split()


def load_perm(path, fmt: str = "auto", shape=None) -> PermeabilityRaster:
    """Read a raster.

    ``matrix``: one raster row per line, values separated by blanks or commas.
    ``column``: a header line ``width height`` then one value per line.
    ``auto`` picks ``column`` when the first line holds two integers and the
    rest one value each.  ``shape=(width, height)`` is checked when given.
    Error locations are 0-based ``(row, col)`` raster positions.
    """
    if fmt not in FORMATS:
        raise ConfigurationError(f"unknown format {fmt!r}; choose from {FORMATS}")
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise PermeabilityParseError(f"{path}: empty file")
    if fmt == "auto":
        head = _tokens(lines[0])
        is_col = len(head) == 2 and all(t.isdigit() for t in head) and all(len(_tokens(x)) == 1 for x in lines[1:])
        fmt = "column" if is_col and len(lines) > 1 else "matrix"
    if fmt == "column":
        head = _tokens(lines[0])
        if len(head) != 2:
            raise PermeabilityParseError(f"{path}: header must be 'width height'", (0, 0))
        w, h = int(head[0]), int(head[1])
        body = lines[1:]
        if len(body) != w * h:
            raise PermeabilityParseError(f"{path}: header says {w}x{h} = {w * h} values, found {len(body)}")
        vals = [_parse_number(t.strip(), (n // w, n % w)) for n, t in enumerate(body)]
        arr = np.array(vals).reshape(h, w)
    else:
        rows = [[_parse_number(t, (r, c)) for c, t in enumerate(_tokens(line))] for r, line in enumerate(lines)]
        widths = {len(r) for r in rows}
        if len(widths) != 1:
            raise PermeabilityParseError(f"{path}: rows have different lengths {sorted(widths)}")
        arr = np.array(rows)
    raster = PermeabilityRaster(arr)
    if shape is not None:
        raster.check_shape(*shape)
    return raster


def save_perm(raster: PermeabilityRaster, path, fmt: str = "matrix", log10: bool = False) -> None:
    """Write with 17 significant digits (lossless); ``log10`` writes log10 values for plotting."""
    v = np.log10(raster.values) if log10 else raster.values
    with open(path, "w") as fh:
        if fmt == "column":
            fh.write(f"{raster.width} {raster.height}\n")
            for x in v.ravel():
                fh.write(f"{x:.17g}\n")
        elif fmt == "matrix":
            for row in v:
                fh.write(" ".join(f"{x:.17g}" for x in row) + "\n")
        else:
            raise ConfigurationError(f"unknown format {fmt!r}")


def _inclusions(rng, nx, ny, mask, count=None):
    count = count or max(1, nx * ny // 250)
    yy, xx = np.mgrid[0:ny, 0:nx]
    for _ in range(count):
        cx, cy = rng.uniform(0, nx), rng.uniform(0, ny)
        r = rng.uniform(0.01, 0.035) * min(nx, ny) + 0.5
        mask |= (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= r * r
    return mask


def _channels(rng, nx, ny, mask, count=None):
    count = count or max(1, ny // 12)
    x = np.arange(nx) + 0.5
    yy = np.arange(ny)[:, None] + 0.5
    for _ in range(count):
        y0 = rng.uniform(0.1, 0.9) * ny
        amp = rng.uniform(0.0, 0.08) * ny
        waves = rng.uniform(0.5, 2.0)
        phase = rng.uniform(0, 2 * np.pi)
        width = max(1.0, rng.uniform(0.01, 0.03) * ny)
        centre = y0 + amp * np.sin(2 * np.pi * waves * x / nx + phase)
        mask |= np.abs(yy - centre[None, :]) <= width / 2
    return mask


def _fractures(rng, nx, ny, mask, count=None):
    count = count or max(2, (nx + ny) // 10)
    for _ in range(count):
        p = np.array([rng.uniform(0, nx), rng.uniform(0, ny)])
        angle = rng.uniform(0, np.pi)
        for _ in range(rng.integers(2, 5)):
            length = rng.uniform(0.1, 0.3) * max(nx, ny)
            angle += rng.normal(0, 0.4)
            d = np.array([np.cos(angle), np.sin(angle)])
            for t in np.linspace(0, length, int(4 * length) + 2):
                i, j = (p + t * d).astype(int)
                if 0 <= i < nx and 0 <= j < ny:
                    mask[j, i] = True
            p = p + length * d
    return mask


def _lognormal(rng, nx, ny, corr=0.08):
    z = rng.standard_normal((ny, nx))
    ky = np.fft.fftfreq(ny)[:, None]
    kx = np.fft.fftfreq(nx)[None, :]
    filt = np.exp(-0.5 * (kx**2 + ky**2) * (2 * np.pi * corr * max(nx, ny)) ** 2)
    f = np.real(np.fft.ifft2(np.fft.fft2(z) * filt))
    return (f - f.min()) / (f.max() - f.min())


def gen_perm(kind: str, nx: int, ny: int = None, contrast: float = 1e4, seed: int = 0) -> PermeabilityRaster:
    """Synthetic field with background 1 and features of value ``contrast``.

    ``lognormal`` instead spans [1, contrast] smoothly in log scale.
    """
    ny = nx if ny is None else ny
    if kind not in KINDS:
        raise ConfigurationError(f"unknown kind {kind!r}; choose from {KINDS}")
    if contrast < 1:
        raise ConfigurationError("contrast must be >= 1")
    if nx < 1 or ny < 1:
        raise ConfigurationError("raster size must be positive")
    rng = np.random.default_rng(seed)
    if kind == "lognormal":
        return PermeabilityRaster(np.power(float(contrast), _lognormal(rng, nx, ny)))
    mask = {"inclusions": _inclusions, "channels": _channels, "fractures": _fractures}[kind](
        rng, nx, ny, np.zeros((ny, nx), bool)
    )
    if nx * ny > 1:
        # keep at least one cell of each value so max/min equals the contrast
        if not mask.any():
            mask[ny // 2, nx // 2] = True
        if mask.all():
            mask[0, 0] = False
    return PermeabilityRaster(np.where(mask, float(contrast), 1.0))


BUNDLED_SEEDS = (0, 100)


def bundled_field(n: int = 100, contrast: float = 1e3) -> PermeabilityRaster:
    """High-contrast test field: sinuous channels plus circular inclusions."""
    ch = gen_perm("channels", n, n, contrast, BUNDLED_SEEDS[0]).values
    inc = gen_perm("inclusions", n, n, contrast, BUNDLED_SEEDS[1]).values
    return PermeabilityRaster(np.maximum(ch, inc))
