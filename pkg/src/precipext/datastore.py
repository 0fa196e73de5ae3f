"""Grid geometry, space-time precipitation cubes, cube file formats and preprocessing.

A cube holds one value per (time, site).  Missing entries are NaN; sites outside
``site_mask`` are treated as absent by every estimator in the package.  On the
Laplace scale a dry cell (zero precipitation) is stored as ``-inf`` so that it
orders below every wet cell without being confused with a missing one.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

CUBE_KINDS = ("precip", "intensity", "occurrence", "laplace")
_TEXT_MAGIC = "# precipext-cube v1"
_BIN_MAGIC = b"PXCUBE01"


class CubeFormatError(ValueError):
    """Raised when a cube file or cube contents violate the format contract."""


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GridGeometry:
    """Regular grid of square cells; site ``i`` sits at row ``i // nx``, column ``i % nx``."""

    nx: int
    ny: int
    cell_size: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if int(self.nx) < 1 or int(self.ny) < 1:
            raise ValueError(f"grid needs nx, ny >= 1, got {self.nx}x{self.ny}")
        if not self.cell_size > 0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")
        object.__setattr__(self, "nx", int(self.nx))
        object.__setattr__(self, "ny", int(self.ny))
        object.__setattr__(self, "cell_size", float(self.cell_size))
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def n_sites(self) -> int:
        return self.nx * self.ny

    @property
    def cell_area(self) -> float:
        return self.cell_size**2

    def index(self, row, col):
        row, col = np.asarray(row), np.asarray(col)
        if np.any((row < 0) | (row >= self.ny) | (col < 0) | (col >= self.nx)):
            raise IndexError("row/col outside grid")
        return row * self.nx + col

    def rowcol(self, index):
        index = np.asarray(index)
        if np.any((index < 0) | (index >= self.n_sites)):
            raise IndexError("site index outside grid")
        return index // self.nx, index % self.nx

    @property
    def coords(self) -> np.ndarray:
        """Cell-centre coordinates in km, shape (n_sites, 2)."""
        rows, cols = np.divmod(np.arange(self.n_sites), self.nx)
        x = self.origin[0] + (cols + 0.5) * self.cell_size
        y = self.origin[1] + (rows + 0.5) * self.cell_size
        return np.column_stack([x, y])

    def distances_from(self, site: int) -> np.ndarray:
        c = self.coords
        return np.sqrt(((c - c[site]) ** 2).sum(axis=1))

    def distance_matrix(self) -> np.ndarray:
        c = self.coords
        dx = c[:, None, 0] - c[None, :, 0]
        dy = c[:, None, 1] - c[None, :, 1]
        return np.sqrt(dx * dx + dy * dy)

    def nearest_site(self, x: float, y: float) -> int:
        c = self.coords
        return int(np.argmin((c[:, 0] - x) ** 2 + (c[:, 1] - y) ** 2))

    def neighbors4(self) -> np.ndarray:
        """(n_sites, 4) indices of the rook neighbours, -1 where the grid ends."""
        rows, cols = np.divmod(np.arange(self.n_sites), self.nx)
        out = np.full((self.n_sites, 4), -1, dtype=np.int64)
        for k, (dr, dc) in enumerate(((-1, 0), (1, 0), (0, -1), (0, 1))):
            r, c = rows + dr, cols + dc
            ok = (r >= 0) & (r < self.ny) & (c >= 0) & (c < self.nx)
            out[ok, k] = r[ok] * self.nx + c[ok]
        return out

    def subgrid(self, stride: int) -> np.ndarray:
        """Site indices on the every-``stride``-th row and column lattice."""
        rows, cols = np.divmod(np.arange(self.n_sites), self.nx)
        return np.flatnonzero((rows % stride == 0) & (cols % stride == 0))


@dataclass(frozen=True, eq=False)
class PrecipCube:
    """Space-time grid of hourly values.

    ``hours`` is the strictly increasing time axis, ``days`` and ``months`` tag
    each time.  ``values`` has shape (n_times, n_sites); NaN marks a missing entry.
    """

    geometry: GridGeometry
    hours: np.ndarray
    days: np.ndarray
    months: np.ndarray
    values: np.ndarray
    site_mask: np.ndarray = None
    kind: str = "precip"

    def __post_init__(self):
        g = self.geometry
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.ndim != 2 or values.shape[1] != g.n_sites:
            raise CubeFormatError(f"values must have shape (n_times, {g.n_sites}), got {values.shape}")
        n_t = values.shape[0]
        hours = np.asarray(self.hours, dtype=np.int64)
        days = np.asarray(self.days, dtype=np.int64)
        months = np.asarray(self.months, dtype=np.int64)
        if not (hours.shape == days.shape == months.shape == (n_t,)):
            raise CubeFormatError("time axis arrays must match the number of value rows")
        if n_t > 1 and np.any(np.diff(hours) <= 0):
            bad = int(np.flatnonzero(np.diff(hours) <= 0)[0]) + 1
            raise CubeFormatError(f"time axis not strictly increasing at time row {bad}")
        if self.kind not in CUBE_KINDS:
            raise CubeFormatError(f"unknown cube kind {self.kind!r}")
        mask = np.ones(g.n_sites, bool) if self.site_mask is None else np.asarray(self.site_mask, bool)
        if mask.shape != (g.n_sites,):
            raise CubeFormatError("site_mask must have one entry per site")
        values[:, ~mask] = np.nan
        if self.kind != "laplace":
            ok = np.isnan(values) | (np.isfinite(values) & (values >= 0))
            if not ok.all():
                t, s = np.argwhere(~ok)[0]
                raise CubeFormatError(
                    f"invalid value {float(values[t, s])!r} at time row {t}, site {s} (must be finite and >= 0)"
                )
        else:
            ok = ~np.isposinf(values)
            if not ok.all():
                t, s = np.argwhere(~ok)[0]
                raise CubeFormatError(f"+inf on the Laplace scale at time row {t}, site {s}")
        object.__setattr__(self, "values", _frozen(values, np.float64))
        object.__setattr__(self, "hours", _frozen(hours, np.int64))
        object.__setattr__(self, "days", _frozen(days, np.int64))
        object.__setattr__(self, "months", _frozen(months, np.int64))
        object.__setattr__(self, "site_mask", _frozen(mask, bool))

    @property
    def n_times(self) -> int:
        return self.values.shape[0]

    @property
    def n_sites(self) -> int:
        return self.geometry.n_sites

    def observed(self) -> np.ndarray:
        """Boolean (n_times, n_sites) array of usable entries."""
        return ~np.isnan(self.values) & self.site_mask[None, :]

    def with_values(self, values, kind: str | None = None, site_mask=None) -> "PrecipCube":
        return replace(
            self,
            values=values,
            kind=self.kind if kind is None else kind,
            site_mask=self.site_mask if site_mask is None else site_mask,
        )

    def select_times(self, keep) -> "PrecipCube":
        keep = np.asarray(keep)
        return replace(
            self,
            hours=self.hours[keep],
            days=self.days[keep],
            months=self.months[keep],
            values=self.values[keep],
        )

    def equals(self, other: "PrecipCube") -> bool:
        """Bitwise equality of axes and values (NaN == NaN)."""
        return (
            self.geometry == other.geometry
            and self.kind == other.kind
            and np.array_equal(self.hours, other.hours)
            and np.array_equal(self.days, other.days)
            and np.array_equal(self.months, other.months)
            and np.array_equal(self.site_mask, other.site_mask)
            and self.values.tobytes() == other.values.tobytes()
        )


# ---------------------------------------------------------------------------
# polygons


@dataclass(frozen=True, eq=False)
class CatchmentPolygon:
    """Closed planar polygon in km.  Points on the boundary count as inside."""

    vertices: np.ndarray = field(default=None)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64, copy=True)
        if v.ndim != 2 or v.shape[1] != 2:
            raise ValueError("polygon vertices must be an (m, 2) array")
        if len(v) > 1 and np.allclose(v[0], v[-1]):
            v = v[:-1]
        if len(v) < 3:
            raise ValueError("polygon needs at least 3 distinct vertices")
        if _self_intersects(v):
            raise ValueError("polygon ring is self-intersecting")
        object.__setattr__(self, "vertices", _frozen(v, np.float64))

    @classmethod
    def rectangle(cls, x0, y0, x1, y1) -> "CatchmentPolygon":
        return cls([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])

    @classmethod
    def from_text(cls, path) -> "CatchmentPolygon":
        """Read one ``x,y`` (or whitespace separated) vertex per line; ``#`` starts a comment."""
        pts = []
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 2:
                raise ValueError(f"bad polygon vertex line: {line!r}")
            pts.append([float(parts[0]), float(parts[1])])
        return cls(pts)

    def to_text(self, path) -> None:
        Path(path).write_text("".join(f"{x!r},{y!r}\n" for x, y in self.vertices.tolist()))

    def contains(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        x, y = pts[:, 0], pts[:, 1]
        v = self.vertices
        inside = np.zeros(len(pts), bool)
        on_edge = np.zeros(len(pts), bool)
        for (xa, ya), (xb, yb) in zip(v, np.roll(v, -1, axis=0)):
            cross = (xb - xa) * (y - ya) - (yb - ya) * (x - xa)
            scale = max(abs(xb - xa), abs(yb - ya), 1.0)
            within = (
                (np.minimum(xa, xb) - 1e-12 <= x)
                & (x <= np.maximum(xa, xb) + 1e-12)
                & (np.minimum(ya, yb) - 1e-12 <= y)
                & (y <= np.maximum(ya, yb) + 1e-12)
            )
            on_edge |= within & (np.abs(cross) <= 1e-12 * scale * scale)
            crosses = (ya > y) != (yb > y)
            with np.errstate(divide="ignore", invalid="ignore"):
                xint = xa + (y - ya) * (xb - xa) / (yb - ya)
            inside ^= crosses & (x < xint)
        return inside | on_edge

    def site_mask(self, geometry: GridGeometry) -> np.ndarray:
        return self.contains(geometry.coords)


def _segments_intersect(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    def on_seg(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])

    d1, d2 = orient(p3, p4, p1), orient(p3, p4, p2)
    d3, d4 = orient(p1, p2, p3), orient(p1, p2, p4)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 * d2 < 0 and d3 * d4 < 0:
        return True
    return (
        (d1 == 0 and on_seg(p3, p4, p1))
        or (d2 == 0 and on_seg(p3, p4, p2))
        or (d3 == 0 and on_seg(p1, p2, p3))
        or (d4 == 0 and on_seg(p1, p2, p4))
    )


def _self_intersects(v: np.ndarray) -> bool:
    m = len(v)
    edges = [(v[i], v[(i + 1) % m]) for i in range(m)]
    for i in range(m):
        for j in range(i + 1, m):
            if j == i + 1 or (i == 0 and j == m - 1):
                continue
            if _segments_intersect(*edges[i], *edges[j]):
                return True
    return False


# ---------------------------------------------------------------------------
# preprocessing


def preprocess(
    cube: PrecipCube,
    zero_floor: float = 0.1,
    exclusion_center: tuple[float, float] | None = None,
    exclusion_radius: float = 0.0,
) -> PrecipCube:
    """Round values below ``zero_floor`` down to zero and mask sites near ``exclusion_center``.

    The comparison is strict: a value equal to ``zero_floor`` is kept.  A site is masked
    when its centre lies within ``exclusion_radius`` km (inclusive) of the centre.
    """
    if zero_floor < 0:
        raise ValueError("zero_floor must be >= 0")
    if exclusion_radius < 0:
        raise ValueError("exclusion_radius must be >= 0")
    values = np.array(cube.values, copy=True)
    with np.errstate(invalid="ignore"):
        values[values < zero_floor] = 0.0
    mask = np.array(cube.site_mask, copy=True)
    if exclusion_center is not None and exclusion_radius > 0:
        c = cube.geometry.coords
        d = np.hypot(c[:, 0] - exclusion_center[0], c[:, 1] - exclusion_center[1])
        mask &= ~(d <= exclusion_radius)
    return cube.with_values(values, site_mask=mask)


def filter_months(cube: PrecipCube, months: Sequence[int] = (6, 7, 8)) -> PrecipCube:
    return cube.select_times(np.isin(cube.months, list(months)))


def split_intensity_occurrence(cube: PrecipCube) -> tuple[PrecipCube, PrecipCube]:
    """Return (intensity, occurrence): intensity is NaN where the cell is dry."""
    v = cube.values
    occ = np.where(np.isnan(v), np.nan, (v > 0).astype(np.float64))
    intensity = np.where(v > 0, v, np.nan)
    return cube.with_values(intensity, kind="intensity"), cube.with_values(occ, kind="occurrence")


def recombine(intensity: PrecipCube, occurrence: PrecipCube) -> PrecipCube:
    occ = occurrence.values
    v = np.where(occ == 1, intensity.values, np.where(occ == 0, 0.0, np.nan))
    return intensity.with_values(v, kind="precip")


def zero_proportion_table(cube: PrecipCube, thresholds: Sequence[float]) -> np.ndarray:
    """Proportion of usable values ``<= tau0`` at every time, one column per threshold.

    Times with no usable value get NaN.
    """
    thr = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(thr) < 0):
        raise ValueError("thresholds must be sorted ascending")
    v = np.where(cube.site_mask[None, :], cube.values, np.nan)
    n = np.sum(~np.isnan(v), axis=1).astype(np.float64)
    out = np.empty((cube.n_times, len(thr)))
    with np.errstate(invalid="ignore"):
        for k, t0 in enumerate(thr):
            out[:, k] = np.sum(v <= t0, axis=1) / n
    out[n == 0] = np.nan
    return out


# ---------------------------------------------------------------------------
# file formats


def write_cube(cube: PrecipCube, path, format: str = "binary-grid") -> None:
    path = Path(path)
    if format == "columnar-text":
        _write_text(cube, path)
    elif format == "binary-grid":
        _write_binary(cube, path)
    else:
        raise ValueError(f"unknown cube format {format!r}")


def load_cube(path, format: str | None = None) -> PrecipCube:
    """Read a cube written by :func:`write_cube`; ``format`` is sniffed when omitted."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if format is None:
        with open(path, "rb") as fh:
            format = "binary-grid" if fh.read(len(_BIN_MAGIC)) == _BIN_MAGIC else "columnar-text"
    if format == "columnar-text":
        return _read_text(path)
    if format == "binary-grid":
        return _read_binary(path)
    raise ValueError(f"unknown cube format {format!r}")


def _fmt(v: float) -> str:
    return "NA" if np.isnan(v) else repr(float(v))


def _write_text(cube: PrecipCube, path: Path) -> None:
    g = cube.geometry
    lines = [
        _TEXT_MAGIC,
        f"kind {cube.kind}",
        f"nx {g.nx}",
        f"ny {g.ny}",
        f"cell_size {g.cell_size!r}",
        f"origin {g.origin[0]!r} {g.origin[1]!r}",
        f"n_times {cube.n_times}",
        "site_mask " + "".join("1" if m else "0" for m in cube.site_mask),
        "columns hour day month site value",
    ]
    for t in range(cube.n_times):
        h, d, m = cube.hours[t], cube.days[t], cube.months[t]
        lines.extend(f"{h} {d} {m} {s} {_fmt(v)}" for s, v in enumerate(cube.values[t]))
    path.write_text("\n".join(lines) + "\n")


def _read_text(path: Path) -> PrecipCube:
    with open(path) as fh:
        raw = fh.read().splitlines()
    if not raw or raw[0].strip() != _TEXT_MAGIC:
        raise CubeFormatError(f"{path}: missing header line {_TEXT_MAGIC!r}")
    header = {}
    i = 1
    try:
        while not raw[i].startswith("columns"):
            key, _, rest = raw[i].partition(" ")
            header[key] = rest.strip()
            i += 1
        geometry = GridGeometry(
            int(header["nx"]),
            int(header["ny"]),
            float(header["cell_size"]),
            tuple(float(x) for x in header["origin"].split()),
        )
        n_times = int(header["n_times"])
        kind = header.get("kind", "precip")
        mask_str = header["site_mask"]
    except (KeyError, IndexError, ValueError) as exc:
        raise CubeFormatError(f"{path}: malformed header ({exc})") from exc
    if len(mask_str) != geometry.n_sites or set(mask_str) - {"0", "1"}:
        raise CubeFormatError(f"{path}: malformed site_mask")
    mask = np.array([c == "1" for c in mask_str])
    n = geometry.n_sites
    records = raw[i + 1 :]
    if len(records) != n_times * n:
        raise CubeFormatError(f"{path}: expected {n_times * n} records, found {len(records)}")
    hours = np.empty(n_times, np.int64)
    days = np.empty(n_times, np.int64)
    months = np.empty(n_times, np.int64)
    values = np.empty((n_times, n))
    for r, line in enumerate(records):
        t, s = divmod(r, n)
        parts = line.split()
        lineno = i + 2 + r
        if len(parts) != 5:
            raise CubeFormatError(f"{path}:{lineno}: expected 5 columns")
        h, d, m, site = (int(p) for p in parts[:4])
        if site != s:
            raise CubeFormatError(f"{path}:{lineno}: site {site} out of order (expected {s})")
        if s == 0:
            hours[t], days[t], months[t] = h, d, m
        elif (h, d, m) != (hours[t], days[t], months[t]):
            raise CubeFormatError(f"{path}:{lineno}: time fields differ within time block {t}")
        v = np.nan if parts[4] == "NA" else float(parts[4])
        if kind != "laplace" and not np.isnan(v) and not (v >= 0 and np.isfinite(v)):
            raise CubeFormatError(f"{path}:{lineno}: invalid value {parts[4]} at time row {t}, site {s}")
        values[t, s] = v
    if n_times > 1 and np.any(np.diff(hours) <= 0):
        bad = int(np.flatnonzero(np.diff(hours) <= 0)[0]) + 1
        raise CubeFormatError(f"{path}: time axis not strictly increasing at time row {bad}")
    return PrecipCube(geometry, hours, days, months, values, mask, kind)


_KIND_CODES = {k: i for i, k in enumerate(CUBE_KINDS)}
_HEADER = struct.Struct("<8sIIQdddB")


def _write_binary(cube: PrecipCube, path: Path) -> None:
    g = cube.geometry
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                _BIN_MAGIC, g.nx, g.ny, cube.n_times, g.cell_size, g.origin[0], g.origin[1],
                _KIND_CODES[cube.kind],
            )
        )
        fh.write(cube.site_mask.astype(np.uint8).tobytes())
        for arr in (cube.hours, cube.days, cube.months):
            fh.write(arr.astype("<i8").tobytes())
        fh.write(cube.values.astype("<f8").tobytes())


def _read_binary(path: Path) -> PrecipCube:
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise CubeFormatError(f"{path}: truncated header")
    magic, nx, ny, n_times, cell, x0, y0, kind_code = _HEADER.unpack_from(data)
    if magic != _BIN_MAGIC or kind_code >= len(CUBE_KINDS):
        raise CubeFormatError(f"{path}: malformed header")
    try:
        geometry = GridGeometry(nx, ny, cell, (x0, y0))
    except ValueError as exc:
        raise CubeFormatError(f"{path}: malformed header ({exc})") from exc
    n = geometry.n_sites
    expected = _HEADER.size + n + 3 * 8 * n_times + 8 * n_times * n
    if len(data) != expected:
        raise CubeFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    off = _HEADER.size
    mask = np.frombuffer(data, np.uint8, n, off).astype(bool)
    off += n
    axes = []
    for _ in range(3):
        axes.append(np.frombuffer(data, "<i8", n_times, off).astype(np.int64))
        off += 8 * n_times
    values = np.frombuffer(data, "<f8", n_times * n, off).reshape(n_times, n).astype(np.float64)
    kind = CUBE_KINDS[kind_code]
    if kind != "laplace":
        bad = ~(np.isnan(values) | (np.isfinite(values) & (values >= 0)))
        if bad.any():
            t, s = np.argwhere(bad)[0]
            raise CubeFormatError(f"{path}: invalid value {float(values[t, s])!r} at time row {t}, site {s}")
    return PrecipCube(geometry, axes[0], axes[1], axes[2], values, mask, kind)
