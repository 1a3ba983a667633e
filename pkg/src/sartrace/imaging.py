"""Forward SAR rendering: ray fans, mapping projection, range binning.

The platform moves on a straight line from start_pos to end_pos;
each of the num_azimuth sample positions emits a fan of rays spanning
incidence angles [alpha0, alpha1] in the plane perpendicular to the
track (angles measured from the world vertical, side-looking toward
track x down).  Each of the num_angles fan bins carries spua stratified
jittered subsamples, so a ray's quadrature weight is
(alpha1 - alpha0) / num_angles / spua.

Hit points are transformed into the mapping frame (U along track,
R along the fan-top ray, V = R x U) and their R coordinates are binned
at the range resolution, descending from the scene-wide maximum:

    bin = floor((range_origin - H_r) / range_res)

Rows are azimuth samples; every row shares the common range window so
pixels are comparable across the image.  Bin assignment is treated as
non-differentiable: parameter gradients flow through the per-hit
intensities only (geometry stays fixed).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from sartrace.accel import Bvh, intersect_rays
from sartrace.scatter import WaveConfig, eval_bsdf_batch
from sartrace.scene import Mesh, ParamMap, interpolate_at_hits

_WORLD_UP = np.array([0.0, 0.0, 1.0])
_MAX_RANGE_BINS = 10_000_000


@dataclass(frozen=True)
class RadarConfig:
    """Observation description for one rendered image."""

    wave: WaveConfig
    start_pos: np.ndarray        # (3,) platform position at the first row
    end_pos: np.ndarray          # (3,) platform position at the last row
    num_azimuth: int
    alpha0: float                # incidence fan limits, rad from vertical
    alpha1: float
    num_angles: int              # fan bins between alpha0 and alpha1
    range_res: float             # m
    azimuth_res: float           # m
    spua: int = 1                # Monte Carlo subsamples per fan bin
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "start_pos", np.asarray(self.start_pos, dtype=np.float64))
        object.__setattr__(self, "end_pos", np.asarray(self.end_pos, dtype=np.float64))
        if self.start_pos.shape != (3,) or self.end_pos.shape != (3,):
            raise ValueError("start_pos and end_pos must be 3-vectors")
        if not (0.0 <= self.alpha0 < self.alpha1 < math.pi / 2):
            raise ValueError("need 0 <= alpha0 < alpha1 < pi/2")
        if self.range_res <= 0 or self.azimuth_res <= 0:
            raise ValueError("resolutions must be positive")
        if self.spua < 1 or self.num_azimuth < 1 or self.num_angles < 1:
            raise ValueError("spua, num_azimuth and num_angles must be >= 1")
        track = self.end_pos - self.start_pos
        if np.linalg.norm(track) == 0:
            raise ValueError("start_pos and end_pos must differ")
        if np.linalg.norm(np.cross(track, _WORLD_UP)) < 1e-12 * np.linalg.norm(track):
            raise ValueError("vertical trajectories are not supported")

    @property
    def track_dir(self) -> np.ndarray:
        t = self.end_pos - self.start_pos
        return t / np.linalg.norm(t)

    @property
    def side_dir(self) -> np.ndarray:
        s = np.cross(self.track_dir, _WORLD_UP)
        return s / np.linalg.norm(s)

    def platform_positions(self) -> np.ndarray:
        return np.linspace(self.start_pos, self.end_pos, self.num_azimuth)

    def ray_directions(self, alphas) -> np.ndarray:
        """Unit directions for incidence angles (rad from vertical)."""
        alphas = np.atleast_1d(np.asarray(alphas, dtype=np.float64))
        return (np.sin(alphas)[:, None] * self.side_dir[None, :]
                - np.cos(alphas)[:, None] * _WORLD_UP[None, :])


@dataclass(frozen=True)
class MapFrame:
    """World -> mapping-plane affine transform p_m = R p_w + T."""

    rotation: np.ndarray     # (3, 3), orthonormal
    translation: np.ndarray  # (3,)

    @staticmethod
    def from_angles(gamma: float, beta: float, origin=(0.0, 0.0, 0.0)) -> "MapFrame":
        """Frame from relative pitch gamma and azimuth beta.

        gamma is the depression angle of the fan-top ray, beta the
        in-plane azimuth; (0, 0) is the canonical side-looking pose
        with flight along -X and the top ray along -Y.
        """
        cg, sg = math.cos(gamma), math.sin(gamma)
        cb, sb = math.cos(beta), math.sin(beta)
        rot = np.array([
            [-cb, -cg * sb, -sg * sb],
            [0.0, sg, -cg],
            [sb, -cg * cb, -sg * cb],
        ])
        origin = np.asarray(origin, dtype=np.float64)
        return MapFrame(rotation=rot, translation=-rot @ origin)

    @staticmethod
    def from_radar(radar: RadarConfig) -> "MapFrame":
        """Frame anchored at the first platform position.

        R follows the fan-top ray (the alpha1 edge); U is the track
        direction orthogonalized against R and negated, matching the
        sign convention of from_angles (whose canonical pose has U
        antiparallel to the flight); V = R x U.  Range binning only
        reads the R coordinate, so the U/V orientation is cosmetic.
        """
        r_axis = radar.ray_directions(radar.alpha1)[0]
        track = radar.track_dir
        u_axis = track - np.dot(track, r_axis) * r_axis
        n = np.linalg.norm(u_axis)
        if n < 1e-12:
            raise ValueError("track direction is parallel to the fan-top ray")
        u_axis = -u_axis / n
        v_axis = np.cross(r_axis, u_axis)
        rot = np.stack([u_axis, v_axis, r_axis])
        return MapFrame(rotation=rot, translation=-rot @ radar.start_pos)

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation


def world_to_map(point, frame: MapFrame) -> np.ndarray:
    return frame.apply(np.asarray(point, dtype=np.float64))


@dataclass(frozen=True)
class RayFan:
    """One azimuth sample's ray batch with quadrature weights."""

    origins: np.ndarray      # (n, 3)
    directions: np.ndarray   # (n, 3) unit
    weights: np.ndarray      # (n,) rad per ray: bin width / spua
    angles: np.ndarray       # (n,) incidence angles, rad


def generate_rays(radar: RadarConfig, azimuth_index: int) -> RayFan:
    """Stratified jittered incidence fan at one azimuth position.

    Reproducible: the jitter stream is seeded by (seed, azimuth_index).
    With spua = 1 jitter is disabled and rays sit at bin centers.
    """
    if not 0 <= azimuth_index < radar.num_azimuth:
        raise ValueError(f"azimuth index {azimuth_index} out of range")
    n_bins, spua = radar.num_angles, radar.spua
    width = (radar.alpha1 - radar.alpha0) / n_bins
    if spua == 1:
        offsets = np.full((n_bins, 1), 0.5)
    else:
        rng = np.random.default_rng((radar.seed, azimuth_index))
        offsets = (np.arange(spua)[None, :] + rng.random((n_bins, spua))) / spua
    angles = (radar.alpha0 + width * (np.arange(n_bins)[:, None] + offsets)).ravel()
    directions = radar.ray_directions(angles)
    pos = radar.platform_positions()[azimuth_index]
    origins = np.broadcast_to(pos, directions.shape).copy()
    weights = np.full(angles.shape, width / spua)
    return RayFan(origins=origins, directions=directions, weights=weights, angles=angles)


def bin_ranges_fast(ranges, intensities, range_res: float, range_origin: float,
                    num_bins: int | None = None) -> np.ndarray:
    """Sorted segment-sum range binning of per-hit intensities.

    Ranges are sorted descending (stable), bins assigned by
    floor((range_origin - r) / range_res), and equal bins summed
    left-to-right in sorted order.  Matches a naive per-hit scatter-add
    using the same floor and order.
    """
    ranges = np.asarray(ranges, dtype=np.float64)
    intensities = np.asarray(intensities, dtype=np.float64)
    if ranges.shape != intensities.shape:
        raise ValueError("ranges and intensities must have the same length")
    if range_res <= 0:
        raise ValueError("range_res must be positive")
    if ranges.size == 0:
        return np.zeros(num_bins if num_bins else 0)
    order = np.argsort(-ranges, kind="stable")
    bins = np.floor((range_origin - ranges[order]) / range_res).astype(np.int64)
    if bins[0] < 0:
        raise ValueError("range beyond range_origin (negative bin)")
    width = int(bins[-1]) + 1
    if num_bins is None:
        num_bins = width
    elif width > num_bins:
        raise ValueError(f"bin {width - 1} outside profile of {num_bins} bins")
    starts = np.r_[0, np.flatnonzero(np.diff(bins)) + 1]
    sums = np.add.reduceat(intensities[order], starts)
    profile = np.zeros(num_bins)
    profile[bins[starts]] = sums
    return profile


def range_bin_of(ranges, range_res: float, range_origin: float) -> np.ndarray:
    """Bin index per hit, same floor convention as bin_ranges_fast."""
    return np.floor((range_origin - np.asarray(ranges, dtype=np.float64))
                    / range_res).astype(np.int64)


def vertex_range_window(mesh: Mesh, radar: RadarConfig) -> tuple[float, int]:
    """Conservative (range_origin, num_bins) covering every possible hit.

    Hit points are convex combinations of facet vertices, so the vertex
    extremes along the range axis bound all hit coordinates.  Use as the
    range_window argument of render when images from several runs must
    share a pixel grid.
    """
    frame = MapFrame.from_radar(radar)
    h_v = frame.apply(mesh.vertices)[:, 2]
    origin = float(h_v.max())
    num_bins = int(math.floor((origin - float(h_v.min())) / radar.range_res)) + 1
    return origin, num_bins


@dataclass(frozen=True)
class SarImage:
    """Azimuth x range intensity raster plus imaging metadata."""

    intensities: np.ndarray   # (num_azimuth, num_range_bins), >= 0
    radar: RadarConfig
    range_origin: float       # map-frame R coordinate of bin 0
    range_res: float
    azimuth_res: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.intensities.shape

    @property
    def num_range_bins(self) -> int:
        return self.intensities.shape[1]


@dataclass
class HitLedger:
    """Per-hit record of everything backward needs.

    Entries are stored in deterministic row-major hit order; weights are
    the angular quadrature weights from the generating fan.
    """

    image_shape: tuple[int, int]
    row: np.ndarray = field(repr=False)         # (n,) azimuth row
    range_bin: np.ndarray = field(repr=False)   # (n,)
    facet_id: np.ndarray = field(repr=False)    # (n,)
    m1: np.ndarray = field(repr=False)
    m2: np.ndarray = field(repr=False)
    weight: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)
    dsigma: np.ndarray = field(repr=False)      # (n, 4) partials wrt h, l, eps_r, tau

    @property
    def num_entries(self) -> int:
        return self.row.shape[0]


def _trace_row(mesh, values, radar, frame, bvh, bsdf_fn, n):
    fan = generate_rays(radar, n)
    fid, t, m1, m2, cos_t = intersect_rays(mesh, fan.origins, fan.directions, bvh=bvh)
    sel = np.nonzero(fid >= 0)[0]
    if sel.size == 0:
        return None
    theta = np.arccos(np.clip(cos_t[sel], 0.0, 1.0))
    vals = interpolate_at_hits(mesh, values, fid[sel], m1[sel], m2[sel])
    sigma, grads = bsdf_fn(theta, vals, radar.wave)
    points = fan.origins[sel] + t[sel, None] * fan.directions[sel]
    h_r = frame.apply(points)[:, 2]
    return {
        "facet_id": fid[sel], "m1": m1[sel], "m2": m2[sel],
        "weight": fan.weights[sel], "sigma": sigma, "dsigma": grads, "h_r": h_r,
    }


def render(mesh: Mesh, params: ParamMap, radar: RadarConfig, bvh: Bvh | None = None,
           workers: int = 1, bsdf_fn=None, range_window: tuple[float, int] | None = None):
    """Render one SAR intensity image and the hit ledger behind it.

    Azimuth rows are independent work units; with workers > 1 they are
    traced on a thread pool.  Per-row jitter streams are seeded by
    (seed, row), so the result is identical regardless of worker count.
    bsdf_fn defaults to the two-scale model and can be overridden for
    diagnostics (signature: (theta, values, wave) -> (sigma, grads)).
    By default the range window is [min, max] of the hit coordinates;
    pass range_window=(origin, num_bins) to pin the pixel grid across
    runs (see vertex_range_window).
    """
    if params.num_vertices != mesh.num_vertices:
        raise ValueError("parameter table size does not match the mesh")
    bsdf_fn = bsdf_fn or eval_bsdf_batch
    frame = MapFrame.from_radar(radar)
    rows = radar.num_azimuth

    job = lambda n: _trace_row(mesh, params.values, radar, frame, bvh, bsdf_fn, n)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            traced = list(pool.map(job, range(rows)))
    else:
        traced = [job(n) for n in range(rows)]

    hit_rows = [r for r in traced if r is not None]
    if not hit_rows:
        origin, num_bins = range_window or vertex_range_window(mesh, radar)
        image = np.zeros((rows, num_bins))
        empty = np.zeros(0)
        ledger = HitLedger(
            image_shape=(rows, num_bins),
            row=np.zeros(0, dtype=np.int64), range_bin=np.zeros(0, dtype=np.int64),
            facet_id=np.zeros(0, dtype=np.int64), m1=empty, m2=empty,
            weight=empty.copy(), sigma=empty.copy(), dsigma=np.zeros((0, 4)))
        return (SarImage(intensities=image, radar=radar, range_origin=origin,
                         range_res=radar.range_res, azimuth_res=radar.azimuth_res),
                ledger)

    if range_window is not None:
        origin, num_bins = range_window
    else:
        origin = max(float(r["h_r"].max()) for r in hit_rows)
        lowest = min(float(r["h_r"].min()) for r in hit_rows)
        num_bins = int(math.floor((origin - lowest) / radar.range_res)) + 1
    if num_bins > _MAX_RANGE_BINS:
        raise ValueError(
            f"range window spans {num_bins} bins at range_res={radar.range_res}")

    image = np.zeros((rows, num_bins))
    for n, r in enumerate(traced):
        if r is None:
            continue
        image[n] = bin_ranges_fast(r["h_r"], r["weight"] * r["sigma"],
                                   radar.range_res, origin, num_bins)
        r["range_bin"] = range_bin_of(r["h_r"], radar.range_res, origin)
        r["row"] = np.full(r["h_r"].shape, n, dtype=np.int64)

    ledger = HitLedger(
        image_shape=(rows, num_bins),
        row=np.concatenate([r["row"] for r in hit_rows]),
        range_bin=np.concatenate([r["range_bin"] for r in hit_rows]),
        facet_id=np.concatenate([r["facet_id"] for r in hit_rows]),
        m1=np.concatenate([r["m1"] for r in hit_rows]),
        m2=np.concatenate([r["m2"] for r in hit_rows]),
        weight=np.concatenate([r["weight"] for r in hit_rows]),
        sigma=np.concatenate([r["sigma"] for r in hit_rows]),
        dsigma=np.concatenate([r["dsigma"] for r in hit_rows]),
    )
    sar = SarImage(intensities=image, radar=radar, range_origin=origin,
                   range_res=radar.range_res, azimuth_res=radar.azimuth_res)
    return sar, ledger


# ----------------------------------------------------------------------
# image file formats

def write_pgm(image: SarImage, path) -> None:
    """16-bit max-normalized binary PGM for quick viewing."""
    data = image.intensities
    peak = data.max()
    scaled = np.zeros_like(data) if peak <= 0 else data / peak
    pixels = np.round(scaled * 65535.0).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n65535\n".encode("ascii"))
        fh.write(pixels.tobytes())


def write_raster(image: SarImage, path) -> None:
    """Raw raster: one ASCII header line, then row-major float32 LE."""
    rows, cols = image.intensities.shape
    header = (f"SARF1 {rows} {cols} {image.azimuth_res!r} {image.range_res!r} "
              f"{image.range_origin!r}\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(image.intensities.astype("<f4").tobytes())


def read_raster(path):
    """Read a raster written by write_raster.

    Returns (intensities float64 (rows, cols), header dict).
    """
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").split()
        if len(header) != 6 or header[0] != "SARF1":
            raise ValueError(f"{path}: not a SARF1 raster")
        rows, cols = int(header[1]), int(header[2])
        meta = {
            "azimuth_res": float(header[3]),
            "range_res": float(header[4]),
            "range_origin": float(header[5]),
        }
        raw = fh.read(rows * cols * 4)
        if len(raw) != rows * cols * 4:
            raise ValueError(f"{path}: truncated raster payload")
        data = np.frombuffer(raw, dtype="<f4").reshape(rows, cols).astype(np.float64)
    return data, meta


def write_image_csv(image: SarImage, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in image.intensities:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
