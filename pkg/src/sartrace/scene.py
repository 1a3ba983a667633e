"""Scene ingestion: triangle meshes and per-vertex scattering parameters.

Geometry is an indexed triangle mesh in meters.  Each vertex carries a
four-channel scattering parameter record (h, l, eps_r, tau):

    h      RMS surface height [m]
    l      surface correlation length [m]
    eps_r  relative permittivity (>= 1)
    tau    specular/diffuse blend weight in [0, 1]

Parameters at a hit point inside a facet are the convex (barycentric)
combination of the three vertex records, so interpolated values always
stay inside the per-channel vertex hull.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PARAM_CHANNELS = ("h", "l", "eps_r", "tau")

# below this cross-product norm a facet is treated as zero-area and rejected
_DEGENERATE_AREA_EPS = 1e-20


class MeshError(ValueError):
    """Raised for unreadable or inconsistent mesh data."""


@dataclass(frozen=True)
class Mesh:
    """Indexed triangle mesh with precomputed unit facet normals."""

    vertices: np.ndarray      # (n_vertices, 3) float64, meters
    facets: np.ndarray        # (n_facets, 3) int64, vertex indices
    facet_normals: np.ndarray  # (n_facets, 3) float64, unit length

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_facets(self) -> int:
        return self.facets.shape[0]

    def facet_points(self, facet_id: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        i, j, k = self.facets[facet_id]
        return self.vertices[i], self.vertices[j], self.vertices[k]

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @staticmethod
    def from_arrays(vertices, facets) -> "Mesh":
        """Build a mesh, computing normals and validating the topology."""
        vertices = np.ascontiguousarray(np.asarray(vertices, dtype=np.float64))
        facets = np.ascontiguousarray(np.asarray(facets, dtype=np.int64))
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise MeshError(f"vertex array must be (n, 3), got {vertices.shape}")
        if facets.ndim != 2 or facets.shape[1] != 3:
            raise MeshError(f"facet array must be (m, 3), got {facets.shape}")
        if not np.isfinite(vertices).all():
            raise MeshError("non-finite vertex coordinate")
        n = vertices.shape[0]
        bad = np.nonzero((facets < 0) | (facets >= n))[0]
        if bad.size:
            raise MeshError(
                f"facet {bad[0]} references vertex outside [0, {n}): "
                f"{facets[bad[0]].tolist()}"
            )
        p1 = vertices[facets[:, 0]]
        p2 = vertices[facets[:, 1]]
        p3 = vertices[facets[:, 2]]
        cross = np.cross(p2 - p1, p3 - p1)
        norms = np.linalg.norm(cross, axis=1)
        degenerate = np.nonzero(norms < _DEGENERATE_AREA_EPS)[0]
        if degenerate.size:
            raise MeshError(f"facet {degenerate[0]} has zero area")
        normals = cross / norms[:, None]
        return Mesh(vertices=vertices, facets=facets, facet_normals=normals)


def load_mesh(path) -> Mesh:
    """Load a triangle mesh from a Wavefront OBJ subset.

    Recognized records: ``v x y z`` and ``f i j k`` (1-based indices,
    ``i/…`` attribute suffixes ignored).  Polygons with more than three
    vertices are fan-triangulated.  ``vn``/``vt`` and grouping records
    are skipped.  Vertex order is preserved from the file.
    """
    vertices: list[list[float]] = []
    facets: list[list[int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            tokens = raw.split()
            if not tokens or tokens[0].startswith("#"):
                continue
            key = tokens[0]
            if key == "v":
                if len(tokens) < 4:
                    raise MeshError(f"{path}:{lineno}: vertex record needs 3 coordinates")
                try:
                    vertices.append([float(t) for t in tokens[1:4]])
                except ValueError as exc:
                    raise MeshError(f"{path}:{lineno}: bad vertex coordinate") from exc
            elif key == "f":
                if len(tokens) < 4:
                    raise MeshError(f"{path}:{lineno}: face record needs >= 3 indices")
                try:
                    idx = [int(t.split("/")[0]) for t in tokens[1:]]
                except ValueError as exc:
                    raise MeshError(f"{path}:{lineno}: bad face index") from exc
                if any(i <= 0 for i in idx):
                    raise MeshError(
                        f"{path}:{lineno}: only positive 1-based indices supported"
                    )
                for a, b in zip(idx[1:-1], idx[2:]):
                    facets.append([idx[0] - 1, a - 1, b - 1])
            # vn / vt / g / o / s / usemtl / mtllib: ignored
    if not vertices:
        raise MeshError(f"{path}: no vertices found")
    if not facets:
        raise MeshError(f"{path}: no facets found")
    return Mesh.from_arrays(vertices, facets)


def write_obj(mesh: Mesh, path) -> None:
    """Serialize a mesh back to the OBJ subset understood by load_mesh."""
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for f in mesh.facets:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


@dataclass(frozen=True)
class BsdfParams:
    """Scattering parameters interpolated at a single hit point."""

    h: float
    l: float
    eps_r: float
    tau: float

    def as_array(self) -> np.ndarray:
        return np.array([self.h, self.l, self.eps_r, self.tau])

    @staticmethod
    def from_array(values) -> "BsdfParams":
        h, l, eps_r, tau = (float(x) for x in values)
        return BsdfParams(h=h, l=l, eps_r=eps_r, tau=tau)


@dataclass
class ParamMap:
    """Per-vertex scattering parameter table, shape (n_vertices, 4).

    Column order follows PARAM_CHANNELS.  Mutable only between forward
    passes (the optimizer is the single writer).
    """

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if self.values.ndim != 2 or self.values.shape[1] != 4:
            raise ValueError(f"parameter table must be (n, 4), got {self.values.shape}")

    @property
    def num_vertices(self) -> int:
        return self.values.shape[0]

    @property
    def h(self) -> np.ndarray:
        return self.values[:, 0]

    @property
    def l(self) -> np.ndarray:
        return self.values[:, 1]

    @property
    def eps_r(self) -> np.ndarray:
        return self.values[:, 2]

    @property
    def tau(self) -> np.ndarray:
        return self.values[:, 3]

    @staticmethod
    def constant(num_vertices: int, h: float, l: float, eps_r: float, tau: float) -> "ParamMap":
        row = np.array([h, l, eps_r, tau], dtype=np.float64)
        return ParamMap(np.tile(row, (num_vertices, 1)))

    def copy(self) -> "ParamMap":
        return ParamMap(self.values.copy())

    def validate(self) -> None:
        """Check physical bounds: h, l > 0, eps_r >= 1, tau in [0, 1]."""
        if not np.isfinite(self.values).all():
            raise ValueError("non-finite parameter value")
        if np.any(self.h <= 0) or np.any(self.l <= 0):
            raise ValueError("h and l must be positive")
        if np.any(self.eps_r < 1):
            raise ValueError("eps_r must be >= 1")
        if np.any((self.tau < 0) | (self.tau > 1)):
            raise ValueError("tau must lie in [0, 1]")


def save_param_map(params: ParamMap, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("vertex_id,h,l,eps_r,tau\n")
        for i, row in enumerate(params.values):
            fh.write(f"{i},{float(row[0])!r},{float(row[1])!r},"
                     f"{float(row[2])!r},{float(row[3])!r}\n")


def load_param_map(path) -> ParamMap:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "vertex_id,h,l,eps_r,tau":
            raise ValueError(f"{path}: unexpected header {header!r}")
        rows = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 fields")
            if int(parts[0]) != len(rows):
                raise ValueError(f"{path}:{lineno}: vertex ids must be consecutive from 0")
            rows.append([float(x) for x in parts[1:]])
    return ParamMap(np.asarray(rows, dtype=np.float64))


def _check_simplex(m1: float, m2: float) -> None:
    if m1 < 0.0 or m2 < 0.0 or m1 + m2 > 1.0:
        raise ValueError(f"barycentric weights outside the simplex: m1={m1}, m2={m2}")


def interpolate_params(mesh: Mesh, params: ParamMap, facet_id: int,
                       m1: float, m2: float) -> BsdfParams:
    """Barycentric parameter interpolation at a hit point.

    Weight m1 goes to the facet's first vertex, m2 to the second and
    1 - m1 - m2 to the third, matching the intersection convention.
    """
    _check_simplex(m1, m2)
    i, j, k = mesh.facets[facet_id]
    v = params.values
    out = m1 * v[i] + m2 * v[j] + (1.0 - m1 - m2) * v[k]
    return BsdfParams.from_array(out)


def interpolation_adjoint(mesh: Mesh, facet_id: int, m1: float, m2: float,
                          d_params: np.ndarray) -> list[tuple[int, np.ndarray]]:
    """Adjoint of interpolate_params: distribute a hit-point gradient
    onto the three facet vertices.  The returned per-vertex weights sum
    to the incoming gradient exactly (linearity of the interpolation).
    """
    _check_simplex(m1, m2)
    d = np.asarray(d_params, dtype=np.float64)
    i, j, k = mesh.facets[facet_id]
    return [(int(i), m1 * d), (int(j), m2 * d), (int(k), (1.0 - m1 - m2) * d)]


def interpolate_at_hits(mesh: Mesh, values: np.ndarray, facet_ids: np.ndarray,
                        m1: np.ndarray, m2: np.ndarray) -> np.ndarray:
    """Vectorized interpolation for a batch of hits -> (n_hits, 4).

    Hot path: assumes weights already lie in the simplex (they come
    straight from the intersector).
    """
    vids = mesh.facets[facet_ids]             # (n, 3)
    w = np.stack([m1, m2, 1.0 - m1 - m2], axis=1)  # (n, 3)
    return np.einsum("nj,njc->nc", w, values[vids])
