"""Point-cloud containers, neighbor search, and coordinate normalization.

Everything in this module is plain numpy. Point clouds live in physics
coordinates (meters); the model consumes network coordinates obtained through
`scale_coordinates`, which maps the training-split bounding box onto
[0, 1000]^3 per axis. Neighbor search is exact: a vectorized distance scan for
small inputs and a uniform hash grid (cell size = radius) for large ones. Both
routes return identical graphs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Exact-scan threshold for radius search: below this many points the O(n*m)
# vectorized scan is faster than building the grid.
_SCAN_LIMIT = 100_000

# Network-space extent of the (train-split) bounding box after scaling.
NETWORK_EXTENT = 1000.0


def _as_positions(positions: np.ndarray, name: str = "positions") -> np.ndarray:
    arr = np.asarray(positions)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape [n, 3], got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} must contain at least one point")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr.astype(np.float64, copy=False)


@dataclass(frozen=True)
class PointCloud:
    """An unordered set of 3D points in physics coordinates (meters)."""

    positions: np.ndarray  # [n, 3] float64

    def __post_init__(self) -> None:
        object.__setattr__(self, "positions", _as_positions(self.positions))

    @property
    def count(self) -> int:
        return int(self.positions.shape[0])


@dataclass(frozen=True)
class NeighborGraph:
    """Directed edges point -> center.

    Edges are sorted by (center, point index) so the layout is deterministic.
    `offsets[e] = points[edge_point[e]] - centers[edge_center[e]]`.
    """

    num_centers: int
    num_points: int
    edge_center: np.ndarray  # [E] int64, index into the center list
    edge_point: np.ndarray  # [E] int64, index into the point cloud
    offsets: np.ndarray  # [E, 3] float64
    distances: np.ndarray  # [E] float64

    @property
    def num_edges(self) -> int:
        return int(self.edge_center.shape[0])

    def degrees(self) -> np.ndarray:
        """Neighbor count per center."""
        return np.bincount(self.edge_center, minlength=self.num_centers)


@dataclass(frozen=True)
class AnchorQuerySplit:
    """A disjoint partition of point indices into anchors and queries."""

    anchor_ids: np.ndarray  # [M] int64
    query_ids: np.ndarray  # [n - M] int64

    @property
    def num_anchors(self) -> int:
        return int(self.anchor_ids.shape[0])

    @property
    def num_queries(self) -> int:
        return int(self.query_ids.shape[0])


@dataclass(frozen=True)
class NormalizationStats:
    """Frozen training-split statistics used to map physics <-> network units.

    Coordinates: `to_network` maps the train bounding box onto
    [0, NETWORK_EXTENT]^3; `coord_scale` (a) is the per-axis derivative of
    that map in 1/m. Targets: per-channel population mean/std in physics units
    (vorticity channels hold stats of *transformed* values when a transform is
    active). `output_scale` per channel equals the std — physics units per
    network unit — and enters the finite-difference Jacobian correction.

    Surface channel order: [p, tau_x, tau_y, tau_z].
    Volume channel order:  [p, u_x, u_y, u_z, omega_x, omega_y, omega_z].
    """

    bbox_min: np.ndarray  # [3] float64
    bbox_max: np.ndarray  # [3] float64
    surface_mean: np.ndarray  # [4]
    surface_std: np.ndarray  # [4]
    volume_mean: np.ndarray  # [7]
    volume_std: np.ndarray  # [7]
    vorticity_transform: str = "log1p-signed"  # "log1p-signed" | "sqrt-signed" | "none"
    vorticity_sigma: float = 1.0  # scalar std of raw vorticity components

    def __post_init__(self) -> None:
        bbox_min = np.asarray(self.bbox_min, dtype=np.float64).reshape(3)
        bbox_max = np.asarray(self.bbox_max, dtype=np.float64).reshape(3)
        if not (np.isfinite(bbox_min).all() and np.isfinite(bbox_max).all()):
            raise ValueError("bounding box must be finite")
        if not (bbox_max > bbox_min).all():
            raise ValueError(
                f"degenerate bounding box axis: min={bbox_min}, max={bbox_max}"
            )
        object.__setattr__(self, "bbox_min", bbox_min)
        object.__setattr__(self, "bbox_max", bbox_max)
        for name in ("surface_mean", "surface_std", "volume_mean", "volume_std"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).ravel()
            object.__setattr__(self, name, arr)
        if self.surface_mean.shape != (4,) or self.surface_std.shape != (4,):
            raise ValueError("surface stats must have 4 channels")
        if self.volume_mean.shape != (7,) or self.volume_std.shape != (7,):
            raise ValueError("volume stats must have 7 channels")
        if (self.surface_std <= 0).any() or (self.volume_std <= 0).any():
            raise ValueError("zero-variance target channel")
        if self.vorticity_transform not in ("log1p-signed", "sqrt-signed", "none"):
            raise ValueError(f"unknown vorticity transform {self.vorticity_transform!r}")
        if not self.vorticity_sigma > 0:
            raise ValueError("vorticity sigma must be positive")

    @property
    def span(self) -> np.ndarray:
        return self.bbox_max - self.bbox_min

    @property
    def coord_scale(self) -> np.ndarray:
        """Per-axis a = NETWORK_EXTENT / (bbox_max - bbox_min), in 1/m."""
        return NETWORK_EXTENT / self.span

    def to_network(self, positions: np.ndarray) -> np.ndarray:
        """Physics meters -> network units. Train bbox corners map to exactly 0/1000."""
        pos = np.asarray(positions, dtype=np.float64)
        return (pos - self.bbox_min) / self.span * NETWORK_EXTENT

    def to_physics(self, positions: np.ndarray) -> np.ndarray:
        """Network units -> physics meters (inverse of `to_network`)."""
        pos = np.asarray(positions, dtype=np.float64)
        return pos / NETWORK_EXTENT * self.span + self.bbox_min


def scale_coordinates(positions: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Map physics-space positions into network units via the train-split bbox.

    Points outside the box extrapolate linearly (no clamping); the map is
    affine per axis.
    """
    pos = _as_positions(positions)
    return stats.to_network(pos)


def uniform_sample(cloud: PointCloud | int, count: int, seed: int) -> np.ndarray:
    """Sample `count` distinct point indices uniformly without replacement.

    Deterministic: identical (population size, count, seed) yields an
    identical index array.
    """
    population = cloud.count if isinstance(cloud, PointCloud) else int(cloud)
    if population <= 0:
        raise ValueError("population must be positive")
    if count < 0:
        raise ValueError("count must be non-negative")
    if count > population:
        raise ValueError(f"cannot sample {count} from {population} points")
    rng = np.random.default_rng(seed)
    return rng.choice(population, size=count, replace=False).astype(np.int64)


def split_anchors_queries(
    cloud: PointCloud | int, num_anchors: int, seed: int
) -> AnchorQuerySplit:
    """Partition a cloud's indices into M anchors and (n - M) queries.

    The union covers every index exactly once; M = n leaves zero queries.
    """
    population = cloud.count if isinstance(cloud, PointCloud) else int(cloud)
    if num_anchors <= 0:
        raise ValueError("number of anchors must be positive")
    if num_anchors > population:
        raise ValueError(f"cannot draw {num_anchors} anchors from {population} points")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(population).astype(np.int64)
    return AnchorQuerySplit(anchor_ids=perm[:num_anchors], query_ids=perm[num_anchors:])


def _build_graph(
    center_idx: np.ndarray,
    point_idx: np.ndarray,
    points: np.ndarray,
    centers: np.ndarray,
) -> NeighborGraph:
    order = np.lexsort((point_idx, center_idx))
    center_idx = center_idx[order]
    point_idx = point_idx[order]
    offsets = points[point_idx] - centers[center_idx]
    return NeighborGraph(
        num_centers=int(centers.shape[0]),
        num_points=int(points.shape[0]),
        edge_center=center_idx.astype(np.int64),
        edge_point=point_idx.astype(np.int64),
        offsets=offsets,
        distances=np.linalg.norm(offsets, axis=1),
    )


def _radius_scan(points: np.ndarray, centers: np.ndarray, radius: float) -> NeighborGraph:
    # Vectorized all-pairs scan, chunked over centers to bound memory.
    center_chunks = []
    point_chunks = []
    chunk = max(1, int(5e6) // max(points.shape[0], 1))
    for start in range(0, centers.shape[0], chunk):
        cs = centers[start : start + chunk]
        d2 = ((cs[:, None, :] - points[None, :, :]) ** 2).sum(-1)
        ci, pi = np.nonzero(d2 <= radius * radius)
        center_chunks.append(ci + start)
        point_chunks.append(pi)
    return _build_graph(
        np.concatenate(center_chunks), np.concatenate(point_chunks), points, centers
    )


def _radius_grid(points: np.ndarray, centers: np.ndarray, radius: float) -> NeighborGraph:
    # Uniform hash grid with cell size = radius; each center scans its 27 cells.
    origin = points.min(axis=0)
    cell_of = lambda pos: np.floor((pos - origin) / radius).astype(np.int64)
    point_cells = cell_of(points)
    buckets: dict[tuple[int, int, int], list[int]] = {}
    for i, c in enumerate(map(tuple, point_cells)):
        buckets.setdefault(c, []).append(i)
    center_cells = cell_of(centers)
    r2 = radius * radius
    center_idx: list[np.ndarray] = []
    point_idx: list[np.ndarray] = []
    for ci, cc in enumerate(center_cells):
        cand: list[int] = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    cand.extend(buckets.get((cc[0] + dx, cc[1] + dy, cc[2] + dz), ()))
        if not cand:
            continue
        cand_arr = np.asarray(cand, dtype=np.int64)
        d2 = ((points[cand_arr] - centers[ci]) ** 2).sum(-1)
        hits = cand_arr[d2 <= r2]
        center_idx.append(np.full(hits.shape[0], ci, dtype=np.int64))
        point_idx.append(hits)
    if center_idx:
        ci_all = np.concatenate(center_idx)
        pi_all = np.concatenate(point_idx)
    else:
        ci_all = np.empty(0, dtype=np.int64)
        pi_all = np.empty(0, dtype=np.int64)
    return _build_graph(ci_all, pi_all, points, centers)


def radius_neighbors(
    points: PointCloud | np.ndarray,
    centers: np.ndarray,
    radius: float,
    method: str = "auto",
) -> NeighborGraph:
    """All points within `radius` (inclusive) of each center.

    A center that is itself a cloud point picks up its own zero-offset edge.
    `method` selects the search route: "scan" (vectorized all-pairs), "grid"
    (uniform hash grid, cell size = radius), or "auto" (scan below
    100k points). Both routes produce identical graphs.
    """
    pts = points.positions if isinstance(points, PointCloud) else _as_positions(points)
    ctr = _as_positions(centers, "centers")
    if radius < 0:
        raise ValueError("radius must be non-negative")
    if method not in ("auto", "scan", "grid"):
        raise ValueError(f"unknown method {method!r}")
    if method == "auto":
        method = "scan" if pts.shape[0] < _SCAN_LIMIT else "grid"
    if radius == 0.0 or method == "scan":
        return _radius_scan(pts, ctr, radius)
    return _radius_grid(pts, ctr, radius)


def knn_neighbors(
    points: PointCloud | np.ndarray, centers: np.ndarray, k: int
) -> NeighborGraph:
    """Exact k nearest cloud points per center; distance ties break on lower index."""
    pts = points.positions if isinstance(points, PointCloud) else _as_positions(points)
    ctr = _as_positions(centers, "centers")
    if k <= 0:
        raise ValueError("k must be positive")
    if k > pts.shape[0]:
        raise ValueError(f"k={k} exceeds cloud size {pts.shape[0]}")
    center_idx = np.empty(ctr.shape[0] * k, dtype=np.int64)
    point_idx = np.empty(ctr.shape[0] * k, dtype=np.int64)
    chunk = max(1, int(5e6) // max(pts.shape[0], 1))
    idx_all = np.arange(pts.shape[0])
    for start in range(0, ctr.shape[0], chunk):
        cs = ctr[start : start + chunk]
        d2 = ((cs[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
        for row in range(cs.shape[0]):
            # lexsort: primary key distance, secondary key index (tie -> lower index)
            order = np.lexsort((idx_all, d2[row]))[:k]
            ci = start + row
            center_idx[ci * k : (ci + 1) * k] = ci
            point_idx[ci * k : (ci + 1) * k] = order
    return _build_graph(center_idx, point_idx, pts, ctr)
