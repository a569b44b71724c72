"""Point clouds, rigid transforms, exact radius search and alignment solvers."""

from dataclasses import dataclass, field

import numpy as np


class DegenerateGeometryError(ValueError):
    """Raised when an alignment problem has no well-posed solution."""


@dataclass(frozen=True)
class PointCloud:
    """N points in R^3 with optional per-point scalar attributes.

    Treated as immutable after construction; coordinates must be finite.
    """

    points: np.ndarray
    attributes: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError("points must be (N, 3), got %s" % (pts.shape,))
        if not np.isfinite(pts).all():
            raise ValueError("points contain non-finite coordinates")
        object.__setattr__(self, "points", pts)
        for key, val in self.attributes.items():
            arr = np.asarray(val)
            if arr.shape[0] != pts.shape[0]:
                raise ValueError("attribute %r has %d values for %d points"
                                 % (key, arr.shape[0], pts.shape[0]))

    def __len__(self):
        return self.points.shape[0]

    def extent(self):
        """Diagonal length of the axis-aligned bounding box (0 for < 2 points)."""
        if len(self) < 2:
            return 0.0
        span = self.points.max(axis=0) - self.points.min(axis=0)
        return float(np.linalg.norm(span))


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion x -> R x + t; R is validated orthonormal, det +1."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3, got %s" % (r.shape,))
        if not (np.isfinite(r).all() and np.isfinite(t).all()):
            raise ValueError("transform contains non-finite values")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-6:
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation has negative determinant (reflection)")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity():
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def apply_cloud(self, cloud):
        return PointCloud(self.apply(cloud.points), dict(cloud.attributes))

    def compose(self, other):
        """self after other: (self o other)(x) = self(other(x))."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def invert(self):
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def rotation_about_axis(axis, degrees):
    """Rodrigues rotation about ``axis`` by ``degrees``."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0:
        raise ValueError("rotation axis must be nonzero")
    k = axis / n
    theta = np.deg2rad(degrees)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * (kx @ kx)


EXHAUSTIVE_FALLBACK_SIZE = 64


class NeighborIndex:
    """Uniform-grid hash for exact radius queries.

    Cell size equals the query radius, so candidates live in the 27
    surrounding cells.  Clouds below ``EXHAUSTIVE_FALLBACK_SIZE`` points
    skip the grid and scan exhaustively; results are identical either way.
    """

    def __init__(self, cloud):
        self.cloud = cloud
        self.points = cloud.points
        self._grids = {}  # cell size -> {cell tuple: [indices]}

    def _grid_for(self, cell):
        table = self._grids.get(cell)
        if table is None:
            table = {}
            keys = np.floor(self.points / cell).astype(np.int64)
            for i, key in enumerate(map(tuple, keys)):
                table.setdefault(key, []).append(i)
            self._grids[cell] = table
        return table

    def query(self, point, radius, cap=None, exclude_index=None):
        """Indices of points within ``radius`` of ``point``, nearest first.

        Ties break toward the lower index.  ``exclude_index`` drops that
        row (used when the query point is a member of the cloud); when it
        is None and ``point`` coincides bitwise with a member, the first
        such member is dropped, so a point is never its own neighbor.
        """
        if radius <= 0:
            raise ValueError("radius must be positive")
        point = np.asarray(point, dtype=np.float64).reshape(3)
        n = len(self.points)
        if n == 0:
            return np.empty(0, dtype=np.int64)

        if n < EXHAUSTIVE_FALLBACK_SIZE:
            candidates = np.arange(n)
        else:
            table = self._grid_for(radius)
            base = np.floor(point / radius).astype(np.int64)
            found = []
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    for dz in (-1, 0, 1):
                        cell = (base[0] + dx, base[1] + dy, base[2] + dz)
                        bucket = table.get(cell)
                        if bucket:
                            found.extend(bucket)
            if not found:
                return np.empty(0, dtype=np.int64)
            candidates = np.asarray(found, dtype=np.int64)

        d = np.linalg.norm(self.points[candidates] - point, axis=1)
        keep = d <= radius
        candidates, d = candidates[keep], d[keep]

        if exclude_index is not None:
            keep = candidates != exclude_index
            candidates, d = candidates[keep], d[keep]
        else:
            same = (self.points[candidates] == point).all(axis=1)
            if same.any():
                drop = candidates[same].min()
                keep = candidates != drop
                candidates, d = candidates[keep], d[keep]

        order = np.lexsort((candidates, d))
        candidates = candidates[order]
        if cap is not None:
            candidates = candidates[:cap]
        return candidates


def radius_neighbors(index, point, radius, cap=None, exclude_index=None):
    return index.query(point, radius, cap=cap, exclude_index=exclude_index)


def kabsch(src, dst, weights=None):
    """Least-squares rigid transform mapping ``src`` points onto ``dst``.

    Optionally weighted.  Needs >= 3 correspondences in general position;
    collinear or coincident sets raise DegenerateGeometryError.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("kabsch expects matching (K, 3) arrays")
    k = src.shape[0]
    if k < 3:
        raise ValueError("kabsch needs at least 3 correspondences, got %d" % k)
    if weights is None:
        w = np.ones(k)
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(k)
        if (w < 0).any() or w.sum() <= 0:
            raise ValueError("weights must be non-negative with positive sum")
    w = w / w.sum()

    cs = w @ src
    cd = w @ dst
    h = (src - cs).T @ ((dst - cd) * w[:, None])
    u, s, vt = np.linalg.svd(h)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise DegenerateGeometryError("correspondences are collinear or coincident")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = cd - r @ cs
    return RigidTransform(r, t)


def ransac_register(correspondences, iters=1000, inlier_threshold=0.05, seed=0):
    """Robust rigid fit over (src_point, dst_point) pairs.

    Samples 3 correspondences per iteration, scores by inlier count at
    ``inlier_threshold`` (meters), then refits on the best inlier set.
    Returns (RigidTransform, inlier_mask).  Deterministic for a seed.
    """
    src = np.asarray([c[0] for c in correspondences], dtype=np.float64)
    dst = np.asarray([c[1] for c in correspondences], dtype=np.float64)
    n = src.shape[0]
    if n < 3:
        raise ValueError("ransac needs at least 3 correspondences, got %d" % n)
    rng = np.random.default_rng(seed)
    best_mask = None
    best_count = -1
    for _ in range(iters):
        pick = rng.choice(n, size=3, replace=False)
        try:
            t = kabsch(src[pick], dst[pick])
        except DegenerateGeometryError:
            continue
        residual = np.linalg.norm(t.apply(src) - dst, axis=1)
        mask = residual <= inlier_threshold
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
    if best_mask is None or best_count < 3:
        raise DegenerateGeometryError("no ransac sample produced a valid model")
    refit = kabsch(src[best_mask], dst[best_mask])
    return refit, best_mask


def icp(src_cloud, dst_cloud, init=None, max_iters=50, tol=1e-8):
    """Point-to-point iterative closest point.

    Each sweep pairs every source point with its nearest destination
    point and solves kabsch on those pairs.  Only improving updates are
    kept, so the mean nearest-neighbor distance never increases and the
    loop terminates.  Returns the best transform found.
    """
    src = src_cloud.points if isinstance(src_cloud, PointCloud) else np.asarray(src_cloud, float)
    dst = dst_cloud.points if isinstance(dst_cloud, PointCloud) else np.asarray(dst_cloud, float)
    if src.shape[0] < 3 or dst.shape[0] < 1:
        raise ValueError("icp needs >= 3 source points and a non-empty destination")
    best = init if init is not None else RigidTransform.identity()

    def objective(t):
        moved = t.apply(src)
        d2 = ((moved[:, None, :] - dst[None, :, :]) ** 2).sum(axis=2)
        return d2.min(axis=1), d2.argmin(axis=1)

    best_d2, _ = objective(best)
    best_obj = float(np.sqrt(best_d2).mean())
    current = best
    for _ in range(max_iters):
        moved = current.apply(src)
        d2 = ((moved[:, None, :] - dst[None, :, :]) ** 2).sum(axis=2)
        nearest = d2.argmin(axis=1)
        try:
            current = kabsch(src, dst[nearest])
        except DegenerateGeometryError:
            break
        d2_new, _ = objective(current)
        obj = float(np.sqrt(d2_new).mean())
        if obj < best_obj - tol:
            best_obj = obj
            best = current
        else:
            break
    return best
