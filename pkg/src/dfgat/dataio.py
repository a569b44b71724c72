"""Dataset generation and file formats.

Synthetic pairs are structured desk-scale scenes (planar patches plus
spherical blobs) with planted rigid motion, per-cloud noise and partial
overlap.  Real scans use the KITTI velodyne layout: little-endian float32
records of x, y, z, reflectance.  Pair files and manifests are this
package's own on-disk exchange format.
"""

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud, RigidTransform, rotation_about_axis

DUSTBIN = -1

PAIR_MAGIC = b"DFGPAIR\x00"
PAIR_VERSION = 1


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for one generated pair; all distances in meters."""

    n_points: int = 256
    extent: float = 8.0
    noise_sigma: float = 0.01
    overlap_keep_fraction: float = 1.0
    max_rotation_deg: float = 30.0
    max_translation: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.n_points < 8:
            raise ValueError("n_points must be at least 8")
        if self.extent <= 0:
            raise ValueError("extent must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not (0.3 < self.overlap_keep_fraction <= 1.0):
            raise ValueError("overlap_keep_fraction must lie in (0.3, 1.0]")
        if not (0.0 <= self.max_rotation_deg <= 180.0):
            raise ValueError("max_rotation_deg must lie in [0, 180]")
        if self.max_translation < 0:
            raise ValueError("max_translation must be non-negative")


@dataclass(frozen=True)
class ScanPair:
    """Two clouds plus the ground-truth motion mapping source frame to query frame."""

    query: PointCloud
    source: PointCloud
    gt_transform: RigidTransform
    name: str = ""


def _base_scene(rng, n_points, extent):
    """Structured scene: a few planar patches and spherical blobs."""
    n_planes = int(rng.integers(2, 5))
    n_spheres = int(rng.integers(1, 4))
    counts = rng.multinomial(n_points, np.ones(n_planes + n_spheres) / (n_planes + n_spheres))
    parts = []
    for s, count in enumerate(counts):
        if count == 0:
            continue
        center = rng.uniform(-extent / 2, extent / 2, 3)
        if s < n_planes:
            axis = rng.standard_normal(3)
            frame = rotation_about_axis(axis, rng.uniform(0, 360))
            size = rng.uniform(0.25, 0.5) * extent
            ab = rng.uniform(-size / 2, size / 2, (count, 2))
            pts = center + ab[:, :1] * frame[:, 0] + ab[:, 1:] * frame[:, 1]
        else:
            radius = rng.uniform(0.08, 0.2) * extent
            dirs = rng.standard_normal((count, 3))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            pts = center + radius * dirs
        parts.append(pts)
    return np.concatenate(parts, axis=0)


def _halfspace_keep(rng, points, keep_fraction):
    """Boolean mask keeping the top fraction of points along a random direction."""
    n = len(points)
    n_keep = max(3, int(round(keep_fraction * n)))
    if n_keep >= n:
        return np.ones(n, dtype=bool)
    u = rng.standard_normal(3)
    u /= np.linalg.norm(u)
    vals = points @ u
    order = np.argsort(-vals, kind="stable")
    mask = np.zeros(n, dtype=bool)
    mask[order[:n_keep]] = True
    return mask


def _random_motion(rng, max_rotation_deg, max_translation):
    axis = rng.standard_normal(3)
    if np.linalg.norm(axis) == 0:
        axis = np.array([0.0, 0.0, 1.0])
    angle = rng.uniform(-max_rotation_deg, max_rotation_deg)
    r = rotation_about_axis(axis, angle)
    direction = rng.standard_normal(3)
    norm = np.linalg.norm(direction)
    direction = direction / norm if norm > 0 else np.array([1.0, 0.0, 0.0])
    t = direction * rng.uniform(0, max_translation)
    return RigidTransform(r, t)


def make_synthetic_pair(cfg):
    """Generate one pair with planted motion and (approximately) the requested overlap.

    Crop directions are redrawn until the shared-index overlap lands within
    0.1 of ``overlap_keep_fraction``, so partial-overlap statistics are
    controlled rather than left to the luck of two random half-spaces.
    Source point order is shuffled; correspondence is geometric only.
    """
    rng = np.random.default_rng(cfg.seed)
    base = _base_scene(rng, cfg.n_points, cfg.extent)
    n = len(base)
    noise_q = rng.standard_normal((n, 3)) * cfg.noise_sigma
    noise_s = rng.standard_normal((n, 3)) * cfg.noise_sigma

    keep = cfg.overlap_keep_fraction
    mask_q = mask_s = np.ones(n, dtype=bool)
    if keep < 1.0:
        for _ in range(50):
            mask_q = _halfspace_keep(rng, base, keep)
            mask_s = _halfspace_keep(rng, base, keep)
            overlap = (mask_q & mask_s).sum() / mask_q.sum()
            if abs(overlap - keep) <= 0.1:
                break
        else:
            # calibrated fallback: crop both along one direction, source shifted
            u = rng.standard_normal(3)
            u /= np.linalg.norm(u)
            vals = base @ u
            order = np.argsort(-vals, kind="stable")
            n_keep = max(3, int(round(keep * n)))
            shift = int(round((1 - keep) * n_keep))
            mask_q = np.zeros(n, dtype=bool)
            mask_q[order[:n_keep]] = True
            mask_s = np.zeros(n, dtype=bool)
            mask_s[order[shift:shift + n_keep]] = True

    motion = _random_motion(rng, cfg.max_rotation_deg, cfg.max_translation)
    query_pts = base[mask_q] + noise_q[mask_q]
    source_pts = motion.apply(base[mask_s] + noise_s[mask_s])
    perm = rng.permutation(len(source_pts))
    source_pts = source_pts[perm]

    return ScanPair(
        query=PointCloud(query_pts),
        source=PointCloud(source_pts),
        gt_transform=motion.invert(),
        name="synthetic-%d" % cfg.seed,
    )


def ground_truth_correspondences(query_positions, source_positions, gt_transform, tau):
    """Greedy nearest pairing of keypoints under the ground-truth motion.

    Source positions are mapped into the query frame; candidate pairs
    within ``tau`` are taken globally nearest-first, each side used at
    most once.  Returns one source index (or DUSTBIN) per query position.
    """
    q = np.asarray(query_positions, dtype=np.float64)
    s = gt_transform.apply(np.asarray(source_positions, dtype=np.float64))
    m, n = len(q), len(s)
    decisions = np.full(m, DUSTBIN, dtype=np.int64)
    if m == 0 or n == 0:
        return decisions
    d = np.linalg.norm(q[:, None, :] - s[None, :, :], axis=2)
    ii, jj = np.nonzero(d <= tau)
    if ii.size == 0:
        return decisions
    dist = d[ii, jj]
    order = np.lexsort((jj, ii, dist))
    used_q = np.zeros(m, dtype=bool)
    used_s = np.zeros(n, dtype=bool)
    for k in order:
        i, j = ii[k], jj[k]
        if not used_q[i] and not used_s[j]:
            decisions[i] = j
            used_q[i] = True
            used_s[j] = True
    return decisions


def overlap_fraction(pair, tau):
    """Fraction of query points with a source point within ``tau`` under the GT motion."""
    if len(pair.query) == 0:
        return 0.0
    s = pair.gt_transform.apply(pair.source.points)
    d = np.linalg.norm(pair.query.points[:, None, :] - s[None, :, :], axis=2)
    return float((d.min(axis=1) <= tau).mean())


# ---------------------------------------------------------------- KITTI formats

def load_kitti_scan(path):
    """Velodyne .bin scan: little-endian float32 x, y, z, reflectance records."""
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4 != 0:
        raise ValueError("scan %s is not a whole number of 16-byte records" % path)
    records = raw.reshape(-1, 4)
    return PointCloud(records[:, :3].astype(np.float64),
                      {"reflectance": records[:, 3].astype(np.float64)})


def save_kitti_scan(path, cloud):
    refl = cloud.attributes.get("reflectance")
    if refl is None:
        refl = np.zeros(len(cloud))
    records = np.empty((len(cloud), 4), dtype="<f4")
    records[:, :3] = cloud.points
    records[:, 3] = refl
    records.tofile(path)


def load_kitti_poses(path):
    """Odometry pose file: 12 floats per line, row-major 3x4 [R | t].

    Rotations with orthonormality drift beyond 1e-6 are projected back to
    the nearest rotation before use.
    """
    poses = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 12:
                raise ValueError("pose line %d has %d fields, expected 12"
                                 % (lineno, len(fields)))
            try:
                vals = np.array([float(x) for x in fields]).reshape(3, 4)
            except ValueError:
                raise ValueError("pose line %d has a non-numeric field" % lineno)
            r, t = vals[:, :3], vals[:, 3]
            if np.abs(r.T @ r - np.eye(3)).max() > 1e-6:
                u, _, vt = np.linalg.svd(r)
                d = np.sign(np.linalg.det(u @ vt))
                r = u @ np.diag([1.0, 1.0, d]) @ vt
            poses.append(RigidTransform(r, t))
    return poses


def pose_pairs_by_distance(poses, min_distance=10.0):
    """Index pairs (i, j), i < j, whose positions are at least ``min_distance`` apart."""
    centers = np.array([p.translation for p in poses])
    pairs = []
    for i in range(len(poses)):
        d = np.linalg.norm(centers[i + 1:] - centers[i], axis=1)
        for off in np.nonzero(d >= min_distance)[0]:
            pairs.append((i, i + 1 + int(off)))
    return pairs


# ---------------------------------------------------------------- pair files

def write_pair(path, pair):
    """Binary pair file: magic, version, counts, then float32 payloads."""
    q = pair.query.points.astype("<f4")
    s = pair.source.points.astype("<f4")
    r = pair.gt_transform.rotation.astype("<f4")
    t = pair.gt_transform.translation.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(PAIR_MAGIC)
        fh.write(struct.pack("<III", PAIR_VERSION, len(q), len(s)))
        fh.write(q.tobytes())
        fh.write(s.tobytes())
        fh.write(r.tobytes())
        fh.write(t.tobytes())


def read_pair(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != PAIR_MAGIC:
        raise ValueError("%s is not a pair file (bad magic)" % path)
    version, nq, ns = struct.unpack_from("<III", blob, 8)
    if version != PAIR_VERSION:
        raise ValueError("unsupported pair file version %d" % version)
    offset = 8 + 12
    expected = offset + 4 * (3 * nq + 3 * ns + 12)
    if len(blob) != expected:
        raise ValueError("pair file %s has %d bytes, expected %d"
                         % (path, len(blob), expected))
    vals = np.frombuffer(blob, dtype="<f4", offset=offset)
    q = vals[:3 * nq].reshape(nq, 3).astype(np.float64)
    s = vals[3 * nq:3 * (nq + ns)].reshape(ns, 3).astype(np.float64)
    rt = vals[3 * (nq + ns):]
    rot = rt[:9].reshape(3, 3).astype(np.float64)
    if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-6:
        u, _, vt = np.linalg.svd(rot)
        rot = u @ np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt))]) @ vt
    trans = rt[9:].astype(np.float64)
    name = os.path.splitext(os.path.basename(path))[0]
    return ScanPair(PointCloud(q), PointCloud(s), RigidTransform(rot, trans), name=name)


@dataclass
class DatasetManifest:
    """Ordered list of pair files relative to the manifest's directory."""

    entries: list

    def __len__(self):
        return len(self.entries)


def save_manifest(path, manifest):
    with open(path, "w") as fh:
        for entry in manifest.entries:
            fh.write(entry + "\n")


def load_manifest(path):
    with open(path, "r") as fh:
        entries = [line.strip() for line in fh if line.strip()]
    return DatasetManifest(entries)


def generate_dataset(out_dir, count, cfg, seed=0):
    """Write ``count`` pairs (seeded seed, seed+1, ...) plus manifest.txt."""
    pair_dir = os.path.join(out_dir, "pairs")
    os.makedirs(pair_dir, exist_ok=True)
    entries = []
    for k in range(count):
        pair_cfg = SyntheticConfig(
            n_points=cfg.n_points, extent=cfg.extent, noise_sigma=cfg.noise_sigma,
            overlap_keep_fraction=cfg.overlap_keep_fraction,
            max_rotation_deg=cfg.max_rotation_deg,
            max_translation=cfg.max_translation, seed=seed + k)
        pair = make_synthetic_pair(pair_cfg)
        rel = os.path.join("pairs", "%04d.pair" % k)
        write_pair(os.path.join(out_dir, rel), pair)
        entries.append(rel)
    manifest = DatasetManifest(entries)
    save_manifest(os.path.join(out_dir, "manifest.txt"), manifest)
    return manifest


def load_dataset(root):
    """Read every pair named by ``root/manifest.txt``."""
    manifest = load_manifest(os.path.join(root, "manifest.txt"))
    return [read_pair(os.path.join(root, rel)) for rel in manifest.entries]
