import numpy as np
import pytest

from dfgat.dataio import (
    DUSTBIN,
    DatasetManifest,
    ScanPair,
    SyntheticConfig,
    generate_dataset,
    ground_truth_correspondences,
    load_dataset,
    load_kitti_poses,
    load_kitti_scan,
    load_manifest,
    make_synthetic_pair,
    overlap_fraction,
    pose_pairs_by_distance,
    read_pair,
    save_kitti_scan,
    save_manifest,
    write_pair,
)
from dfgat.geometry import PointCloud, RigidTransform, rotation_about_axis


# ---------------------------------------------------------------- synthetic pairs

def test_synthetic_config_validation():
    with pytest.raises(ValueError):
        SyntheticConfig(n_points=4)
    with pytest.raises(ValueError):
        SyntheticConfig(overlap_keep_fraction=0.2)
    with pytest.raises(ValueError):
        SyntheticConfig(noise_sigma=-1.0)
    with pytest.raises(ValueError):
        SyntheticConfig(max_rotation_deg=200.0)


def test_synthetic_pair_deterministic():
    cfg = SyntheticConfig(n_points=64, seed=5)
    a, b = make_synthetic_pair(cfg), make_synthetic_pair(cfg)
    assert np.array_equal(a.query.points, b.query.points)
    assert np.array_equal(a.source.points, b.source.points)
    assert np.array_equal(a.gt_transform.matrix(), b.gt_transform.matrix())


def test_synthetic_pair_respects_motion_bounds():
    for seed in range(20):
        cfg = SyntheticConfig(n_points=32, max_rotation_deg=25.0,
                              max_translation=1.5, seed=seed)
        pair = make_synthetic_pair(cfg)
        r = pair.gt_transform.rotation
        angle = np.degrees(np.arccos(np.clip((np.trace(r) - 1) / 2, -1, 1)))
        assert angle <= 25.0 + 1e-9
        assert np.linalg.norm(pair.gt_transform.translation) <= 1.5 + 1e-9


def test_noiseless_full_overlap_recovers_planted_permutation():
    cfg = SyntheticConfig(n_points=48, noise_sigma=0.0,
                          overlap_keep_fraction=1.0, seed=7)
    pair = make_synthetic_pair(cfg)
    decisions = ground_truth_correspondences(
        pair.query.points, pair.source.points, pair.gt_transform, tau=1e-6)
    # every query point pairs with the unique coincident source point
    assert (decisions != DUSTBIN).all()
    mapped = pair.gt_transform.apply(pair.source.points)[decisions]
    assert np.abs(mapped - pair.query.points).max() < 1e-9
    assert len(set(decisions.tolist())) == len(decisions)  # a true permutation


def test_noiseless_pair_overlap_is_exact():
    cfg = SyntheticConfig(n_points=64, noise_sigma=0.0, seed=3)
    pair = make_synthetic_pair(cfg)
    assert overlap_fraction(pair, tau=1e-9) == 1.0


def test_partial_overlap_statistics_over_seeds():
    values = []
    for seed in range(100):
        cfg = SyntheticConfig(n_points=96, noise_sigma=0.005,
                              overlap_keep_fraction=0.5, seed=seed)
        pair = make_synthetic_pair(cfg)
        values.append(overlap_fraction(pair, tau=0.05))
    values = np.array(values)
    assert (values >= 0.3).all() and (values <= 0.7).all()
    assert abs(values.mean() - 0.5) < 0.1


def test_ground_truth_greedy_resolves_competition():
    # two query points compete for the same source point; nearer one wins
    gt = RigidTransform.identity()
    q = np.array([[0.0, 0, 0], [0.05, 0, 0]])
    s = np.array([[0.01, 0.0, 0.0]])
    decisions = ground_truth_correspondences(q, s, gt, tau=0.1)
    assert decisions[0] == 0
    assert decisions[1] == DUSTBIN


def test_ground_truth_no_candidates_all_dustbin():
    gt = RigidTransform.identity()
    q = np.zeros((3, 3))
    s = np.ones((2, 3)) * 100
    decisions = ground_truth_correspondences(q, s, gt, tau=0.5)
    assert (decisions == DUSTBIN).all()


def test_ground_truth_accounts_for_motion():
    rot = rotation_about_axis([0, 0, 1], 90.0)
    gt = RigidTransform(rot, np.array([1.0, 0.0, 0.0]))  # source -> query
    s = np.array([[0.0, 0.0, 0.0], [0.0, -2.0, 0.0]])
    q = gt.apply(s)
    decisions = ground_truth_correspondences(q, s, gt, tau=1e-9)
    assert np.array_equal(decisions, [0, 1])


# ---------------------------------------------------------------- KITTI formats

def test_kitti_scan_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    raw = rng.standard_normal((100, 4)).astype("<f4")
    path = tmp_path / "scan.bin"
    raw.tofile(path)
    cloud = load_kitti_scan(path)
    assert len(cloud) == 100
    out = tmp_path / "copy.bin"
    save_kitti_scan(out, cloud)
    assert path.read_bytes() == out.read_bytes()


def test_kitti_scan_truncated_raises(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\x00" * 20)  # not a multiple of 16
    with pytest.raises(ValueError):
        load_kitti_scan(path)


def test_kitti_poses_parse_and_reorthonormalize(tmp_path):
    r = rotation_about_axis([1, 2, 3], 17.0)
    t = np.array([4.0, 5.0, 6.0])
    drifted = r * 1.00001  # scale breaks orthonormality beyond 1e-6
    line1 = " ".join("%.17g" % v for v in np.hstack([np.eye(3), np.zeros((3, 1))]).reshape(-1))
    line2 = " ".join("%.17g" % v for v in np.hstack([drifted, t[:, None]]).reshape(-1))
    path = tmp_path / "poses.txt"
    path.write_text(line1 + "\n" + line2 + "\n")
    poses = load_kitti_poses(path)
    assert len(poses) == 2
    assert np.abs(poses[0].matrix() - np.eye(4)).max() < 1e-12
    assert np.abs(poses[1].rotation - r).max() < 1e-4
    assert np.abs(poses[1].rotation.T @ poses[1].rotation - np.eye(3)).max() < 1e-12


def test_kitti_poses_malformed_line_raises(tmp_path):
    path = tmp_path / "poses.txt"
    path.write_text("1 0 0 0 0 1\n")
    with pytest.raises(ValueError, match="line 1"):
        load_kitti_poses(path)


def test_pose_pairs_by_distance():
    poses = [RigidTransform(np.eye(3), np.array([float(x), 0, 0]))
             for x in (0, 4, 11, 22)]
    pairs = pose_pairs_by_distance(poses, min_distance=10.0)
    assert pairs == [(0, 2), (0, 3), (1, 3), (2, 3)]


# ---------------------------------------------------------------- pair files

def test_pair_file_round_trip(tmp_path):
    cfg = SyntheticConfig(n_points=40, seed=2)
    pair = make_synthetic_pair(cfg)
    path = tmp_path / "x.pair"
    write_pair(path, pair)
    back = read_pair(path)
    # payload is float32; round trip is exact at float32 resolution
    assert np.array_equal(back.query.points,
                          pair.query.points.astype("<f4").astype(np.float64))
    assert np.array_equal(back.source.points,
                          pair.source.points.astype("<f4").astype(np.float64))
    # and a second write is byte-identical
    path2 = tmp_path / "y.pair"
    write_pair(path2, back)
    assert path.read_bytes() == path2.read_bytes()


def test_pair_file_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "bad.pair"
    path.write_bytes(b"NOTAPAIR" + b"\x00" * 12)
    with pytest.raises(ValueError, match="magic"):
        read_pair(path)
    cfg = SyntheticConfig(n_points=16, seed=1)
    good = tmp_path / "good.pair"
    write_pair(good, make_synthetic_pair(cfg))
    blob = good.read_bytes()
    trunc = tmp_path / "trunc.pair"
    trunc.write_bytes(blob[:-8])
    with pytest.raises(ValueError, match="bytes"):
        read_pair(trunc)


def test_manifest_and_dataset_round_trip(tmp_path):
    cfg = SyntheticConfig(n_points=24, seed=0)
    manifest = generate_dataset(tmp_path, count=3, cfg=cfg, seed=10)
    assert len(manifest) == 3
    loaded = load_manifest(tmp_path / "manifest.txt")
    assert loaded.entries == manifest.entries
    pairs = load_dataset(tmp_path)
    assert len(pairs) == 3
    assert all(len(p.query) > 0 for p in pairs)
    # regenerating with the same seed is bitwise identical on disk
    blob = (tmp_path / "pairs" / "0000.pair").read_bytes()
    generate_dataset(tmp_path, count=3, cfg=cfg, seed=10)
    assert (tmp_path / "pairs" / "0000.pair").read_bytes() == blob


def test_save_manifest_plain_lines(tmp_path):
    save_manifest(tmp_path / "m.txt", DatasetManifest(["pairs/a.pair", "pairs/b.pair"]))
    assert (tmp_path / "m.txt").read_text() == "pairs/a.pair\npairs/b.pair\n"
