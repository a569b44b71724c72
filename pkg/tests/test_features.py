import numpy as np
import pytest

from dfgat import tensor as T
from dfgat.features import (
    BackboneConfig,
    KernelConfig,
    backbone,
    build_neighborhoods,
    channel_max_score,
    descriptor_encoder,
    detect_keypoints,
    init_backbone,
    init_descriptor_encoder,
    init_keypoint_encoder,
    kernel_offsets,
    keypoint_encoder,
    kpconv_layer,
    make_kernel_config,
    saliency_score,
)
from dfgat.geometry import PointCloud
from dfgat.tensor import ParameterStore, Tensor

from conftest import assert_grads_close, numeric_grad
from oracles import detector_oracle


def tiny_cloud(rng, n=40, span=2.0):
    return PointCloud(rng.uniform(-span, span, (n, 3)))


# ---------------------------------------------------------------- kernel conv

def test_kernel_offsets_layout():
    kp = kernel_offsets(1.0)
    assert kp.shape == (13, 3)
    assert np.array_equal(kp[0], np.zeros(3))
    radii = np.linalg.norm(kp[1:], axis=1)
    assert np.allclose(radii, 0.66, atol=1e-12)


def test_kernel_config_validation():
    with pytest.raises(ValueError):
        KernelConfig(np.zeros((2, 3)), 1.0, 4, 8)  # duplicate points
    with pytest.raises(ValueError):
        make_kernel_config(0.0, 4, 8)


def test_kpconv_isolated_point_selects_center_weight_row():
    # one point, one kernel point at the origin: h = 1, |N| = 1 (self)
    cloud = PointCloud(np.zeros((1, 3)))
    cfg = KernelConfig(np.zeros((1, 3)), 1.0, 3, 5)
    rng = np.random.default_rng(0)
    w = Tensor(rng.standard_normal((3, 5)))
    f = Tensor(np.array([[1.0, 0.0, 0.0]]))  # e1
    out = kpconv_layer(cloud, f, cfg, w, [np.empty(0, dtype=np.int64)])
    assert np.allclose(out.data, w.data[0], atol=1e-12)


def test_kpconv_zero_weights_zero_output(rng):
    cloud = tiny_cloud(rng, 20)
    cfg = make_kernel_config(0.5, 4, 8)
    w = Tensor(np.zeros((13 * 4, 8)))
    nbrs = build_neighborhoods(cloud, 1.0)
    out = kpconv_layer(cloud, Tensor(rng.random((20, 4))), cfg, w, nbrs)
    assert np.array_equal(out.data, np.zeros((20, 8)))


def test_kpconv_channel_mismatch_raises(rng):
    cloud = tiny_cloud(rng, 5)
    cfg = make_kernel_config(0.5, 4, 8)
    w = Tensor(np.zeros((13 * 4, 8)))
    with pytest.raises(ValueError):
        kpconv_layer(cloud, Tensor(np.zeros((5, 3))), cfg, w,
                     build_neighborhoods(cloud, 1.0))


def test_kpconv_density_doubling_invariance(rng):
    pts = rng.uniform(-2, 2, (50, 3))
    f = rng.random((50, 6))
    cfg = make_kernel_config(0.6, 6, 4)
    w = Tensor(rng.standard_normal((13 * 6, 4)))

    cloud1 = PointCloud(pts)
    out1 = kpconv_layer(cloud1, Tensor(f), cfg, w,
                        build_neighborhoods(cloud1, 0.9))
    cloud2 = PointCloud(np.vstack([pts, pts]))
    out2 = kpconv_layer(cloud2, Tensor(np.vstack([f, f])), cfg, w,
                        build_neighborhoods(cloud2, 0.9))
    assert np.abs(out2.data[:50] - out1.data).max() < 1e-6
    assert np.abs(out2.data[50:] - out1.data).max() < 1e-6


def test_kpconv_gradient_reaches_features_and_weights(rng):
    pts = rng.uniform(-1, 1, (8, 3))
    cloud = PointCloud(pts)
    cfg = make_kernel_config(0.8, 3, 4)
    nbrs = build_neighborhoods(cloud, 1.2)
    probe = rng.standard_normal((8, 4))

    w0 = rng.standard_normal((13 * 3, 4))
    f0 = rng.standard_normal((8, 3))

    w = Tensor(w0, requires_grad=True)
    f = Tensor(f0, requires_grad=True)
    loss = T.reduce_sum(T.mul(kpconv_layer(cloud, f, cfg, w, nbrs), Tensor(probe)))
    loss.backward()

    def loss_w(arr):
        out = kpconv_layer(cloud, Tensor(f0), cfg, Tensor(arr), nbrs)
        return float((out.data * probe).sum())

    def loss_f(arr):
        out = kpconv_layer(cloud, Tensor(arr), cfg, Tensor(w0), nbrs)
        return float((out.data * probe).sum())

    assert_grads_close(w.grad, numeric_grad(loss_w, w0.copy()))
    assert_grads_close(f.grad, numeric_grad(loss_f, f0.copy()))


# ---------------------------------------------------------------- backbone

def make_backbone(cfg, seed=0):
    store = ParameterStore()
    init_backbone(store, cfg, np.random.default_rng(seed))
    return store


def test_backbone_shape_and_row_norms(rng):
    cloud = tiny_cloud(rng, 30)
    cfg = BackboneConfig(radius=1.0)
    store = make_backbone(cfg)
    fmap = backbone(cloud, cfg, store)
    assert fmap.features.shape == (30, 32)
    norms = np.linalg.norm(fmap.features.data, axis=1)
    assert np.abs(norms - 1.0).max() < 1e-6


def test_backbone_rejects_empty_cloud():
    cfg = BackboneConfig(radius=1.0)
    store = make_backbone(cfg)
    with pytest.raises(ValueError):
        backbone(PointCloud(np.zeros((0, 3))), cfg, store)


def test_backbone_translation_invariance_without_coords(rng):
    cfg = BackboneConfig(radius=1.0, include_coords=False)
    store = make_backbone(cfg, seed=3)
    pts = rng.uniform(-2, 2, (25, 3))
    f1 = backbone(PointCloud(pts), cfg, store).features.data
    f2 = backbone(PointCloud(pts + np.array([10.0, -4.0, 2.5])), cfg, store).features.data
    assert np.abs(f1 - f2).max() < 1e-5


def test_backbone_density_doubling(rng):
    cfg = BackboneConfig(radius=0.9, include_coords=True, neighbor_cap=64)
    store = make_backbone(cfg, seed=4)
    pts = rng.uniform(-2, 2, (40, 3))
    f1 = backbone(PointCloud(pts), cfg, store).features.data
    f2 = backbone(PointCloud(np.vstack([pts, pts])), cfg, store).features.data
    assert np.abs(f2[:40] - f1).max() < 1e-6


# ---------------------------------------------------------------- scores

def test_channel_max_score_values():
    f = Tensor(np.array([[2.0, 4.0], [3.0, 3.0], [0.0, 0.0]]))
    beta = channel_max_score(f).data
    assert np.allclose(beta[0], [0.5, 1.0], atol=1e-12)
    assert np.allclose(beta[1], [1.0, 1.0], atol=1e-12)
    assert np.array_equal(beta[2], [0.0, 0.0])


def test_channel_max_score_bounds(rng):
    f = Tensor(rng.random((50, 8)))
    beta = channel_max_score(f).data
    assert (beta >= 0).all() and (beta <= 1.0 + 1e-12).all()


def test_saliency_softplus_values(rng):
    # constant features: every point equals its neighborhood mean -> ln 2
    pts = rng.uniform(-1, 1, (10, 3))
    cloud = PointCloud(pts)
    f = Tensor(np.full((10, 4), 0.7))
    alpha = saliency_score(cloud, f, radius=5.0).data
    assert np.allclose(alpha, np.log(2.0), atol=1e-9)
    # isolated point: neighborhood is itself -> ln 2 regardless of value
    lone = PointCloud(np.array([[0.0, 0, 0], [100.0, 0, 0]]))
    f2 = Tensor(np.array([[0.9, 0.1], [0.2, 0.8]]))
    alpha2 = saliency_score(lone, f2, radius=1.0).data
    assert np.allclose(alpha2, np.log(2.0), atol=1e-9)


def test_saliency_positive(rng):
    cloud = tiny_cloud(rng, 30)
    f = Tensor(rng.random((30, 8)))
    alpha = saliency_score(cloud, f, radius=1.0).data
    assert (alpha > 0).all()


def test_saliency_asymptote():
    # two close points with a large feature gap: alpha approaches gap/2
    cloud = PointCloud(np.array([[0.0, 0, 0], [0.1, 0, 0]]))
    f = Tensor(np.array([[30.0], [0.0]]))
    alpha = saliency_score(cloud, f, radius=1.0).data
    assert alpha[0, 0] == pytest.approx(15.0, abs=1e-4)


# ---------------------------------------------------------------- detection

def test_detector_budget_covers_all(rng):
    cloud = tiny_cloud(rng, 12)
    f = Tensor(rng.random((12, 4)))
    kps = detect_keypoints(cloud, f, budget=100, radius=1.0)
    assert len(kps) == 12
    assert len(set(kps.indices.tolist())) == 12


def test_detector_dominant_point_ranked_first(rng):
    pts = rng.uniform(-1, 1, (15, 3))
    cloud = PointCloud(pts)
    f = rng.random((15, 4)) * 0.1
    f[7, 2] = 5.0  # dominates its channel and every neighborhood
    kps = detect_keypoints(cloud, Tensor(f), budget=3, radius=3.0)
    assert kps.indices[0] == 7
    assert kps.channels[0] == 2


def test_detector_matches_brute_force_oracle(rng):
    for trial in range(10):
        n = int(rng.integers(5, 120))
        pts = rng.uniform(-2, 2, (n, 3))
        f = rng.random((n, 6))
        budget = int(rng.integers(1, n + 3))
        radius = float(rng.uniform(0.4, 2.0))
        got = detect_keypoints(PointCloud(pts), Tensor(f), budget, radius)
        want = detector_oracle(pts, f, budget, radius)
        assert np.array_equal(got.indices, want), "trial %d" % trial


def test_detector_scores_are_differentiable(rng):
    pts = rng.uniform(-1, 1, (10, 3))
    cloud = PointCloud(pts)
    f0 = rng.random((10, 4)) + 0.1

    f = Tensor(f0, requires_grad=True)
    kps = detect_keypoints(cloud, f, budget=4, radius=1.0)
    probe = rng.standard_normal(kps.scores.shape)
    T.reduce_sum(T.mul(kps.scores, Tensor(probe))).backward()
    assert f.grad is not None and np.abs(f.grad).sum() > 0

    picked = kps.indices.copy()

    def loss_fn(arr):
        k = detect_keypoints(cloud, Tensor(arr), budget=4, radius=1.0)
        assert np.array_equal(k.indices, picked)  # selection stable under probe
        return float((k.scores.data * probe).sum())

    assert_grads_close(f.grad, numeric_grad(loss_fn, f0.copy()))


# ---------------------------------------------------------------- encoders

def test_keypoint_encoder_shapes_and_permutation(rng):
    store = ParameterStore()
    init_keypoint_encoder(store, 32, rng)
    positions = rng.uniform(-1, 1, (6, 3))
    scores = Tensor(rng.random((6, 1)))
    out = keypoint_encoder(positions, scores, store)
    assert out.shape == (6, 32)
    perm = rng.permutation(6)
    out_p = keypoint_encoder(positions[perm], T.gather_rows(scores, perm), store)
    assert np.allclose(out_p.data, out.data[perm], atol=1e-12)


def test_encoders_zero_weights_zero_output(rng):
    store = ParameterStore()
    init_keypoint_encoder(store, 16, rng)
    init_descriptor_encoder(store, 8, 16, rng)
    for name, t in store.items():
        t.data[:] = 0.0
    pos = keypoint_encoder(rng.uniform(-1, 1, (4, 3)), Tensor(rng.random((4, 1))), store)
    assert np.array_equal(pos.data, np.zeros((4, 16)))
    desc = descriptor_encoder(Tensor(rng.random((4, 8))), pos, store)
    assert np.array_equal(desc.data, np.zeros((4, 16)))


def test_descriptor_encoder_gradient_check(rng):
    store = ParameterStore()
    init_descriptor_encoder(store, 6, 12, rng)
    f_kp = rng.random((5, 6))
    pos = rng.random((5, 12))
    probe = rng.standard_normal((5, 12))

    store.zero_grad()
    out = descriptor_encoder(Tensor(f_kp), Tensor(pos), store)
    T.reduce_sum(T.mul(out, Tensor(probe))).backward()

    for name, t in store.items():
        base = t.data.copy()

        def loss_fn(arr):
            t.data = arr
            val = descriptor_encoder(Tensor(f_kp), Tensor(pos), store)
            t.data = base
            return float((val.data * probe).sum())

        analytic = t.grad if t.grad is not None else np.zeros_like(base)
        assert_grads_close(analytic, numeric_grad(loss_fn, base.copy()))
