"""Dense point features, detection scores, and the two keypoint encoders.

The convolution aggregates neighbor features through a fixed set of
kernel offsets with linear influence falloff, normalized by neighborhood
size so densification does not change the output.  Detection combines a
channel-max ratio with a saliency score (softplus of the difference from
the neighborhood mean) and ranks hard local maxima first.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import NeighborIndex
from .tensor import Tensor

ICOSAHEDRON_SHELL_SCALE = 0.66


def kernel_offsets(sigma):
    """One center point plus 12 icosahedron vertices at 0.66 sigma."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = []
    for a in (-1.0, 1.0):
        for b in (-phi, phi):
            verts.append([0.0, a, b])
            verts.append([a, b, 0.0])
            verts.append([b, 0.0, a])
    verts = np.asarray(verts) / np.sqrt(1.0 + phi * phi)
    shell = verts * (ICOSAHEDRON_SHELL_SCALE * sigma)
    return np.vstack([np.zeros(3), shell])


@dataclass(frozen=True)
class KernelConfig:
    """Kernel offsets with influence radius and channel sizes."""

    kernel_points: np.ndarray
    sigma: float
    in_channels: int
    out_channels: int

    def __post_init__(self):
        pts = np.asarray(self.kernel_points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError("kernel_points must be (K, 3)")
        d = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
        if (d[~np.eye(len(pts), dtype=bool)] == 0).any():
            raise ValueError("kernel points must be distinct")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        object.__setattr__(self, "kernel_points", pts)


def make_kernel_config(sigma, in_channels, out_channels):
    return KernelConfig(kernel_offsets(sigma), sigma, in_channels, out_channels)


@dataclass(frozen=True)
class BackboneConfig:
    """Stack of convolution blocks; all layers share one neighborhood radius."""

    depth: int = 3
    width: int = 32
    radius: float = 1.0
    sigma: float = 0.0  # 0 means "use radius"
    neighbor_cap: int = 64
    include_coords: bool = True

    def __post_init__(self):
        if self.depth < 1 or self.width < 1:
            raise ValueError("depth and width must be positive")
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    @property
    def effective_sigma(self):
        return self.sigma if self.sigma > 0 else self.radius

    @property
    def in_channels(self):
        return 4 if self.include_coords else 1


@dataclass
class FeatureMap:
    """Per-point features aligned with a cloud."""

    features: Tensor
    cloud: object


@dataclass
class KeypointSet:
    """Detected keypoints; encoded position and descriptor rows are filled later."""

    indices: np.ndarray
    positions: np.ndarray
    scores: Tensor  # K x 1, differentiable back into the feature stack
    channels: np.ndarray
    pos: Tensor = None
    descriptors: Tensor = None

    def __len__(self):
        return len(self.indices)


def build_neighborhoods(cloud, radius, cap=None, index=None):
    """Per-point radius neighbors (self excluded), nearest first."""
    index = index or NeighborIndex(cloud)
    return [index.query(cloud.points[i], radius, cap=cap, exclude_index=i)
            for i in range(len(cloud))]


def _influence_matrices(cloud, neighborhoods, cfg):
    """Constant aggregation matrices: H[k][i, j] = h(p_j - p_i, x_k) / |N_i|.

    Neighborhoods here include the point itself (self-inclusion keeps
    |N_i| >= 1), so an isolated point still sees the center kernel point.
    """
    pts = cloud.points
    n = len(pts)
    kp = cfg.kernel_points
    h = np.zeros((len(kp), n, n))
    for i in range(n):
        nbrs = np.concatenate([[i], neighborhoods[i]])
        offsets = pts[nbrs] - pts[i]
        d = np.linalg.norm(offsets[:, None, :] - kp[None, :, :], axis=2)
        infl = np.maximum(0.0, 1.0 - d / cfg.sigma) / len(nbrs)
        h[:, i, nbrs] = infl.T
    return h


def kpconv_layer(cloud, f_in, cfg, weights, neighborhoods):
    """Density-normalized kernel point convolution.

    ``weights`` is one (K*in, out) tensor; slice k holds W_k.  The output
    is sum_k H_k (F W_k) with constant H_k, so gradients reach only the
    features and the weights.
    """
    if f_in.shape[1] != cfg.in_channels:
        raise ValueError("feature channels %d do not match kernel config %d"
                         % (f_in.shape[1], cfg.in_channels))
    if weights.shape != (len(cfg.kernel_points) * cfg.in_channels, cfg.out_channels):
        raise ValueError("weight shape %s does not match kernel config" % (weights.shape,))
    h = _influence_matrices(cloud, neighborhoods, cfg)
    out = None
    for k in range(len(cfg.kernel_points)):
        wk = T.narrow(weights, 0, k * cfg.in_channels, cfg.in_channels)
        if not h[k].any():
            continue
        term = T.matmul(Tensor(h[k]), T.matmul(f_in, wk))
        out = term if out is None else T.add(out, term)
    if out is None:
        out = T.mul(T.matmul(f_in, T.narrow(weights, 0, 0, cfg.in_channels)), 0.0)
    return out


def _glorot(rng, n_in, n_out):
    lim = np.sqrt(6.0 / (n_in + n_out))
    # drawn at float32 so untrained checkpoints round-trip losslessly
    return rng.uniform(-lim, lim, (n_in, n_out)).astype(np.float32).astype(np.float64)


def init_backbone(store, cfg, rng, prefix="backbone"):
    k = len(kernel_offsets(cfg.effective_sigma))
    n_in = cfg.in_channels
    for layer in range(cfg.depth):
        store.add("%s.layer%d.W" % (prefix, layer), _glorot(rng, k * n_in, cfg.width))
        n_in = cfg.width


def _layer_kernel_config(cfg, layer):
    n_in = cfg.in_channels if layer == 0 else cfg.width
    return make_kernel_config(cfg.effective_sigma, n_in, cfg.width)


def l2_normalize_rows(x):
    """Row normalization via the guarded log; zero rows stay zero."""
    sq = T.reduce_sum(T.mul(x, x), axis=1, keepdims=True)
    return T.mul(x, T.exp(T.mul(T.log_guarded(sq), -0.5)))


def backbone(cloud, cfg, store, prefix="backbone", neighborhoods=None):
    """Dense features for every point: conv blocks with relu, L2-normalized rows."""
    if len(cloud) == 0:
        raise ValueError("backbone requires a non-empty cloud")
    if neighborhoods is None:
        neighborhoods = build_neighborhoods(cloud, cfg.radius, cap=cfg.neighbor_cap)
    n = len(cloud)
    if cfg.include_coords:
        f = Tensor(np.hstack([np.ones((n, 1)), cloud.points]))
    else:
        f = Tensor(np.ones((n, 1)))
    for layer in range(cfg.depth):
        kcfg = _layer_kernel_config(cfg, layer)
        w = store["%s.layer%d.W" % (prefix, layer)]
        f = T.relu(kpconv_layer(cloud, f, kcfg, w, neighborhoods))
    return FeatureMap(l2_normalize_rows(f), cloud)


def channel_max_score(f):
    """beta_i^k = F_i^k / max_t F_i^t, zero rows map to zero."""
    rowmax, _ = T.reduce_max(f, axis=1, keepdims=True)
    # lift all-zero rows to a denominator of exactly 1; their numerators are 0
    bump = Tensor((rowmax.data == 0).astype(np.float64))
    return T.div(f, T.add(rowmax, bump))


def softplus(x):
    # inputs here are differences of normalized features, |x| <= 1, no overflow
    return T.log_guarded(T.add(T.exp(x), 1.0))


def saliency_score(cloud, f, radius, cap=None, neighborhoods=None):
    """alpha_i^k = softplus(F_i^k - mean over radius neighborhood including i)."""
    if neighborhoods is None:
        neighborhoods = build_neighborhoods(cloud, radius, cap=cap)
    n = len(cloud)
    avg = np.zeros((n, n))
    for i in range(n):
        nbrs = np.concatenate([[i], neighborhoods[i]])
        avg[i, nbrs] = 1.0 / len(nbrs)
    return softplus(T.sub(f, T.matmul(Tensor(avg), f)))


def detect_keypoints(cloud, f, budget, radius, cap=None, neighborhoods=None):
    """Top-``budget`` keypoints: hard local-max winners first, then by score.

    The hard condition takes the point's argmax channel k and requires its
    value to strictly exceed every radius neighbor's channel-k value
    (neighbors exclude the point; isolated points pass vacuously).
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    if neighborhoods is None:
        neighborhoods = build_neighborhoods(cloud, radius, cap=cap)
    alpha = saliency_score(cloud, f, radius, neighborhoods=neighborhoods)
    beta = channel_max_score(f)
    scores, channels = T.reduce_max(T.mul(alpha, beta), axis=1, keepdims=True)

    fd = f.data
    n = len(cloud)
    hard = np.zeros(n, dtype=bool)
    best_channel = fd.argmax(axis=1)
    for i in range(n):
        k = best_channel[i]
        nbrs = neighborhoods[i]
        hard[i] = nbrs.size == 0 or (fd[i, k] > fd[nbrs, k]).all()

    s = scores.data.reshape(-1)
    order = sorted(range(n), key=lambda i: (not hard[i], -s[i], i))
    picked = np.asarray(order[:min(budget, n)], dtype=np.int64)
    return KeypointSet(
        indices=picked,
        positions=cloud.points[picked],
        scores=T.gather_rows(scores, picked),
        channels=channels.reshape(-1)[picked],
    )


def _mlp(x, store, prefix, n_layers):
    for layer in range(n_layers):
        w = store["%s.%d.W" % (prefix, layer)]
        b = store["%s.%d.b" % (prefix, layer)]
        x = T.add(T.matmul(x, w), b)
        if layer < n_layers - 1:
            x = T.relu(x)
    return x


def _init_mlp(store, prefix, dims, rng, out_scale=1.0):
    # out_scale shrinks the last layer's init; power-of-two values keep the
    # weights exactly float32-representable
    last = len(dims) - 2
    for layer, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
        w = _glorot(rng, n_in, n_out)
        if layer == last and out_scale != 1.0:
            w = w * out_scale
        store.add("%s.%d.W" % (prefix, layer), w)
        store.add("%s.%d.b" % (prefix, layer), np.zeros((1, n_out)))


def init_keypoint_encoder(store, feature_dim, rng, prefix="kpenc"):
    _init_mlp(store, prefix, [4, max(feature_dim // 4, 4),
                              max(feature_dim // 2, 4), feature_dim], rng)


def keypoint_encoder(positions, scores, store, prefix="kpenc"):
    """Encode (x, y, z, score) per keypoint through a 3-layer MLP."""
    x = T.concat([Tensor(np.asarray(positions, dtype=np.float64)), scores], axis=1)
    return _mlp(x, store, prefix, 3)


def init_descriptor_encoder(store, backbone_dim, feature_dim, rng, prefix="descenc"):
    _init_mlp(store, prefix, [backbone_dim + feature_dim, feature_dim, feature_dim], rng)


def descriptor_encoder(f_at_keypoints, pos, store, prefix="descenc"):
    """Fuse backbone features with encoded positions into matcher descriptors."""
    return _mlp(T.concat([f_at_keypoints, pos], axis=1), store, prefix, 2)
