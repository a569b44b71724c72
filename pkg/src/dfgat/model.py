"""End-to-end matcher: dense features, keypoints, descriptors, attention, assignment."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .assignment import (augment_with_dustbin, extract_matches,
                         similarity_scores, sinkhorn)
from .attention import FULL, GatConfig, decay_schedules, gat_forward, init_gat
from .features import (BackboneConfig, backbone, descriptor_encoder,
                       detect_keypoints, init_backbone,
                       init_descriptor_encoder, init_keypoint_encoder,
                       keypoint_encoder)
from .tensor import ParameterStore, Tensor


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 128
    num_layers: int = 9
    num_heads: int = 4
    decay_variant: str = "default"
    keypoint_budget: int = 256
    sinkhorn_iters: int = 20
    backbone_depth: int = 3
    backbone_width: int = 32
    radius: float = 1.0
    sigma: float = 0.0
    neighbor_cap: int = 64
    include_coords: bool = True
    self_schedule: tuple = None   # explicit budgets override decay_variant
    cross_schedule: tuple = None

    def __post_init__(self):
        if self.keypoint_budget < 1:
            raise ValueError("keypoint_budget must be at least 1")
        if self.sinkhorn_iters < 1:
            raise ValueError("sinkhorn_iters must be at least 1")
        self.gat_config()  # validates dims, heads, schedules

    def backbone_config(self):
        return BackboneConfig(depth=self.backbone_depth, width=self.backbone_width,
                              radius=self.radius, sigma=self.sigma,
                              neighbor_cap=self.neighbor_cap,
                              include_coords=self.include_coords)

    def gat_config(self):
        if self.num_layers == 9:
            self_s, cross_s = decay_schedules(self.decay_variant)
        elif self.decay_variant == "default":
            # named pruning schedules are tied to the 9-layer stack; smaller
            # stacks (gradient-check configs) run with full edges
            self_s = cross_s = [FULL] * self.num_layers
        else:
            raise ValueError("decay variant %r needs the 9-layer stack"
                             % self.decay_variant)
        if self.self_schedule is not None:
            self_s = self.self_schedule
        if self.cross_schedule is not None:
            cross_s = self.cross_schedule
        return GatConfig(num_layers=self.num_layers, num_heads=self.num_heads,
                         feature_dim=self.feature_dim,
                         self_schedule=tuple(self_s), cross_schedule=tuple(cross_s))


@dataclass
class ForwardResult:
    p_bar: Tensor
    kp_query: object
    kp_source: object
    f_query: Tensor
    f_source: Tensor


@dataclass
class Prediction:
    matches: list
    decisions: np.ndarray
    result: ForwardResult


def init_parameters(cfg, rng):
    store = ParameterStore()
    init_backbone(store, cfg.backbone_config(), rng)
    init_keypoint_encoder(store, cfg.feature_dim, rng)
    init_descriptor_encoder(store, cfg.backbone_width, cfg.feature_dim, rng)
    init_gat(store, cfg.gat_config(), rng)
    store.add("dustbin.z", np.zeros((1, 1)))
    return store


def describe_cloud(cloud, cfg, store):
    """Backbone features, detected keypoints, and matcher descriptors for one cloud."""
    bcfg = cfg.backbone_config()
    fm = backbone(cloud, bcfg, store)
    kp = detect_keypoints(cloud, fm.features, cfg.keypoint_budget,
                          bcfg.radius, cap=bcfg.neighbor_cap)
    enc = keypoint_encoder(kp.positions, kp.scores, store)
    f_at = T.gather_rows(fm.features, kp.indices)
    desc = descriptor_encoder(f_at, enc, store)
    return kp, desc


def forward_pair(query_cloud, source_cloud, cfg, store):
    kp_q, desc_q = describe_cloud(query_cloud, cfg, store)
    kp_s, desc_s = describe_cloud(source_cloud, cfg, store)
    f_q, f_s = gat_forward(desc_q, desc_s, cfg.gat_config(), store)
    scores = similarity_scores(f_q, f_s)
    aug = augment_with_dustbin(scores, store["dustbin.z"])
    p_bar = sinkhorn(aug, cfg.sinkhorn_iters)
    return ForwardResult(p_bar=p_bar, kp_query=kp_q, kp_source=kp_s,
                         f_query=f_q, f_source=f_s)


def predict_matches(query_cloud, source_cloud, cfg, store, threshold=0.0):
    result = forward_pair(query_cloud, source_cloud, cfg, store)
    matches, decisions = extract_matches(result.p_bar, threshold=threshold)
    return Prediction(matches=matches, decisions=decisions, result=result)
