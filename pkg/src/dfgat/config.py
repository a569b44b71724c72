"""Run configuration: one flat `key = value` namespace shared by every command."""

from dataclasses import dataclass, fields, replace

from .attention import FULL
from .model import ModelConfig
from .training import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    # model
    layers: int = 9
    heads: int = 4
    feature_dim: int = 128
    keypoints: int = 256
    sinkhorn_iters: int = 20
    decay_variant: str = "default"
    self_k: tuple = None    # explicit per-layer budgets override decay_variant
    cross_k: tuple = None
    backbone_depth: int = 3
    backbone_width: int = 32
    radius: float = 1.0
    sigma: float = 0.0
    neighbor_cap: int = 64
    include_coords: bool = True
    # training
    batch: int = 64
    lr: float = 1e-3
    lr_after_epoch15: float = 1e-4
    lr_switch_epoch: int = 15
    epochs: int = 20
    seed: int = 0
    loss: str = "gap"
    margin: float = 0.5
    gt_tau: float = 0.5
    match_threshold: float = 0.0
    # evaluation / registration
    rte_max: float = 2.0
    rre_max: float = 5.0
    inlier_tau: float = 0.5
    ransac_iters: int = 1000
    ransac_threshold: float = 0.05

    def model_config(self):
        return ModelConfig(feature_dim=self.feature_dim, num_layers=self.layers,
                           num_heads=self.heads, decay_variant=self.decay_variant,
                           keypoint_budget=self.keypoints,
                           sinkhorn_iters=self.sinkhorn_iters,
                           backbone_depth=self.backbone_depth,
                           backbone_width=self.backbone_width,
                           radius=self.radius, sigma=self.sigma,
                           neighbor_cap=self.neighbor_cap,
                           include_coords=self.include_coords,
                           self_schedule=self.self_k,
                           cross_schedule=self.cross_k)

    def train_config(self):
        return TrainConfig(epochs=self.epochs, batch_size=self.batch, lr=self.lr,
                           lr_late=self.lr_after_epoch15,
                           lr_switch_epoch=self.lr_switch_epoch, seed=self.seed,
                           loss_variant=self.loss, margin=self.margin,
                           gt_tau=self.gt_tau,
                           match_threshold=self.match_threshold)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse_schedule(raw):
    out = []
    for token in raw.split(","):
        token = token.strip().lower()
        if token in ("full", "none", "inf"):
            out.append(FULL)
        else:
            out.append(int(token))
    return tuple(out)


def _parse_value(key, raw):
    kind = _FIELDS[key].type
    raw = raw.strip()
    if key in ("self_k", "cross_k"):
        return _parse_schedule(raw)
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is bool:
        lowered = raw.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ValueError("boolean key %r got %r" % (key, raw))
    return raw


def parse_config(text, base=None):
    """Parse `key = value` lines (# starts a comment) over a base config."""
    cfg = base if base is not None else RunConfig()
    updates = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError("config line %d is not `key = value`" % lineno)
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ValueError("unknown configuration key %r" % key)
        try:
            updates[key] = _parse_value(key, raw)
        except ValueError as err:
            raise ValueError("config line %d: %s" % (lineno, err))
    cfg = replace(cfg, **updates)
    cfg.model_config()  # fail fast on inconsistent values
    cfg.train_config()
    return cfg


def load_config(path, overrides=()):
    """Read a config file (optional) and apply `key=value` override strings."""
    cfg = RunConfig()
    if path is not None:
        with open(path, "r") as fh:
            cfg = parse_config(fh.read(), base=cfg)
    if overrides:
        cfg = parse_config("\n".join(overrides), base=cfg)
    return cfg
