"""Point-cloud keypoint matching and rigid registration with learned features."""

__version__ = "0.1.0"

from .config import RunConfig, load_config, parse_config
from .dataio import ScanPair, SyntheticConfig, make_synthetic_pair
from .estimator import PointCloudMatcher
from .geometry import PointCloud, RigidTransform
from .model import ModelConfig, forward_pair, init_parameters, predict_matches
from .training import TrainConfig, TrainingDivergedError, train

__all__ = [
    "ModelConfig", "PointCloud", "PointCloudMatcher", "RigidTransform",
    "RunConfig", "ScanPair", "SyntheticConfig", "TrainConfig",
    "TrainingDivergedError", "forward_pair", "init_parameters", "load_config",
    "make_synthetic_pair", "parse_config", "predict_matches", "train",
]
