"""Scikit-learn style facade over the matching pipeline.

The estimator wraps dataset-in, decisions-out usage: ``fit`` trains the
matcher on a list of scan pairs, ``predict`` returns per-query-keypoint
source assignments, and ``score`` reports matching F1 against the pairs'
ground-truth motions.  Everything it does is also reachable through the
functional modules; this class only packages them behind the estimator
protocol (``get_params``/``set_params``, fitted-attribute convention).
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dataio import ScanPair, ground_truth_correspondences
from .model import init_parameters, predict_matches
from .training import (TrainConfig, matching_counts, metrics_from_counts,
                       restore_parameters, train)


def validate_pairs(X, what="X"):
    """Require a non-empty sequence of ScanPair; returns it as a list."""
    pairs = list(X)
    if not pairs:
        raise ValueError("%s must contain at least one scan pair" % what)
    for k, pair in enumerate(pairs):
        if not isinstance(pair, ScanPair):
            raise TypeError("%s[%d] is %s, expected ScanPair"
                            % (what, k, type(pair).__name__))
    return pairs


class PointCloudMatcher(BaseEstimator):
    """Trainable point-cloud keypoint matcher with rigid-motion supervision.

    Parameters mirror the run configuration; see ``dfgat.config.RunConfig``
    for the full surface.  ``fit`` leaves the trained parameters on
    ``self.store_`` (best validation F1) and the epoch rows on ``self.rows_``.
    """

    def __init__(self, model_config=None, epochs=20, batch_size=8, lr=1e-3,
                 lr_late=1e-4, lr_switch_epoch=15, loss="gap", margin=0.5,
                 gt_tau=0.5, match_threshold=0.0, val_fraction=0.1, seed=0):
        self.model_config = model_config
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_late = lr_late
        self.lr_switch_epoch = lr_switch_epoch
        self.loss = loss
        self.margin = margin
        self.gt_tau = gt_tau
        self.match_threshold = match_threshold
        self.val_fraction = val_fraction
        self.seed = seed

    def _model_config(self):
        if self.model_config is not None:
            return self.model_config
        from .model import ModelConfig
        return ModelConfig()

    def _train_config(self):
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           lr=self.lr, lr_late=self.lr_late,
                           lr_switch_epoch=self.lr_switch_epoch,
                           seed=self.seed, loss_variant=self.loss,
                           margin=self.margin, gt_tau=self.gt_tau,
                           match_threshold=self.match_threshold)

    def fit(self, X, y=None):
        """Train on scan pairs; ``y`` is ignored (motions live on the pairs)."""
        pairs = validate_pairs(X)
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")
        rng = np.random.default_rng(self.seed)
        order = rng.permutation(len(pairs))
        n_val = int(round(self.val_fraction * len(pairs)))
        n_val = min(n_val, len(pairs) - 1)
        val = [pairs[i] for i in order[:n_val]]
        tr = [pairs[i] for i in order[n_val:]]
        result = train(tr, val, self._model_config(), self._train_config())
        self.store_ = result.best_store if val else result.store
        self.rows_ = result.rows
        self.best_epoch_ = result.best_epoch
        self.n_features_in_ = 1
        return self

    def warm_start_from(self, loaded):
        """Adopt checkpoint parameters (mapping of name -> array) without fitting."""
        store = init_parameters(self._model_config(),
                                np.random.default_rng(self.seed))
        restore_parameters(store, loaded)
        self.store_ = store
        self.rows_ = []
        self.best_epoch_ = 0
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        """Per-pair arrays of source keypoint indices (-1 where unmatched)."""
        check_is_fitted(self, "store_")
        pairs = validate_pairs(X)
        cfg = self._model_config()
        return [predict_matches(p.query, p.source, cfg, self.store_,
                                threshold=self.match_threshold).decisions
                for p in pairs]

    def score(self, X, y=None):
        """Micro-averaged matching F1 against ground-truth correspondences."""
        check_is_fitted(self, "store_")
        pairs = validate_pairs(X)
        cfg = self._model_config()
        counts = np.zeros(4, dtype=np.int64)
        for pair in pairs:
            pred = predict_matches(pair.query, pair.source, cfg, self.store_,
                                   threshold=self.match_threshold)
            gt = ground_truth_correspondences(pred.result.kp_query.positions,
                                              pred.result.kp_source.positions,
                                              pair.gt_transform, self.gt_tau)
            counts += matching_counts(pred.decisions, gt)
        return metrics_from_counts(*counts)["f1"]
