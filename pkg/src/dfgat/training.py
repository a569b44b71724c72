"""Losses, the Adam optimizer, the training loop, and their file formats."""

import struct
from dataclasses import dataclass
from functools import reduce

import numpy as np

from . import tensor as T
from .assignment import build_gt_matrix
from .dataio import DUSTBIN, ground_truth_correspondences
from .model import forward_pair, init_parameters, predict_matches
from .tensor import Tensor

CHECKPOINT_MAGIC = b"DFGATCK1"
CHECKPOINT_VERSION = 1
EPOCH_LOG_HEADER = "epoch,loss,val_precision,val_accuracy,val_recall,val_f1"


class TrainingDivergedError(RuntimeError):
    pass


def _check_gt_matrix(p_bar, gt):
    gt = np.asarray(gt)
    if gt.shape != p_bar.shape:
        raise ValueError("ground-truth matrix shape %s does not match scores %s"
                         % (gt.shape, p_bar.shape))
    m, n = gt.shape[0] - 1, gt.shape[1] - 1
    if not np.isin(gt, (0.0, 1.0)).all():
        raise ValueError("ground-truth matrix must be binary")
    if m and not (gt[:m].sum(axis=1) == 1.0).all():
        raise ValueError("every query row needs exactly one assignment")
    if n and not (gt[:, :n].sum(axis=0) == 1.0).all():
        raise ValueError("every source column needs exactly one assignment")
    if gt[m, n] != 0.0:
        raise ValueError("corner entry must be 0")
    return gt


def gap_loss(p_bar, gt, margin=0.5):
    """Margin loss pushing each true assignment above all its competitors.

    For row i with true column g: z_n = log P[i,n] - log P[i,g] + margin
    over the other columns, and the row contributes log(sum (z_n)+ + 1).
    Columns contribute symmetrically.  Since z at the true position is
    exactly the margin, the sum over all columns minus (margin + 1) equals
    the sum over competitors, which keeps the whole thing vectorized.
    """
    gt = _check_gt_matrix(p_bar, gt)
    m, n = gt.shape[0] - 1, gt.shape[1] - 1
    logp = T.log_guarded(p_bar)

    def side(logp_slice, gt_slice, axis):
        ref = T.reduce_sum(T.mul(logp_slice, Tensor(gt_slice)),
                           axis=1 - axis, keepdims=True)
        z = T.add(T.sub(logp_slice, ref), margin)
        hinges = T.add(T.relu(z), 1.0)
        sums = T.sub(T.reduce_sum(hinges, axis=1 - axis, keepdims=True),
                     margin + 1.0)
        return T.reduce_sum(T.log_guarded(sums))

    rows = side(T.narrow(logp, 0, 0, m), gt[:m, :], axis=0) if m else Tensor(0.0)
    cols = side(T.narrow(logp, 1, 0, n), gt[:, :n], axis=1) if n else Tensor(0.0)
    return T.add(rows, cols)


def superglue_loss(p_bar, gt):
    """Negative log-likelihood of the assignment at every true position."""
    gt = _check_gt_matrix(p_bar, gt)
    return T.mul(T.reduce_sum(T.mul(T.log_guarded(p_bar), Tensor(gt))), -1.0)


def triplet_loss(desc_q, desc_s, gt_matches, margin=0.5):
    """Hinge on anchor-positive vs hardest-negative descriptor distance."""
    gt_matches = np.asarray(gt_matches, dtype=np.int64)
    m = desc_q.shape[0]
    n = desc_s.shape[0]
    if gt_matches.shape != (m,):
        raise ValueError("expected %d ground-truth decisions" % m)
    anchors = (gt_matches != DUSTBIN)
    qq = T.reduce_sum(T.mul(desc_q, desc_q), axis=1, keepdims=True)
    ss = T.transpose(T.reduce_sum(T.mul(desc_s, desc_s), axis=1, keepdims=True))
    cross = T.matmul(desc_q, T.transpose(desc_s))
    d2 = T.relu(T.add(T.sub(qq, T.mul(cross, 2.0)), ss))
    d = T.exp(T.mul(T.log_guarded(d2), 0.5))
    if not anchors.any() or n < 2:
        return T.mul(T.reduce_sum(d), 0.0)
    pos_mask = np.zeros((m, n))
    pos_mask[anchors, gt_matches[anchors]] = 1.0
    pos = T.reduce_sum(T.mul(d, Tensor(pos_mask)), axis=1, keepdims=True)
    # push the positive entry out of the minimum, then min = -max(-d)
    shifted = T.add(d, Tensor(pos_mask * 1e9))
    neg_max, _ = T.reduce_max(T.mul(shifted, -1.0), axis=1, keepdims=True)
    neg = T.mul(neg_max, -1.0)
    hinge = T.relu(T.add(T.sub(pos, neg), margin))
    keep = Tensor(anchors.astype(np.float64).reshape(m, 1))
    return T.mul(T.reduce_sum(T.mul(hinge, keep)), 1.0 / anchors.sum())


class AdamState:
    """First/second moment accumulators mirroring a parameter store."""

    def __init__(self, store, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in store.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in store.items()}


def adam_step(store, state, lr):
    """Bias-corrected Adam update; a missing gradient only decays the moments."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for name, p in store.items():
        g = p.grad
        if g is not None and not np.isfinite(g).all():
            raise TrainingDivergedError("non-finite gradient for parameter %r" % name)
        if g is None:
            g = np.zeros_like(p.data)
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / (1.0 - b1 ** state.t)
        v_hat = state.v[name] / (1.0 - b2 ** state.t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def matching_counts(predicted, gt):
    """Per-query confusion counts; a wrong pair is both a FP and a FN."""
    predicted = np.asarray(predicted)
    gt = np.asarray(gt)
    if predicted.shape != gt.shape:
        raise ValueError("prediction/ground-truth length mismatch")
    tp = int(((predicted == gt) & (gt != DUSTBIN)).sum())
    tn = int(((predicted == DUSTBIN) & (gt == DUSTBIN)).sum())
    fp = int(((predicted != DUSTBIN) & (predicted != gt)).sum())
    fn = int(((gt != DUSTBIN) & (predicted != gt)).sum())
    return tp, fp, fn, tn


def metrics_from_counts(tp, fp, fn, tn):
    total = tp + fp + fn + tn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    accuracy = (tp + tn) / total if total else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "accuracy": accuracy,
            "recall": recall, "f1": f1}


def matching_metrics(predicted, gt):
    return metrics_from_counts(*matching_counts(predicted, gt))


def save_checkpoint(path, store):
    """Binary parameter dump; float32 payloads, names in sorted order."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(store)))
        for name, p in store.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", p.data.ndim))
            fh.write(struct.pack("<%dI" % p.data.ndim, *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint into an ordered {name: float64 array} mapping."""
    def take(fh, count, what):
        buf = fh.read(count)
        if len(buf) != count:
            raise ValueError("checkpoint truncated reading %s" % what)
        return buf

    out = {}
    with open(path, "rb") as fh:
        if take(fh, len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint file")
        version, count = struct.unpack("<II", take(fh, 8, "header"))
        if version != CHECKPOINT_VERSION:
            raise ValueError("unsupported checkpoint version %d" % version)
        for _ in range(count):
            (name_len,) = struct.unpack("<H", take(fh, 2, "name length"))
            name = take(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", take(fh, 1, "rank"))
            dims = struct.unpack("<%dI" % rank, take(fh, 4 * rank, "dims"))
            n_values = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = take(fh, 4 * n_values, "payload for %r" % name)
            data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
            if name in out:
                raise ValueError("duplicate parameter %r in checkpoint" % name)
            out[name] = data.reshape(dims)
    return out


def restore_parameters(store, loaded):
    if set(loaded) != set(store.names()):
        missing = sorted(set(store.names()) - set(loaded))
        extra = sorted(set(loaded) - set(store.names()))
        raise ValueError("checkpoint does not match model: missing %s, extra %s"
                         % (missing, extra))
    for name, arr in loaded.items():
        p = store[name]
        if arr.shape != p.data.shape:
            raise ValueError("parameter %r has shape %s, expected %s"
                             % (name, arr.shape, p.data.shape))
        p.data = arr


def write_epoch_log(path, rows):
    with open(path, "w") as fh:
        fh.write(EPOCH_LOG_HEADER + "\n")
        for r in rows:
            fh.write("%d,%.10g,%.10g,%.10g,%.10g,%.10g\n"
                     % (r["epoch"], r["loss"], r["val_precision"],
                        r["val_accuracy"], r["val_recall"], r["val_f1"]))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    lr_late: float = 1e-4
    lr_switch_epoch: int = 15
    seed: int = 0
    loss_variant: str = "gap"
    margin: float = 0.5
    gt_tau: float = 0.5
    match_threshold: float = 0.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.loss_variant not in ("gap", "superglue", "triplet"):
            raise ValueError("unknown loss variant %r" % self.loss_variant)
        if self.margin <= 0:
            raise ValueError("margin must be positive")

    def learning_rate(self, epoch):
        return self.lr if epoch <= self.lr_switch_epoch else self.lr_late


def pair_loss(pair, model_cfg, store, train_cfg):
    """Forward one scan pair and evaluate the configured loss."""
    result = forward_pair(pair.query, pair.source, model_cfg, store)
    gt = ground_truth_correspondences(result.kp_query.positions,
                                      result.kp_source.positions,
                                      pair.gt_transform, train_cfg.gt_tau)
    if train_cfg.loss_variant == "triplet":
        return triplet_loss(result.f_query, result.f_source, gt,
                            margin=train_cfg.margin)
    m = len(result.kp_query)
    n = len(result.kp_source)
    gt_matrix = build_gt_matrix(gt, m, n)
    if train_cfg.loss_variant == "superglue":
        return superglue_loss(result.p_bar, gt_matrix)
    return gap_loss(result.p_bar, gt_matrix, margin=train_cfg.margin)


def validation_metrics(pairs, model_cfg, store, train_cfg):
    """Micro-averaged matching metrics over a list of scan pairs."""
    counts = np.zeros(4, dtype=np.int64)
    for pair in pairs:
        pred = predict_matches(pair.query, pair.source, model_cfg, store,
                               threshold=train_cfg.match_threshold)
        gt = ground_truth_correspondences(pred.result.kp_query.positions,
                                          pred.result.kp_source.positions,
                                          pair.gt_transform, train_cfg.gt_tau)
        counts += matching_counts(pred.decisions, gt)
    return metrics_from_counts(*counts)


@dataclass
class TrainResult:
    store: object
    best_store: object
    rows: list
    best_epoch: int
    best_f1: float


def train(train_pairs, val_pairs, model_cfg, train_cfg,
          store=None, log_path=None, checkpoint_path=None, progress=None):
    """Seeded epochs of batched gradient steps with best-F1 checkpointing."""
    if not train_pairs:
        raise ValueError("training needs at least one pair")
    rng = np.random.default_rng(train_cfg.seed)
    if store is None:
        store = init_parameters(model_cfg, rng)
    state = AdamState(store)
    rows = []
    best_f1 = -1.0
    best_epoch = 0
    best_store = store.copy()
    for epoch in range(1, train_cfg.epochs + 1):
        lr = train_cfg.learning_rate(epoch)
        order = rng.permutation(len(train_pairs))
        epoch_loss = 0.0
        for start in range(0, len(order), train_cfg.batch_size):
            batch = order[start:start + train_cfg.batch_size]
            store.zero_grad()
            losses = [pair_loss(train_pairs[i], model_cfg, store, train_cfg)
                      for i in batch]
            total = T.mul(reduce(T.add, losses), 1.0 / len(batch))
            value = total.item()
            if not np.isfinite(value):
                raise TrainingDivergedError("loss is not finite at epoch %d" % epoch)
            total.backward()
            adam_step(store, state, lr)
            epoch_loss += value * len(batch)
        epoch_loss /= len(order)
        metrics = (validation_metrics(val_pairs, model_cfg, store, train_cfg)
                   if val_pairs else
                   {"precision": 0.0, "accuracy": 0.0, "recall": 0.0, "f1": 0.0})
        row = {"epoch": epoch, "loss": epoch_loss,
               "val_precision": metrics["precision"],
               "val_accuracy": metrics["accuracy"],
               "val_recall": metrics["recall"],
               "val_f1": metrics["f1"]}
        rows.append(row)
        if metrics["f1"] > best_f1:
            best_f1 = metrics["f1"]
            best_epoch = epoch
            best_store = store.copy()
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, store)
        if log_path is not None:
            write_epoch_log(log_path, rows)
        if progress is not None:
            progress(row)
    if checkpoint_path is not None and best_f1 < 0:
        save_checkpoint(checkpoint_path, store)
    return TrainResult(store=store, best_store=best_store, rows=rows,
                       best_epoch=best_epoch, best_f1=best_f1)
