"""Soft assignment between two descriptor sets.

Scaled-inner-product similarities are augmented with a learnable dustbin
row and column, normalized by unrolled log-domain Sinkhorn sweeps against
marginals that give every real keypoint unit mass (dustbins absorb the
rest), and finally hardened to mutual-argmax matches.
"""

import numpy as np

from . import tensor as T
from .dataio import DUSTBIN
from .tensor import Tensor


def similarity_scores(f_q, f_s):
    """S_ij = <f_i, f_j> / sqrt(d)."""
    if f_q.shape[1] != f_s.shape[1]:
        raise ValueError("descriptor dims differ: %s vs %s" % (f_q.shape, f_s.shape))
    scale = 1.0 / np.sqrt(f_q.shape[1])
    return T.mul(T.matmul(f_q, T.transpose(f_s)), scale)


def augment_with_dustbin(scores, z):
    """Append the dustbin column and row, every new entry the scalar z."""
    m, n = scores.shape
    col = T.mul(z, Tensor(np.ones((m, 1))))
    row = T.mul(z, Tensor(np.ones((1, n + 1))))
    return T.concat([T.concat([scores, col], axis=1), row], axis=0)


def sinkhorn(aug, iters):
    """Unrolled log-domain row/column normalization of augmented scores.

    Marginals: each real keypoint has mass 1; the dustbin row holds N and
    the dustbin column M, so unmatched mass always has somewhere to go.
    Returns P-bar = exp(Z + u + v), differentiable through every sweep.
    """
    if iters < 1:
        raise ValueError("sinkhorn needs at least one iteration")
    m1, n1 = aug.shape
    m, n = m1 - 1, n1 - 1
    log_mu = np.zeros((m1, 1))
    log_mu[m, 0] = np.log(n) if n > 0 else 0.0
    log_nu = np.zeros((1, n1))
    log_nu[0, n] = np.log(m) if m > 0 else 0.0
    mu = Tensor(log_mu)
    nu = Tensor(log_nu)
    u = Tensor(np.zeros((m1, 1)))
    v = Tensor(np.zeros((1, n1)))
    for _ in range(iters):
        u = T.sub(mu, T.logsumexp(T.add(aug, v), axis=1, keepdims=True))
        v = T.sub(nu, T.logsumexp(T.add(aug, u), axis=0, keepdims=True))
    return T.exp(T.add(T.add(aug, u), v))


def build_gt_matrix(gt_matches, m, n):
    """Binary (M+1)x(N+1) matrix from per-query decisions (source index or DUSTBIN).

    Unmatched source keypoints are assigned to the dustbin row; the corner
    stays 0.  Each real row and column carries exactly one 1.
    """
    gt_matches = np.asarray(gt_matches, dtype=np.int64)
    if gt_matches.shape != (m,):
        raise ValueError("expected %d ground-truth decisions, got %s"
                         % (m, gt_matches.shape))
    matched = gt_matches[gt_matches != DUSTBIN]
    if matched.size and (matched.min() < 0 or matched.max() >= n):
        raise ValueError("ground-truth source index out of range")
    if len(set(matched.tolist())) != matched.size:
        raise ValueError("duplicate source assignment in ground truth")
    gt = np.zeros((m + 1, n + 1))
    for i, g in enumerate(gt_matches):
        gt[i, n if g == DUSTBIN else g] = 1.0
    for j in range(n):
        if j not in matched:
            gt[m, j] = 1.0
    return gt


def extract_matches(p_bar, threshold=0.0):
    """Harden P-bar into matches: mutual argmax, above threshold, beats the dustbin.

    Returns (list of (i, j), per-query decisions with DUSTBIN for the rest).
    The result is injective on both sides by mutuality.
    """
    p = p_bar.data if isinstance(p_bar, Tensor) else np.asarray(p_bar)
    m1, n1 = p.shape
    m, n = m1 - 1, n1 - 1
    interior = p[:m, :n]
    decisions = np.full(m, DUSTBIN, dtype=np.int64)
    matches = []
    if m == 0 or n == 0:
        return matches, decisions
    row_best = interior.argmax(axis=1)
    col_best = interior.argmax(axis=0)
    for i in range(m):
        j = row_best[i]
        if col_best[j] != i:
            continue
        score = interior[i, j]
        if score > threshold and score > p[i, n]:
            matches.append((i, int(j)))
            decisions[i] = j
    return matches, decisions


def write_matches(path, decisions, scores):
    """One line per query keypoint: `i j score`, j = -1 for dustbin."""
    decisions = np.asarray(decisions)
    scores = np.asarray(scores)
    with open(path, "w") as fh:
        for i, (j, s) in enumerate(zip(decisions, scores)):
            fh.write("%d %d %.17g\n" % (i, j, s))


def read_matches(path):
    decisions = []
    scores = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if len(fields) != 3:
                raise ValueError("matches line %d has %d fields, expected 3"
                                 % (lineno, len(fields)))
            i, j, s = int(fields[0]), int(fields[1]), float(fields[2])
            if i != lineno - 1:
                raise ValueError("matches line %d indexes keypoint %d" % (lineno, i))
            decisions.append(j)
            scores.append(s)
    return np.asarray(decisions, dtype=np.int64), np.asarray(scores)


def match_scores(p_bar, decisions):
    """Score column for the matches file: P-bar at the decision (dustbin mass for -1)."""
    p = p_bar.data if isinstance(p_bar, Tensor) else np.asarray(p_bar)
    n = p.shape[1] - 1
    return np.array([p[i, n if j == DUSTBIN else j]
                     for i, j in enumerate(np.asarray(decisions))])
