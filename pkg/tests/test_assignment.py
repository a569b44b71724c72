import numpy as np
import pytest

import dfgat.tensor as T
from dfgat.assignment import (augment_with_dustbin, build_gt_matrix,
                              extract_matches, match_scores, read_matches,
                              similarity_scores, sinkhorn, write_matches)
from dfgat.dataio import DUSTBIN
from dfgat.tensor import Tensor

from conftest import assert_grads_close, numeric_grad
from oracles import sinkhorn_oracle


def run_sinkhorn(scores, z, iters):
    aug = augment_with_dustbin(Tensor(scores), Tensor(np.full((1, 1), z)))
    return sinkhorn(aug, iters).data


def test_similarity_basis_rows_give_scaled_identity():
    f = Tensor(np.eye(4, 128))
    s = similarity_scores(f, f)
    assert np.allclose(s.data, np.eye(4) / np.sqrt(128.0), atol=1e-15)


def test_similarity_zero_features_give_zero():
    s = similarity_scores(Tensor(np.zeros((3, 16))), Tensor(np.ones((5, 16))))
    assert np.all(s.data == 0.0)


def test_similarity_bilinear_in_query(rng):
    f_q = Tensor(rng.standard_normal((3, 16)))
    f_s = Tensor(rng.standard_normal((4, 16)))
    base = similarity_scores(f_q, f_s).data
    scaled = similarity_scores(T.mul(f_q, 2.5), f_s).data
    assert np.allclose(scaled, 2.5 * base, atol=1e-12)


def test_similarity_rejects_dim_mismatch():
    with pytest.raises(ValueError):
        similarity_scores(Tensor(np.zeros((2, 8))), Tensor(np.zeros((2, 9))))


def test_augment_places_z_everywhere_new():
    scores = Tensor(np.arange(6.0).reshape(2, 3))
    aug = augment_with_dustbin(scores, Tensor(np.full((1, 1), -1.5)))
    assert aug.shape == (3, 4)
    assert np.allclose(aug.data[:2, :3], scores.data)
    assert np.all(aug.data[2, :] == -1.5)
    assert np.all(aug.data[:, 3] == -1.5)


def test_sinkhorn_single_pair_equal_scores_is_half():
    p = run_sinkhorn(np.zeros((1, 1)), 0.0, 100)
    assert p.shape == (2, 2)
    assert np.allclose(p, 0.5, atol=1e-12)


def test_sinkhorn_saturates_on_dominant_score():
    # degenerate duplicate rows make convergence sublinear, so check the
    # approach to 1 rather than a tiny fixed tolerance
    scores = np.full((2, 2), -50.0)
    scores[0, 0] = 50.0
    p100 = run_sinkhorn(scores, -50.0, 100)
    p1000 = run_sinkhorn(scores, -50.0, 1000)
    assert p100[0, 0] > 0.99
    assert 1.0 - p1000[0, 0] < 0.2 * (1.0 - p100[0, 0])
    assert p1000[0, 0] > 0.999


def test_sinkhorn_rejects_zero_iterations():
    aug = augment_with_dustbin(Tensor(np.zeros((2, 2))), Tensor(np.zeros((1, 1))))
    with pytest.raises(ValueError):
        sinkhorn(aug, 0)


def test_sinkhorn_marginals_16x24(rng):
    m, n = 16, 24
    scores = rng.uniform(-5.0, 5.0, size=(m, n))
    for iters, tol in ((100, 1e-6), (20, 1e-2)):
        p = run_sinkhorn(scores, 0.3, iters)
        row_sums = p.sum(axis=1)
        col_sums = p.sum(axis=0)
        target_rows = np.concatenate([np.ones(m), [float(n)]])
        target_cols = np.concatenate([np.ones(n), [float(m)]])
        dev = max(np.abs(row_sums - target_rows).max(),
                  np.abs(col_sums - target_cols).max())
        assert dev < tol, "iters=%d deviation %g" % (iters, dev)


def test_sinkhorn_entries_in_unit_interval_off_corner(rng):
    scores = rng.uniform(-5.0, 5.0, size=(7, 11))
    p = run_sinkhorn(scores, -0.7, 50)
    mask = np.ones_like(p, dtype=bool)
    mask[7, 11] = False  # corner holds the total matched mass, not a probability
    assert np.all(p[mask] > 0.0)
    assert np.all(p[mask] < 1.0)


def test_sinkhorn_matches_direct_transcription(rng):
    for _ in range(5):
        m = int(rng.integers(1, 9))
        n = int(rng.integers(1, 9))
        scores = rng.uniform(-4.0, 4.0, size=(m, n))
        z = float(rng.uniform(-1.0, 1.0))
        iters = int(rng.integers(1, 30))
        p = run_sinkhorn(scores, z, iters)
        aug = np.full((m + 1, n + 1), z)
        aug[:m, :n] = scores
        log_mu = np.concatenate([np.zeros(m), [np.log(n)]])
        log_nu = np.concatenate([np.zeros(n), [np.log(m)]])
        expected = np.exp(sinkhorn_oracle(aug, log_mu, log_nu, iters))
        assert np.allclose(p, expected, atol=1e-12)


def test_sinkhorn_gradient_wrt_scores_and_dustbin(rng):
    m, n = 4, 5
    scores0 = rng.uniform(-2.0, 2.0, size=(m, n))
    gt = np.arange(m)

    def objective(scores_arr, z_arr):
        scores = Tensor(scores_arr, requires_grad=True)
        z = Tensor(np.asarray(z_arr).reshape(1, 1), requires_grad=True)
        p = sinkhorn(augment_with_dustbin(scores, z), 8)
        sel = np.zeros((m + 1, n + 1))
        sel[gt, gt] = 1.0
        loss = T.reduce_sum(T.mul(T.log_guarded(p), Tensor(sel)))
        return loss, scores, z

    loss, scores, z = objective(scores0, np.array(0.25))
    loss.backward()
    num_scores = numeric_grad(lambda a: objective(a, np.array(0.25))[0].item(), scores0)
    assert_grads_close(scores.grad, num_scores)
    num_z = numeric_grad(lambda a: objective(scores0, a)[0].item(), np.array(0.25))
    assert_grads_close(z.grad.reshape(()), num_z)


def test_build_gt_matrix_identity():
    gt = build_gt_matrix(np.arange(3), 3, 3)
    assert np.array_equal(gt[:3, :3], np.eye(3))
    assert gt[:3, 3].sum() == 0 and gt[3, :3].sum() == 0 and gt[3, 3] == 0


def test_build_gt_matrix_all_dustbin():
    gt = build_gt_matrix(np.full(2, DUSTBIN), 2, 3)
    assert np.all(gt[:2, 3] == 1.0)
    assert np.all(gt[2, :3] == 1.0)
    assert gt[2, 3] == 0.0
    assert np.all(gt[:2, :3] == 0.0)


def test_build_gt_matrix_row_sums_one(rng):
    for _ in range(10):
        m, n = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        k = int(rng.integers(0, min(m, n) + 1))
        decisions = np.full(m, DUSTBIN, dtype=np.int64)
        rows = rng.choice(m, size=k, replace=False)
        decisions[rows] = rng.choice(n, size=k, replace=False)
        gt = build_gt_matrix(decisions, m, n)
        assert np.all(gt[:m].sum(axis=1) == 1.0)
        assert np.all(gt[:, :n].sum(axis=0) == 1.0)


def test_build_gt_matrix_rejects_duplicates_and_range():
    with pytest.raises(ValueError, match="duplicate"):
        build_gt_matrix(np.array([1, 1]), 2, 3)
    with pytest.raises(ValueError, match="range"):
        build_gt_matrix(np.array([3]), 1, 3)


def test_extract_matches_identity_interior():
    p = np.full((4, 4), 1e-6)
    p[:3, :3] = np.eye(3) * 0.9 + 1e-6
    matches, decisions = extract_matches(p)
    assert matches == [(0, 0), (1, 1), (2, 2)]
    assert np.array_equal(decisions, np.arange(3))


def test_extract_matches_threshold_one_blocks_everything():
    p = np.full((4, 4), 0.2)
    p[:3, :3] = np.eye(3) * 0.9
    matches, decisions = extract_matches(p, threshold=1.0)
    assert matches == []
    assert np.all(decisions == DUSTBIN)


def test_extract_matches_requires_mutual_argmax():
    p = np.zeros((3, 3))
    p[0, 0], p[1, 0] = 0.5, 0.6  # col 0 prefers row 1
    p[0, 1] = 0.1
    matches, decisions = extract_matches(p)
    assert matches == [(1, 0)]
    assert decisions[0] == DUSTBIN and decisions[1] == 0


def test_extract_matches_requires_beating_dustbin():
    p = np.zeros((2, 2))
    p[0, 0] = 0.3
    p[0, 1] = 0.4  # row dustbin entry wins
    matches, decisions = extract_matches(p)
    assert matches == [] and decisions[0] == DUSTBIN


def test_extract_matches_injective_both_sides(rng):
    for _ in range(20):
        m, n = int(rng.integers(1, 12)), int(rng.integers(1, 12))
        p = rng.uniform(0.0, 1.0, size=(m + 1, n + 1))
        matches, decisions = extract_matches(p)
        qs = [i for i, _ in matches]
        ss = [j for _, j in matches]
        assert len(set(qs)) == len(qs)
        assert len(set(ss)) == len(ss)
        for i, j in matches:
            assert decisions[i] == j


def test_matches_file_round_trip(tmp_path):
    decisions = np.array([2, DUSTBIN, 0], dtype=np.int64)
    scores = np.array([0.875, 0.1234567890123456, 1.0 / 3.0])
    path = tmp_path / "out.matches"
    write_matches(path, decisions, scores)
    got_d, got_s = read_matches(path)
    assert np.array_equal(got_d, decisions)
    assert np.array_equal(got_s, scores)
    lines = path.read_text().splitlines()
    assert lines[1].startswith("1 -1 ")


def test_matches_file_rejects_malformed(tmp_path):
    path = tmp_path / "bad.matches"
    path.write_text("0 1 0.5 extra\n")
    with pytest.raises(ValueError, match="line 1"):
        read_matches(path)
    path.write_text("1 0 0.5\n")
    with pytest.raises(ValueError, match="keypoint 1"):
        read_matches(path)


def test_match_scores_reads_decision_entries():
    p = np.arange(12.0).reshape(3, 4)
    scores = match_scores(p, np.array([1, DUSTBIN]))
    assert np.array_equal(scores, [p[0, 1], p[1, 3]])
