"""Registration-quality metrics and the per-pair report."""

from dataclasses import dataclass

import numpy as np

REPORT_HEADER = "pair,rte_cm,rre_deg,success,inlier_ratio"


def rte(est, gt):
    """Translation error in centimeters."""
    return float(np.linalg.norm(est.translation - gt.translation)) * 100.0


def rre(est, gt):
    """Relative rotation angle in degrees.

    Computed as atan2 of the skew norm against (trace - 1) / 2; the two
    parts are sin and cos of the angle, and the quotient form keeps full
    precision for tiny angles where bare arccos loses half the digits.
    """
    rel = est.rotation.T @ gt.rotation
    c = (np.trace(rel) - 1.0) / 2.0
    axial = np.array([rel[2, 1] - rel[1, 2],
                      rel[0, 2] - rel[2, 0],
                      rel[1, 0] - rel[0, 1]])
    s = np.linalg.norm(axial) / 2.0
    return float(np.degrees(np.arctan2(s, c)))


def success(rte_cm, rre_deg, rte_max=2.0, rre_max=5.0):
    """Pass iff translation error <= rte_max meters and rotation error <= rre_max degrees."""
    if rte_max <= 0 or rre_max <= 0:
        raise ValueError("thresholds must be positive")
    return rte_cm <= rte_max * 100.0 and rre_deg <= rre_max


def inlier_ratio(matches, query_positions, source_positions, gt_transform, tau):
    """Fraction of predicted matches consistent with the true motion."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    if not matches:
        return 0.0
    q = np.asarray(query_positions, dtype=np.float64)
    s = gt_transform.apply(np.asarray(source_positions, dtype=np.float64))
    good = sum(1 for i, j in matches if np.linalg.norm(s[j] - q[i]) < tau)
    return good / len(matches)


@dataclass(frozen=True)
class ReportRow:
    pair: str
    rte_cm: float
    rre_deg: float
    success: bool
    inlier_ratio: float


def emit_report(rows):
    """CSV rows plus aggregate footer; RTE/RRE statistics cover successes only."""
    if not rows:
        raise ValueError("report needs at least one row")
    lines = [REPORT_HEADER]
    for r in rows:
        lines.append("%s,%.10g,%.10g,%d,%.10g"
                     % (r.pair, r.rte_cm, r.rre_deg, int(r.success), r.inlier_ratio))
    ok = [r for r in rows if r.success]
    rte_vals = np.array([r.rte_cm for r in ok])
    rre_vals = np.array([r.rre_deg for r in ok])
    inl_vals = np.array([r.inlier_ratio for r in rows])

    def stat(fn, vals):
        return "%.10g" % fn(vals) if vals.size else "nan"

    lines.append("mean,%s,%s,,%s" % (stat(np.mean, rte_vals),
                                     stat(np.mean, rre_vals),
                                     stat(np.mean, inl_vals)))
    lines.append("std,%s,%s,,%s" % (stat(np.std, rte_vals),
                                    stat(np.std, rre_vals),
                                    stat(np.std, inl_vals)))
    pct = 100.0 * len(ok) / len(rows)
    lines.append("success_pct,%.10g,,," % pct)
    lines.append("failure_pct,%.10g,,," % (100.0 - pct))
    return "\n".join(lines) + "\n"
