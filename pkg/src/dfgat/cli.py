"""Command-line surface: gen, train, match, register, eval, viz.

Exit codes: 0 success, 1 usage or input error, 2 runtime failure
(training divergence, insufficient correspondences).
"""

import argparse
import os
import sys

import numpy as np

from .assignment import extract_matches, match_scores, read_matches, write_matches
from .config import load_config
from .dataio import (DUSTBIN, SyntheticConfig, generate_dataset,
                     ground_truth_correspondences, load_dataset,
                     load_kitti_scan, read_pair)
from .evaluation import ReportRow, emit_report, inlier_ratio, rre, rte, success
from .geometry import DegenerateGeometryError, kabsch, icp, ransac_register
from .model import init_parameters, predict_matches
from .training import (TrainingDivergedError, load_checkpoint,
                       matching_counts, metrics_from_counts,
                       restore_parameters, save_checkpoint, train)
from .viz import render_match_svg

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

MATCHING_HEADER = "pair,precision,accuracy,recall,f1"


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _load_cloud(path):
    """A KITTI .bin scan, or one side of a pair file as `file.pair#query`."""
    if "#" in path:
        base, side = path.rsplit("#", 1)
        if side not in ("query", "source"):
            raise CliError(EXIT_USAGE, "pair side must be query or source: %r" % path)
        pair = read_pair(base)
        return pair.query if side == "query" else pair.source
    if path.endswith(".pair"):
        raise CliError(EXIT_USAGE,
                       "append #query or #source to pick a side of %r" % path)
    return load_kitti_scan(path)


def _load_model(cfg, checkpoint_path):
    store = init_parameters(cfg.model_config(), np.random.default_rng(cfg.seed))
    restore_parameters(store, load_checkpoint(checkpoint_path))
    return store


def cmd_gen(args, cfg):
    synth = SyntheticConfig(n_points=args.points, extent=args.extent,
                            noise_sigma=args.noise,
                            overlap_keep_fraction=args.keep,
                            max_rotation_deg=args.max_rotation,
                            max_translation=args.max_translation)
    manifest = generate_dataset(args.out_dir, args.count, synth, seed=args.seed)
    print("wrote %d pairs to %s" % (len(manifest.entries), args.out_dir))
    return EXIT_OK


def cmd_train(args, cfg):
    pairs = load_dataset(args.dataset)
    if not pairs:
        raise CliError(EXIT_USAGE, "dataset %r is empty" % args.dataset)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(pairs))
    n_val = min(int(round(args.val_fraction * len(pairs))), len(pairs) - 1)
    val = [pairs[i] for i in order[:n_val]]
    tr = [pairs[i] for i in order[n_val:]]

    def progress(row):
        print("epoch %d loss %.6g val_f1 %.4f"
              % (row["epoch"], row["loss"], row["val_f1"]))

    result = train(tr, val, cfg.model_config(), cfg.train_config(),
                   log_path=args.log, checkpoint_path=args.out,
                   progress=progress)
    if not val:
        save_checkpoint(args.out, result.store)
    print("best epoch %d val_f1 %.4f -> %s"
          % (result.best_epoch, result.best_f1, args.out))
    return EXIT_OK


def _predict(args, cfg):
    query = _load_cloud(args.query)
    source = _load_cloud(args.source)
    store = _load_model(cfg, args.checkpoint)
    pred = predict_matches(query, source, cfg.model_config(), store,
                           threshold=cfg.match_threshold)
    return query, source, pred


def cmd_match(args, cfg):
    _, _, pred = _predict(args, cfg)
    scores = match_scores(pred.result.p_bar, pred.decisions)
    write_matches(args.out, pred.decisions, scores)
    print("%d query keypoints, %d matches -> %s"
          % (len(pred.decisions), len(pred.matches), args.out))
    return EXIT_OK


def _estimate_transform(args, cfg, query, source, pred):
    if len(pred.matches) < 3:
        raise CliError(EXIT_RUNTIME, "insufficient correspondences: %d match(es)"
                       % len(pred.matches))
    src = pred.result.kp_source.positions[[j for _, j in pred.matches]]
    dst = pred.result.kp_query.positions[[i for i, _ in pred.matches]]
    if args.method == "dfgat":
        p = pred.result.p_bar.data
        weights = np.array([p[i, j] for i, j in pred.matches])
        est = kabsch(src, dst, weights=weights)
        note = "weighted fit over %d matches" % len(pred.matches)
    else:
        est, mask = ransac_register(list(zip(src, dst)),
                                    iters=cfg.ransac_iters,
                                    inlier_threshold=cfg.ransac_threshold,
                                    seed=cfg.seed)
        note = "inliers: %d/%d" % (int(mask.sum()), len(pred.matches))
    if args.icp_refine:
        est = icp(source, query, init=est)
        note += " + icp refinement"
    return est, note


def cmd_register(args, cfg):
    query = _load_cloud(args.query)
    source = _load_cloud(args.source)
    if args.method == "icp":
        pred = None
        est, note = icp(source, query), "icp over %d points" % len(source)
    else:
        store = _load_model(cfg, args.checkpoint)
        # registration is threshold-free: ransac (or the confidence-weighted
        # fit) does the rejecting, so starving it of candidates only hurts
        pred = predict_matches(query, source, cfg.model_config(), store,
                               threshold=0.0)
        est, note = _estimate_transform(args, cfg, query, source, pred)
    lines = ["%.12g %.12g %.12g %.12g" % tuple(row) for row in est.matrix()]
    text = "\n".join(lines) + "\n"
    print(text, end="")
    print(note)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    return EXIT_OK


def _pair_rows(pairs, names, cfg, store, oracle=False):
    counts_total = np.zeros(4, dtype=np.int64)
    matching_lines = []
    report_rows = []
    mcfg = cfg.model_config()
    for pair, name in zip(pairs, names):
        # one forward pass; match_threshold only gates the REPORTED matches,
        # registration consumes every mutual match and lets ransac reject
        pred = predict_matches(pair.query, pair.source, mcfg, store,
                               threshold=0.0)
        q_pos = pred.result.kp_query.positions
        s_pos = pred.result.kp_source.positions
        gt = ground_truth_correspondences(q_pos, s_pos, pair.gt_transform,
                                          cfg.gt_tau)
        if oracle:
            decisions = gt.copy()
            matches = [(i, j) for i, j in enumerate(decisions) if j != DUSTBIN]
        else:
            _, decisions = extract_matches(pred.result.p_bar,
                                           threshold=cfg.match_threshold)
            matches = pred.matches
        counts = matching_counts(decisions, gt)
        counts_total += counts
        m = metrics_from_counts(*counts)
        matching_lines.append("%s,%.10g,%.10g,%.10g,%.10g"
                              % (name, m["precision"], m["accuracy"],
                                 m["recall"], m["f1"]))
        try:
            if len(matches) < 3:
                raise DegenerateGeometryError("too few matches")
            src = s_pos[[j for _, j in matches]]
            dst = q_pos[[i for i, _ in matches]]
            est, _ = ransac_register(list(zip(src, dst)),
                                     iters=cfg.ransac_iters,
                                     inlier_threshold=cfg.ransac_threshold,
                                     seed=cfg.seed)
            pair_rte = rte(est, pair.gt_transform)
            pair_rre = rre(est, pair.gt_transform)
            ok = success(pair_rte, pair_rre,
                         rte_max=cfg.rte_max, rre_max=cfg.rre_max)
        except DegenerateGeometryError:
            pair_rte, pair_rre, ok = float("inf"), float("inf"), False
        ratio = inlier_ratio(matches, q_pos, s_pos, pair.gt_transform,
                             cfg.inlier_tau)
        report_rows.append(ReportRow(name, pair_rte, pair_rre, ok, ratio))
    micro = metrics_from_counts(*counts_total)
    matching_lines.append("all,%.10g,%.10g,%.10g,%.10g"
                          % (micro["precision"], micro["accuracy"],
                             micro["recall"], micro["f1"]))
    return matching_lines, report_rows, micro


def cmd_eval(args, cfg):
    pairs = load_dataset(args.dataset)
    if not pairs:
        raise CliError(EXIT_USAGE, "dataset %r is empty" % args.dataset)
    names = [pair.name for pair in pairs]
    store = _load_model(cfg, args.checkpoint)
    matching_lines, report_rows, micro = _pair_rows(pairs, names, cfg, store,
                                                    oracle=args.oracle)
    os.makedirs(args.out_dir, exist_ok=True)
    matching_path = os.path.join(args.out_dir, "matching.csv")
    with open(matching_path, "w") as fh:
        fh.write(MATCHING_HEADER + "\n")
        fh.write("\n".join(matching_lines) + "\n")
    report_path = os.path.join(args.out_dir, "registration.csv")
    with open(report_path, "w") as fh:
        fh.write(emit_report(report_rows))
    n_ok = sum(1 for r in report_rows if r.success)
    print("matching f1 %.4f, registration success %d/%d -> %s"
          % (micro["f1"], n_ok, len(report_rows), args.out_dir))
    return EXIT_OK


def cmd_viz(args, cfg):
    pair = read_pair(args.pair)
    store = _load_model(cfg, args.checkpoint)
    pred = predict_matches(pair.query, pair.source, cfg.model_config(), store,
                           threshold=cfg.match_threshold)
    decisions, _ = read_matches(args.matches)
    q_pos = pred.result.kp_query.positions
    s_pos = pred.result.kp_source.positions
    if len(decisions) != len(q_pos):
        raise CliError(EXIT_USAGE,
                       "matches file has %d rows for %d query keypoints"
                       % (len(decisions), len(q_pos)))
    gt = ground_truth_correspondences(q_pos, s_pos, pair.gt_transform,
                                      cfg.gt_tau)
    segments = [(q_pos[i], s_pos[j], bool(j == gt[i]))
                for i, j in enumerate(decisions) if j != DUSTBIN]
    svg = render_match_svg(pair.query.points, pair.source.points, segments,
                           title=pair.name)
    with open(args.out, "w") as fh:
        fh.write(svg)
    n_good = sum(1 for s in segments if s[2])
    print("%d segments (%d correct) -> %s" % (len(segments), n_good, args.out))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="dfgat",
                                     description="point cloud matching and "
                                                 "registration pipeline")
    parser.add_argument("--config", default=None, help="key = value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic pair dataset")
    p.add_argument("out_dir")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--extent", type=float, default=8.0)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--keep", type=float, default=0.7)
    p.add_argument("--max-rotation", type=float, default=30.0)
    p.add_argument("--max-translation", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train the matcher on a dataset")
    p.add_argument("dataset")
    p.add_argument("--out", default="model.ckpt")
    p.add_argument("--log", default="train_log.csv")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("match", help="match two clouds with trained weights")
    p.add_argument("query", help=".bin scan or pairfile.pair#query")
    p.add_argument("source")
    p.add_argument("checkpoint")
    p.add_argument("--out", default="matches.txt")
    p.set_defaults(fn=cmd_match)

    p = sub.add_parser("register", help="estimate the rigid motion source -> query")
    p.add_argument("query")
    p.add_argument("source")
    p.add_argument("checkpoint", nargs="?", default=None,
                   help="required unless --method icp")
    p.add_argument("--method", choices=("dfgat", "dfgat+ransac", "icp"),
                   default="dfgat+ransac")
    p.add_argument("--icp-refine", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_register)

    p = sub.add_parser("eval", help="matching and registration metrics over a dataset")
    p.add_argument("dataset")
    p.add_argument("checkpoint")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--oracle", action="store_true",
                   help="score the ground-truth passthrough instead of the model")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("viz", help="render matches as a side-by-side figure")
    p.add_argument("pair")
    p.add_argument("matches")
    p.add_argument("checkpoint")
    p.add_argument("--out", default="matches.svg")
    p.set_defaults(fn=cmd_viz)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg = load_config(args.config, args.set)
        if args.command == "register" and args.method != "icp" \
                and args.checkpoint is None:
            raise CliError(EXIT_USAGE, "method %r needs a checkpoint" % args.method)
        return args.fn(args, cfg)
    except CliError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return exc.code
    except (TrainingDivergedError, DegenerateGeometryError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, OSError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
