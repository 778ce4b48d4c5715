"""Command-line entry point: ``memdex <subcommand> ...``.

Every subcommand exits 0 on success. Any failure prints a single
``memdex: error: ...`` line to stderr and exits 1 (2 for usage errors).
Outputs are written atomically.
"""

from __future__ import annotations

import argparse
import io
import os
import sys
from pathlib import Path

from memdex import io as mio
from memdex.binarize import binarize_vectors, fit_thresholds
from memdex.deep import MU_MODES, DeepScoreConfig
from memdex.evaluation import (
    FusionParams,
    ScoringConfig,
    all_pairs_scores,
    alpha_sweep,
    evaluate,
    independence_diagnostic,
)
from memdex.index import ApproxParams, build_index, load_index, save_index
from memdex.model import MemdexError
from memdex.shallow import ShallowScoreConfig
from memdex.synth import SynthConfig, generate_synthetic


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"memdex: error: {message}\n")


def _members(text: str):
    lo, sep, hi = text.partition("-")
    try:
        return (int(lo), int(hi)) if sep else int(lo)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or LO-HI, got {text!r}") from None


def _approx_args(p):
    p.add_argument("--trees", type=int, default=ApproxParams.n_trees)
    p.add_argument("--leaf-size", type=int, default=ApproxParams.leaf_size)
    p.add_argument("--checks", type=int, default=ApproxParams.max_checks)
    p.add_argument("--index-seed", type=int, default=ApproxParams.seed)


def _approx(a) -> ApproxParams:
    return ApproxParams(n_trees=a.trees, leaf_size=a.leaf_size, max_checks=a.checks,
                        seed=a.index_seed)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="memdex", description="Keypoint/deep-vector fusion scoring engine.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--families", type=int, default=40)
    p.add_argument("--members", type=_members, default=2, help="N or LO-HI")
    p.add_argument("--keypoints", type=int, default=200)
    p.add_argument("--d-kp", type=int, default=64)
    p.add_argument("--d-dv", type=int, default=64)
    p.add_argument("--family-signal", type=float, default=0.9)
    p.add_argument("--group-signal", type=float, default=0.5)
    p.add_argument("--complementarity", type=float, default=0.0)

    p = sub.add_parser("index", help="build and serialize a nearest-neighbor index")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--which", choices=("keypoints", "vectors"), default="keypoints")
    p.add_argument("--exact", action="store_true", help="exact brute-force mode")
    _approx_args(p)

    p = sub.add_parser("binarize", help="fit or apply binarization thresholds")
    bsub = p.add_subparsers(dest="action", required=True, parser_class=_Parser)
    f = bsub.add_parser("fit")
    f.add_argument("--manifest", required=True, type=Path)
    f.add_argument("--out", required=True, type=Path)
    f.add_argument("--label", choices=("instance", "group"), default="instance")
    a = bsub.add_parser("apply")
    a.add_argument("--manifest", required=True, type=Path)
    a.add_argument("--thresholds", required=True, type=Path)
    a.add_argument("--out", required=True, type=Path, help="binary vector file")
    a.add_argument("--manifest-out", type=Path,
                   help="also write a manifest pointing at the binary vectors")

    p = sub.add_parser("score", help="all-pairs score matrix")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--mode", choices=("shallow", "deep", "fused"), default="fused")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--binarized", action="store_true")
    p.add_argument("--thresholds", type=Path, help="fixed thresholds for --binarized")
    p.add_argument("--fold-policy", choices=("auto", "loo", "calibration"), default="auto")
    p.add_argument("--protocol", choices=("family", "group"), default="family")
    p.add_argument("--k-trunc", type=int, default=ShallowScoreConfig.k_trunc)
    p.add_argument("--exact", action="store_true", help="exact neighbor search")
    p.add_argument("--index", type=Path, help="prebuilt keypoint index file")
    p.add_argument("--mu-mode", choices=MU_MODES, default=MU_MODES[0])
    p.add_argument("--seed", type=int, default=0, help="calibration split seed")
    p.add_argument("--threads", type=int, help="worker count (default MEMDEX_THREADS)")
    _approx_args(p)

    p = sub.add_parser("eval", help="ROC/AUC from a score matrix")
    p.add_argument("--scores", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="ROC CSV")
    p.add_argument("--mode", choices=("shallow", "deep", "fused"), default="fused")
    p.add_argument("--alpha", type=float,
                   help="ignore the stored fused column and fuse at this alpha")

    p = sub.add_parser("alpha-sweep", help="AUC over an alpha grid")
    p.add_argument("--scores", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--step", type=float, default=0.1)
    p.add_argument("--out", type=Path, help="CSV of alpha,auc")

    p = sub.add_parser("diag-independence", help="shallow/deep Pearson correlation")
    p.add_argument("--scores", required=True, type=Path)
    return ap


def _cmd_synth(a, out):
    cfg = SynthConfig(n_families=a.families, members_per_family=a.members,
                      keypoints_per_subject=a.keypoints, d_kp=a.d_kp, d_dv=a.d_dv,
                      family_signal=a.family_signal, group_signal=a.group_signal,
                      modality_complementarity=a.complementarity, seed=a.seed)
    ds = generate_synthetic(cfg)
    manifest = mio.write_dataset(ds, a.out)
    print(f"wrote {len(ds)} subjects to {manifest}", file=out)


def _cmd_index(a, out):
    ds = mio.load_dataset(a.manifest)
    idx = build_index(ds, a.which, "exact" if a.exact else "approximate", _approx(a))
    save_index(idx, a.out)
    print(f"indexed {idx.size} {a.which} ({idx.mode}) into {a.out}", file=out)


def _cmd_binarize(a, out):
    ds = mio.load_dataset(a.manifest)
    ds.require_deep()
    if a.action == "fit":
        table = fit_thresholds([s.deep_vector for s in ds], ds.labels(a.label))
        mio.write_thresholds(table, a.out)
        print(f"fit {len(table)} thresholds ({int(table.degenerate_mask.sum())} degenerate)",
              file=out)
        return
    table = mio.read_thresholds(a.thresholds)
    binary = binarize_vectors({s.subject_id: s.deep_vector for s in ds}, table)
    mio.atomic_write_text(a.out, mio.format_vectors([(s.subject_id, binary[s.subject_id])
                                                      for s in ds]))
    if a.manifest_out is not None:
        rel = os.path.relpath(Path(a.out).resolve(), Path(a.manifest_out).parent.resolve())
        mio.write_manifest_with_vectors(ds, a.manifest, a.manifest_out, rel)
    print(f"binarized {len(binary)} vectors into {a.out}", file=out)


def _cmd_score(a, out):
    ds = mio.load_dataset(a.manifest)
    FusionParams(a.alpha)
    cfg = ScoringConfig(
        shallow=ShallowScoreConfig(k_trunc=a.k_trunc,
                                   dnn_mode="exact" if a.exact else "approximate"),
        deep=DeepScoreConfig(mu_mode=a.mu_mode),
        index_mode="exact" if a.exact else "approximate",
        approx_params=_approx(a),
        binarize=a.binarized,
        fold_policy=a.fold_policy,
        seed=a.seed,
        thresholds=mio.read_thresholds(a.thresholds) if a.thresholds else None,
        threads=a.threads)
    index = load_index(a.index) if a.index else None
    sm = all_pairs_scores(ds, cfg, protocol=a.protocol, mode=a.mode, index=index)
    mio.write_score_matrix(sm, a.out, a.alpha)
    print(f"scored {len(sm.subject_ids)} x {len(sm.candidate_ids)} ({a.protocol}, {a.mode}) "
          f"into {a.out}", file=out)


def _cmd_eval(a, out):
    ds = mio.load_dataset(a.manifest)
    sm = mio.read_score_matrix(a.scores)
    p = FusionParams(a.alpha) if a.alpha is not None else None
    roc = evaluate(sm, ds, a.mode, p)
    mio.write_roc(roc, a.out)
    print(f"auc={mio.fmt(roc.auc)} pos={roc.positives} neg={roc.negatives}", file=out)


def _cmd_sweep(a, out):
    ds = mio.load_dataset(a.manifest)
    sm = mio.read_score_matrix(a.scores)
    sweep = alpha_sweep(ds, grid_step=a.step, protocol=sm.protocol, sm=sm)
    text = "alpha,auc\n" + "".join(f"{mio.fmt(al)},{mio.fmt(auc)}\n" for al, auc in sweep)
    if a.out is not None:
        mio.atomic_write_text(a.out, text)
    out.write(text)
    print(f"best_alpha={mio.fmt(sweep.best_alpha)} best_auc={mio.fmt(sweep.best_auc)}", file=out)


def _cmd_diag(a, out):
    r = independence_diagnostic(mio.read_score_matrix(a.scores))
    print(f"r={mio.fmt(r)}", file=out)


COMMANDS = {"synth": _cmd_synth, "index": _cmd_index, "binarize": _cmd_binarize,
            "score": _cmd_score, "eval": _cmd_eval, "alpha-sweep": _cmd_sweep,
            "diag-independence": _cmd_diag}


def main(argv=None, out: io.TextIOBase | None = None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        COMMANDS[args.command](args, out)
    except (MemdexError, ValueError, KeyError, OSError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"memdex: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
