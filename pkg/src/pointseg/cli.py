"""Command-line front end.

Every subcommand is a thin wrapper over the library so scripted runs and
tests exercise the same code paths.  Exit codes: 0 on success, 2 for
validation errors (bad input, bad config, malformed files), 3 for numeric
failures (non-finite gradients, failed gradient checks).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

from . import distill, gradcheck, metrics, nets, pipeline, synth
from .annotate import simulate_annotation
from .config import default_config, load_config, with_seed
from .errors import NumericError, PointsegError, ValidationError
from .geodesic import build_partition
from .pipeline import Workspace, _derived_seed, _load_split_cases
from .volume import load_annotation, load_manifest, load_volume
from .volume import save_annotation, save_volume


def _load_cfg(args):
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    return cfg


def _cmd_synth(args):
    cfg = _load_cfg(args)
    scfg = replace(cfg.synth, rng_seed=_derived_seed(cfg.seed, "synth"))
    synth.generate_split(scfg, cfg.n_train, cfg.n_val, cfg.n_test, args.out_dir)
    print(f"wrote {cfg.n_train}/{cfg.n_val}/{cfg.n_test} cases to {args.out_dir}")
    return 0


def _cmd_annotate(args):
    cfg = _load_cfg(args)
    os.makedirs(args.out_dir, exist_ok=True)
    cases = _load_split_cases(args.data_dir, args.split)
    for c in cases:
        acfg = replace(cfg.annotate,
                       rng_seed=_derived_seed(cfg.seed, "annotate", c.case_id))
        ann = simulate_annotation(c.gt, c.omega_m, acfg)
        save_annotation(os.path.join(args.out_dir, f"{c.case_id}.ann"), ann)
    print(f"annotated {len(cases)} {args.split} cases into {args.out_dir}")
    return 0


def _cmd_expand(args):
    cfg = _load_cfg(args)
    os.makedirs(args.out_dir, exist_ok=True)
    cases = _load_split_cases(args.data_dir, args.split)
    for c in cases:
        ann = load_annotation(os.path.join(args.ann_dir, f"{c.case_id}.ann"))
        part, q = build_partition(c.image, c.omega_m, ann, cfg.expand)
        save_volume(os.path.join(args.out_dir, f"{c.case_id}_q.pavol"), q)
        nf = int(part.omega_f.sum())
        print(f"{c.case_id}: expanded seed to {nf} voxels")
    return 0


def _cmd_train1(args):
    cfg = _load_cfg(args)
    train_cases = _load_split_cases(args.data_dir, "train")
    if args.arm == "full":
        pipeline._full_supervision_labels(train_cases)
    else:
        if not args.labels_dir:
            raise ValidationError("--labels-dir is required unless --arm full")
        pipeline._attach_labels(train_cases, args.labels_dir)
    val_cases = _load_split_cases(args.data_dir, "val")
    init_seed = args.init_seed
    if init_seed is None:
        init_seed = _derived_seed(cfg.seed, "init", args.arch, args.arm, 0)
    best, final = pipeline.stage1_train(train_cases, val_cases, cfg, args.arch,
                                        args.arm, init_seed, args.out_dir)
    print(f"best checkpoint: {best}")
    print(f"final checkpoint: {final}")
    return 0


def _cmd_pseudo(args):
    model, _ = nets.load_checkpoint(args.ckpt)
    cases = _load_split_cases(args.data_dir, args.split)
    pipeline.pseudo_label_gen(model, cases, args.out_dir)
    print(f"wrote {len(cases)} pseudo labels to {args.out_dir}")
    return 0


def _cmd_scm(args):
    cfg = _load_cfg(args)
    dcfg = replace(cfg.distill,
                   lam=args.lam if args.lam is not None else cfg.distill.lam,
                   temperature=args.temp or cfg.distill.temperature,
                   refresh_period=args.refresh or cfg.distill.refresh_period,
                   max_epochs=args.epochs or cfg.train2.max_epochs)
    tcfg = replace(cfg.train2, max_epochs=dcfg.max_epochs)
    cfg = replace(cfg, train2=tcfg)
    models = {
        "a": nets.load_checkpoint(args.ckpt_a)[0],
        "b": nets.load_checkpoint(args.ckpt_b)[0],
    }
    train_cases = _load_split_cases(args.data_dir, "train")
    val_cases = _load_split_cases(args.data_dir, "val")
    paths = pipeline.scm_train(models, train_cases, val_cases, cfg, dcfg,
                               args.out_dir)
    for role in distill.ROLES:
        print(f"best checkpoint ({role}): {paths[role]}")
    return 0


def _cmd_eval(args):
    entries = load_manifest(args.manifest)
    base = os.path.dirname(os.path.abspath(args.manifest))
    results = []
    for e in entries:
        gt = load_volume(os.path.join(base, e.gt)).arr().astype(bool)
        img = load_volume(os.path.join(base, e.image))
        pred_path = os.path.join(args.pred_dir, f"{e.case_id}_pred.pavol")
        pred = load_volume(pred_path).arr().astype(bool)
        dc = metrics.dice(pred, gt)
        try:
            sd = metrics.assd(pred, gt, spacing=img.spacing)
        except ValidationError:
            sd = float("nan")
        results.append(metrics.EvalResult(e.case_id, dc, sd))
    agg = pipeline.write_eval_csv(args.out, results)
    print(f"dice {agg['dice_mean']:.4f}±{agg['dice_std']:.4f}  "
          f"assd {agg['assd_mean']:.4f}±{agg['assd_std']:.4f}  -> {args.out}")
    return 0


def _cmd_gradcheck(args):
    groups = tuple(args.module.split(",")) if args.module else None
    results = gradcheck.run_checks(groups=groups, seed=args.seed or 0)
    print(gradcheck.format_results(results))
    bad = [r for r in results if not r.ok]
    if bad:
        raise NumericError(f"{len(bad)} gradient check(s) failed")
    return 0


def _cmd_run(args):
    cfg = _load_cfg(args)
    rows = pipeline.run_experiment(cfg, args.out_dir)
    ws = Workspace(root=args.out_dir)
    print(f"report: {ws.report_path} ({len(rows)} rows)")
    print(f"figures: {ws.figure_dir}")
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file")
    common.add_argument("--seed", type=int, help="override run.seed")

    p = argparse.ArgumentParser(prog="pointseg",
                                description="two-stage point-supervised 3D "
                                            "segmentation workbench")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", parents=[common], help="generate a synthetic split")
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(fn=_cmd_synth)

    sp = sub.add_parser("annotate", parents=[common],
                        help="simulate point annotations for a split")
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--split", default="train", choices=("train", "val", "test"))
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(fn=_cmd_annotate)

    sp = sub.add_parser("expand", parents=[common],
                        help="expand annotations into partial labels")
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--ann-dir", required=True)
    sp.add_argument("--split", default="train", choices=("train", "val", "test"))
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(fn=_cmd_expand)

    sp = sub.add_parser("train1", parents=[common], help="stage-1 training")
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--labels-dir")
    sp.add_argument("--arch", default="net_a", choices=nets.ARCHS)
    sp.add_argument("--arm", default="both", choices=pipeline.ARMS)
    sp.add_argument("--init-seed", type=int)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(fn=_cmd_train1)

    sp = sub.add_parser("pseudo", parents=[common],
                        help="write hard pseudo labels from a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--split", default="train", choices=("train", "val", "test"))
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(fn=_cmd_pseudo)

    sp = sub.add_parser("scm", parents=[common], help="stage-2 co-training")
    sp.add_argument("--ckpt-a", required=True)
    sp.add_argument("--ckpt-b", required=True)
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--temp", type=float)
    sp.add_argument("--refresh", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(fn=_cmd_scm)

    sp = sub.add_parser("eval", parents=[common],
                        help="score saved predictions against a manifest")
    sp.add_argument("--pred-dir", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=_cmd_eval)

    sp = sub.add_parser("gradcheck", parents=[common],
                        help="finite-difference verification of all gradients")
    sp.add_argument("--module", help="comma list from "
                                     f"{','.join(gradcheck.GROUPS)} (default all)")
    sp.set_defaults(fn=_cmd_gradcheck)

    sp = sub.add_parser("run", parents=[common], help="full experiment DAG")
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(fn=_cmd_run)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except PointsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
