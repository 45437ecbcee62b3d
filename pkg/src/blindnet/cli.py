"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 validation error (bad config, data or
checkpoint), 3 numeric failure (non-finite loss or parameters).

Configuration precedence, lowest first: built-in defaults, ``--config`` file,
``BLINDNET_<KEY>`` environment variables, ``--set key=value`` flags.
"""
import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import metrics as M
from . import pose as P
from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, RunConfig, parse_lines
from .training import Trainer, TrainingDiverged, load_corpus, model_from_checkpoint

log = logging.getLogger("blindnet")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class FreezeViolation(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------------------
# helpers


def _overrides(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_config(args, base=None, **forced):
    values = parse_lines(base.dumps()) if base is not None else {}
    if getattr(args, "config", None):
        values.update(parse_lines(Path(args.config).read_text()))
    over = _overrides(getattr(args, "set", None))
    over.update({k: str(v) for k, v in forced.items() if v is not None})
    return RunConfig.from_mapping(values, overrides=over)


def _labelled(specs, parts):
    """Parse ``LABEL=a[,b]`` model specs."""
    out = []
    for spec in specs:
        label, sep, rest = spec.partition("=")
        paths = rest.split(",") if sep else []
        if not label or len(paths) != parts or not all(paths):
            want = "LABEL=ENCODER,HEAD" if parts == 2 else "LABEL=CHECKPOINT"
            raise UsageError(f"--model expects {want}, got {spec!r}")
        out.append((label, *paths))
    return out


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    RunConfig(image_size=args.size).validate()
    if args.count < 0:
        raise ConfigError("--count must be >= 0")
    corpus = D.generate_corpus(args.seed, args.count, args.size)
    if not len(corpus):
        log.warning("--count 0: writing an empty corpus")
    D.export_corpus(corpus, args.out)
    log.info("wrote %d images to %s", len(corpus), args.out)


def _train(args, blind):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    forced = {"steps": args.steps, "corpus_dir": args.corpus}
    if args.resume:
        ck = Checkpoint.load(args.resume)
        base = RunConfig.loads(ck.config_text, env={})
        cfg = resolve_config(args, base, **forced)
        if dataclasses.replace(cfg, steps=base.steps, checkpoint_every=base.checkpoint_every) != base:
            raise ConfigError("only steps and checkpoint_every may change when resuming")
        trainer = Trainer.from_checkpoint(ck)
        trainer.cfg = cfg
    else:
        cfg = resolve_config(args, **forced)
        cfg = cfg if blind else cfg.nonblind()
        trainer = Trainer(cfg)
    if not blind and (trainer.cfg.blind or trainer.cfg.omega != 0):
        raise ConfigError("non-blind training requires blind = false and omega = 0")
    cfg = trainer.cfg
    cfg.save(out / "config.txt")

    def save(tr):
        tr.checkpoint().save(out / f"step_{tr.step_idx:06d}.ck")

    remaining = cfg.steps - trainer.step_idx
    try:
        trainer.train(max(remaining, 0), out / "train_log.csv", save, cfg.checkpoint_every)
    except TrainingDiverged as exc:
        log.error("training diverged at step %d: %s", exc.step, exc)
        raise
    trainer.checkpoint("final").save(out / "final.ck")
    log.info("finished at step %d; checkpoint %s", trainer.step_idx, out / "final.ck")


def cmd_train_blind(args):
    _train(args, blind=True)


def cmd_train_nonblind(args):
    _train(args, blind=False)


def cmd_train_pose(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, enc_cfg = model_from_checkpoint(Checkpoint.load(args.encoder))
    cfg = resolve_config(args, enc_cfg)
    label = args.label or ("blind" if enc_cfg.blind else "nonblind")
    views = P.pose_views(cfg, args.seed)
    before = model.checksum()
    rows = []
    head, _ = P.fit_pose_head(model, cfg, *views["train"], seed=args.seed,
                              log=lambda e, loss: rows.append((e, loss)))
    if model.checksum() != before:
        raise FreezeViolation("encoder parameters changed during pose training")
    meta = {"label": label, "seed": args.seed, "encoder_checksum": before}
    P.head_checkpoint(head, cfg.dumps(), meta).save(out / "head.ck")
    with open(out / "pose_log.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss"])
        w.writerows((e, repr(loss)) for e, loss in rows)
    log.info("%s head: final loss %.4f", label, rows[-1][1] if rows else float("nan"))


def _trajectory_set(args, cfg):
    names, poses = P.read_trajectory(args.trajectory)
    if not names:
        raise ValueError(f"{args.trajectory}: empty trajectory")
    root = Path(args.images) if args.images else Path(args.trajectory).parent
    images = [D.read_ppm(root / n) for n in names]
    return {Path(args.trajectory).stem: (images, poses, names)}


def cmd_eval_pose(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    sets_cache = {}
    for label, enc_path, head_path in _labelled(args.model, 2):
        model, _ = model_from_checkpoint(Checkpoint.load(enc_path))
        hck = Checkpoint.load(head_path)
        head = P.head_from_checkpoint(hck)
        if hck.meta.get("encoder_checksum") != model.checksum():
            raise CheckpointError(f"{head_path} was trained on a different encoder than {enc_path}")
        cfg = RunConfig.loads(hck.config_text, env={})
        seed = int(hck.meta.get("seed", 0)) if args.seed is None else args.seed
        if args.trajectory:
            sets = _trajectory_set(args, cfg)
        else:
            key = (cfg.pose_world_seed, cfg.pose_test_views, cfg.image_size, seed)
            if key not in sets_cache:
                views = P.pose_views(cfg, seed)
                sets_cache[key] = {
                    k: (*views[k], [f"{k}_{i:05d}" for i in range(len(views[k][0]))]) for k in P.TEST_SETS
                }
            sets = sets_cache[key]
        row = {"model": label}
        for name, (images, poses, names) in sets.items():
            med_pos, med_ang, (preds, pos, ang) = P.evaluate_median_error(head, model, images, poses)
            P.write_eval_csv(out / f"{label}_{name}.csv", names, poses, preds, pos, ang)
            row[f"{name}_m"] = f"{med_pos:.6f}"
            row[f"{name}_rad"] = f"{med_ang:.6f}"
        summary.append(row)
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(summary[0]))
        w.writeheader()
        w.writerows(summary)
    print((out / "summary.csv").read_text(), end="")


def cmd_eval_recon(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, probes = [], []
    for label, path in _labelled(args.model, 1):
        model, cfg = model_from_checkpoint(Checkpoint.load(path))
        if args.corpus:
            cfg = resolve_config(args, cfg, corpus_dir=args.corpus)
        corpus = load_corpus(cfg)
        val = corpus.split("val")
        pairs = D.fixed_eval_pairs(val if len(val) else corpus, args.count, args.seed)
        reports, empty = M.recon_reports(model, pairs)
        rows += [(label, reports[k]) for k in ("full", "masked", "unmasked")]
        probes.append([label, f"{M.latent_blindness_gap(model, pairs):.6f}",
                       f"{M.code_agreement(model, pairs):.6f}", empty["masked"]])
    M.write_report_csv(out / "recon.csv", rows)
    with open(out / "blindness.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "latent_gap", "code_agreement", "empty_masked"])
        w.writerows(probes)
    print((out / "recon.csv").read_text(), end="")


def cmd_decode(args):
    model, cfg = model_from_checkpoint(Checkpoint.load(args.checkpoint))
    if args.images:
        pairs = []
        for path in args.images:
            img = D.read_ppm(path)
            if img.shape[:2] != (cfg.image_size, cfg.image_size):
                raise ValueError(f"{path}: image is {img.shape[1]}x{img.shape[0]}, model expects {cfg.image_size}")
            pairs.append(D.OverlaySample(img, img, np.zeros(img.shape[:2], bool), D.CAR))
    else:
        corpus = load_corpus(cfg)
        val = corpus.split("val")
        pairs = D.fixed_eval_pairs(val if len(val) else corpus, args.pairs, args.seed)
    reports, empty = M.blindness_decode_report(model, pairs, args.out, args.label)
    if empty.get("masked"):
        log.warning("%d image(s) have an empty mask; masked metrics skipped for them", empty["masked"])
    for k, r in reports.items():
        print(f"{k}: l1 {r.l1:.4f} mse {r.mse:.5f} psnr {r.psnr:.2f} (n={r.count})")


def cmd_plot(args):
    try:
        import matplotlib
    except ImportError:
        raise ConfigError("plot needs matplotlib (pip install 'artifact[plot]')") from None
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(args.log, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValueError(f"{args.log}: no rows")
    cols = args.columns.split(",") if args.columns else [c for c in rows[0] if c not in (args.x, "lr")]
    xs = [float(r[args.x]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for c in cols:
        if c not in rows[0]:
            raise ValueError(f"{args.log}: no column {c!r}")
        ax.plot(xs, [float(r[c]) for r in rows], label=c)
    ax.set_xlabel(args.x)
    ax.set_yscale("log" if args.log_scale else "linear")
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=100)
    plt.close(fig)


# ----------------------------------------------------------------------------
# parser


def build_parser():
    p = _Parser(prog="blindnet", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="key = value file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        return sp

    g = sub.add_parser("gen-data", help="render a synthetic corpus to disk")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=2000)
    g.add_argument("--size", type=int, default=48)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    for name, func in (("train-blind", cmd_train_blind), ("train-nonblind", cmd_train_nonblind)):
        t = with_config(sub.add_parser(name, help=f"{name.split('-')[1]} autoencoder training"))
        t.add_argument("--out", required=True)
        t.add_argument("--steps", type=int)
        t.add_argument("--corpus", help="corpus directory (default: generate in memory)")
        t.add_argument("--resume", help="checkpoint to continue from")
        t.set_defaults(func=func)

    tp = with_config(sub.add_parser("train-pose", help="fit a pose head on a frozen encoder"))
    tp.add_argument("--encoder", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--seed", type=int, default=0)
    arm = tp.add_mutually_exclusive_group()
    arm.add_argument("--blind", dest="label", action="store_const", const="blind")
    arm.add_argument("--nonblind", dest="label", action="store_const", const="nonblind")
    tp.set_defaults(func=cmd_train_pose)

    ep = sub.add_parser("eval-pose", help="median pose errors on the test worlds")
    ep.add_argument("--model", action="append", required=True, metavar="LABEL=ENCODER,HEAD")
    ep.add_argument("--out", required=True)
    ep.add_argument("--seed", type=int)
    ep.add_argument("--trajectory", help="'image x y theta' file instead of the generated test worlds")
    ep.add_argument("--images", help="directory holding the trajectory images")
    ep.set_defaults(func=cmd_eval_pose)

    er = with_config(sub.add_parser("eval-recon", help="reconstruction metrics on held-out overlay pairs"))
    er.add_argument("--model", action="append", required=True, metavar="LABEL=CHECKPOINT")
    er.add_argument("--out", required=True)
    er.add_argument("--count", type=int, default=200)
    er.add_argument("--seed", type=int, default=123)
    er.add_argument("--corpus")
    er.set_defaults(func=cmd_eval_recon)

    d = sub.add_parser("decode", help="write reconstruction triptychs")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--images", nargs="+", help="PPM images (treated as overlay-free)")
    d.add_argument("--pairs", type=int, default=16, help="held-out overlay pairs when no images are given")
    d.add_argument("--seed", type=int, default=123)
    d.add_argument("--label", default="model")
    d.set_defaults(func=cmd_decode)

    pl = sub.add_parser("plot", help="plot columns of a CSV log")
    pl.add_argument("--log", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--x", default="step")
    pl.add_argument("--columns", help="comma-separated (default: all but x and lr)")
    pl.add_argument("--log-scale", action="store_true")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"blindnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, FreezeViolation) as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
