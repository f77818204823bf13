"""``dtsw`` command line: gen-data, train, eval, verify, infer."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .config import RunConfig, load_config
from .data import load_dataset, load_rvol, make_phantoms, min_max_normalize, save_rvol, write_dataset
from .metrics import EvalReport
from .tensor import Tensor
from .train import cross_validate, evaluate, from_checkpoint

log = logging.getLogger("dtsw")

REPORT_TXT = "report.txt"
REPORT_JSON = "report.json"
SCORED = ("final", "best")


def _overrides(args) -> dict:
    kv = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        kv[key.strip()] = value.strip()
    if args.seed is not None:
        kv["seed"] = str(args.seed)
    if args.mode is not None:
        kv["mode"] = args.mode
    if getattr(args, "data", None):
        kv["data_dir"] = args.data
    if args.out is not None:
        kv["out_dir"] = args.out
    if args.no_interactive_attention:
        kv["model.interactive"] = "false"
    if args.reference_task is not None:
        kv["model.reference_task"] = args.reference_task
    return kv


def _config(args) -> RunConfig:
    return load_config(args.config, _overrides(args))


def _extents(cfg: RunConfig) -> tuple:
    return cfg.model_config().input_extents


def _load_data(cfg: RunConfig):
    root = Path(cfg.data_dir)
    if not root.is_dir():
        raise SystemExit(f"dataset directory {root} does not exist (run `dtsw gen-data` first)")
    pairs, entries = load_dataset(root)
    want = _extents(cfg)
    if pairs and pairs[0].initial.shape != want:
        raise SystemExit(f"dataset volumes are {pairs[0].initial.shape} but the model expects {want}")
    return pairs, [e.fold for e in entries]


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    pairs = make_phantoms(cfg.n_samples, _extents(cfg), cfg.seed, jitter=cfg.jitter)
    entries = write_dataset(cfg.data_dir, pairs, cfg.folds, cfg.seed)
    pos = sum(e.label for e in entries)
    print(f"wrote {len(entries)} pairs ({pos} hemorrhagic) in {cfg.folds} folds to {cfg.data_dir}")
    return 0


def _train_kw(cfg: RunConfig) -> dict:
    return dict(steps=cfg.steps, batch_size=cfg.batch_size, seed=cfg.seed, lr=cfg.lr, eval_every=cfg.eval_every,
                crop=cfg.crop_extents(), gradnorm=cfg.gradnorm, clip=cfg.clip, schedule=cfg.schedule,
                disc_lr_ratio=cfg.disc_lr_ratio)


def _write_report(report: EvalReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / REPORT_TXT).write_text(report.to_text())
    (out / REPORT_JSON).write_text(report.to_json() + "\n")


def cmd_train(args) -> int:
    cfg = _config(args)
    pairs, fold_of = _load_data(cfg)
    model_cfg = cfg.model_config()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(cfg.to_text())
    kw = _train_kw(cfg)
    if args.resume:
        folds = cfg.fold_indices()
        if len(folds) != 1:
            raise SystemExit("--resume needs a single fold (use --set fold=N)")
        kw["resume"] = args.resume
    if cfg.score not in SCORED:
        raise SystemExit(f"score must be one of {SCORED}, got {cfg.score!r}")
    report = cross_validate(model_cfg, pairs, fold_of, cfg.fold_indices(), out, which=cfg.score,
                            val_fraction=cfg.val_fraction, **kw)
    _write_report(report, out)
    print(report.to_text(), end="")
    print(report.summary())
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    pairs, fold_of = _load_data(cfg)
    single = len(set(fold_of)) == 1
    results = []
    for ck_path, fold in _checkpoints(args, cfg):
        ck = ckpt_io.load(ck_path)
        model = from_checkpoint(ck, expect=cfg.model_config() if args.strict else None).model
        if tuple(model.cfg.input_extents) != pairs[0].initial.shape:
            raise SystemExit(f"{ck_path}: model expects {model.cfg.input_extents}, data is {pairs[0].initial.shape}")
        test = pairs if single or fold is None else [p for p, k in zip(pairs, fold_of) if k == fold]
        results.append(evaluate(model, test, 0 if fold is None else fold))
    report = EvalReport.from_folds(results)
    if args.report:
        _write_report(report, args.report)
    print(report.to_text(), end="")
    print(report.summary())
    return 0


def _checkpoints(args, cfg: RunConfig):
    if args.checkpoint:
        return [(Path(args.checkpoint), args.fold)]
    run = Path(cfg.out_dir)
    which = args.which or cfg.score
    found = [(run / f"fold{f}" / f"{which}.ckpt", f) for f in cfg.fold_indices()]
    found = [(p, f) for p, f in found if p.exists()]
    if not found:
        raise SystemExit(f"no {which}.ckpt found under {run}/fold*/")
    return found


def cmd_infer(args) -> int:
    model = from_checkpoint(ckpt_io.load(args.checkpoint)).model
    vol = min_max_normalize(load_rvol(args.input))
    if vol.shape != tuple(model.cfg.input_extents):
        raise SystemExit(f"{args.input}: shape {vol.shape}, model expects {model.cfg.input_extents}")
    out = model(Tensor(vol[None].astype(np.float32)))
    pred = np.clip(out.pred_scan.data[0], 0.0, 1.0)
    probs = out.probs.data[0]
    save_rvol(args.output, pred)
    print(f"wrote {args.output}")
    print(f"p_non_hemorrhagic={probs[0]:.6f}\tp_hemorrhagic={probs[1]:.6f}\tlabel={int(probs.argmax())}")
    return 0


def cmd_verify(args) -> int:
    from .verify import run_suite

    return 0 if run_suite(quick=args.quick, pattern=args.only).ok else 1


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", metavar="DIR", help="output directory (runs, or the dataset for gen-data)")
    p.add_argument("--mode", choices=["2d", "3d", "tiny"])
    p.add_argument("--no-interactive-attention", action="store_true",
                   help="each decoder computes its own attention maps")
    p.add_argument("--reference-task", choices=["gen", "cls"])
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dtsw", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("gen-data", help="write synthetic phantom pairs and a fold manifest")
    _common(g)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="cross-validated training")
    _common(t)
    t.add_argument("--data", metavar="DIR")
    t.add_argument("--resume", metavar="CKPT")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate checkpoints on their held-out folds")
    _common(e)
    e.add_argument("--data", metavar="DIR")
    e.add_argument("--checkpoint", metavar="CKPT", help="single checkpoint (default: every fold under --out)")
    e.add_argument("--fold", type=int, help="fold scored by --checkpoint (default: all samples)")
    e.add_argument("--which", choices=SCORED, help="checkpoint scored per fold (default: the score key, final)")
    e.add_argument("--report", metavar="DIR", help="write report.txt and report.json here")
    e.add_argument("--strict", action="store_true", help="fail unless the checkpoint matches the config")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run the built-in oracle suite")
    v.add_argument("--quick", action="store_true", help="skip the full-model gradient check")
    v.add_argument("--only", metavar="SUBSTR", help="run checks whose name contains SUBSTR")
    v.set_defaults(func=cmd_verify)

    i = sub.add_parser("infer", help="predict a follow-up scan and outcome for one RVOL volume")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--output", required=True)
    i.set_defaults(func=cmd_infer)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.verb == "gen-data" and args.out is not None:
        args.data = args.out
        args.out = None
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"dtsw {args.verb}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
