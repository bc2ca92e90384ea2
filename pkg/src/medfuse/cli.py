"""Command-line entry point: ``medfuse {gen-data,train,eval,gradcheck,report}``.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.
Every command except ``gradcheck`` writes a JSON run manifest next to its
primary output.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .evaluate import parse_tasks, evaluate
from .fusion import FUSION_KINDS
from .gradcheck import default_factories, grad_check
from .metrics import append_report, read_reports
from .model import MODALITIES, Model, ModelConfig, config_for_grid
from .report import bar_chart, markdown_table
from .synthdata import CorpusConfig, Vocab, generate, load_corpus, save_corpus, split_ids
from .train import load_checkpoint, save_checkpoint, train

log = logging.getLogger("medfuse")


class UsageError(Exception):
    """Bad flags or config; maps to exit code 2."""


def _write_manifest(path: Path, command: str, argv, started: float, **fields) -> None:
    doc = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        **fields,
        "started_at": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "duration_s": round(time.time() - started, 3),
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_gen_data(args, argv) -> int:
    started = time.time()
    if args.cases < 1:
        raise UsageError("--cases must be >= 1")
    config = CorpusConfig(num_cases=args.cases, grid=args.grid, mask_grid=args.mask_grid,
                          noise=args.noise, distractors=args.distractors, seed=args.seed)
    try:
        config.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    vocab = Vocab()
    records = generate(config, vocab)
    by_id = {r.id: r for r in records}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, ids in zip(("train", "val", "test"), split_ids(by_id)):
        paths[split] = out / f"{split}.jsonl"
        save_corpus([by_id[i] for i in sorted(ids)], paths[split], vocab)
    _write_manifest(out / "manifest.json", "gen-data", argv, started, seed=args.seed,
                    config=vars(config), outputs={k: str(v) for k, v in paths.items()})
    print(f"wrote {len(records)} cases to {out}")
    return 0


def _resolve_config(args, records) -> ModelConfig:
    """Defaults from the data, then the JSON config file, then explicit flags."""
    first = records[0]
    cfg = config_for_grid(first.image.shape[-1], mask_grid=first.mask.shape[0],
                          num_classes=max(2, max(r.label for r in records) + 1))
    data = cfg.to_dict()
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageError(f"cannot read --config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"--config is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("--config must hold a JSON object")
        data.update(loaded)
    for flag in ("modality", "fusion", "epochs", "seed", "lr"):
        value = getattr(args, flag)
        if value is not None:
            data[flag] = value
    try:
        cfg = ModelConfig.from_dict(data)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid model config: {exc}") from None
    return cfg


def cmd_train(args, argv) -> int:
    started = time.time()
    if args.epochs is not None and args.epochs < 0:
        raise UsageError("--epochs must be >= 0")
    records = load_corpus(args.data)
    if not records:
        raise RuntimeError(f"{args.data}: no records")
    cfg = _resolve_config(args, records)
    model = Model(cfg)
    _, losses = train(model, records, cfg)
    ckpt = Path(args.out)
    save_checkpoint(model, ckpt)
    loss_csv = Path(args.loss_csv) if args.loss_csv else ckpt.with_suffix(".loss.csv")
    with loss_csv.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "mean_loss"])
        for epoch, loss in enumerate(losses, start=1):
            writer.writerow([epoch, repr(loss)])
    _write_manifest(ckpt.with_suffix(".manifest.json"), "train", argv, started, seed=cfg.seed,
                    config=cfg.to_dict(), inputs={"data": str(args.data), "config": args.config},
                    outputs={"checkpoint": str(ckpt), "loss_csv": str(loss_csv)})
    print(f"trained {cfg.modality}-{cfg.fusion} for {cfg.epochs} epochs; final loss "
          f"{losses[-1] if losses else float('nan'):.6f}")
    return 0


def cmd_eval(args, argv) -> int:
    started = time.time()
    try:
        tasks = parse_tasks(args.tasks)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        model = load_checkpoint(args.ckpt)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise RuntimeError(f"cannot load checkpoint {args.ckpt}: {exc}") from None
    records = load_corpus(args.data)
    report, details = evaluate(model, records, tasks, args.name)
    out = Path(args.out)
    append_report(out, report)
    _write_manifest(out.with_suffix(".manifest.json"), "eval", argv, started, seed=model.config.seed,
                    config=model.config.to_dict(), inputs={"data": str(args.data), "ckpt": str(args.ckpt)},
                    outputs={"csv": str(out)}, details=details)
    print(",".join(report.to_row()))
    return 0


def cmd_gradcheck(args, argv) -> int:
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    if args.tol < 0 or args.eps <= 0:
        raise UsageError("--tol must be >= 0 and --eps > 0")
    modalities = MODALITIES if args.all_modalities else ("both",)
    report = grad_check(default_factories(modalities), args.tol, args.eps, range(args.seeds))
    for line in report.lines():
        print(line)
    failures = report.failures
    if failures:
        print(f"{len(failures)} of {len(report.worst)} groups failed", file=sys.stderr)
        return 1
    print(f"all {len(report.worst)} groups passed", file=sys.stderr)
    return 0


def cmd_report(args, argv) -> int:
    started = time.time()
    reports = read_reports(args.in_csv)
    md = Path(args.out_md)
    md.write_text(markdown_table(reports), encoding="utf-8")
    outputs = {"markdown": str(md)}
    if args.out_svg:
        bar_chart(reports, Path(args.out_svg))
        outputs["svg"] = str(args.out_svg)
    _write_manifest(md.with_suffix(".manifest.json"), "report", argv, started, seed=None,
                    inputs={"csv": str(args.in_csv)}, outputs=outputs)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="medfuse", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic train/val/test corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--cases", type=int, default=2000)
    p.add_argument("--grid", type=int, default=16, help="image side G")
    p.add_argument("--mask-grid", type=int, default=4, help="mask side g (must divide G)")
    p.add_argument("--noise", type=float, default=0.05, help="pixel noise std")
    p.add_argument("--distractors", type=int, default=4, help="distractor tokens per report")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", required=True, help="training corpus (.jsonl)")
    p.add_argument("--config", help="JSON model config; flags override its values")
    p.add_argument("--modality", choices=MODALITIES)
    p.add_argument("--fusion", choices=FUSION_KINDS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-csv", help="per-epoch loss CSV (default: <out>.loss.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and append one CSV row")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--tasks", default="classify,localize,generate")
    p.add_argument("--out", required=True, help="report CSV (appended)")
    p.add_argument("--name", help="model name column (default: <modality>-<fusion>)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--all-modalities", action="store_true",
                   help="check image/text/both models instead of only 'both'")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="render a comparison table (and optional SVG chart)")
    p.add_argument("--in", dest="in_csv", required=True)
    p.add_argument("--out-md", required=True)
    p.add_argument("--out-svg")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except UsageError as exc:
        print(f"medfuse {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"medfuse {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
