"""Command-line entry point: ``dadiff <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure (a JSON error report
is printed to stderr and written to ``error.json`` in the output directory).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from pathlib import Path

import torch

from .config import ConfigError, RunConfig
from .synth import (
    CountMismatchError,
    DatasetError,
    gen_pair,
    load_dataset,
    read_boxes,
    dump_features,
    write_boxes,
    write_sequence,
)

log = logging.getLogger("dadiff")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Bad flag combination detected after parsing."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add(p: argparse.ArgumentParser, *names: str, **help_overrides: str) -> None:
    flags = {
        "config": dict(flag="--config", metavar="FILE", default=None, help="RunConfig JSON file"),
        "out": dict(flag="--out", metavar="DIR", default=".", help="output directory"),
        "seed": dict(flag="--seed", type=int, metavar="N", default=None,
                     help="run seed; None keeps the config value (0 unless set)"),
        "sequences": dict(flag="--sequences", type=int, metavar="N", default=None,
                          help="day/night pairs to synthesise; None keeps the config value"),
        "frames": dict(flag="--frames", type=int, metavar="N", default=None,
                       help="frames per sequence; None keeps the config value"),
        "checkpoint": dict(flag="--checkpoint", metavar="FILE", default=None, help="checkpoint file"),
        "sequence": dict(flag="--sequence", metavar="DIR", default=None,
                         help="sequence directory or dataset root"),
        "pred": dict(flag="--pred", metavar="DIR", default=None,
                     help="directory of <sequence>.txt prediction files"),
        "gt": dict(flag="--gt", metavar="DIR", default=None, help="ground-truth dataset root"),
        "no_align": dict(flag="--no-align", action="store_true", default=False,
                         help="track on raw backbone features"),
        "mode": dict(flag="--mode", choices=["paired", "unpaired"], default=None,
                     help="alignment-loss pairing; None keeps the config value"),
        "report": dict(flag="--report", metavar="FILE", default=None,
                       help="JSON report path; None writes <out>/report.json (diag: <out>/diag.json)"),
        "dump": dict(flag="--dump", metavar="FILE", default=None, help="write a feature dump here"),
    }
    for name in names:
        spec = dict(flags[name])
        if name in help_overrides:
            spec["help"] = help_overrides[name]
        p.add_argument(spec.pop("flag"), **spec)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="dadiff", formatter_class=fmt,
                     description="Diffusion-based day/night feature alignment for small-target tracking.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def command(name, help):
        return sub.add_parser(name, formatter_class=fmt, help=help, description=help)

    p = command("gen-data", "write synthetic day/night sequence pairs")
    _add(p, "config", "out", "seed", "sequences", "frames")

    p = command("train", "pretrain the tracker on day data, then train the alignment pipeline")
    _add(p, "config", "out", "seed", "sequences", "frames", "mode", "gt",
         gt="dataset root of <name>_day/<name>_night pairs; synthesised when omitted")

    p = command("align", "export raw and aligned search features for a dataset")
    _add(p, "config", "out", "seed", "checkpoint", "sequence", "dump")

    p = command("track", "track sequences, one box file per sequence")
    _add(p, "config", "out", "seed", "checkpoint", "sequence", "no_align")

    p = command("eval", "score prediction files against ground truth")
    _add(p, "config", "out", "pred", "gt", "report")

    p = command("diag", "day/night feature discrepancy before and after alignment")
    _add(p, "config", "out", "seed", "checkpoint", "sequence", "report", "dump")
    return parser


def resolve_config(args: argparse.Namespace, base: RunConfig | None = None) -> RunConfig:
    """Config file (or ``base``) values, overridden by explicit flags."""
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else (base or RunConfig())
    overrides = {}
    for flag, field in (("seed", "seed"), ("sequences", "sequences"), ("frames", "frames"),
                        ("mode", "mode")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field] = value
    if getattr(args, "gt", None) and args.command == "train":
        overrides["data_dir"] = args.gt
    overrides["out_dir"] = str(args.out)
    return cfg.replace(**overrides)


def _record(out: Path, cfg: RunConfig, args: argparse.Namespace) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.resolved.json")
    seeds = {"seed": cfg.seed, "command": args.command,
             "deterministic": os.environ.get("DADIFF_DETERMINISTIC") == "1",
             "torch": torch.__version__}
    (out / "seed.json").write_text(json.dumps(seeds, indent=2, sort_keys=True) + "\n")


def _deterministic() -> None:
    if os.environ.get("DADIFF_DETERMINISTIC") == "1":
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.set_num_threads(1)


def _require(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise UsageError(f"--{n.replace('_', '-')} is required for {args.command}")


def _load_model(path):
    from .model import load_checkpoint

    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, _, cfg = load_checkpoint(path)
    model.eval()
    return model, cfg


# ------------------------------------------------------------------ commands

def cmd_gen_data(args, cfg: RunConfig, out: Path) -> dict:
    names = []
    for i in range(cfg.sequences):
        for seq in gen_pair(cfg, cfg.seed * 100_003 + i, f"seq{i:03d}"):
            write_sequence(seq, out)
            names.append(seq.name)
    return {"sequences": names}


def cmd_train(args, cfg: RunConfig, out: Path) -> dict:
    from .diag import pair_sequences
    from .train import fit

    if cfg.data_dir:
        day, night = pair_sequences(load_dataset(cfg.data_dir))
        if not day:
            raise DatasetError(f"no <name>_day/<name>_night pairs under {cfg.data_dir}")
    else:
        pairs = [gen_pair(cfg, cfg.seed * 100_003 + i, f"seq{i:03d}") for i in range(cfg.sequences)]
        day, night = [p[0] for p in pairs], [p[1] for p in pairs]
    state = fit(cfg, day, night, out,
                progress=lambda r: log.info("epoch %d loss %.4f", r["epoch"], r["loss"]))
    last = state.history[-1] if state.history else {}
    return {"checkpoint": str(out / "checkpoint.pt"), "steps": state.step, "last": last}


def cmd_align(args, cfg: RunConfig, out: Path) -> dict:
    from .diag import denoise_all, search_features

    _require(args, "checkpoint", "sequence", "dump")
    model, _ = _load_model(args.checkpoint)
    seqs = load_dataset(args.sequence)
    maps, labels = [], []
    for seq in seqs:
        raw = search_features(model, [seq])
        aligned = denoise_all(model, raw, cfg.seed)
        maps += list(raw) + list(aligned)
        labels += [seq.domain] * len(raw) + [f"{seq.domain}_aligned"] * len(aligned)
    dump_features(maps, labels, args.dump)
    return {"dump": args.dump, "maps": len(maps)}


def cmd_track(args, cfg: RunConfig, out: Path) -> dict:
    from .tracker import track_sequence

    _require(args, "checkpoint", "sequence")
    model, mcfg = _load_model(args.checkpoint)
    files = {}
    for seq in load_dataset(args.sequence):
        boxes = track_sequence(model, seq, use_alignment=not args.no_align, seed=cfg.seed,
                               upsample=mcfg.upsample)
        path = out / f"{seq.name}.txt"
        write_boxes(boxes, path)
        files[seq.name] = str(path)
    return {"predictions": files, "aligned": not args.no_align}


def cmd_eval(args, cfg: RunConfig, out: Path) -> dict:
    from .evaluate import attribute_report

    _require(args, "pred", "gt")
    gts = {s.name: s for s in load_dataset(args.gt)}
    preds = sorted(Path(args.pred).glob("*.txt"))
    if not preds:
        raise DatasetError(f"no prediction files in {args.pred}")
    results, tags = {}, {}
    for p in preds:
        name = p.stem
        if name not in gts:
            raise DatasetError(f"{name}: no ground-truth sequence under {args.gt}")
        boxes, gt = read_boxes(p), gts[name]
        if len(boxes) != len(gt):
            raise CountMismatchError(
                f"{name}: {len(boxes)} predicted boxes but {len(gt)} ground-truth frames")
        results[name] = (boxes, gt.boxes)
        tags[name] = sorted(gt.attributes)
    rep = attribute_report(results, tags)
    report = Path(args.report) if args.report else out / "report.json"
    report.parent.mkdir(parents=True, exist_ok=True)
    report.write_text(rep.to_json() + "\n")
    (out / "curves.csv").write_text(rep.curves_csv())
    print(rep.table())
    return {"report": str(report), "success_auc": rep.success_auc}


def cmd_diag(args, cfg: RunConfig, out: Path) -> dict:
    from .diag import alignment_gap, pair_sequences

    _require(args, "checkpoint", "sequence")
    model, _ = _load_model(args.checkpoint)
    day, night = pair_sequences(load_dataset(args.sequence))
    if not day:
        raise DatasetError(f"no <name>_day/<name>_night pairs under {args.sequence}")
    gap = alignment_gap(model, day, night, cfg.seed)
    feats = gap.pop("features")
    if args.dump:
        maps, labels = [], []
        for label, f in feats.items():
            maps += list(f)
            labels += [label] * len(f)
        dump_features(maps, labels, args.dump)
    report = Path(args.report) if args.report else out / "diag.json"
    report.write_text(json.dumps(gap, indent=2, sort_keys=True) + "\n")
    print(f"discrepancy raw {gap['raw']:.4f}  aligned {gap['aligned']:.4f}  ratio {gap['ratio']:.4f}")
    return gap


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "align": cmd_align,
            "track": cmd_track, "eval": cmd_eval, "diag": cmd_diag}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    out = Path(args.out)
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"dadiff {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        _record(out, cfg, args)
        _deterministic()
        COMMANDS[args.command](args, cfg, out)
    except UsageError as exc:
        print(f"dadiff {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # reported, not re-raised: the exit code carries the failure
        report = {"command": args.command, "error": type(exc).__name__, "message": str(exc),
                  "traceback": traceback.format_exc().splitlines()[-3:]}
        text = json.dumps(report, indent=2)
        print(text, file=sys.stderr)
        try:
            (out / "error.json").write_text(text + "\n")
        except OSError:
            pass
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
