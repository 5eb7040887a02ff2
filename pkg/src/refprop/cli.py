"""Command-line surface.

Subcommands: generate-data, train, eval, infer, ablate. Exit codes:
0 success, 1 validation error, 2 IO error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .config import RunConfig, build_config
from .errors import NumericError, SequenceIOError, ValidationError


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are validation errors, exit 1
        raise ValidationError(message)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(flag, dest=f.name, default=None, metavar="V",
                            help=f"override config key {f.name} (default {f.default!r})")


def _config_overrides(args: argparse.Namespace) -> dict:
    return {
        f.name: getattr(args, f.name)
        for f in dataclasses.fields(RunConfig)
        if getattr(args, f.name, None) is not None
    }


def build_parser() -> _Parser:
    parser = _Parser(prog="refprop", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="generate a synthetic sequence dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--num-seq", type=int, required=True, help="number of sequences")
    p.add_argument("--frames", type=int, default=8, help="frames per sequence")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--canvas", type=int, default=96, help="square canvas side")

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default=None, help="flat key = value config file")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True, help="directory for report.txt")
    p.add_argument("--debug-oracle", action="store_true",
                   help="score ground truth against itself (sanity path)")
    p.add_argument("--prompt-mode", default=None)

    p = sub.add_parser("infer", help="write predicted masks and overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sequence-dir", required=True)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("ablate", help="train/evaluate the prompt and propagation switch grid")
    p.add_argument("--config", default=None)
    p.add_argument("--eval-dir", required=True, help="held-out dataset for scoring")
    p.add_argument("--grid", choices=("paper", "full"), default="paper",
                   help="paper: 4 headline variants; full: 2 prompt modes x 8 switch combos")
    _add_config_flags(p)

    return parser


def _cmd_generate_data(args) -> int:
    from .seq_io import write_dataset

    paths = write_dataset(args.out, args.num_seq, args.frames, args.seed, canvas=args.canvas)
    print(f"wrote {len(paths)} sequences under {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .train import train

    config = build_config(args.config, _config_overrides(args))
    path = train(config)
    print(f"final checkpoint: {path}")
    return 0


def _cmd_eval(args) -> int:
    from .evaluate import evaluate

    report_path = Path(args.out_dir) / "report.txt"
    report = evaluate(
        args.checkpoint,
        args.data_dir,
        report_path=report_path,
        debug_oracle=args.debug_oracle,
        prompt_mode=args.prompt_mode,
    )
    print(f"overall mean dice: {report.overall:.4f}")
    print(f"report: {report_path}")
    return 0


def _cmd_infer(args) -> int:
    from .inference import infer

    written = infer(args.checkpoint, args.sequence_dir, args.out_dir)
    print(f"wrote {len(written)} files under {args.out_dir}")
    return 0


def ablation_grid(kind: str):
    """Named (prompt_mode, box, mask, query) variants."""
    if kind == "paper":
        return [
            ("full", "full", True, True, True),
            ("no-prompt", "none", True, True, True),
            ("class-name-only", "class-name-only", True, True, True),
            ("no-propagation", "full", False, False, False),
        ]
    variants = []
    for mode in ("full", "none"):
        for box in (True, False):
            for mask in (True, False):
                for query in (True, False):
                    name = f"{mode}_b{int(box)}m{int(mask)}q{int(query)}"
                    variants.append((name, mode, box, mask, query))
    return variants


def _cmd_ablate(args) -> int:
    from .evaluate import evaluate
    from .train import train

    base = build_config(args.config, _config_overrides(args))
    out_root = Path(base.out_dir) if base.out_dir else Path("ablation")
    rows = []
    for name, mode, box, mask, query in ablation_grid(args.grid):
        config = dataclasses.replace(
            base,
            out_dir=str(out_root / name),
            prompt_mode=mode,
            propagate_box=box,
            propagate_mask=mask,
            propagate_query=query,
        )
        ckpt = train(config)
        report = evaluate(ckpt, args.eval_dir, report_path=out_root / name / "report.txt")
        rows.append((name, mode, box, mask, query, report.overall))
        print(f"{name}: dice={report.overall:.4f}")

    summary = out_root / "ablation_summary.txt"
    lines = ["variant\tprompt_mode\tbox\tmask\tquery\tmean_dice"]
    for name, mode, box, mask, query, dice in rows:
        lines.append(f"{name}\t{mode}\t{int(box)}\t{int(mask)}\t{int(query)}\t{dice!r}")
    summary.parent.mkdir(parents=True, exist_ok=True)
    summary.write_text("\n".join(lines) + "\n")
    print(f"summary: {summary}")
    return 0


_COMMANDS = {
    "generate-data": _cmd_generate_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "ablate": _cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (SequenceIOError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
