"""``weakftm`` command line.

Exit codes: 0 success, 1 usage or stage error, 2 pipeline assertion failure
(a repro run whose orderings do not hold).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import evalkit as ek
from . import pipeline as pl

EXIT_OK, EXIT_USAGE, EXIT_ASSERT = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> pl.PipelineConfig:
    cfg = pl.PipelineConfig.load(args.config) if args.config else pl.PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _sidecar(out: Path) -> Path:
    return out.parent / (out.name + ".config.json")


def _echo(args, out: Path, extra: dict | None = None, into_dir: bool = False) -> None:
    """Write the resolved config (plus command arguments) next to the outputs."""
    cfg = _config(args).to_dict()
    cfg["command"] = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    if extra:
        cfg.update(extra)
    if into_dir:
        pl.echo_config(out, cfg)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        _sidecar(out).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_gen(args) -> int:
    cfg = _config(args)
    cfg.validate()
    paths = pl.stage_gen(cfg, args.out)
    _echo(args, Path(args.out), into_dir=True)
    for split, p in paths.items():
        print(f"{split}: {p}")
    return EXIT_OK


def cmd_weaklabel(args) -> int:
    cfg = _config(args)
    low = cfg.weaklabel.low_db if args.low_db is None else args.low_db
    high = cfg.weaklabel.high_db if args.high_db is None else args.high_db
    limit = cfg.weaklabel.limit if args.limit is None else (args.limit or None)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stats_path = Path(args.stats) if args.stats else out.with_name(out.stem + ".stats.json")
    stats = pl.stage_weaklabel(args.corpus, out, stats_path, low, high, limit)
    _echo(args, out, {"resolved_weaklabel": {"low_db": low, "high_db": high, "limit": limit}})
    print(stats.to_json())
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    cfg.validate()
    out = Path(args.out)
    history = pl.stage_train(
        args.model,
        cfg,
        args.data,
        args.dev,
        out,
        teacher_scores_path=args.teacher_scores,
        teacher_embeddings_path=args.teacher_embeddings,
    )
    _echo(args, out)
    best = min((h["dev_eer"] for h in history if h["dev_eer"] is not None), default=None)
    print(f"{args.model}: {len(history)} epochs, best dev EER {best}")
    return EXIT_OK


def cmd_teacher_scores(args) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    scores = pl.stage_teacher_scores(args.params, args.corpus, out, args.embeddings)
    _echo(args, out)
    print(f"{len(scores)} teacher scores -> {out}")
    return EXIT_OK


def cmd_score(args) -> int:
    out = Path(args.out)
    tag = args.tag or Path(args.params).stem
    records = pl.stage_score(args.params, args.corpus, out, tag)
    _echo(args, out)
    print(f"{len(records)} scores ({tag}) -> {out}")
    return EXIT_OK


def _parse_fuse(values, tags) -> list[tuple[str, str]]:
    pairs = []
    for v in values or []:
        if v == "":
            if len(tags) < 2:
                raise ValueError("--fuse needs two score sets")
            pairs.append((tags[0], tags[1]))
        else:
            a, sep, b = v.partition(",")
            if not sep:
                raise ValueError(f"--fuse expects TAG_A,TAG_B, got {v!r}")
            pairs.append((a, b))
    return pairs


def cmd_eval(args) -> int:
    sets: dict[str, dict[str, float]] = {}
    for path in args.scores:
        for tag, scores in pl.group_by_tag(ek.read_scores(path)).items():
            if tag in sets:
                raise ValueError(f"model tag {tag!r} appears in more than one score file")
            sets[tag] = scores
    labels = pl.read_labels(args.labels)
    pairs = _parse_fuse(args.fuse, list(sets))
    table = pl.stage_eval(sets, labels, args.out, pairs, plot=not args.no_plot)
    _echo(args, Path(args.out), into_dir=True)
    print(ek.format_table(table))
    return EXIT_OK


def cmd_repro(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.out_dir)
    cfg.out_dir = str(out)
    report = pl.run_pipeline(cfg, out, resume=args.resume)
    print((out / "report.txt").read_text(encoding="utf-8"), end="")
    if not all(report["orderings"].values()):
        failed = [k for k, ok in report["orderings"].items() if not ok]
        print(f"ordering check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_ASSERT
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="weakftm", description="Weakly supervised false-trigger mitigation pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="pipeline config (JSON)")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.set_defaults(func=func)
        return sp

    sp = add("gen", cmd_gen, "generate train/dev/test corpora")
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("weaklabel", cmd_weaklabel, "weak-label a corpus and keep the covered utterances")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--stats", help="coverage report path (default: <out>.stats.json)")
    sp.add_argument("--low-db", type=float)
    sp.add_argument("--high-db", type=float)
    sp.add_argument("--limit", type=int, help="keep at most this many utterances (0 = all)")

    sp = add("train", cmd_train, "train lrnn, aftm or aftm-d")
    sp.add_argument("--model", required=True, choices=("lrnn", "aftm", "aftm-d"))
    sp.add_argument("--data", required=True, help="weak-labeled training corpus")
    sp.add_argument("--dev", required=True, help="dev corpus (true labels) for early stopping")
    sp.add_argument("--out", required=True, help="params file")
    sp.add_argument("--teacher-scores", help="teacher score CSV (aftm-d)")
    sp.add_argument("--teacher-embeddings", help="teacher embedding CSV (aftm-d, embedding-mse)")

    sp = add("teacher-scores", cmd_teacher_scores, "freeze teacher scores from a trained lrnn")
    sp.add_argument("--params", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--embeddings", help="also write teacher embeddings here")

    sp = add("score", cmd_score, "score a corpus with a trained model")
    sp.add_argument("--params", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--tag", help="model tag written into the score file (default: params file stem)")

    sp = add("eval", cmd_eval, "metrics table, DET exports and plot")
    sp.add_argument("--scores", required=True, nargs="+")
    sp.add_argument("--labels", required=True, help="corpus file or id,label CSV")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument(
        "--fuse",
        nargs="?",
        const="",
        action="append",
        metavar="TAG_A,TAG_B",
        help="add an equal-weight fusion (bare flag: the first two score sets); repeatable",
    )
    sp.add_argument("--no-plot", action="store_true")

    sp = add("repro", cmd_repro, "run the whole pipeline and check the result orderings")
    sp.add_argument("--out", help="run directory (default: config out_dir)")
    sp.add_argument("--resume", action="store_true", help="skip stages whose outputs exist")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except pl.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
