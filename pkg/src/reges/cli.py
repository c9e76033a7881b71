"""``reges`` command line.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from reges import __version__
from reges._io import iter_lines, write_json, write_jsonl
from reges.config import ConfigError, RunConfig, validate_config
from reges.corpus import FORMATS, SPLITS, extract_instances, load_catalog, parse_dialogues
from reges.embed import Embedder, EmbedderConfig
from reges.evaluation import distribution_divergence, mean_cross_cosine
from reges.pipeline import EVAL_KINDS, STAGES, run_pipeline

logger = logging.getLogger("reges")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="run config (YAML or JSON)")
    parser.add_argument("--seed", type=int, default=default, help="override the config seed")
    parser.add_argument("--out-dir", default=default, help="override the config out_dir")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="reges", description="Retrieval and generation stages for conversational recommendation.")
    parser.add_argument("--version", action="version", version=f"reges {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def command(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        _global_flags(p, suppress=True)
        return p

    run = command("run", "run several stages in order")
    run.add_argument("--stages", default=",".join(STAGES), help="comma-separated subset of stages")
    for stage in STAGES:
        p = command(stage, f"run the {stage} stage")
        if stage == "ingest":
            p.add_argument("--format", choices=FORMATS, help="standalone mode: dialogue format")
            p.add_argument("--input", help="standalone mode: dialogue file")
            p.add_argument("--catalog", help="standalone mode: catalog file")
            p.add_argument("--split", choices=SPLITS, default="train")
            p.add_argument("--out", help="standalone mode: instances output path")
        if stage == "reformulate":
            p.add_argument("--mode", dest="query_mode", help="original, trained_qr or direct_prompt")
        if stage == "gen-g-data":
            p.add_argument("--negatives", choices=("hard", "random"))
            p.add_argument("--k-train", type=int, dest="k_train")
            p.add_argument("--cot", choices=("on", "off"))
        if stage in ("retrieve", "recommend"):
            p.add_argument("--k", type=int, help="list size")
        if stage == "evaluate":
            p.add_argument("--what", action="append", help=f"one or more of {', '.join(EVAL_KINDS)}")
            p.add_argument("--k", type=int, help="list size for recall and forced inclusion")
    command("validate", "check a config and print it with defaults applied")

    analyze = command("analyze", "offline analyses")
    asub = analyze.add_subparsers(dest="analysis", parser_class=_Parser)
    dist = asub.add_parser("distributions", help="divergence between training and inference inputs")
    _global_flags(dist, suppress=True)
    dist.add_argument("--train", required=True, help="JSONL of training records (uses 'prompt')")
    dist.add_argument("--infer", required=True, help="JSONL of inference inputs")
    dist.add_argument("--field", default=None, help="record field holding the text")
    return parser


def _texts(path: str, field: str | None) -> list[str]:
    out = []
    for lineno, line in iter_lines(Path(path)):
        rec = json.loads(line)
        if isinstance(rec, dict) and "__header__" in rec:
            continue
        if isinstance(rec, str):
            out.append(rec)
            continue
        key = field or next((k for k in ("prompt", "query_text", "text") if k in rec), None)
        if key is None or key not in rec:
            raise ValueError(f"{path}:{lineno}: no text field (tried {field or 'prompt, query_text, text'})")
        out.append(rec[key])
    return out


def _ingest_standalone(args) -> int:
    """``ingest --input ... --catalog ... --out ...`` without a config file."""
    missing = [f"--{n}" for n in ("format", "catalog", "out") if not getattr(args, n)]
    if missing:
        raise UsageError(f"ingest --input also needs {', '.join(missing)}")
    for flag in ("input", "catalog"):
        if not Path(getattr(args, flag)).exists():
            raise UsageError(f"--{flag} does not exist: {getattr(args, flag)}")
    catalog = load_catalog(args.catalog)
    parsed = parse_dialogues(args.input, args.format)
    instances, skips = extract_instances(parsed.dialogues, catalog, args.split)
    out = Path(args.out)
    header = {"tool": "reges", "version": __version__, "stage": "ingest", "seed": args.seed,
              "input": args.input, "format": args.format, "catalog": args.catalog, "split": args.split}
    write_jsonl(out, [i.to_dict() for i in instances], header)
    write_json(out.with_name(out.stem + ".skip_report.json"), {
        "header": header,
        "dialogues": len(parsed.dialogues),
        "parse_errors": [str(e) for e in parsed.errors],
        "skipped": skips.to_dict(),
    })
    print(f"{len(parsed.dialogues)} dialogues, {len(instances)} instances, {skips.total} skipped")
    return 0


def _load(args) -> RunConfig:
    if not args.config:
        raise UsageError("--config is required for this command")
    overrides = {"seed": args.seed, "out_dir": args.out_dir}
    for key in ("query_mode", "negatives", "k_train", "cot"):
        overrides[key] = getattr(args, key, None)
    if args.command in ("retrieve", "recommend"):
        overrides["k"] = args.k
    return validate_config(args.config, overrides=overrides)


def _analyze(args) -> int:
    if args.analysis != "distributions":
        raise UsageError("analyze needs a subcommand: distributions")
    embedder = Embedder(_load(args).embedder) if args.config else Embedder(EmbedderConfig())
    train, infer = _texts(args.train, args.field), _texts(args.infer, args.field)
    result = {
        "train": len(train),
        "infer": len(infer),
        "energy_distance": distribution_divergence(train, infer, embedder),
        "mean_cross_cosine": mean_cross_cosine(train, infer, embedder),
    }
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def dispatch(args) -> int:
    if args.command is None:
        raise UsageError("no command given; try --help")
    if args.command == "analyze":
        return _analyze(args)
    if args.command == "ingest" and args.input:
        return _ingest_standalone(args)
    config = _load(args)
    if args.command == "validate":
        print(json.dumps(config.snapshot(), indent=2, sort_keys=True))
        return 0
    if args.command == "run":
        stages = [s.strip() for s in args.stages.split(",") if s.strip()]
        bad = [s for s in stages if s not in STAGES]
        if bad:
            raise UsageError(f"unknown stages {bad}")
        manifest = run_pipeline(config, stages)
        print(f"completed {', '.join(manifest['stages'])}")
        return 0
    if args.command != "evaluate":
        run_pipeline(config, [args.command])
        return 0
    what = [w.strip() for item in (args.what or []) for w in item.split(",") if w.strip()] or None
    bad = [w for w in what or [] if w not in EVAL_KINDS]
    if bad:
        raise UsageError(f"unknown --what {bad}; expected {', '.join(EVAL_KINDS)}")
    if args.k is not None and args.k < 1:
        raise UsageError("k must be ≥ 1")
    run_pipeline(config, ["evaluate"], evaluate=what, eval_k=args.k)
    print(Path(config.resolve(config.out_dir), "report.txt").read_text(encoding="utf-8"), end="")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return dispatch(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        logger.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
