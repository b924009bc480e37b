"""Command-line entry point for the scene perception pipeline."""
import argparse
import logging
import sys
from pathlib import Path

from src import pipeline as pl
from src.errors import ConfigError, PipelineError, SceneDataError, TrainingDivergenceError
from src.graph_core import export_dot, serialize_scene_jsonl
from src.pairwise_ranker import serialize_comparisons_jsonl
from src.reporting import write_text
from src.synthetic import generate_corpus

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3

BOOLEAN_KEYS = ("aggregate_votes", "fine_tune")

STAGE_COMMANDS = {
    "validate": "ingest",
    "split": "split",
    "pretrain": "pretrain",
    "embed": "embed",
    "train": "train",
    "evaluate": "evaluate",
    "score": "score",
    "motifs": "motifs",
}


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common_options():
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    for key in pl.CONFIG_KEYS:
        flag = "--" + key.replace("_", "-")
        if key in BOOLEAN_KEYS:
            common.add_argument(flag, dest=key, action="store_const", const="true", default=None)
        else:
            common.add_argument(flag, dest=key, default=None)
    return common


def build_parser():
    parser = ArgumentParser(prog="scene-perception",
                            description="Scene-graph perception ranking: pretrain, train, evaluate, explain.")
    common = _common_options()
    commands = parser.add_subparsers(dest="command", required=True)
    for name in STAGE_COMMANDS:
        commands.add_parser(name, parents=[common], help=f"run the pipeline up to '{name}'")
    commands.add_parser("run", parents=[common], help="run every stage")
    commands.add_parser("cross-city", parents=[common], help="evaluate trained models on another city")

    synth = commands.add_parser("synth", parents=[common], help="write a synthetic planted-quality corpus")
    synth.add_argument("--n-scenes", type=int, default=200)
    synth.add_argument("--per-dimension", type=int, default=400)
    synth.add_argument("--vocabulary-shift", type=float, default=0.0)
    synth.add_argument("--city", default=None)
    synth.add_argument("--prefix", default="scene")

    dot = commands.add_parser("export-dot", parents=[common], help="print scene graphs as DOT")
    dot.add_argument("--scene-id", action="append", default=None)
    return parser


def configure_logging(verbose=False):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def config_from_args(args):
    overrides = {key: getattr(args, key) for key in pl.CONFIG_KEYS}
    return pl.load_config(args.config, overrides)


def exit_code_for(exc):
    cause = exc.cause if isinstance(exc, PipelineError) else exc
    if isinstance(cause, TrainingDivergenceError):
        return EXIT_DIVERGED
    if isinstance(cause, ConfigError):
        return EXIT_USAGE
    return EXIT_DATA


def _synth(cfg, args):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = generate_corpus(args.n_scenes, args.per_dimension, seed=cfg.seed,
                             vocabulary_shift=args.vocabulary_shift, city=args.city, prefix=args.prefix)
    write_text(out / "scenes.jsonl", serialize_scene_jsonl(corpus.graphs))
    write_text(out / "comparisons.jsonl", serialize_comparisons_jsonl(corpus.comparisons))
    print(f"wrote {len(corpus.graphs)} scenes and {len(corpus.comparisons)} comparisons to {out}")


def _export_dot(cfg, args):
    if not cfg.scenes:
        raise ConfigError("export-dot needs --scenes")
    graphs = pl.read_scenes(cfg.scenes)
    wanted = set(args.scene_id or [])
    missing = wanted - {g.scene_id for g in graphs}
    if missing:
        raise SceneDataError(f"unknown scene ids: {', '.join(sorted(missing))}")
    for g in graphs:
        if not wanted or g.scene_id in wanted:
            sys.stdout.write(export_dot(g))


def dispatch(args):
    cfg = config_from_args(args)
    if args.command == "synth":
        _synth(cfg, args)
    elif args.command == "export-dot":
        _export_dot(cfg, args)
    elif args.command == "cross-city":
        rows = pl.cross_city(cfg)
        for row in rows:
            logger.info("%s: %s -> %s", row.metric, row.source, row.target)
        print(f"cross-city report written to {Path(cfg.out) / 'cross_city.txt'}")
    elif args.command == "run":
        out = pl.run_pipeline(cfg)
        print(f"artifacts written to {out} (config_hash={cfg.config_hash()})")
    else:
        runner = pl.Pipeline(cfg)
        getattr(runner, STAGE_COMMANDS[args.command])()
        print(f"{args.command} finished; artifacts in {runner.out}")
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    try:
        return dispatch(args)
    except (PipelineError, ConfigError, TrainingDivergenceError, OSError, ValueError) as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
