"""Command-line entry point.

Subcommands: prepare, train, evaluate, serve, simulate. Flags override
config-file values, which override built-in defaults. Exit codes: 0 success,
2 config error, 3 data error, 4 training divergence, 5 serving error.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

import yaml

from routekit import dataprep, learn, pipeline, simx
from routekit.errors import RoutekitError, ConfigError
from routekit.gateway import serve as gateway_serve

log = logging.getLogger("routekit")

METHOD_CHOICES = ("random", "knn", "mlp", "head", "all")


def _load_run_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"unreadable config {p}: {exc}") from exc
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping: {p}")
    return raw


def _setting(args_value, config: dict, key: str, default):
    """Flag > config file > default."""
    if args_value is not None:
        return args_value
    if key in config:
        return config[key]
    return default


def _methods(choice: str) -> tuple[str, ...]:
    return pipeline.ALL_METHODS if choice == "all" else (choice,)


def cmd_prepare(args) -> int:
    config = _load_run_config(args.config)
    corpora = config.get("corpora")
    if not corpora:
        raise ConfigError("prepare needs a config file listing corpora "
                          "(entries with path and tag)")
    queries: list[dataprep.Query] = []
    for entry in corpora:
        queries.extend(dataprep.ingest_dataset(entry["path"], entry["tag"]))
    if not queries:
        raise ConfigError("corpora produced no queries")

    fleet_path = config.get("fleet")
    if not fleet_path:
        raise ConfigError("prepare needs a fleet file in the config")
    fleet = simx.load_sim_fleet(fleet_path)
    adaptors = {cfg.expert_name: adaptor for cfg, adaptor in fleet}

    out = Path(_setting(args.out, config, "artifacts", "artifacts"))
    paths = pipeline.prepare(
        queries, adaptors, out,
        temperature=float(_setting(args.temperature, config, "temperature",
                                   dataprep.DEFAULT_TEMPERATURE)),
        train_fraction=float(config.get("train_fraction",
                                        dataprep.DEFAULT_TRAIN_FRACTION)),
        seed=int(_setting(args.seed, config, "seed", dataprep.DEFAULT_SEED)),
        metric=config.get("metric", "bert_sim"),
    )
    if Path(fleet_path).resolve() != paths.fleet.resolve():
        shutil.copyfile(fleet_path, paths.fleet)
    print(f"prepared artifacts in {out}")
    return 0


def cmd_train(args) -> int:
    config = _load_run_config(args.config)
    out = Path(_setting(args.out, config, "artifacts", "artifacts"))
    seed = int(_setting(args.seed, config, "seed", dataprep.DEFAULT_SEED))
    methods = _methods(args.method)
    for method in methods:
        if method not in pipeline.LEARNED_METHODS:
            if args.method != "all":
                raise ConfigError(f"train supports mlp/head, got {method!r}")
            continue
        lr = learn.MLP_LEARNING_RATE if method == "mlp" else learn.HEAD_LEARNING_RATE
        train_config = learn.TrainConfig(
            learning_rate=float(config.get(f"{method}_learning_rate", lr)),
            weight_decay=float(config.get("weight_decay", 1e-4)),
            batch_size=int(config.get("batch_size", 8)),
            epochs=int(config.get("epochs", 5)),
            seed=seed,
        )
        manifest = pipeline.train(out, method, config=train_config,
                                  hidden=int(config.get("hidden", learn.HIDDEN_SIZE)))
        print(f"trained {method} -> {manifest}")
    return 0


def cmd_evaluate(args) -> int:
    config = _load_run_config(args.config)
    out = Path(_setting(args.out, config, "artifacts", "artifacts"))
    pipeline.evaluate(
        out,
        methods=_methods(args.method),
        trials=int(_setting(args.trials, config, "trials", 10)),
        seed=int(_setting(args.seed, config, "seed", dataprep.DEFAULT_SEED)),
    )
    paths = pipeline.ArtifactPaths(out)
    print(f"reports written: {paths.report_json} {paths.report_txt}")
    return 0


def cmd_serve(args) -> int:
    if not args.config:
        raise ConfigError("serve needs --config pointing at a gateway config")
    gateway_serve(args.config, port=args.port)
    return 0


def cmd_simulate(args) -> int:
    config = _load_run_config(args.config)
    out = Path(_setting(args.out, config, "artifacts", "artifacts"))
    pipeline.simulate(
        out,
        n_queries=int(_setting(args.queries, config, "queries", 2400)),
        seed=int(_setting(args.seed, config, "seed", dataprep.DEFAULT_SEED)),
        temperature=float(_setting(args.temperature, config, "temperature",
                                   dataprep.DEFAULT_TEMPERATURE)),
        trials=int(_setting(args.trials, config, "trials", 10)),
        methods=_methods(args.method),
    )
    paths = pipeline.ArtifactPaths(out)
    print(f"simulate complete; artifacts in {out} "
          f"(reports: {paths.report_json.name}, {paths.report_txt.name}; "
          f"gateway config: {paths.gateway_config.name})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="routekit",
        description="Multi-LLM routing toolkit: data prep, router training, "
                    "evaluation, and a serving gateway.",
    )
    parser.add_argument("--verbose", "-v", action="store_true",
                        help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, method_default="all"):
        p.add_argument("--config", help="run config file (YAML)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="artifact directory")
        p.add_argument("--method", choices=METHOD_CHOICES, default=method_default)
        p.add_argument("--temperature", type=float, default=None,
                       help="soft-label softmax temperature")
        p.add_argument("--trials", type=int, default=None,
                       help="random-protocol trials")

    p_prepare = sub.add_parser("prepare", help="build the prediction dataset, "
                               "soft labels, and split")
    common(p_prepare)
    p_prepare.set_defaults(func=cmd_prepare)

    p_train = sub.add_parser("train", help="train a learned router")
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="score methods on the held-out split")
    common(p_eval)
    p_eval.set_defaults(func=cmd_evaluate)

    p_serve = sub.add_parser("serve", help="run the gateway until interrupted")
    p_serve.add_argument("--config", required=True, help="gateway config (YAML)")
    p_serve.add_argument("--port", type=int, default=None)
    p_serve.set_defaults(func=cmd_serve)

    p_sim = sub.add_parser("simulate", help="end-to-end synthetic run against "
                           "the simulated fleet")
    common(p_sim)
    p_sim.add_argument("--queries", type=int, default=None,
                       help="synthetic corpus size")
    p_sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except RoutekitError as exc:
        msg = str(exc).replace('"', "'")
        print(f'routekit-error code={exc.exit_code} module={exc.module} '
              f'message="{msg}"', file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
