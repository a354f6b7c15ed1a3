"""Command-line entry point.

    mmtransformer gen-data      --seed 7 --out train.jsonl
    mmtransformer fit-partition --dataset train.jsonl --m 3 --out partition.json
    mmtransformer train         --dataset train.jsonl --partition partition.json --k 36 --out model.npz
    mmtransformer eval          --dataset val.jsonl --checkpoint model.npz --out metrics.json
    mmtransformer predict       --dataset val.jsonl --checkpoint model.npz --out predictions.jsonl
    mmtransformer plot          --dataset val.jsonl --checkpoint model.npz --partition partition.json --out endpoints.svg

Exit codes: 0 success, 1 usage, 2 config, 3 runtime.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, MMTransformerError

log = logging.getLogger("mmtransformer")

COMMANDS = ("gen-data", "fit-partition", "train", "eval", "predict", "plot")
EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    paths: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    partition: dict = field(default_factory=dict)

    def snapshot(self) -> dict:
        return {
            "command": self.command,
            "seed": self.seed,
            "paths": self.paths,
            "model": self.model,
            "train": self.train,
            "eval": self.eval,
            "data": self.data,
            "partition": self.partition,
        }


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--config", help="JSON file mirroring the run configuration")
    common.add_argument("--out")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="mmtransformer", description="Stacked-transformer multimodal motion prediction")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic junction dataset")
    p.add_argument("--n", type=int, dest="num_scenarios")
    p.add_argument("--split", choices=("train", "val", "test"))

    p = sub.add_parser("fit-partition", parents=[common], help="fit the endpoint region partition")
    p.add_argument("--dataset")
    p.add_argument("--m", type=int)
    p.add_argument("--method", choices=("kmeans", "fan"))

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--dataset")
    p.add_argument("--val-dataset")
    p.add_argument("--partition")
    p.add_argument("--strategy", choices=("vanilla", "rts"))
    p.add_argument("--k", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--checkpoint-every", type=int, help="also save every N epochs")
    p.add_argument("--checkpoint", help="initialise from this checkpoint")

    for name, helptext in (("eval", "evaluate a checkpoint"), ("predict", "write predictions"), ("plot", "render an endpoint SVG")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--dataset")
        p.add_argument("--checkpoint")
        p.add_argument("--partition")
        p.add_argument("--miss-threshold", type=float)
        p.add_argument("--nms-threshold", type=float)
        p.add_argument("--k-out", type=int)
        if name == "plot":
            p.add_argument("--limit", type=int, help="number of scenarios to plot")
    return parser


def _load_config_file(path) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def resolve(args: argparse.Namespace) -> RunConfig:
    base = _load_config_file(args.config) if args.config else {}
    cfg = RunConfig(
        command=args.command,
        seed=int(base.get("seed", 0)),
        paths=dict(base.get("paths", {})),
        model=dict(base.get("model", {})),
        train=dict(base.get("train", {})),
        eval=dict(base.get("eval", {})),
        data=dict(base.get("data", {})),
        partition=dict(base.get("partition", {})),
    )
    a = vars(args)
    if a.get("seed") is not None:
        cfg.seed = a["seed"]
    for key in ("dataset", "val_dataset", "partition", "checkpoint", "out"):
        if a.get(key) is not None:
            cfg.paths[key] = a[key]
    overrides = {
        ("data", "num_scenarios"): a.get("num_scenarios"),
        ("data", "split"): a.get("split"),
        ("partition", "M"): a.get("m"),
        ("partition", "method"): a.get("method"),
        ("train", "strategy"): a.get("strategy"),
        ("train", "epochs"): a.get("epochs"),
        ("train", "batch_size"): a.get("batch_size"),
        ("train", "checkpoint_every"): a.get("checkpoint_every"),
        ("model", "K"): a.get("k"),
        ("model", "hidden_dim"): a.get("hidden"),
        ("eval", "miss_threshold"): a.get("miss_threshold"),
        ("eval", "nms_threshold"): a.get("nms_threshold"),
        ("eval", "k_out"): a.get("k_out"),
    }
    for (section, key), value in overrides.items():
        if value is not None:
            getattr(cfg, section)[key] = value
    return cfg


def _require(cfg: RunConfig, *names, must_exist=True):
    for name in names:
        path = cfg.paths.get(name)
        if not path:
            raise ConfigError(f"{cfg.command}: missing required field '{name}' (--{name.replace('_', '-')})")
        if must_exist and not os.path.exists(path):
            raise ConfigError(f"{cfg.command}: {name} path does not exist: {path}")


def validate(cfg: RunConfig) -> None:
    """All checks that can fail before any compute or file output."""
    from .evaluation import EvalConfig
    from .model import ModelConfig
    from .scene import SyntheticConfig
    from .training import TrainConfig

    _require(cfg, "out", must_exist=False)
    try:
        if cfg.command == "gen-data":
            SyntheticConfig.from_dict(cfg.data).validate()
        elif cfg.command == "fit-partition":
            _require(cfg, "dataset")
            if int(cfg.partition.get("M", 6)) < 1:
                raise ConfigError("--m must be at least 1")
            if cfg.partition.get("method", "kmeans") not in ("kmeans", "fan"):
                raise ConfigError("partition method must be kmeans or fan")
        elif cfg.command == "train":
            _require(cfg, "dataset")
            tc = TrainConfig.from_dict(cfg.train)
            if tc.strategy not in ("vanilla", "rts"):
                raise ConfigError(f"unknown strategy {tc.strategy!r}")
            if tc.strategy == "rts":
                if not cfg.paths.get("partition"):
                    raise ConfigError("train: strategy 'rts' requires a partition (missing field: partition, --partition)")
                _require(cfg, "partition")
            if cfg.paths.get("val_dataset"):
                _require(cfg, "val_dataset")
            if cfg.paths.get("checkpoint"):
                _require(cfg, "checkpoint")
            ModelConfig.from_dict(cfg.model).validate()
            if tc.epochs < 0 or tc.batch_size < 1:
                raise ConfigError("epochs must be >= 0 and batch size >= 1")
        else:
            _require(cfg, "dataset", "checkpoint")
            if cfg.paths.get("partition"):
                _require(cfg, "partition")
            ec = EvalConfig(**cfg.eval)
            if ec.k_out < 1 or ec.miss_threshold < 0 or ec.nms_threshold < 0:
                raise ConfigError("k_out must be >= 1 and thresholds non-negative")
    except TypeError as exc:
        raise ConfigError(f"bad configuration value: {exc}") from exc


# -- commands ----------------------------------------------------------------


def _load_normalized(path):
    from .scene import normalize_all, read_dataset

    ds = read_dataset(path)
    return ds, normalize_all(ds.scenarios)


def cmd_gen_data(cfg: RunConfig) -> None:
    from .scene import SyntheticConfig, generate_synthetic_dataset, write_dataset

    syn = SyntheticConfig.from_dict(cfg.data)
    split = cfg.data.get("split", "train")
    ds = generate_synthetic_dataset(syn, cfg.seed, split)
    ds.config = {**ds.config, "run": cfg.snapshot()}
    write_dataset(cfg.paths["out"], ds)
    print(f"wrote {len(ds)} scenarios to {cfg.paths['out']}")


def cmd_fit_partition(cfg: RunConfig) -> None:
    from .partition import fit_partition, manual_fan_partition

    _, scenarios = _load_normalized(cfg.paths["dataset"])
    m = int(cfg.partition.get("M", 6))
    method = cfg.partition.get("method", "kmeans")
    if method == "fan":
        part = manual_fan_partition(m)
    else:
        ends = np.array([s.future[-1] for s in scenarios if s.future is not None])
        part = fit_partition(ends, m, seed=cfg.seed)
    part.meta = {**part.meta, "seed": cfg.seed, "dataset": cfg.paths["dataset"], "run": cfg.snapshot()}
    part.save(cfg.paths["out"])
    print(f"wrote {method} partition with M={m} to {cfg.paths['out']}")


def cmd_train(cfg: RunConfig) -> None:
    from .evaluation import EvalConfig, evaluate_split
    from .model import ModelConfig, load_checkpoint, save_checkpoint
    from .partition import RegionPartition
    from .training import TrainConfig, build_model, train

    tc = TrainConfig.from_dict({**cfg.train, "seed": cfg.seed, "partition": cfg.paths.get("partition")})
    partition = RegionPartition.load(cfg.paths["partition"]) if tc.strategy == "rts" else None
    model_cfg = ModelConfig.from_dict(cfg.model)
    model_cfg.M = partition.M if partition is not None else 1
    model_cfg.validate()
    tc.validate(model_cfg.K, partition)
    if cfg.paths.get("checkpoint"):
        model, _ = load_checkpoint(cfg.paths["checkpoint"], model_cfg)
    else:
        model = build_model(model_cfg, cfg.seed)
    _, scenarios = _load_normalized(cfg.paths["dataset"])
    val = _load_normalized(cfg.paths["val_dataset"])[1] if cfg.paths.get("val_dataset") else None

    out = cfg.paths["out"]
    log_path = os.path.splitext(out)[0] + ".log.jsonl"
    os.makedirs(os.path.dirname(os.path.abspath(log_path)), exist_ok=True)
    with open(log_path, "w") as fh:

        def on_epoch(state, row):
            fh.write(json.dumps(row) + "\n")
            if val is not None:
                res = evaluate_split(state.model, val, EvalConfig(**cfg.eval))
                fh.write(json.dumps({"epoch": row["epoch"], "split": "val", **res.metrics.to_dict(), "seed": cfg.seed}) + "\n")
            fh.flush()
            print(json.dumps(row))

        train(model, scenarios, tc, partition, on_epoch=on_epoch, checkpoint_path=out)
    save_checkpoint(model, out, {"seed": cfg.seed, "train": tc.to_dict(), "partition": cfg.paths.get("partition"), "run": cfg.snapshot()})
    print(f"wrote checkpoint {out}")


def _model_and_partition(cfg: RunConfig):
    from .model import load_checkpoint
    from .partition import RegionPartition, map_proposals_to_regions

    model, meta = load_checkpoint(cfg.paths["checkpoint"])
    part_path = cfg.paths.get("partition") or meta.get("partition")
    partition = RegionPartition.load(part_path) if part_path and os.path.exists(part_path) else None
    pmap = map_proposals_to_regions(model.config.K, model.config.M)
    return model, meta, partition, pmap


def cmd_eval(cfg: RunConfig) -> None:
    from .evaluation import EvalConfig, evaluate_split, write_metrics_json
    from .scene import atomic_write_text

    model, meta, partition, pmap = _model_and_partition(cfg)
    _, scenarios = _load_normalized(cfg.paths["dataset"])
    result = evaluate_split(model, scenarios, EvalConfig(**cfg.eval), partition, pmap)
    out = cfg.paths["out"]
    write_metrics_json(out, result, {"seed": cfg.seed, "checkpoint": cfg.paths["checkpoint"], "run": cfg.snapshot()})
    if result.mr_matrix is not None:
        header = "# " + json.dumps({"seed": cfg.seed, "checkpoint": cfg.paths["checkpoint"]}) + "\n"
        atomic_write_text(os.path.splitext(out)[0] + ".mr.csv", header + result.mr_matrix.to_csv())
    print(json.dumps(result.metrics.to_dict()))


def cmd_predict(cfg: RunConfig) -> None:
    from .evaluation import EvalConfig, nms_select
    from .scene import atomic_write_text, denormalize_trajectory

    model, meta, _, _ = _model_and_partition(cfg)
    _, scenarios = _load_normalized(cfg.paths["dataset"])
    ec = EvalConfig(**cfg.eval)
    preds = model.predict(scenarios, ec.batch_size)
    lines = [json.dumps({"_meta": {"seed": cfg.seed, "checkpoint": cfg.paths["checkpoint"], "run": cfg.snapshot()}})]
    for s, p in zip(scenarios, preds):
        sel = nms_select(p, ec.nms_threshold, ec.k_out)
        probs = p.probabilities()
        lines.append(json.dumps({
            "id": s.id,
            "trajectories": [denormalize_trajectory(p.trajectories[i], s.frame).tolist() for i in sel.indices],
            "probabilities": [float(probs[i]) for i in sel.indices],
            "proposal_indices": sel.indices,
        }))
    atomic_write_text(cfg.paths["out"], "\n".join(lines) + "\n")
    print(f"wrote predictions for {len(scenarios)} scenarios to {cfg.paths['out']}")


def cmd_plot(cfg: RunConfig, limit: Optional[int] = None) -> None:
    from .plotting import render_endpoint_plot

    model, meta, partition, pmap = _model_and_partition(cfg)
    _, scenarios = _load_normalized(cfg.paths["dataset"])
    if limit:
        scenarios = scenarios[:limit]
    preds = model.predict(scenarios)
    render_endpoint_plot(preds, partition, cfg.paths["out"], pmap, {"seed": cfg.seed, "run": cfg.snapshot()})
    print(f"wrote {cfg.paths['out']}")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "fit-partition": cmd_fit_partition,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "plot": cmd_plot,
}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"a command is required: {', '.join(COMMANDS)}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    stage = f"{args.command}:config"
    try:
        cfg = resolve(args)
        validate(cfg)
        stage = args.command
        import torch

        torch.manual_seed(cfg.seed)
        if args.command == "plot":
            cmd_plot(cfg, args.limit)
        else:
            HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error [{stage}]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MMTransformerError, OSError, ValueError, RuntimeError) as exc:
        print(f"runtime error [{stage}]: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
