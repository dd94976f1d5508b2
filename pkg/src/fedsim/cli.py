"""Command-line entry point.

Subcommands: `partition` inspects the label split across clients,
`train` runs an experiment into a run directory, `evaluate` re-scores a
saved checkpoint, `plot` renders figures with CSV twins, and `table`
summarizes rounds-to-target across runs.

Exit codes: 0 success, 2 configuration error, 3 runtime abort (partial
logs are kept).
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
import traceback
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch

from . import __version__
from .aggregation import mask_layer_means
from .config import (ConfigError, ExperimentConfig, config_hash, load_config,
                     write_config)
from .data import (DatasetError, PartitionSpec, dirichlet_partition,
                   label_histogram)
from .orchestrator import FederatedRun, RoundRecord, build_dataset
from .plots import (save_feature_map, save_learning_curve,
                    save_partition_heatmap)

RECORDS_SCHEMA = 1


# ------------------------------------------------------------------ arguments

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsim",
        description="Federated social-bot-detection simulation")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", required=True, help="path to config file")
        p.add_argument("--out", help="output root directory")
        p.add_argument("--seed", type=int, help="override master seed")
        p.add_argument("--method", choices=("fedrio", "fedavg", "fedprox"),
                       help="override training method")
        p.add_argument("--no-masks", action="store_true",
                       help="disable adaptive aggregation masks")
        p.add_argument("--no-rl", action="store_true",
                       help="disable learned update momenta")
        p.add_argument("--no-adaptive-mp", action="store_true",
                       help="propagate over the raw adjacency")

    p_part = sub.add_parser("partition", help="inspect the client partition")
    add_config_args(p_part)

    p_train = sub.add_parser("train", help="run an experiment")
    add_config_args(p_train)

    p_eval = sub.add_parser("evaluate", help="re-score a saved run")
    p_eval.add_argument("run_dir", help="run directory from `train`")
    p_eval.add_argument("--split", default="test",
                        choices=("train", "val", "test"))

    p_plot = sub.add_parser("plot", help="render figures from runs")
    p_plot.add_argument("run_dirs", nargs="+", help="one or more run dirs")
    p_plot.add_argument("--kind", required=True,
                        choices=("curve", "heatmap", "features"))
    p_plot.add_argument("--out", help="directory for the figure files")

    p_table = sub.add_parser("table", help="rounds-to-target summary")
    p_table.add_argument("run_dirs", nargs="+")
    p_table.add_argument("--targets", type=float, nargs="+", required=True)
    p_table.add_argument("--out", help="directory for the CSV file")
    return parser


def apply_overrides(config: ExperimentConfig,
                    args: argparse.Namespace) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        config.run.master_seed = args.seed
    if getattr(args, "method", None):
        config.run.method = args.method
    if getattr(args, "no_masks", False):
        config.run.disable_masks = True
    if getattr(args, "no_rl", False):
        config.run.disable_rl = True
    if getattr(args, "no_adaptive_mp", False):
        config.run.disable_adaptive_mp = True
    return config.validate()


def resolve_out_root(config: ExperimentConfig,
                     args: argparse.Namespace) -> str:
    if getattr(args, "out", None):
        return args.out
    return os.environ.get("FEDSIM_OUT", config.run.output_dir)


def run_name(config: ExperimentConfig) -> str:
    return (f"{config.run.method}-seed{config.run.master_seed}"
            f"-{config_hash(config)}")


# -------------------------------------------------------------------- records

class RecordWriter:
    """Streaming sink that keeps the file flushed after every round."""

    def __init__(self, path: str):
        self.fh = open(path, "w")
        self.fh.write(json.dumps({"schema": RECORDS_SCHEMA}) + "\n")
        self.fh.flush()

    def __call__(self, record: RoundRecord) -> None:
        self.fh.write(json.dumps(record.to_json_dict()) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def read_records(path: str) -> List[Dict]:
    """Read a records file, tolerating a truncated final line."""
    out: List[Dict] = []
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"empty records file: {path}")
    header = json.loads(lines[0])
    if header.get("schema") != RECORDS_SCHEMA:
        raise ValueError(f"unsupported records schema: {header}")
    for line in lines[1:]:
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError:
            break
    return out


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


# ------------------------------------------------------------------- commands

def cmd_partition(args: argparse.Namespace) -> int:
    config = apply_overrides(load_config(args.config), args)
    dataset = build_dataset(config)
    shards = dirichlet_partition(
        dataset, PartitionSpec(config.run.num_clients, config.run.alpha,
                               config.run.master_seed))
    counts = label_histogram(shards)
    out_root = resolve_out_root(config, args)
    os.makedirs(out_root, exist_ok=True)
    csv_path = os.path.join(out_root, "partition.csv")
    frame = pd.DataFrame(counts, columns=["label_0", "label_1"])
    frame.insert(0, "client", range(counts.shape[0]))
    frame["total"] = counts.sum(axis=1)
    frame.to_csv(csv_path, index=False)

    print("client | label 0 | label 1 | total")
    for _, row in frame.iterrows():
        print(f"{row['client']:6d} | {row['label_0']:7d} "
              f"| {row['label_1']:7d} | {row['total']:5d}")
    print(f"wrote {csv_path}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = apply_overrides(load_config(args.config), args)
    out_root = resolve_out_root(config, args)
    run_dir = os.path.join(out_root, run_name(config))
    os.makedirs(run_dir, exist_ok=True)

    sim = FederatedRun(config)

    manifest = {
        "config_hash": config_hash(config),
        "method": config.run.method,
        "seed": config.run.master_seed,
        "code_version": __version__,
        "started_at": _now(),
        "finished_at": None,
        "artifacts": {
            "config": "config.ini",
            "records": "records.jsonl",
            "summary": "summary.json",
            "checkpoint": "checkpoint.pt",
            "partition": "partition.csv",
            "masks": "masks.csv",
        },
    }
    write_config(config, os.path.join(run_dir, "config.ini"))
    counts = label_histogram(sim.shards)
    frame = pd.DataFrame(counts, columns=["label_0", "label_1"])
    frame.insert(0, "client", range(counts.shape[0]))
    frame.to_csv(os.path.join(run_dir, "partition.csv"), index=False)
    with open(os.path.join(run_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)

    writer = RecordWriter(os.path.join(run_dir, "records.jsonl"))
    try:
        summary, _ = sim.run(sink=writer)
    finally:
        writer.close()

    with open(os.path.join(run_dir, "summary.json"), "w") as fh:
        json.dump(summary.to_json_dict(), fh, indent=2)
    torch.save(sim.state_dict(), os.path.join(run_dir, "checkpoint.pt"))

    mask_rows = []
    for layer, means in mask_layer_means(sim.raw_masks, sim.layout).items():
        for client, value in enumerate(means):
            mask_rows.append({"layer": layer, "client": client,
                              "mean_mask": float(value)})
    pd.DataFrame(mask_rows, columns=["layer", "client", "mean_mask"]).to_csv(
        os.path.join(run_dir, "masks.csv"), index=False)

    if sim.agent is not None:
        sim.agent.buffer.save(os.path.join(run_dir, "replay.bin"))
        manifest["artifacts"]["replay"] = "replay.bin"

    manifest["finished_at"] = _now()
    with open(os.path.join(run_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)

    print(f"run directory: {run_dir}")
    print(f"best accuracy: {summary.best_accuracy:.4f} "
          f"best F1: {summary.best_f1:.4f}")
    return 0


def _load_run(run_dir: str) -> FederatedRun:
    config = load_config(os.path.join(run_dir, "config.ini"))
    sim = FederatedRun(config)
    payload = torch.load(os.path.join(run_dir, "checkpoint.pt"),
                         weights_only=False)
    sim.load_state(payload)
    return sim


def cmd_evaluate(args: argparse.Namespace) -> int:
    sim = _load_run(args.run_dir)
    acc, f1 = sim.evaluate(args.split, sim.t)
    result = {"split": args.split, "accuracy": acc, "macro_f1": f1,
              "round": sim.t}
    out_path = os.path.join(args.run_dir, f"evaluation_{args.split}.json")
    with open(out_path, "w") as fh:
        json.dump(result, fh, indent=2)
    print(f"{args.split} accuracy: {acc:.4f} macro F1: {f1:.4f}")
    print(f"wrote {out_path}")
    return 0


def _plot_out_dir(args: argparse.Namespace) -> str:
    out = args.out if args.out else args.run_dirs[0]
    os.makedirs(out, exist_ok=True)
    return out


def cmd_plot(args: argparse.Namespace) -> int:
    out = _plot_out_dir(args)
    if args.kind == "curve":
        series = []
        for run_dir in args.run_dirs:
            records = read_records(os.path.join(run_dir, "records.jsonl"))
            with open(os.path.join(run_dir, "manifest.json")) as fh:
                manifest = json.load(fh)
            label = f"{manifest['method']}-seed{manifest['seed']}"
            series.append((label,
                           [(r["t"], r["acc"]) for r in records]))
        save_learning_curve(series, os.path.join(out, "curve.png"),
                            os.path.join(out, "curve.csv"))
        print(f"wrote {out}/curve.png and {out}/curve.csv")
    elif args.kind == "heatmap":
        frame = pd.read_csv(os.path.join(args.run_dirs[0], "partition.csv"))
        counts = frame[["label_0", "label_1"]].to_numpy()
        save_partition_heatmap(counts, os.path.join(out, "heatmap.png"),
                               os.path.join(out, "heatmap.csv"))
        print(f"wrote {out}/heatmap.png and {out}/heatmap.csv")
    else:
        sim = _load_run(args.run_dirs[0])
        d_r = sim.config.backbone.representation_dim
        if d_r != 2:
            raise ConfigError(
                f"feature map needs representation_dim=2, run has {d_r}")
        points, labels = sim.probe_representations()
        save_feature_map(points, labels, sim.global_d1,
                         os.path.join(out, "features.png"),
                         os.path.join(out, "features.csv"))
        print(f"wrote {out}/features.png and {out}/features.csv")
    return 0


def records_rounds_to_target(records: Sequence[Dict],
                             target: float) -> Optional[int]:
    for record in records:
        if record["acc"] >= target:
            return record["t"]
    return None


def cmd_table(args: argparse.Namespace) -> int:
    groups: Dict[str, List[List[Dict]]] = {}
    for run_dir in args.run_dirs:
        with open(os.path.join(run_dir, "manifest.json")) as fh:
            manifest = json.load(fh)
        records = read_records(os.path.join(run_dir, "records.jsonl"))
        groups.setdefault(manifest["method"], []).append(records)

    rows = []
    for method in sorted(groups):
        row: Dict[str, object] = {"method": method}
        for target in args.targets:
            reached = [records_rounds_to_target(records, target)
                       for records in groups[method]]
            if any(r is None for r in reached):
                row[f"target_{target}"] = "unreached"
            else:
                values = np.asarray(reached, dtype=np.float64)
                row[f"target_{target}"] = (f"{values.mean():.1f} "
                                           f"+/- {values.std():.1f}")
        rows.append(row)

    columns = ["method"] + [f"target_{t}" for t in args.targets]
    frame = pd.DataFrame(rows, columns=columns)
    out = args.out if args.out else "."
    os.makedirs(out, exist_ok=True)
    csv_path = os.path.join(out, "rounds_to_target.csv")
    frame.to_csv(csv_path, index=False)

    header = " | ".join(columns)
    print(header)
    print(" | ".join("---" for _ in columns))
    for row in rows:
        print(" | ".join(str(row[c]) for c in columns))
    print(f"wrote {csv_path}")
    return 0


COMMANDS = {
    "partition": cmd_partition,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "plot": cmd_plot,
    "table": cmd_table,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DatasetError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        print("runtime abort; partial logs retained", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
