"""Command-line entry point.

Subcommands cover the full pipeline: data partitioning, simulation runs,
update collection, defense training, evaluation with a trained model,
importance reports and the bound fuzz harness. Every run writes a manifest
recording the canonical config digest, seeds, timestamps and output files;
outputs referencing that manifest live in the same run directory.

Exit codes: 0 success, 2 invalid configuration, 3 simulation aborted on
non-finite parameters, 4 missing upstream artifact (1: bound violations).
"""

from __future__ import annotations

import argparse
import csv
import datetime
import io
import json
import os
import sys
import time

import numpy as np

from . import __version__, adaptive, analysis, config, data, defense_train, nn, params, simulator
from .errors import UsageError

EXIT_OK = 0
EXIT_BAD_CONFIG = 2
EXIT_ABORTED = 3
EXIT_MISSING_ARTIFACT = 4


def _new_manifest(cfg, command):
    digest = config.config_digest(cfg)
    return {
        "manifest_id": f"{digest[:12]}-{time.time_ns()}",
        "command": command,
        "config_digest": digest,
        "config": {k: config.render_value(v) for k, v in sorted(cfg.items())},
        "seeds": {
            "data": cfg["seeds.data"],
            "init": cfg["seeds.init"],
            "attack": cfg["seeds.attack"],
        },
        "tool_version": __version__,
        "started_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "outputs": [],
    }


def _out_dir(args, manifest):
    out = args.out or os.path.join("runs", f"{manifest['command']}-{manifest['manifest_id']}")
    os.makedirs(out, exist_ok=True)
    return out


def _write(out_dir, manifest, name, text=None, binary_writer=None):
    path = os.path.join(out_dir, name)
    if text is not None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        binary_writer(path)
    manifest["outputs"].append(name)
    return path


def _finish(out_dir, manifest):
    manifest["finished_at"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {out_dir} (manifest {manifest['manifest_id']})")


def _require_file(path, what):
    if not path:
        raise FileNotFoundError(f"{what} is not configured")
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")


def cmd_partition(cfg, args):
    manifest = _new_manifest(cfg, "partition")
    out = _out_dir(args, manifest)
    x, y = data.load_dataset(cfg["dataset.name"], cfg["seeds.data"])
    (train_x, train_y), _ = data.split_train_test(
        x, y, cfg["dataset.test_fraction"], cfg["seeds.data"]
    )
    shards = data.dirichlet_partition(
        train_x, train_y, cfg["sim.n_clients"], cfg["partition.alpha"],
        cfg["sim.batch"], cfg["seeds.data"],
    )
    _write(out, manifest, "shards.bin", binary_writer=lambda p: data.save_shards(p, shards))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    labels = list(range(data.N_CLASSES))
    writer.writerow(["client_id"] + [f"label_{l}" for l in labels] + ["total"])
    for shard in shards:
        counts = [int((shard.labels == l).sum()) for l in labels]
        writer.writerow([shard.client_id] + counts + [shard.sample_count])
    _write(out, manifest, "partition_counts.csv", text=buf.getvalue())
    _finish(out, manifest)
    return EXIT_OK


def _load_adaptive_model(cfg):
    _require_file(cfg["agg.model"], "adaptive model checkpoint (agg.model)")
    return adaptive.load_model(cfg["agg.model"])


def _run_simulation(cfg, manifest, out):
    model = _load_adaptive_model(cfg) if cfg["agg.kind"] == "adaptive" else None
    sim = config.sim_config(cfg, model=model)
    result = simulator.run(sim)
    csv_text = simulator.metrics_csv(result, cfg["agg.kind"], cfg["attack.n_attackers"])
    _write(out, manifest, "metrics.csv", text=csv_text)
    final_vec = nn.model_to_vector(result.model)
    _write(out, manifest, "model.ckpt",
           binary_writer=lambda p: params.save_vector(p, final_vec))
    if result.trace:
        _write(out, manifest, "trace.csv", text=simulator.trace_csv(result))
    return result


def cmd_simulate(cfg, args):
    manifest = _new_manifest(cfg, "simulate")
    out = _out_dir(args, manifest)
    _run_simulation(cfg, manifest, out)
    _finish(out, manifest)
    return EXIT_OK


def cmd_evaluate(cfg, args):
    manifest = _new_manifest(cfg, "evaluate")
    out = _out_dir(args, manifest)
    cfg = dict(cfg)
    cfg["agg.kind"] = "adaptive"
    _run_simulation(cfg, manifest, out)
    _finish(out, manifest)
    return EXIT_OK


def cmd_collect(cfg, args):
    manifest = _new_manifest(cfg, "collect")
    out = _out_dir(args, manifest)
    sim = config.sim_config(cfg)
    dataset = defense_train.collect(sim, cfg["collect.runs"], k_pc=cfg["agg.k_pc"])
    _write(out, manifest, "updates.fgud",
           binary_writer=lambda p: defense_train.save_dataset(p, dataset))
    summary = {
        "instances": len(dataset.instances),
        "clients": dataset.n,
        "feature_dim": dataset.feature_dim,
        "runs": cfg["collect.runs"],
        "dropped": dataset.meta.get("dropped", 0),
    }
    _write(out, manifest, "collect_summary.json", text=json.dumps(summary, indent=2) + "\n")
    _finish(out, manifest)
    return EXIT_OK


def cmd_train_defense(cfg, args):
    manifest = _new_manifest(cfg, "train-defense")
    out = _out_dir(args, manifest)
    if cfg["defense.synthetic"]:
        total = cfg["defense.synthetic_count"] + cfg["defense.synthetic_holdout"]
        instances = data.gen_synthetic_instances(
            total, cfg["seeds.data"], cfg["defense.outliers"], cfg["defense.offset"]
        )
        holdout = cfg["defense.synthetic_holdout"] / total
        dataset = defense_train.dataset_from_instances(instances, val_fraction=holdout)
    else:
        _require_file(cfg["defense.dataset"], "update dataset (defense.dataset)")
        dataset = defense_train.load_dataset(cfg["defense.dataset"])
    model = defense_train.train_defense(
        dataset,
        epochs=cfg["defense.epochs"],
        c=cfg["agg.c"],
        eps=cfg["agg.eps"],
        passes=cfg["agg.T"],
        hidden=cfg["defense.hidden"],
        latent=cfg["defense.latent"],
        lr=cfg["defense.lr"],
        batch_size=cfg["defense.batch"],
        seed=cfg["defense.seed"],
    )
    _write(out, manifest, "defense.ckpt",
           binary_writer=lambda p: adaptive.save_model(p, model))
    _, val_idx = dataset.split()
    report = defense_train.validate(model, dataset, val_idx or None)
    _write(out, manifest, "validation.json", text=json.dumps(report, indent=2) + "\n")
    _finish(out, manifest)
    return EXIT_OK


def cmd_importance(cfg, args):
    manifest = _new_manifest(cfg, "importance")
    out = _out_dir(args, manifest)
    model = _load_adaptive_model(cfg)
    imp = adaptive.feature_importance(model)
    buf = io.StringIO()
    buf.write("feature_index,importance\n")
    for i, value in enumerate(imp):
        buf.write(f"{i},{value!r}\n")
    _write(out, manifest, "importance.csv", text=buf.getvalue())
    if model.layer_names:
        rows = adaptive.layer_importance(model)
        buf = io.StringIO()
        buf.write("layer,importance\n")
        for name, value in rows:
            buf.write(f"{name},{value!r}\n")
        _write(out, manifest, "layer_importance.csv", text=buf.getvalue())
    _finish(out, manifest)
    return EXIT_OK


def cmd_verify_bounds(cfg, args):
    manifest = _new_manifest(cfg, "verify-bounds")
    out = _out_dir(args, manifest)
    count, violations = analysis.run_bound_fuzz(
        cfg["bounds.cases"], cfg["bounds.seed"], cfg["bounds.tight"]
    )
    report = {"cases": cfg["bounds.cases"], "violations": count}
    _write(out, manifest, "bounds_report.json", text=json.dumps(report, indent=2) + "\n")
    for i, (case, result) in enumerate(violations):
        repro = {
            "n": case.n, "m": case.m, "c": case.c, "eps": case.eps,
            "eps_prime": case.eps_prime,
            "scores": case.scores.tolist(),
            "vectors": case.vectors.tolist(),
            "lhs": result["lhs"], "rhs": result["rhs"],
        }
        _write(out, manifest, f"violation_{i}.json", text=json.dumps(repro, indent=2) + "\n")
    _finish(out, manifest)
    return EXIT_OK if count == 0 else 1


_COMMANDS = {
    "partition": cmd_partition,
    "simulate": cmd_simulate,
    "collect": cmd_collect,
    "train-defense": cmd_train_defense,
    "evaluate": cmd_evaluate,
    "importance": cmd_importance,
    "verify-bounds": cmd_verify_bounds,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="fedaegis",
        description="Robust-aggregation simulation and defense training pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="path to a key=value config file")
        p.add_argument("--out", help="output directory (default: runs/<command>-<id>)")
    args = parser.parse_args(argv)
    try:
        cfg = config.load_config(args.config)
    except (UsageError, OSError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    try:
        return _COMMANDS[args.command](cfg, args)
    except simulator.SimulationError as exc:
        print(f"simulation aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except FileNotFoundError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_MISSING_ARTIFACT
    except UsageError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG


if __name__ == "__main__":
    sys.exit(main())
