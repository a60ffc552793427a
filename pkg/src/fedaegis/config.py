"""Flat dotted-key run configuration: parsing, defaults, canonical digest.

A config file holds `key=value` lines ('#' starts a comment). Every key has
a typed default below; unknown keys are rejected so typos fail fast. The
digest is taken over the canonicalized key=value text, making it invariant
to key order and whitespace.
"""

from __future__ import annotations

import hashlib

from .errors import UsageError
from .simulator import AggregatorConfig, AttackConfig, Seeds, SimConfig

# key: (type, default). Booleans are written true/false.
SCHEMA = {
    "dataset.name": (str, "digits"),
    "dataset.test_fraction": (float, 0.3),
    "model.hidden": (int, 32),
    "sim.n_clients": (int, 10),
    "sim.rounds": (int, 30),
    "sim.batch": (int, 16),
    "sim.local_lr": (float, 0.05),
    "sim.local_epochs": (int, 1),
    "partition.alpha": (float, 0.9),
    "agg.kind": (str, "fedavg"),
    "agg.m": (int, 0),  # 0 selects floor(n/2) - 2
    "agg.kappa": (float, 1.0),
    "agg.lambda": (float, 2.0),
    "agg.delta": (float, 0.1),
    "agg.c": (float, 10.0),
    "agg.eps": (float, 0.5),
    "agg.T": (int, 5),
    "agg.k_pc": (int, 10),
    "agg.model": (str, ""),
    "attack.kind": (str, "none"),
    "attack.n_attackers": (int, 0),
    "attack.target_label": (int, 2),
    "attack.poison_fraction": (float, 0.5),
    "attack.shift_y": (int, 0),
    "attack.shift_x": (int, 0),
    "attack.gap": (int, 0),
    "attack.flip_a": (int, 1),
    "attack.flip_b": (int, 7),
    "seeds.data": (int, 0),
    "seeds.init": (int, 1),
    "seeds.attack": (int, 2),
    "collect.runs": (int, 8),
    "defense.dataset": (str, ""),
    "defense.epochs": (int, 500),
    "defense.lr": (float, 1e-3),
    "defense.batch": (int, 16),
    "defense.hidden": (int, 128),
    "defense.latent": (int, 64),
    "defense.seed": (int, 0),
    "defense.synthetic": (bool, False),
    "defense.synthetic_count": (int, 2048),
    "defense.synthetic_holdout": (int, 256),
    "defense.outliers": (int, 3),
    "defense.offset": (float, 3.0),
    "bounds.cases": (int, 1000),
    "bounds.seed": (int, 0),
    "bounds.tight": (bool, False),
}


def _parse_value(key, raw):
    typ, _ = SCHEMA[key]
    raw = raw.strip()
    if typ is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError as exc:
        raise UsageError(f"{key}: {exc}") from exc


def parse_config_text(text):
    cfg = {key: default for key, (_, default) in SCHEMA.items()}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"line {lineno}: expected key=value")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key not in SCHEMA:
            raise UsageError(f"line {lineno}: unknown key {key!r}")
        cfg[key] = _parse_value(key, raw)
    validate_config(cfg)
    return cfg


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def validate_config(cfg):
    if cfg["partition.alpha"] <= 0:
        raise UsageError("partition.alpha must be positive")
    if not 0 < cfg["dataset.test_fraction"] < 1:
        raise UsageError("dataset.test_fraction must lie in (0, 1)")
    if cfg["sim.local_epochs"] != 1:
        raise UsageError("sim.local_epochs is fixed at 1")
    if cfg["attack.kind"] not in ("none", "omniscient", "label_flip", "backdoor"):
        raise UsageError(f"unknown attack.kind {cfg['attack.kind']!r}")
    kinds = ("fedavg", "coord_median", "geo_median", "multi_krum", "foolsgold",
             "residual", "adaptive")
    if cfg["agg.kind"] not in kinds:
        raise UsageError(f"unknown agg.kind {cfg['agg.kind']!r}")
    if cfg["attack.kind"] != "none" and cfg["attack.n_attackers"] >= cfg["sim.n_clients"]:
        raise UsageError("at least one client must stay benign")


def render_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def canonical_text(cfg):
    return "\n".join(f"{key}={render_value(cfg[key])}" for key in sorted(cfg)) + "\n"


def config_digest(cfg):
    return hashlib.sha256(canonical_text(cfg).encode()).hexdigest()


def sim_config(cfg, model=None) -> SimConfig:
    """Materialize the simulator configuration (adaptive model injected by caller)."""
    agg = AggregatorConfig(
        kind=cfg["agg.kind"],
        krum_m=cfg["agg.m"] if cfg["agg.m"] > 0 else None,
        kappa=cfg["agg.kappa"],
        lam=cfg["agg.lambda"],
        delta=cfg["agg.delta"],
        model=model,
        model_path=cfg["agg.model"] or None,
    )
    attack = AttackConfig(
        kind=cfg["attack.kind"],
        n_attackers=cfg["attack.n_attackers"],
        target_label=cfg["attack.target_label"],
        poison_fraction=cfg["attack.poison_fraction"],
        shift_y=cfg["attack.shift_y"],
        shift_x=cfg["attack.shift_x"],
        gap=cfg["attack.gap"],
        flip_a=cfg["attack.flip_a"],
        flip_b=cfg["attack.flip_b"],
    )
    return SimConfig(
        dataset=cfg["dataset.name"],
        test_fraction=cfg["dataset.test_fraction"],
        hidden=cfg["model.hidden"],
        n_clients=cfg["sim.n_clients"],
        alpha=cfg["partition.alpha"],
        batch=cfg["sim.batch"],
        local_lr=cfg["sim.local_lr"],
        local_epochs=cfg["sim.local_epochs"],
        rounds=cfg["sim.rounds"],
        aggregator=agg,
        attack=attack,
        seeds=Seeds(cfg["seeds.data"], cfg["seeds.init"], cfg["seeds.attack"]),
    )
