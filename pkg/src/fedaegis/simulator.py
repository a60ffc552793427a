"""Federated-learning round loop with configurable attacks and aggregation.

Each round: every client copies the global model, trains one local epoch on
its shard (attackers on poisoned shards; omniscient attackers negate their
finished update), the server aggregates the updates, applies them to the
global model and evaluates on its held-out test split. All randomness is
derived from three named seeds, and clients are processed in id order, so a
config reproduces its metric stream bit for bit.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field

import numpy as np

from . import attacks, baselines, data, nn
from .adaptive import AttentionModel, aggregate_adaptive
from .errors import UsageError
from .params import RoundBatch, axpy


class SimulationError(RuntimeError):
    """Raised when the global model leaves the finite range."""

    def __init__(self, round_idx, message):
        super().__init__(f"round {round_idx}: {message}")
        self.round_idx = round_idx


@dataclass(frozen=True)
class Seeds:
    data: int = 0
    init: int = 1
    attack: int = 2


@dataclass(frozen=True)
class AggregatorConfig:
    kind: str = "fedavg"
    krum_m: int = None  # default floor(n/2) - 2
    kappa: float = 1.0
    lam: float = 2.0
    delta: float = 0.1
    model: AttentionModel = None  # required for kind == "adaptive"
    model_path: str = None
    sample_weighted: bool = False  # classic shard-size weighting for fedavg


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "none"
    n_attackers: int = 0
    target_label: int = 2
    poison_fraction: float = 0.5
    shift_y: int = 0
    shift_x: int = 0
    gap: int = 0
    flip_a: int = 1
    flip_b: int = 7

    def backdoor_params(self):
        return attacks.BackdoorParams(
            self.target_label, self.poison_fraction, self.shift_y, self.shift_x, self.gap
        )


@dataclass(frozen=True)
class SimConfig:
    dataset: str = "digits"
    test_fraction: float = 0.3
    hidden: int = 32
    n_clients: int = 10
    alpha: float = 0.9
    batch: int = 16
    local_lr: float = 0.05
    local_epochs: int = 1
    rounds: int = 30
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    seeds: Seeds = field(default_factory=Seeds)

    def __post_init__(self):
        if self.rounds < 1:
            raise UsageError("need at least one round")
        if self.local_epochs != 1:
            raise UsageError("clients train exactly one local epoch per round")
        if not 0 < self.test_fraction < 1:
            raise UsageError("test_fraction must lie in (0, 1)")


@dataclass
class RoundMetrics:
    round: int
    acc: float
    asr: float = None
    weights: np.ndarray = None
    wall_time: float = 0.0


@dataclass
class SimResult:
    metrics: list
    model: nn.Mlp
    client_ids: tuple
    attacker_ids: frozenset
    trace: list  # (round, client_id, score, weight) rows from the adaptive rule
    test_x: np.ndarray
    test_y: np.ndarray


def pick_attacker_ids(client_ids, n_attackers, attack_seed, salt=0):
    """Seeded draw of attacker identities from the participating clients."""
    if n_attackers == 0:
        return frozenset()
    if n_attackers >= len(client_ids):
        raise UsageError("at least one client must stay benign")
    rng = np.random.default_rng([attack_seed, 0xA77, salt])
    chosen = rng.choice(sorted(client_ids), size=n_attackers, replace=False)
    return frozenset(int(c) for c in chosen)


def poisoned_shards(base_shards, scenario: attacks.AttackScenario, attack_seed):
    """Apply data-level attacks to the attacker-owned shards."""
    out = []
    for shard in base_shards:
        if scenario.is_attacker(shard.client_id):
            if scenario.kind == "label_flip":
                a, b = scenario.flip_labels
                shard = attacks.apply_label_flip(shard, a, b)
            elif scenario.kind == "backdoor":
                rng = np.random.default_rng([attack_seed, shard.client_id, 0xB0])
                shard = attacks.poison_shard_backdoor(shard, scenario.backdoor, rng)
        out.append(shard)
    return out


class _Aggregator:
    """Dispatch wrapper returning (vector, weights or None) per round."""

    def __init__(self, conf: AggregatorConfig, n_clients):
        self.conf = conf
        self.history = baselines.FoolsGoldHistory()
        self.n_clients = n_clients
        if conf.kind == "adaptive" and conf.model is None:
            raise UsageError("adaptive aggregation needs a trained model")

    def __call__(self, batch: RoundBatch):
        conf = self.conf
        if conf.kind == "fedavg":
            return baselines.fedavg(batch), None
        if conf.kind == "coord_median":
            return baselines.coord_median(batch), None
        if conf.kind == "geo_median":
            return baselines.geo_median(batch), None
        if conf.kind == "multi_krum":
            m = conf.krum_m if conf.krum_m is not None else baselines.default_krum_m(batch.n)
            return baselines.multi_krum(batch, m), None
        if conf.kind == "foolsgold":
            return baselines.foolsgold(batch, self.history, conf.kappa)
        if conf.kind == "residual":
            return baselines.residual_reweigh(batch, conf.lam, conf.delta)
        if conf.kind == "adaptive":
            result = aggregate_adaptive(conf.model, batch)
            return result.vector, (result.weights, result.scores)
        raise UsageError(f"unknown aggregator kind {self.conf.kind!r}")


def build_scenario(config: SimConfig, client_ids, salt=0) -> attacks.AttackScenario:
    attack = config.attack
    if attack.kind == "none" or attack.n_attackers == 0:
        return attacks.AttackScenario("none")
    ids = pick_attacker_ids(client_ids, attack.n_attackers, config.seeds.attack, salt)
    return attacks.AttackScenario(
        attack.kind,
        ids,
        attack.backdoor_params() if attack.kind == "backdoor" else None,
        (attack.flip_a, attack.flip_b),
    )


def client_update(global_model, shard, config, round_idx, negate):
    """One client's local epoch; returns its update vector."""
    local = global_model.copy()
    rng = np.random.default_rng([config.seeds.attack, shard.client_id, round_idx])
    nn.train_classifier_epoch(
        local, shard.features, shard.labels, config.local_lr, config.batch, rng
    )
    update = axpy(-1.0, nn.model_to_vector(global_model), nn.model_to_vector(local))
    return attacks.apply_omniscient(update) if negate else update


def run(config: SimConfig, on_round=None, scenario=None, train_data=None,
        test_data=None) -> SimResult:
    """Execute a full simulation.

    on_round(round_idx, batch) observes every round's update batch.
    scenario/train_data/test_data override the config-derived defaults (used
    by the collection pipeline, which simulates on the server's own split).
    """
    if train_data is None or test_data is None:
        x, y = data.load_dataset(config.dataset, config.seeds.data)
        split_train, split_test = data.split_train_test(
            x, y, config.test_fraction, config.seeds.data
        )
        train_data = train_data or split_train
        test_data = test_data or split_test
    test_x, test_y = test_data

    base_shards = data.dirichlet_partition(
        train_data[0], train_data[1], config.n_clients, config.alpha, config.batch,
        config.seeds.data,
    )
    client_ids = tuple(s.client_id for s in base_shards)
    if scenario is None:
        scenario = build_scenario(config, client_ids)
    if scenario.kind != "none" and not (set(scenario.attacker_ids) <= set(client_ids)):
        raise UsageError("attacker ids must be participating clients")
    shards = poisoned_shards(base_shards, scenario, config.seeds.attack)

    global_model = nn.Mlp.create(
        (data.FEATURE_DIM, config.hidden, data.N_CLASSES),
        np.random.default_rng([config.seeds.init, 0x91]),
    )
    aggregator = _Aggregator(config.aggregator, config.n_clients)
    backdoor = scenario.backdoor if scenario.kind == "backdoor" else None

    metrics = []
    trace = []
    for r in range(config.rounds):
        t0 = time.perf_counter()
        updates = []
        for shard in shards:
            negate = scenario.kind == "omniscient" and scenario.is_attacker(shard.client_id)
            updates.append(client_update(global_model, shard, config, r, negate))
        labels = tuple(not scenario.is_attacker(cid) for cid in client_ids)
        batch = RoundBatch(tuple(updates), client_ids, labels)
        if on_round is not None:
            on_round(r, batch)
        agg_vec, extra = aggregator(batch)
        if not np.all(np.isfinite(agg_vec.data)):
            raise SimulationError(r, "aggregated update is not finite")
        nn.add_vector_to_model(global_model, agg_vec)
        for layer in global_model.layers:
            if not (np.all(np.isfinite(layer.w)) and np.all(np.isfinite(layer.b))):
                raise SimulationError(r, "global parameters are not finite")
        weights = None
        if extra is not None:
            if isinstance(extra, tuple):
                weights, scores = extra
                for cid, s, w in zip(client_ids, scores, weights):
                    trace.append((r, cid, float(s), float(w)))
            else:
                weights = extra
        acc = nn.accuracy(global_model, test_x, test_y)
        asr = None
        if backdoor is not None:
            asr = eval_asr(global_model, test_x, test_y, backdoor)
        metrics.append(RoundMetrics(r, acc, asr, weights, time.perf_counter() - t0))
    return SimResult(
        metrics, global_model, client_ids, scenario.attacker_ids, trace, test_x, test_y
    )


def eval_asr(model, test_x, test_y, backdoor: attacks.BackdoorParams):
    """Fraction of stamped off-target test samples predicted as the target.

    Samples whose true label already equals the target are excluded; the
    attack is only meaningful on them.
    """
    mask = test_y != backdoor.target_label
    stamped = test_x[mask].copy()
    for pix_r, pix_c in attacks.backdoor_pixels(
        backdoor.shift_y, backdoor.shift_x, backdoor.gap
    ):
        stamped[:, pix_r * data.IMAGE_SIDE + pix_c] = 1.0
    pred = model.forward(stamped).argmax(axis=-1)
    return float((pred == backdoor.target_label).mean())


def metrics_csv(result: SimResult, aggregator_kind, n_attackers) -> str:
    """Render per-round metrics in the run CSV dialect (LF, '.' decimals)."""
    n = len(result.client_ids)
    buf = io.StringIO()
    weight_cols = ",".join(f"w{i}" for i in range(n))
    buf.write(f"round,acc,asr,aggregator,n_attackers,{weight_cols}\n")
    for m in result.metrics:
        asr = "" if m.asr is None else repr(float(m.asr))
        if m.weights is None:
            weights = "," * (n - 1)
        else:
            weights = ",".join(repr(float(w)) for w in m.weights)
        buf.write(f"{m.round},{repr(float(m.acc))},{asr},{aggregator_kind},{n_attackers},{weights}\n")
    return buf.getvalue()


def trace_csv(result: SimResult) -> str:
    buf = io.StringIO()
    buf.write("round,client_id,score,weight\n")
    for r, cid, score, weight in result.trace:
        buf.write(f"{r},{cid},{repr(score)},{repr(weight)}\n")
    return buf.getvalue()
