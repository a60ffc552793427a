"""Self-supervised training of the adaptive aggregator.

Labeled update datasets come from simulated attacked runs executed on the
server's own test split. Training unrolls the multi-pass attention forward
in feature space and minimizes the L1 distance between the final estimate
and the benign-only feature mean; gradients pass through the hard weight
truncation with a straight-through estimator.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as data_mod
from . import nn as nn_mod
from . import simulator
from .adaptive import AttentionModel, aggregate_features, batch_features
from .errors import SchemaError, UsageError
from .nn import AdamState, Mlp, adam_step, scaled_softmax
from .params import Schema

_MAGIC_DATASET = b"FGUD"
_DATASET_VERSION = 1


def derive_seed(*parts):
    """Deterministic scalar sub-seed from a tuple of integers."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


@dataclass
class UpdateInstance:
    feats: np.ndarray  # (n, F) projected client features for one round
    labels: np.ndarray  # (n,) bool, True = benign
    raw_norms: np.ndarray  # (n,) L1 norms of the raw updates
    run: int = 0


@dataclass
class UpdateDataset:
    instances: list
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.instances[0].feats.shape[0]

    @property
    def feature_dim(self):
        return self.instances[0].feats.shape[1]

    def run_ids(self):
        return sorted({inst.run for inst in self.instances})

    def split(self):
        """(train, validation) index lists: the last max(1, runs//3) runs validate."""
        runs = self.run_ids()
        n_val = max(1, len(runs) // 3) if len(runs) > 1 else 0
        val_runs = set(runs[len(runs) - n_val :]) if n_val else set()
        train_idx = [i for i, inst in enumerate(self.instances) if inst.run not in val_runs]
        val_idx = [i for i, inst in enumerate(self.instances) if inst.run in val_runs]
        return train_idx, val_idx


def merge_datasets(datasets):
    """Concatenate datasets (e.g. different attack kinds), keeping runs distinct."""
    instances = []
    offset = 0
    kinds = []
    for ds in datasets:
        runs = ds.run_ids()
        remap = {run: offset + i for i, run in enumerate(runs)}
        for inst in ds.instances:
            instances.append(replace(inst, run=remap[inst.run]))
        offset += len(runs)
        kinds.extend(ds.meta.get("attacks", []))
    meta = dict(datasets[0].meta)
    meta["attacks"] = kinds
    return UpdateDataset(instances, meta)


def dataset_from_instances(synthetic, run=0, val_fraction=None):
    """Wrap synthetic outlier instances as an update dataset (raw coordinates).

    val_fraction, when given, tags the trailing fraction as a second run so
    split() holds it out for validation.
    """
    out = []
    count = len(synthetic)
    cut = count if val_fraction is None else int(round(count * (1 - val_fraction)))
    for i, inst in enumerate(synthetic):
        out.append(
            UpdateInstance(
                np.asarray(inst.points, dtype=np.float64),
                ~np.asarray(inst.outlier_mask),
                np.abs(inst.points).sum(axis=1),
                run if i < cut else run + 1,
            )
        )
    dim = synthetic[0].points.shape[1]
    meta = {
        "task": "synthetic-outliers",
        "attacks": ["synthetic"],
        "k_pc": dim,
        "schema": [["points", dim]],
    }
    return UpdateDataset(out, meta)


def collect(config: simulator.SimConfig, runs: int, k_pc=None) -> UpdateDataset:
    """Gather labeled per-round features from simulations on the server split.

    Each run re-randomizes its seeds and, for attacked scenarios, cycles the
    attacker count through 1..4. The simulated tasks aggregate with plain
    averaging (no defense exists yet at collection time). Rounds containing
    a non-finite update are dropped and counted.
    """
    if runs < 1:
        raise UsageError("need at least one collection run")
    x, y = data_mod.load_dataset(config.dataset, config.seeds.data)
    _, test_split = data_mod.split_train_test(
        x, y, config.test_fraction, config.seeds.data
    )
    if k_pc is None:
        k_pc = config.aggregator.model.k_pc if config.aggregator.model else 10
    instances = []
    dropped = 0
    for run_idx in range(runs):
        seeds = simulator.Seeds(
            derive_seed(config.seeds.data, 0xC0, run_idx),
            derive_seed(config.seeds.init, 0xC1, run_idx),
            derive_seed(config.seeds.attack, 0xC2, run_idx),
        )
        attack = config.attack
        if attack.kind != "none":
            attack = replace(attack, n_attackers=(run_idx % 4) + 1)
        run_config = replace(
            config,
            seeds=seeds,
            attack=attack,
            aggregator=simulator.AggregatorConfig("fedavg"),
        )

        def record(round_idx, batch):
            nonlocal dropped
            matrix = batch.matrix()
            if not np.all(np.isfinite(matrix)):
                dropped += 1
                return
            feats = batch_features(batch, k_pc)
            instances.append(
                UpdateInstance(
                    feats,
                    np.asarray(batch.truth_labels, dtype=bool),
                    np.abs(matrix).sum(axis=1),
                    run_idx,
                )
            )

        simulator.run(run_config, on_round=record, train_data=test_split, test_data=test_split)
    if not instances:
        raise UsageError("collection produced no usable instances")
    meta = {
        "task": config.dataset,
        "attacks": [config.attack.kind],
        "seeds": [config.seeds.data, config.seeds.init, config.seeds.attack],
        "k_pc": k_pc,
        "runs": runs,
        "dropped": dropped,
    }
    # Record the feature layout of the task model for importance reports.
    sample_model = nn_mod.Mlp.create(
        (data_mod.FEATURE_DIM, config.hidden, data_mod.N_CLASSES),
        np.random.default_rng(0),
    )
    vec = nn_mod.model_to_vector(sample_model)
    meta["schema"] = [[n, int(l)] for n, l in zip(vec.schema.names, vec.schema.lengths)]
    return UpdateDataset(instances, meta)


def _stack(dataset, indices):
    feats = np.stack([dataset.instances[i].feats for i in indices])
    labels = np.stack([dataset.instances[i].labels for i in indices])
    return feats, labels


def _benign_means(feats, labels):
    counts = labels.sum(axis=1, keepdims=True)
    return (feats * labels[:, :, None]).sum(axis=1) / counts


def _forward_backward(query: Mlp, key: Mlp, feats, mu, c, eps, passes):
    """Loss and encoder gradients for one minibatch of instances.

    feats: (B, n, F), mu: (B, F). Returns (loss, query_grads, key_grads).
    """
    b, n, f = feats.shape
    key_in = feats.reshape(b * n, f)
    key_out, key_cache = key.forward_cache(key_in)
    kf = key_out.reshape(b, n, -1)
    kn = np.linalg.norm(kf, axis=2)  # (B, n)

    q = np.median(feats, axis=1)  # (B, F)
    records = []
    for _ in range(passes):
        qf, q_cache = query.forward_cache(q)  # (B, D)
        qn = np.linalg.norm(qf, axis=1)  # (B,)
        denom = qn[:, None] * kn
        safe = np.where(denom == 0, 1.0, denom)
        dots = np.einsum("bif,bf->bi", kf, qf)
        scores = np.where(denom == 0, 0.0, dots / safe)
        soft = scaled_softmax(scores, c)
        keep = soft >= eps / n
        fallback = ~keep.any(axis=1)
        keep = keep | fallback[:, None]
        weights = soft * keep
        records.append((q, q_cache, qf, qn, scores, soft, keep, safe, denom))
        q = np.einsum("bi,bif->bf", weights, feats)

    diff = q - mu
    loss = float(np.abs(diff).mean())
    gq = np.sign(diff) / diff.size

    q_grads = None
    gkf = np.zeros_like(kf)
    for q_prev, q_cache, qf, qn, scores, soft, keep, safe, denom in reversed(records):
        gwt = np.einsum("bf,bif->bi", gq, feats)
        gw = gwt * keep  # straight-through: identity where kept, zero where cut
        gs = c * soft * (gw - (gw * soft).sum(axis=1, keepdims=True))
        gs = np.where(denom == 0, 0.0, gs)
        qn_safe = np.where(qn == 0, 1.0, qn)
        # d(scores)/d(qf) and d(scores)/d(kf)
        gqf = np.einsum("bi,bif->bf", gs / safe, kf)
        gqf -= (gs * scores).sum(axis=1)[:, None] * qf / (qn_safe**2)[:, None]
        kn_safe = np.where(kn == 0, 1.0, kn)
        gkf += (gs / safe)[:, :, None] * qf[:, None, :]
        gkf -= (gs * scores / kn_safe**2)[:, :, None] * kf
        step_grads, gq = query.backward(q_cache, gqf)
        if q_grads is None:
            q_grads = step_grads
        else:
            q_grads = [a + b_ for a, b_ in zip(q_grads, step_grads)]
    key_grads, _ = key.backward(key_cache, gkf.reshape(b * n, -1))
    return loss, q_grads, key_grads


def train_defense(dataset: UpdateDataset, epochs=500, *, c=10.0, eps=0.5, passes=5,
                  hidden=128, latent=64, lr=1e-3, batch_size=16, seed=0,
                  on_epoch=None) -> AttentionModel:
    """Fit the query/key encoders on a labeled update dataset.

    Instances whose clients are all attackers are skipped. The returned model
    is the snapshot with the best validation detection accuracy (ties broken
    by lower validation L1 error); with no validation split the final epoch
    wins. on_epoch, when given, receives (epoch, train_loss, val_accuracy,
    val_l1) after every epoch.
    """
    usable = {i for i, inst in enumerate(dataset.instances) if inst.labels.any()}
    if not usable:
        raise UsageError("dataset has no instances with a benign client")
    train_idx, val_idx = dataset.split()
    train_idx = [i for i in train_idx if i in usable]
    val_idx = [i for i in val_idx if i in usable]
    f = dataset.feature_dim
    rng = np.random.default_rng([seed, 0xDEF])
    query = Mlp.create((f, hidden, latent), rng)
    key = Mlp.create((f, hidden, latent), rng)
    layer_names = tuple(n for n, _ in dataset.meta.get("schema", [])) or None
    model = AttentionModel(query, key, c, eps, passes, dataset.meta.get("k_pc", 10), layer_names)

    feats_all, labels_all = _stack(dataset, train_idx)
    mu_all = _benign_means(feats_all, labels_all.astype(np.float64))
    params = query.parameters() + key.parameters()
    opt = AdamState(params, lr=lr)
    n_q = len(query.parameters())

    best = None  # (accuracy, -l1, epoch, snapshot)
    order = np.arange(len(train_idx))
    for epoch in range(epochs):
        rng.shuffle(order)
        losses = []
        for start in range(0, order.size, batch_size):
            sel = order[start : start + batch_size]
            loss, q_grads, k_grads = _forward_backward(
                query, key, feats_all[sel], mu_all[sel], c, eps, passes
            )
            adam_step(opt, params, q_grads + k_grads)
            losses.append(loss)
        train_loss = float(np.mean(losses)) if losses else 0.0
        val_acc = val_l1 = None
        if val_idx:
            report = validate(model, dataset, val_idx)
            val_acc = report["detection_accuracy"]
            val_l1 = report["mean_l1_error"]
            score = (val_acc, -val_l1)
            if best is None or score > best[0]:
                best = (score, epoch, (query.copy(), key.copy()))
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_acc, val_l1)
    if best is not None:
        query, key = best[2]
        model = AttentionModel(query, key, c, eps, passes, model.k_pc, layer_names)
    return model


def predict_attackers(model: AttentionModel, feats):
    """True where the final weight is truncated to zero."""
    _, weights, _, _, _ = aggregate_features(model, feats)
    return weights == 0.0


def validate(model: AttentionModel, dataset: UpdateDataset, indices=None):
    """Detection accuracy over (instance, client) pairs plus mean L1 error."""
    if indices is None:
        indices = range(len(dataset.instances))
    correct = total = 0
    l1 = []
    for i in indices:
        inst = dataset.instances[i]
        q, weights, _, _, _ = aggregate_features(model, inst.feats)
        predicted_attacker = weights == 0.0
        truth_attacker = ~inst.labels
        correct += int((predicted_attacker == truth_attacker).sum())
        total += inst.labels.size
        benign = inst.labels.astype(bool)
        mu = inst.feats[benign].mean(axis=0)
        l1.append(np.abs(q - mu).mean())
    return {
        "detection_accuracy": correct / total if total else 0.0,
        "mean_l1_error": float(np.mean(l1)) if l1 else 0.0,
    }


def save_dataset(path, dataset: UpdateDataset):
    """Binary container: header (n, F, count, schema digest), meta, instances.

    Instance payloads are n*F float64 rows, n label bytes, n norm floats.
    """
    n = dataset.n
    f = dataset.feature_dim
    schema_rows = dataset.meta.get("schema", [])
    if schema_rows:
        schema = Schema(
            tuple(r[0] for r in schema_rows), tuple(int(r[1]) for r in schema_rows)
        )
        digest = bytes.fromhex(schema.digest())
    else:
        digest = b"\x00" * 32
    meta = dict(dataset.meta)
    meta["instance_runs"] = [inst.run for inst in dataset.instances]
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC_DATASET)
        fh.write(struct.pack("<HIIQ", _DATASET_VERSION, n, f, len(dataset.instances)))
        fh.write(digest)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for inst in dataset.instances:
            if inst.feats.shape != (n, f):
                raise SchemaError("all instances in a dataset must share one width")
            fh.write(np.ascontiguousarray(inst.feats, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(inst.labels, dtype="<u1").tobytes())
            fh.write(np.ascontiguousarray(inst.raw_norms, dtype="<f8").tobytes())


def load_dataset(path) -> UpdateDataset:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC_DATASET:
            raise UsageError(f"{path} is not an update dataset")
        version, n, f, count = struct.unpack("<HIIQ", fh.read(18))
        if version != _DATASET_VERSION:
            raise UsageError(f"unsupported dataset version {version}")
        fh.read(32)  # schema digest, re-derivable from meta
        (meta_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(meta_len).decode())
        runs = meta.pop("instance_runs", [0] * count)
        instances = []
        for i in range(count):
            feats = np.frombuffer(fh.read(8 * n * f), dtype="<f8").reshape(n, f).copy()
            labels = np.frombuffer(fh.read(n), dtype="<u1").astype(bool)
            norms = np.frombuffer(fh.read(8 * n), dtype="<f8").copy()
            instances.append(UpdateInstance(feats, labels, norms, runs[i]))
    return UpdateDataset(instances, meta)
