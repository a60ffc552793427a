"""Datasets, disjoint Dirichlet client partitions, and synthetic outlier sets."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import UsageError

IMAGE_SIDE = 8
N_CLASSES = 10
FEATURE_DIM = IMAGE_SIDE * IMAGE_SIDE


@dataclass
class ClientShard:
    """One client's private samples: 8x8 images in [0,1] with labels 0..9."""

    client_id: int
    features: np.ndarray  # (m, 64)
    labels: np.ndarray  # (m,)

    @property
    def sample_count(self):
        return int(self.features.shape[0])


@dataclass(frozen=True)
class SyntheticInstance:
    """One robust-estimation problem: 10 points in R^30 with marked outliers."""

    points: np.ndarray  # (10, 30)
    outlier_mask: np.ndarray  # (10,) bool

    @property
    def inlier_mask(self):
        return ~self.outlier_mask


def load_digits_dataset():
    """The bundled 8x8 handwritten-digit corpus, scaled to [0,1]."""
    from sklearn.datasets import load_digits

    digits = load_digits()
    x = digits.data.astype(np.float64) / 16.0
    y = digits.target.astype(np.int64)
    return x, y


def _prototype(label):
    # Fixed per class, independent of the caller's seed: a smoothed random
    # field so classes are distinct but overlap under noise.
    rng = np.random.default_rng(97 + label)
    img = rng.random((IMAGE_SIDE + 2, IMAGE_SIDE + 2))
    smooth = np.zeros((IMAGE_SIDE, IMAGE_SIDE))
    for dy in range(3):
        for dx in range(3):
            smooth += img[dy : dy + IMAGE_SIDE, dx : dx + IMAGE_SIDE]
    smooth /= 9.0
    smooth = (smooth - smooth.min()) / (smooth.max() - smooth.min())
    return smooth.ravel() * 0.85


def surrogate_dataset(samples_per_class=180, noise=0.12, rng_seed=0):
    """Self-contained stand-in corpus: fixed class prototypes plus noise."""
    rng = np.random.default_rng(rng_seed)
    xs, ys = [], []
    for label in range(N_CLASSES):
        base = _prototype(label)
        noise_block = rng.normal(0.0, noise, size=(samples_per_class, FEATURE_DIM))
        xs.append(np.clip(base + noise_block, 0.0, 1.0))
        ys.append(np.full(samples_per_class, label, dtype=np.int64))
    x = np.vstack(xs)
    y = np.concatenate(ys)
    order = rng.permutation(x.shape[0])
    return x[order], y[order]


def load_dataset(name, rng_seed=0):
    if name == "digits":
        try:
            return load_digits_dataset()
        except ImportError:
            return surrogate_dataset(rng_seed=rng_seed)
    if name == "surrogate":
        return surrogate_dataset(rng_seed=rng_seed)
    raise UsageError(f"unknown dataset {name!r}")


def split_train_test(x, y, test_fraction, rng_seed):
    """Seeded shuffle split; the test side is the server-held evaluation set."""
    n = x.shape[0]
    rng = np.random.default_rng([rng_seed, 0xE7A1])
    order = rng.permutation(n)
    n_test = int(round(n * test_fraction))
    test_idx, train_idx = order[:n_test], order[n_test:]
    return (x[train_idx], y[train_idx]), (x[test_idx], y[test_idx])


def _apportion(total, fractions):
    """Largest-remainder rounding of total * fractions to integers summing to total."""
    raw = fractions * total
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(x, y, n_clients, alpha, batch, rng_seed):
    """Split a labeled dataset into disjoint heterogeneous client shards.

    For every label the class's samples are dealt to clients according to a
    Dirichlet(alpha) draw, without replacement. Each shard is then shuffled
    and truncated down to a multiple of the local batch size; clients left
    empty are dropped for this draw.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape[0] == 0:
        raise UsageError("cannot partition an empty dataset")
    if n_clients < 2:
        raise UsageError("need at least two clients")
    if alpha <= 0:
        raise UsageError("alpha must be positive")
    rng = np.random.default_rng([rng_seed, 0xD1A])
    assigned = [[] for _ in range(n_clients)]
    for label in np.unique(y):
        idx = np.flatnonzero(y == label)
        rng.shuffle(idx)
        fractions = rng.dirichlet(np.full(n_clients, float(alpha)))
        counts = _apportion(idx.size, fractions)
        start = 0
        for client, count in enumerate(counts):
            assigned[client].append(idx[start : start + count])
            start += count
    shards = []
    for client in range(n_clients):
        idx = np.concatenate(assigned[client]) if assigned[client] else np.zeros(0, dtype=int)
        rng.shuffle(idx)
        keep = (idx.size // batch) * batch
        if keep == 0:
            continue
        idx = idx[:keep]
        shards.append(ClientShard(client, x[idx].copy(), y[idx].copy()))
    return shards


def gen_synthetic_instances(count, rng_seed, n_outliers=3, offset=3.0, dim=30,
                            n_points=10, modified_dims=10):
    """Seeded batch of outlier-detection instances.

    Inlier rows are standard normal around a zero mean fixed for the whole
    run; each instance marks n_outliers random rows and shifts only their
    first modified_dims coordinates by a constant offset. The trailing
    coordinates carry identical noise for every row.
    """
    if count < 1:
        raise UsageError("count must be >= 1")
    if not 1 <= n_outliers <= 4:
        raise UsageError("instances carry between 1 and 4 outliers")
    rng = np.random.default_rng([rng_seed, 0x5E7])
    instances = []
    for _ in range(count):
        points = rng.standard_normal((n_points, dim))
        rows = rng.choice(n_points, size=n_outliers, replace=False)
        mask = np.zeros(n_points, dtype=bool)
        mask[rows] = True
        points[rows, :modified_dims] += offset
        points.flags.writeable = False
        mask.flags.writeable = False
        instances.append(SyntheticInstance(points, mask))
    return instances


def make_instance_with_outliers(rng_seed, outlier_rows, offset=3.0, dim=30,
                                n_points=10, modified_dims=10):
    """One instance with a caller-chosen outlier row set (for demonstrations)."""
    rng = np.random.default_rng([rng_seed, 0x5E8])
    points = rng.standard_normal((n_points, dim))
    mask = np.zeros(n_points, dtype=bool)
    mask[list(outlier_rows)] = True
    points[mask, :modified_dims] += offset
    return SyntheticInstance(points, mask)


_MAGIC_SHARDS = b"FGSH"
_SHARD_VERSION = 1


def save_shards(path, shards):
    """Binary shard container: header, then per shard id, count, features, labels."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC_SHARDS)
        fh.write(struct.pack("<HI", _SHARD_VERSION, len(shards)))
        for shard in shards:
            fh.write(struct.pack("<IQ", shard.client_id, shard.sample_count))
            fh.write(np.ascontiguousarray(shard.features, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(shard.labels, dtype="<u1").tobytes())


def load_shards(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC_SHARDS:
            raise UsageError(f"{path} is not a shard container")
        version, count = struct.unpack("<HI", fh.read(6))
        if version != _SHARD_VERSION:
            raise UsageError(f"unsupported shard container version {version}")
        shards = []
        for _ in range(count):
            client_id, m = struct.unpack("<IQ", fh.read(12))
            feats = np.frombuffer(fh.read(8 * m * FEATURE_DIM), dtype="<f8")
            feats = feats.reshape(m, FEATURE_DIM).copy()
            labels = np.frombuffer(fh.read(m), dtype="<u1").astype(np.int64)
            shards.append(ClientShard(client_id, feats, labels))
        return shards
