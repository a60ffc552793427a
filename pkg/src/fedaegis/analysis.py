"""Post-hoc verification and study tooling.

Covers the one-pass error-bound harness for the truncated softmax estimator,
the closed-form improvement condition on the score approximation error, grid
sweeps of the trained defense across trigger placements, and the
permutation-sensitive dense-network detector used as an ablation reference.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace

import numpy as np

from . import simulator
from .defense_train import UpdateDataset, _benign_means, _stack
from .errors import UsageError
from .nn import AdamState, Mlp, adam_step, scaled_softmax


@dataclass
class BoundCase:
    """A synthesized one-pass estimation problem satisfying the score conditions."""

    n: int
    m: int  # attackers
    c: float
    eps: float  # truncation factor
    eps_prime: float  # score approximation error
    scores: np.ndarray  # (n,), benign first
    vectors: np.ndarray  # (n, d)

    def __post_init__(self):
        if not 0 <= self.m < self.n:
            raise UsageError("need 0 <= m < n")
        benign = self.scores[: self.n - self.m]
        attack = self.scores[self.n - self.m :]
        if self.eps_prime > 0:
            if np.any(np.abs(1.0 - benign) >= self.eps_prime):
                raise UsageError("benign scores violate the eps' condition")
            if attack.size and np.any(np.abs(-1.0 - attack) >= self.eps_prime):
                raise UsageError("attacker scores violate the eps' condition")
        else:
            # eps' = 0 is the exact limit: scores must sit at +/-1.
            if np.any(benign != 1.0) or (attack.size and np.any(attack != -1.0)):
                raise UsageError("eps' = 0 requires exact +/-1 scores")
        if not np.all(np.isfinite(self.vectors)):
            raise UsageError("vectors must be finite")


def sample_bound_case(rng, d_range=(8, 24), n_range=(4, 24), c_range=(1.0, 10.0),
                      eps=0.5, eps_prime_max=0.1) -> BoundCase:
    """Random case with benign scores near +1, attacker scores near -1, m < n/2."""
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    m = int(rng.integers(0, (n - 1) // 2 + 1))
    c = float(rng.uniform(*c_range))
    eps_prime = float(rng.uniform(1e-6, eps_prime_max))
    benign = 1.0 - rng.uniform(0.0, 1.0, size=n - m) * eps_prime * 0.999
    attack = -1.0 + rng.uniform(0.0, 1.0, size=m) * eps_prime * 0.999
    d = int(rng.integers(d_range[0], d_range[1] + 1))
    vectors = rng.standard_normal((n, d))
    return BoundCase(n, m, c, eps, eps_prime, np.concatenate([benign, attack]), vectors)


def check_bound(case: BoundCase, tight=False):
    """Evaluate one truncated reweighting pass against its error bound.

    lhs is the L1 distance between the truncated-softmax estimate and the
    benign mean. rhs is max(e^{c*eps'} - 1, n/(n-m) * e^{c*eps'} * e^{-2c})
    times the largest L1 norm among surviving clients; tight=True swaps the
    second branch for the sharper pre-simplification form
    n / ((n-m) * e^{c*(2-eps')} + m).
    """
    n, m, c = case.n, case.m, case.c
    weights = scaled_softmax(case.scores, c)
    surviving = weights >= case.eps / n
    truncated = np.where(surviving, weights, 0.0)
    estimate = truncated @ case.vectors
    mu = case.vectors[: n - m].mean(axis=0)
    lhs = float(np.abs(estimate - mu).sum())
    norms = np.abs(case.vectors).sum(axis=1)
    max_norm = float(norms[surviving].max()) if surviving.any() else float(norms.max())
    branch1 = np.expm1(c * case.eps_prime)
    if tight:
        branch2 = n / ((n - m) * np.exp(c * (2.0 - case.eps_prime)) + m)
    else:
        branch2 = n / (n - m) * np.exp(c * case.eps_prime) * np.exp(-2.0 * c)
    rhs = max(branch1, branch2) * max_norm
    return {"lhs": lhs, "rhs": float(rhs), "holds": bool(lhs <= rhs)}


def run_bound_fuzz(cases=1000, seed=0, tight=False):
    """Seeded fuzz sweep; returns (n_violations, list of violating cases)."""
    rng = np.random.default_rng([seed, 0xB07])
    violations = []
    for _ in range(cases):
        case = sample_bound_case(rng)
        result = check_bound(case, tight=tight)
        if not result["holds"]:
            violations.append((case, result))
    return len(violations), violations


def best_case_error(n, m, c):
    """Limit of the relative one-pass error as the score error vanishes."""
    frac = m / n
    return 1.0 / ((1.0 - frac) * np.exp(2.0 * c) + frac)


def improvement_condition(gamma, delta, c, n, m):
    """Largest score error eps' that still improves the estimate by rate gamma.

    min( (1/c) ln(gamma*delta + 1),
         2 - (1/c) ln((1/(gamma*delta) - m/n) / (1 - m/n)) ).
    """
    if not 0 < gamma < 1:
        raise UsageError("gamma must lie in (0, 1)")
    if delta <= 0:
        raise UsageError("delta must be positive")
    if c <= 0:
        raise UsageError("c must be positive")
    first = np.log(gamma * delta + 1.0) / c
    ratio_num = 1.0 / (gamma * delta) - m / n
    ratio_den = 1.0 - m / n
    if ratio_den <= 0:
        raise UsageError("second branch undefined: all clients are attackers")
    if ratio_num <= 0:
        raise UsageError(
            "second branch undefined: log argument is not positive "
            f"(1/(gamma*delta) = {1.0 / (gamma * delta):.4g} <= m/n = {m / n:.4g})"
        )
    second = 2.0 - np.log(ratio_num / ratio_den) / c
    return float(min(first, second))


def sweep_transfer(config: simulator.SimConfig, model, grid):
    """Evaluate a fixed trained defense across trigger-placement grid points.

    grid holds (shift_y, shift_x, gap, n_attackers) tuples. Each feasible
    point runs one simulation with the adaptive rule; infeasible placements
    are recorded as skipped. Returns a list of row dicts.
    """
    rows = []
    for shift_y, shift_x, gap, n_attackers in grid:
        row = {
            "shift_y": shift_y,
            "shift_x": shift_x,
            "gap": gap,
            "n_attackers": n_attackers,
        }
        try:
            attack = replace(
                config.attack,
                kind="backdoor",
                n_attackers=n_attackers,
                shift_y=shift_y,
                shift_x=shift_x,
                gap=gap,
            )
            point_config = replace(
                config,
                attack=attack,
                aggregator=simulator.AggregatorConfig("adaptive", model=model),
            )
        except UsageError as exc:
            row.update(skipped=True, note=str(exc))
            rows.append(row)
            continue
        result = simulator.run(point_config)
        final = result.metrics[-1]
        row.update(skipped=False, acc=final.acc, asr=final.asr)
        rows.append(row)
    return rows


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    buf.write("shift_y,shift_x,gap,n_attackers,skipped,acc,asr,note\n")
    for r in rows:
        acc = "" if r.get("acc") is None else repr(float(r["acc"]))
        asr = "" if r.get("asr") is None else repr(float(r["asr"]))
        note = r.get("note", "").replace(",", ";")
        buf.write(
            f"{r['shift_y']},{r['shift_x']},{r['gap']},{r['n_attackers']},"
            f"{str(r['skipped']).lower()},{acc},{asr},{note}\n"
        )
    return buf.getvalue()


@dataclass
class DenseDetector:
    """Permutation-sensitive reference: one dense net maps all features to weights.

    Consumes the concatenated client rows in arrival order and emits n score
    logits, which go through the same scaled softmax and truncation as the
    attention rule.
    """

    net: Mlp
    n: int
    c: float = 10.0
    eps: float = 0.5

    def weights(self, feats):
        logits = self.net.forward(np.asarray(feats, dtype=np.float64).reshape(-1))
        soft = scaled_softmax(logits, self.c)
        keep = soft >= self.eps / self.n
        return soft * keep if keep.any() else soft


def train_dense_detector(dataset: UpdateDataset, epochs=200, *, c=10.0, eps=0.5,
                         hidden=128, lr=1e-3, batch_size=16, seed=0) -> DenseDetector:
    """Train the dense ablation baseline with the same reweighting loss."""
    n = dataset.n
    f = dataset.feature_dim
    rng = np.random.default_rng([seed, 0xAB1])
    net = Mlp.create((n * f, hidden, n), rng)
    train_idx, _ = dataset.split()
    feats_all, labels_all = _stack(dataset, train_idx)
    mu_all = _benign_means(feats_all, labels_all.astype(np.float64))
    params = net.parameters()
    opt = AdamState(params, lr=lr)
    order = np.arange(len(train_idx))
    for _ in range(epochs):
        rng.shuffle(order)
        for start in range(0, order.size, batch_size):
            sel = order[start : start + batch_size]
            feats = feats_all[sel]  # (B, n, F)
            mu = mu_all[sel]
            b = feats.shape[0]
            flat = feats.reshape(b, n * f)
            logits, cache = net.forward_cache(flat)
            soft = scaled_softmax(logits, c)
            keep = soft >= eps / n
            fallback = ~keep.any(axis=1)
            keep = keep | fallback[:, None]
            weights = soft * keep
            estimate = np.einsum("bi,bif->bf", weights, feats)
            diff = estimate - mu
            gq = np.sign(diff) / diff.size
            gw = np.einsum("bf,bif->bi", gq, feats) * keep
            glogits = c * soft * (gw - (gw * soft).sum(axis=1, keepdims=True))
            grads, _ = net.backward(cache, glogits)
            adam_step(opt, params, grads)
    return DenseDetector(net, n, c, eps)


def dense_detection_accuracy(detector: DenseDetector, dataset: UpdateDataset,
                             indices=None, shuffle_seed=None):
    """Weight-zero detection accuracy, optionally shuffling client order first."""
    if indices is None:
        indices = range(len(dataset.instances))
    rng = None if shuffle_seed is None else np.random.default_rng([shuffle_seed, 0x5F])
    correct = total = 0
    for i in indices:
        inst = dataset.instances[i]
        feats, labels = inst.feats, ~inst.labels
        if rng is not None:
            order = rng.permutation(feats.shape[0])
            feats, labels = feats[order], labels[order]
        predicted = detector.weights(feats) == 0.0
        correct += int((predicted == labels).sum())
        total += labels.size
    return correct / total if total else 0.0


def ablation_metrics(config: simulator.SimConfig, model):
    """Final-round ASR of the full rule and its single-knob ablations.

    Runs the configured scenario with: the trained model, the same model
    without truncation (eps -> weights never cut), the same model without
    softmax sharpening (c = 0), and plain averaging.
    """
    out = {}
    variants = {
        "adaptive": simulator.AggregatorConfig("adaptive", model=model),
        "no_eps": simulator.AggregatorConfig("adaptive", model=_without_eps(model)),
        "no_c": simulator.AggregatorConfig("adaptive", model=model.with_params(c=0.0)),
        "fedavg": simulator.AggregatorConfig("fedavg"),
    }
    for name, agg in variants.items():
        result = simulator.run(replace(config, aggregator=agg))
        final = result.metrics[-1]
        out[name] = {"acc": final.acc, "asr": final.asr}
    return out


def _without_eps(model):
    # eps is constrained to (0, 1]; the smallest positive float keeps the
    # contract while making the threshold unreachable.
    return model.with_params(eps=np.nextafter(0.0, 1.0))
