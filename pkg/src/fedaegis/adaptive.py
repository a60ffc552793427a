"""Attention-based attack-adaptive aggregation.

The aggregator runs in the projected feature space: starting from the
coordinate-wise median of the client feature rows, each pass scores every
client by the cosine between the encoded current estimate (query encoder)
and its encoded feature row (key encoder), converts scores to weights with a
sharpened softmax, zeroes weights under eps/n, and re-estimates. The final
weights are applied to the original update vectors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import SchemaError, UsageError
from .nn import _MAGIC_MODEL, _MODEL_VERSION, Mlp, _read_mlp, _write_mlp, scaled_softmax
from .params import LayeredVector, RoundBatch, weighted_sum
from .projection import project


@dataclass
class AttentionModel:
    """Trained query/key encoders plus the aggregation hyperparameters."""

    query_encoder: Mlp
    key_encoder: Mlp
    c: float = 10.0
    eps: float = 0.5
    passes: int = 5
    k_pc: int = 10
    layer_names: tuple = None  # feature layout, k_pc slots per name

    def __post_init__(self):
        if self.query_encoder.input_dim != self.key_encoder.input_dim:
            raise SchemaError("query and key encoders must share the input width")
        if self.query_encoder.output_dim != self.key_encoder.output_dim:
            raise SchemaError("query and key encoders must share the latent width")
        if self.c < 0:
            raise UsageError("softmax scale c must be >= 0")
        if not 0 < self.eps <= 1:
            raise UsageError("truncation factor eps must lie in (0, 1]")
        if self.passes < 1:
            raise UsageError("need at least one pass")
        if self.layer_names is not None:
            object.__setattr__(self, "layer_names", tuple(self.layer_names))

    @property
    def feature_dim(self):
        return self.query_encoder.input_dim

    def with_params(self, c=None, eps=None, passes=None):
        """Copy sharing the encoders but with different aggregation knobs."""
        return AttentionModel(
            self.query_encoder,
            self.key_encoder,
            self.c if c is None else c,
            self.eps if eps is None else eps,
            self.passes if passes is None else passes,
            self.k_pc,
            self.layer_names,
        )


@dataclass
class AggregationResult:
    vector: LayeredVector  # final weights applied to the original updates
    weights: np.ndarray
    scores: np.ndarray
    fallback: bool = False
    pass_trace: list = None


def _cosine(q_enc, k_enc):
    """Cosine of one encoded query against rows of encoded keys; zero norms score 0."""
    qn = np.linalg.norm(q_enc)
    kn = np.linalg.norm(k_enc, axis=-1)
    denom = qn * kn
    safe = np.where(denom == 0, 1.0, denom)
    scores = (k_enc @ q_enc) / safe
    return np.where(denom == 0, 0.0, scores)


def alignment_scores(model: AttentionModel, q_feat, feats) -> np.ndarray:
    """Cosine alignment of every client's encoded features to the encoded query."""
    q_feat = np.asarray(q_feat, dtype=np.float64)
    feats = np.asarray(feats, dtype=np.float64)
    if q_feat.shape[-1] != model.feature_dim or feats.shape[-1] != model.feature_dim:
        raise SchemaError("feature width does not match the encoders")
    return _cosine(model.query_encoder.forward(q_feat), model.key_encoder.forward(feats))


def attention_pass(model: AttentionModel, q_feat, feats, key_enc=None, eps=None):
    """One reweighting pass in feature space.

    Returns (scores, weights, next_estimate, fallback). Weights below eps/n
    are zeroed; should truncation ever remove everything (impossible for
    eps <= 1, kept as a guarded fallback) the untruncated weights are used
    and flagged.
    """
    n = feats.shape[0]
    eps = model.eps if eps is None else eps
    if key_enc is None:
        key_enc = model.key_encoder.forward(feats)
    scores = _cosine(model.query_encoder.forward(q_feat), key_enc)
    soft = scaled_softmax(scores, model.c)
    keep = soft >= eps / n
    fallback = not keep.any()
    weights = soft if fallback else soft * keep
    return scores, weights, weights @ feats, fallback


def aggregate_features(model: AttentionModel, feats, passes=None, trace=False):
    """Run the full multi-pass estimate on raw feature rows.

    Returns (estimate, weights, scores, fallback, pass_trace).
    """
    feats = np.asarray(feats, dtype=np.float64)
    passes = model.passes if passes is None else passes
    key_enc = model.key_encoder.forward(feats)
    q = np.median(feats, axis=0)
    history = [] if trace else None
    fallback_any = False
    scores = weights = None
    for _ in range(passes):
        scores, weights, q, fb = attention_pass(model, q, feats, key_enc)
        fallback_any = fallback_any or fb
        if trace:
            history.append(weights.copy())
    return q, weights, scores, fallback_any, history


def batch_features(batch: RoundBatch, k_pc) -> np.ndarray:
    """Fixed-width feature rows for a round, independent of the client count.

    Rounds with fewer clients than k_pc are projected at their rank limit and
    zero-padded per layer, mirroring the rank-deficiency convention, so the
    encoder input width never varies.
    """
    k_eff = min(k_pc, batch.n)
    projected = project(batch, k_eff)
    feats = projected.features
    if k_eff == k_pc:
        return feats
    n_layers = len(batch.schema.names)
    padded = np.zeros((batch.n, n_layers * k_pc))
    for i in range(n_layers):
        padded[:, i * k_pc : i * k_pc + k_eff] = feats[:, i * k_eff : (i + 1) * k_eff]
    return padded


def aggregate_adaptive(model: AttentionModel, batch: RoundBatch, trace=False) -> AggregationResult:
    """Project the batch, iterate the attention passes, reweigh the originals."""
    matrix = batch.matrix()
    if not matrix.any():
        n = batch.n
        uniform = np.full(n, 1.0 / n)
        return AggregationResult(weighted_sum(batch, uniform), uniform, np.zeros(n))
    feats = batch_features(batch, model.k_pc)
    if feats.shape[1] != model.feature_dim:
        raise SchemaError(
            f"projected width {feats.shape[1]} does not match encoder input "
            f"{model.feature_dim}"
        )
    _, weights, scores, fallback, history = aggregate_features(model, feats, trace=trace)
    return AggregationResult(weighted_sum(batch, weights), weights, scores, fallback, history)


def feature_importance(model: AttentionModel) -> np.ndarray:
    """Per-input-feature mass of the key encoder's first layer weights."""
    first = model.key_encoder.layers[0].w  # (hidden, F)
    return np.abs(first).sum(axis=0)


def layer_importance(model: AttentionModel, layer_names=None):
    """Feature importance summed over each layer's k_pc feature slots.

    Returns a list of (layer name, total) in schema order.
    """
    names = layer_names if layer_names is not None else model.layer_names
    if names is None:
        raise UsageError("no layer names available; pass the schema's names")
    imp = feature_importance(model)
    if len(names) * model.k_pc != imp.size:
        raise SchemaError(
            f"feature width {imp.size} does not decompose into "
            f"{len(names)} layers of {model.k_pc} slots"
        )
    out = []
    for i, name in enumerate(names):
        out.append((name, float(imp[i * model.k_pc : (i + 1) * model.k_pc].sum())))
    return out


def save_model(path, model: AttentionModel):
    """Self-describing checkpoint: hyperparameters, feature layout, encoders."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC_MODEL)
        fh.write(struct.pack("<H", _MODEL_VERSION))
        fh.write(struct.pack("<ddII", model.c, model.eps, model.passes, model.k_pc))
        names = model.layer_names or ()
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            enc = name.encode()
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
        _write_mlp(fh, model.query_encoder)
        _write_mlp(fh, model.key_encoder)


def load_model(path) -> AttentionModel:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC_MODEL:
            raise UsageError(f"{path} is not an aggregation model checkpoint")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != _MODEL_VERSION:
            raise UsageError(f"unsupported model checkpoint version {version}")
        c, eps, passes, k_pc = struct.unpack("<ddII", fh.read(24))
        (n_names,) = struct.unpack("<I", fh.read(4))
        names = []
        for _ in range(n_names):
            (ln,) = struct.unpack("<H", fh.read(2))
            names.append(fh.read(ln).decode())
        query = _read_mlp(fh)
        key = _read_mlp(fh)
    return AttentionModel(query, key, c, eps, passes, k_pc, tuple(names) or None)
