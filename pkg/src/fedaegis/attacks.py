"""Client-side adversarial behaviors used by the simulator.

All transformations are pure: they return new shards/vectors and never touch
benign inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import IMAGE_SIDE, ClientShard
from .errors import UsageError
from .params import LayeredVector

ATTACK_KINDS = ("none", "omniscient", "label_flip", "backdoor")

# Scaled-down pixel trigger: four 1x2 horizontal bars in two columns near the
# top-left corner. Bars sit on rows 0 and 2; the second column starts one gap
# column after the first, so the default footprint is 3 rows by 5 columns.
BAR_LENGTH = 2
BAR_ROWS = (0, 2)


@dataclass(frozen=True)
class BackdoorParams:
    target_label: int = 2
    poison_fraction: float = 0.5
    shift_y: int = 0
    shift_x: int = 0
    gap: int = 0

    def __post_init__(self):
        if not 0.0 <= self.poison_fraction <= 1.0:
            raise UsageError("poison_fraction must lie in [0, 1]")
        backdoor_pixels(self.shift_y, self.shift_x, self.gap)  # bounds check


@dataclass(frozen=True)
class AttackScenario:
    kind: str = "none"
    attacker_ids: frozenset = frozenset()
    backdoor: BackdoorParams = None
    flip_labels: tuple = (1, 7)

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise UsageError(f"unknown attack kind {self.kind!r}")
        object.__setattr__(self, "attacker_ids", frozenset(self.attacker_ids))
        if self.kind == "backdoor" and self.backdoor is None:
            object.__setattr__(self, "backdoor", BackdoorParams())
        if self.kind == "label_flip":
            a, b = self.flip_labels
            if a == b:
                raise UsageError("label flip needs two distinct labels")

    def is_attacker(self, client_id):
        return self.kind != "none" and client_id in self.attacker_ids


def backdoor_pixels(shift_y=0, shift_x=0, gap=0):
    """(row, col) set of the trigger at the requested placement.

    gap widens the spacing between the two bar columns beyond the default
    single blank column. Raises if any pixel would fall outside the image.
    """
    if gap < 0:
        raise UsageError("gap must be >= 0")
    pixels = []
    col_starts = (0, BAR_LENGTH + 1 + gap)
    for row in BAR_ROWS:
        for col0 in col_starts:
            for d in range(BAR_LENGTH):
                pixels.append((row + shift_y, col0 + d + shift_x))
    for r, c in pixels:
        if not (0 <= r < IMAGE_SIDE and 0 <= c < IMAGE_SIDE):
            raise UsageError(
                f"trigger pixel ({r},{c}) is outside the {IMAGE_SIDE}x{IMAGE_SIDE} image"
            )
    return tuple(pixels)


def apply_backdoor_pattern(image, shift_y=0, shift_x=0, gap=0):
    """Stamp the trigger onto an 8x8 image, returning a new image.

    Stamped pixels are driven to the maximum intensity 1.0.
    """
    image = np.asarray(image, dtype=np.float64)
    flat = image.ndim == 1
    img = image.reshape(IMAGE_SIDE, IMAGE_SIDE).copy()
    for r, c in backdoor_pixels(shift_y, shift_x, gap):
        img[r, c] = 1.0
    return img.ravel() if flat else img


def apply_omniscient(update: LayeredVector) -> LayeredVector:
    """Negate every coordinate of an update."""
    return LayeredVector(update.schema, -update.data)


def apply_label_flip(shard: ClientShard, a, b) -> ClientShard:
    """Swap labels a and b throughout a shard; other labels untouched."""
    if a == b:
        raise UsageError("label flip needs two distinct labels")
    labels = shard.labels.copy()
    mask_a = shard.labels == a
    mask_b = shard.labels == b
    labels[mask_a] = b
    labels[mask_b] = a
    return ClientShard(shard.client_id, shard.features.copy(), labels)


def poison_shard_backdoor(shard: ClientShard, params: BackdoorParams, rng) -> ClientShard:
    """Stamp the trigger on floor(poison_fraction * m) samples and relabel them.

    The poisoned subset is drawn from the supplied generator, so a fixed seed
    reproduces the same poisoned shard.
    """
    m = shard.sample_count
    n_poison = int(np.floor(params.poison_fraction * m))
    features = shard.features.copy()
    labels = shard.labels.copy()
    chosen = rng.choice(m, size=n_poison, replace=False)
    for i in chosen:
        features[i] = apply_backdoor_pattern(
            features[i], params.shift_y, params.shift_x, params.gap
        )
        labels[i] = params.target_label
    return ClientShard(shard.client_id, features, labels)
