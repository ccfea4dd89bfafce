"""Training-tuple construction over consecutive classes.

Exhaustive tuple enumeration is combinatorially explosive (hundreds of
millions of five-sample combinations for 8 classes x 40 images), so the
loader restricts negatives to the classes adjacent to the anchor and
emits exactly 2*n*m tuples per epoch: every image anchors two tuples,
once per orientation of the (preceding, succeeding) negative pair. The
exact full counts stay available for reporting via
`full_combination_count`.

Boundary classes keep the three-consecutive-classes structure by taking
their two nearest neighbors on the existing side (class 1 uses classes
2 and 3; class n uses n-1 and n-2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import RandomErasingParams, make_anomaly_sample
from .labels import LabeledImage

ANOMALY_POLICIES = ("uniform-other", "exclude-neighborhood")


@dataclass
class SamplerConfig:
    n: int
    m: int
    mode: str = "quadruplet"
    anomaly_source: str = "uniform-other"
    epoch_seed: int = 0

    def validate(self) -> None:
        if self.mode not in ("quadruplet", "triplet"):
            raise ValueError(f"mode must be quadruplet or triplet, got {self.mode!r}")
        min_n = 3 if self.mode == "quadruplet" else 2
        if self.n < min_n:
            raise ValueError(f"{self.mode} mode needs n >= {min_n}, got n={self.n}")
        if self.m < 2:
            raise ValueError(f"need m >= 2 images per class, got m={self.m}")
        if self.anomaly_source not in ANOMALY_POLICIES:
            raise ValueError(f"anomaly_source must be one of {ANOMALY_POLICIES}")
        if self.anomaly_source == "exclude-neighborhood" and self.n < 4:
            raise ValueError("exclude-neighborhood needs n >= 4 so a source class remains")


@dataclass
class QuadrupletTuple:
    """anchor/positive from one class, negatives from its two neighbors,
    anomaly synthesized from another class by double random erasing."""

    anchor: LabeledImage
    positive: LabeledImage
    negative1: LabeledImage
    negative2: LabeledImage
    anomaly: LabeledImage
    classes: tuple[int, int, int, int, int]  # (c_a, c_a, c_n1, c_n2, c_src)


@dataclass
class TripletTuple:
    anchor: LabeledImage
    positive: LabeledImage
    negative: LabeledImage
    anomaly: LabeledImage
    classes: tuple[int, int, int, int]  # (c_a, c_a, c_n, c_src)


def full_combination_count(n: int, m: int, mode: str = "quadruplet") -> int:
    """Exact count of admissible tuples without the consecutive-class cut.

    Triplet: n * mP2 * (n-1) * m; quadruplet additionally picks a second
    negative class and image: * (n-2) * m. Exact integer arithmetic.
    """
    if mode not in ("quadruplet", "triplet"):
        raise ValueError(f"mode must be quadruplet or triplet, got {mode!r}")
    if n < (3 if mode == "quadruplet" else 2) or m < 2:
        raise ValueError(f"invalid (n={n}, m={m}) for mode {mode}")
    count = n * m * (m - 1) * (n - 1) * m
    if mode == "quadruplet":
        count *= (n - 2) * m
    return count


def neighbor_classes(c: int, n: int) -> tuple[int, int]:
    """(preceding, succeeding) neighbors of class c, folded at the ends."""
    if not 1 <= c <= n:
        raise ValueError(f"class {c} out of range 1..{n}")
    if c == 1:
        return 2, 3
    if c == n:
        return n - 1, n - 2
    return c - 1, c + 1


def _check_dataset(config: SamplerConfig, dataset: dict[int, list[LabeledImage]]) -> None:
    classes = sorted(dataset)
    if classes != list(range(1, config.n + 1)):
        raise ValueError(f"dataset must have classes 1..{config.n}, got {classes}")
    for c, images in dataset.items():
        if len(images) < config.m:
            raise ValueError(f"class {c} has {len(images)} images, need >= m={config.m}")
        if len(images) < 2:
            raise ValueError(f"class {c} needs at least 2 images")


def _tuple_rng(base_entropy: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([base_entropy, index])))


def _draw_positive(images, anchor_idx, m, rng):
    j = int(rng.integers(0, m - 1))
    if j >= anchor_idx:
        j += 1
    return images[j]


def _draw_anomaly(config, dataset, c_anchor, exclude, erasing, rng):
    if config.anomaly_source == "uniform-other":
        candidates = [c for c in range(1, config.n + 1) if c != c_anchor]
    else:
        candidates = [c for c in range(1, config.n + 1) if c != c_anchor and c not in exclude]
    c_src = candidates[int(rng.integers(0, len(candidates)))]
    images = dataset[c_src]
    src = images[int(rng.integers(0, config.m))]
    anomaly, _rects = make_anomaly_sample(src, erasing, rng)
    return anomaly, c_src


def reduced_epoch_tuples(
    config: SamplerConfig,
    dataset: dict[int, list[LabeledImage]],
    rng: np.random.Generator,
    erasing: RandomErasingParams | None = None,
) -> list[QuadrupletTuple]:
    """One epoch of quadruplet tuples: exactly 2*n*m, shuffled.

    For each class and each of its first m images as anchor, one tuple
    takes (negative1, negative2) from the (preceding, succeeding) classes
    and a second tuple swaps the orientation. Positives and anomaly
    sources are free draws from per-tuple substreams, so a different
    epoch seed reshuffles order and redraws those while keeping the same
    multiset of anchor/negative-class assignments.
    """
    config.validate()
    if config.mode != "quadruplet":
        raise ValueError("reduced_epoch_tuples requires quadruplet mode")
    _check_dataset(config, dataset)
    erasing = erasing if erasing is not None else RandomErasingParams()

    slots = []
    for c in range(1, config.n + 1):
        pred, succ = neighbor_classes(c, config.n)
        for i in range(config.m):
            slots.append((c, i, pred, succ))
            slots.append((c, i, succ, pred))

    base_entropy = int(rng.integers(0, 2**63 - 1))
    order = rng.permutation(len(slots))
    out = []
    for slot_idx in order:
        c, i, c_n1, c_n2 = slots[slot_idx]
        trng = _tuple_rng(base_entropy, int(slot_idx))
        anchor = dataset[c][i]
        positive = _draw_positive(dataset[c], i, config.m, trng)
        negative1 = dataset[c_n1][int(trng.integers(0, config.m))]
        negative2 = dataset[c_n2][int(trng.integers(0, config.m))]
        anomaly, c_src = _draw_anomaly(config, dataset, c, {c_n1, c_n2}, erasing, trng)
        out.append(QuadrupletTuple(anchor, positive, negative1, negative2, anomaly,
                                   (c, c, c_n1, c_n2, c_src)))
    return out


def triplet_epoch_tuples(
    config: SamplerConfig,
    dataset: dict[int, list[LabeledImage]],
    rng: np.random.Generator,
    erasing: RandomErasingParams | None = None,
) -> list[TripletTuple]:
    """One epoch of baseline triplet tuples: n*m, negative from a uniform
    random other class, anomaly drawn like the quadruplet loader."""
    config.validate()
    if config.mode != "triplet":
        raise ValueError("triplet_epoch_tuples requires triplet mode")
    _check_dataset(config, dataset)
    erasing = erasing if erasing is not None else RandomErasingParams()

    slots = [(c, i) for c in range(1, config.n + 1) for i in range(config.m)]
    base_entropy = int(rng.integers(0, 2**63 - 1))
    order = rng.permutation(len(slots))
    out = []
    for slot_idx in order:
        c, i = slots[slot_idx]
        trng = _tuple_rng(base_entropy, int(slot_idx))
        anchor = dataset[c][i]
        positive = _draw_positive(dataset[c], i, config.m, trng)
        others = [cc for cc in range(1, config.n + 1) if cc != c]
        c_n = others[int(trng.integers(0, len(others)))]
        negative = dataset[c_n][int(trng.integers(0, config.m))]
        anomaly, c_src = _draw_anomaly(config, dataset, c, {c_n}, erasing, trng)
        out.append(TripletTuple(anchor, positive, negative, anomaly, (c, c, c_n, c_src)))
    return out
