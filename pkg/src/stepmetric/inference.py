"""Gallery embedding and kNN step estimation with error rejection.

Training images are embedded once into a gallery; an unknown image is
assigned the majority label of its k nearest gallery entries. If the
mean distance to those k entries exceeds the rejection threshold, the
image is declared an error regardless of the votes, which catches
occlusions that land far from every class cluster.

The index is a plain brute-force scan: at a few hundred gallery entries
nothing faster is warranted, and the scan doubles as the reference any
accelerated index would have to match exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import RandomErasingParams, make_anomaly_sample
from .embednet import Parameters, embed, embed_batch
from .labels import ERROR_LABEL, LabeledImage, is_step_label, step_index
from .loss import DISTANCE_METRICS

GALLERY_MAGIC = b"STEPMETRIC-GALL"
GALLERY_VERSION = 1
_METRIC_CODE = {"squared_euclidean": 0, "euclidean": 1}
_METRIC_NAME = {v: k for k, v in _METRIC_CODE.items()}


@dataclass
class Gallery:
    embeddings: np.ndarray  # (N, D) float64
    labels: list[str]
    ids: list[str]
    metric: str = "squared_euclidean"

    def __post_init__(self):
        if self.embeddings.ndim != 2:
            raise ValueError("gallery embeddings must be a (N, D) matrix")
        if not (len(self.labels) == len(self.ids) == self.embeddings.shape[0]):
            raise ValueError("gallery labels/ids/embeddings lengths disagree")
        if self.metric not in DISTANCE_METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class PredictionResult:
    predicted: str
    knn_votes: dict[str, int]
    mean_knn_distance: float
    threshold_applied: bool = False


def build_gallery(params: Parameters, train_images: list[LabeledImage], metric: str = "squared_euclidean") -> Gallery:
    """Embed every training image; one gallery entry per image."""
    if not train_images:
        raise ValueError("cannot build a gallery from zero images")
    emb = embed_batch(params, train_images).astype(np.float64)
    return Gallery(emb, [im.label for im in train_images], [im.id for im in train_images], metric)


def _distances(gallery: Gallery, query: np.ndarray) -> np.ndarray:
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (gallery.dim,):
        raise ValueError(f"query has shape {query.shape}, gallery dim is {gallery.dim}")
    diff = gallery.embeddings - query
    sq = np.sum(diff * diff, axis=1)
    return np.sqrt(sq) if gallery.metric == "euclidean" else sq


def _label_sort_key(label: str):
    # Step labels order by index; the error label sorts after all steps.
    return (0, step_index(label)) if is_step_label(label) else (1, label)


def _majority(labels: list[str], dists: np.ndarray) -> tuple[str, dict[str, int]]:
    votes: dict[str, int] = {}
    sums: dict[str, float] = {}
    for label, d in zip(labels, dists):
        votes[label] = votes.get(label, 0) + 1
        sums[label] = sums.get(label, 0.0) + float(d)
    top = max(votes.values())
    tied = [l for l, v in votes.items() if v == top]
    if len(tied) > 1:
        # Smaller mean voter distance wins; remaining ties go to the
        # lower step index.
        tied.sort(key=lambda l: (sums[l] / votes[l], _label_sort_key(l)))
    return tied[0], votes


def knn_classify(gallery: Gallery, query: np.ndarray, k: int, threshold: float | None = None) -> PredictionResult:
    """Majority vote over the k nearest entries, then threshold rejection.

    The mean of the k nearest distances is compared to the threshold
    (when given); above it the prediction is replaced by the error label.
    """
    if not 1 <= k <= len(gallery):
        raise ValueError(f"k must be in 1..{len(gallery)}, got {k}")
    d = _distances(gallery, query)
    order = np.argsort(d, kind="stable")[:k]
    nearest = d[order]
    mean_dist = float(np.mean(nearest))
    predicted, votes = _majority([gallery.labels[i] for i in order], nearest)
    applied = False
    if threshold is not None and mean_dist > threshold:
        predicted = ERROR_LABEL
        applied = True
    return PredictionResult(predicted, votes, mean_dist, applied)


def classify_image(
    params: Parameters, gallery: Gallery, image: LabeledImage, k: int, threshold: float | None = None
) -> PredictionResult:
    return knn_classify(gallery, embed(params, image).astype(np.float64), k, threshold)


def add_anomaly_entries(
    gallery: Gallery,
    params: Parameters,
    source_images: list[LabeledImage],
    erasing: RandomErasingParams,
    per_image: int,
    seed: int,
) -> Gallery:
    """Optional variant: extend the gallery with error-labeled embeddings
    of synthesized pseudo-occlusions. Off by default; rejection via the
    distance threshold is the standard mechanism."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    extra = []
    for im in source_images:
        for j in range(per_image):
            anomaly, _ = make_anomaly_sample(im, erasing, rng)
            extra.append(LabeledImage(anomaly.pixels, ERROR_LABEL, f"{im.id}_anomaly{j}"))
    emb = embed_batch(params, extra).astype(np.float64)
    return Gallery(
        np.concatenate([gallery.embeddings, emb], axis=0),
        gallery.labels + [im.label for im in extra],
        gallery.ids + [im.id for im in extra],
        gallery.metric,
    )


def save_gallery(gallery: Gallery, path: Path | str) -> None:
    """Binary gallery: magic, version, dim, metric tag, count, then per
    entry label, id and float64 embedding values."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(GALLERY_MAGIC)
        f.write(struct.pack("<I", GALLERY_VERSION))
        f.write(struct.pack("<I", gallery.dim))
        f.write(struct.pack("<B", _METRIC_CODE[gallery.metric]))
        f.write(struct.pack("<I", len(gallery)))
        for row, label, entry_id in zip(gallery.embeddings, gallery.labels, gallery.ids):
            lb = label.encode("utf-8")
            ib = entry_id.encode("utf-8")
            f.write(struct.pack("<H", len(lb)))
            f.write(lb)
            f.write(struct.pack("<H", len(ib)))
            f.write(ib)
            f.write(np.ascontiguousarray(row, dtype="<f8").tobytes())
    tmp.replace(path)


def _read_exact(f, size: int, what: str) -> bytes:
    buf = f.read(size)
    if len(buf) != size:
        raise ValueError(f"truncated gallery file while reading {what}")
    return buf


def load_gallery(path: Path | str) -> Gallery:
    path = Path(path)
    with open(path, "rb") as f:
        magic = _read_exact(f, len(GALLERY_MAGIC), "magic")
        if magic != GALLERY_MAGIC:
            raise ValueError(f"{path} is not a gallery file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != GALLERY_VERSION:
            raise ValueError(f"unsupported gallery version {version}, expected {GALLERY_VERSION}")
        (dim,) = struct.unpack("<I", _read_exact(f, 4, "dim"))
        (metric_code,) = struct.unpack("<B", _read_exact(f, 1, "metric"))
        if metric_code not in _METRIC_NAME:
            raise ValueError(f"unknown metric code {metric_code}")
        (count,) = struct.unpack("<I", _read_exact(f, 4, "count"))
        emb = np.empty((count, dim), dtype=np.float64)
        labels, ids = [], []
        for i in range(count):
            (llen,) = struct.unpack("<H", _read_exact(f, 2, "label length"))
            labels.append(_read_exact(f, llen, "label").decode("utf-8"))
            (ilen,) = struct.unpack("<H", _read_exact(f, 2, "id length"))
            ids.append(_read_exact(f, ilen, "id").decode("utf-8"))
            emb[i] = np.frombuffer(_read_exact(f, dim * 8, "embedding"), dtype="<f8")
        extra = f.read(1)
        if extra:
            raise ValueError("gallery file has trailing bytes; file may be corrupt")
    return Gallery(emb, labels, ids, _METRIC_NAME[metric_code])
