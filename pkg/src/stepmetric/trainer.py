"""Epoch loop: tuple sampling, anomaly-weight ramp, updates, validation.

Each epoch draws one pass of tuples from the loader, averages gradients
over mini-batches, and applies the optimizer. Validation rebuilds the
gallery from the current weights and scores the validation split with
kNN (no rejection threshold). The history also tracks three feature-
space distances per epoch from a seeded probe set: mean within-class
distance, mean adjacent-class distance, and mean anomaly-to-centroid
distance, which together show whether the intended geometry (tight
classes, separated neighbors, far anomalies) is emerging.

Runs are deterministic end to end for a fixed config and seed: every
random draw comes from an explicitly seeded stream, and execution is
serial.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as config_mod
from .datagen import load_manifest, load_split
from .embednet import ArchSpec, Parameters, TrainingError, embed_batch, init_network, tuple_batch_gradients
from .inference import build_gallery, knn_classify
from .labels import LabeledImage, step_index
from .loss import lambda_schedule
from .sampler import SamplerConfig, neighbor_classes, reduced_epoch_tuples, triplet_epoch_tuples

CHECKPOINT_MAGIC = b"STEPMETRIC-CKPT"
CHECKPOINT_VERSION = 1

_STREAM_SAMPLER = 1
_STREAM_PROBE = 2

HISTORY_COLUMNS = ("epoch", "loss", "val_acc", "d_intra", "d_adjacent", "d_anomaly", "lambda", "seconds")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_acc: float
    d_intra: float
    d_adjacent: float
    d_anomaly: float
    lam: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def to_csv(self, path: Path | str) -> None:
        with open(path, "w", newline="") as f:
            f.write(",".join(HISTORY_COLUMNS) + "\n")
            for r in self.records:
                f.write(
                    f"{r.epoch},{r.loss!r},{r.val_acc!r},{r.d_intra!r},"
                    f"{r.d_adjacent!r},{r.d_anomaly!r},{r.lam!r},{r.seconds!r}\n"
                )

    @staticmethod
    def from_csv(path: Path | str) -> "TrainHistory":
        hist = TrainHistory()
        with open(path) as f:
            header = f.readline().strip().split(",")
            if tuple(header) != HISTORY_COLUMNS:
                raise ValueError(f"unexpected metrics header: {header}")
            for line in f:
                v = line.strip().split(",")
                hist.records.append(
                    EpochRecord(int(v[0]), float(v[1]), float(v[2]), float(v[3]),
                                float(v[4]), float(v[5]), float(v[6]), float(v[7]))
                )
        return hist


class Adam:
    """Adaptive-moment gradient descent (the default optimizer)."""

    def __init__(self, params: Parameters, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            g = g.astype(self.params.tensors[k].dtype, copy=False)
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            mhat = self.m[k] / b1c
            vhat = self.v[k] / b2c
            self.params.tensors[k] -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(
                self.params.tensors[k].dtype, copy=False
            )


class SGD:
    def __init__(self, params: Parameters, lr: float):
        self.params = params
        self.lr = lr

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for k, g in grads.items():
            self.params.tensors[k] -= (self.lr * g).astype(self.params.tensors[k].dtype, copy=False)


def make_optimizer(name: str, params: Parameters, lr: float):
    if name == "adam":
        return Adam(params, lr)
    if name == "sgd":
        return SGD(params, lr)
    raise ValueError(f"unknown optimizer {name!r}")


def _group_by_class(images: list[LabeledImage]) -> dict[int, list[LabeledImage]]:
    out: dict[int, list[LabeledImage]] = {}
    for im in sorted(images, key=lambda im: im.id):
        out.setdefault(step_index(im.label), []).append(im)
    return out


def validate_epoch(params: Parameters, gallery_images, val_images, k: int) -> float:
    """kNN accuracy of the validation set against a fresh gallery."""
    if not gallery_images or not val_images:
        raise ValueError("gallery and validation sets must be nonempty")
    gallery = build_gallery(params, gallery_images)
    emb = embed_batch(params, val_images).astype(np.float64)
    correct = 0
    for row, im in zip(emb, val_images):
        result = knn_classify(gallery, row, k=k, threshold=None)
        correct += result.predicted == im.label
    return correct / len(val_images)


def _distance_stats(gallery, metric: str) -> tuple[float, float]:
    """Mean within-class and mean adjacent-class embedding distance."""
    emb = gallery.embeddings
    classes = np.array([step_index(l) for l in gallery.labels])
    sq = np.sum((emb[:, None, :] - emb[None, :, :]) ** 2, axis=2)
    if metric == "euclidean":
        sq = np.sqrt(sq)
    same = classes[:, None] == classes[None, :]
    upper = np.triu(np.ones_like(same, dtype=bool), k=1)
    adjacent = np.abs(classes[:, None] - classes[None, :]) == 1
    d_intra = float(sq[same & upper].mean())
    d_adjacent = float(sq[adjacent & upper].mean())
    return d_intra, d_adjacent


def _probe_anomaly_distance(params, dataset, cfg, epoch: int, metric: str) -> float:
    """Mean anomaly-to-centroid distance over one seeded probe tuple per class."""
    from .loss import pairwise_distance, centroid

    n = len(dataset)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, _STREAM_PROBE, epoch])))
    sampler_cfg = SamplerConfig(n=n, m=2, mode=cfg.mode, anomaly_source=cfg.anomaly_source, epoch_seed=0)
    dists = []
    images = []
    metas = []
    for c in range(1, n + 1):
        pool = dataset[c]
        i, j = rng.choice(len(pool), size=2, replace=False)
        anchor, positive = pool[int(i)], pool[int(j)]
        pred, succ = neighbor_classes(c, n)
        n1 = dataset[pred][int(rng.integers(0, len(dataset[pred])))]
        n2 = dataset[succ][int(rng.integers(0, len(dataset[succ])))]
        others = [cc for cc in range(1, n + 1) if cc != c]
        c_src = others[int(rng.integers(0, len(others)))]
        src = dataset[c_src][int(rng.integers(0, len(dataset[c_src])))]
        from .augment import make_anomaly_sample

        anomaly, _ = make_anomaly_sample(src, cfg.erasing, rng)
        if cfg.mode == "quadruplet":
            images.extend([anchor, positive, n1, n2, anomaly])
            metas.append(5)
        else:
            images.extend([anchor, positive, n1, anomaly])
            metas.append(4)
    emb = embed_batch(params, images).astype(np.float64)
    pos = 0
    for width in metas:
        group = emb[pos : pos + width]
        pos += width
        center = centroid(group[:-1])
        dists.append(pairwise_distance(group[-1], center, metric))
    return float(np.mean(dists))


def train(
    cfg: "config_mod.TrainConfig",
    data_root: Path | str,
    out_dir: Path | str | None = None,
    progress=None,
) -> tuple[Parameters, TrainHistory]:
    """Run the full training schedule; returns final weights and history.

    Writes periodic and final checkpoints plus metrics.csv when out_dir
    is given. Aborts with epoch/batch identification if the loss goes
    non-finite.
    """
    cfg.validate()
    manifest = load_manifest(data_root)
    train_images = load_split(data_root, manifest, "train")
    val_images = load_split(data_root, manifest, "val")
    dataset = _group_by_class(train_images)
    n = len(dataset)
    m = min(len(v) for v in dataset.values())

    sampler_cfg = SamplerConfig(n=n, m=m, mode=cfg.mode, anomaly_source=cfg.anomaly_source, epoch_seed=cfg.seed)
    sampler_cfg.validate()
    loss_cfg = cfg.resolved_loss()

    params = init_network(cfg.arch, cfg.seed)
    opt = make_optimizer(cfg.optimizer, params, cfg.learning_rate)
    history = TrainHistory()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for epoch in range(1, cfg.total_epochs + 1):
        t0 = time.perf_counter()
        lam = lambda_schedule(epoch, loss_cfg)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, _STREAM_SAMPLER, epoch])))
        if cfg.mode == "quadruplet":
            tuples = reduced_epoch_tuples(sampler_cfg, dataset, rng, cfg.erasing)
        else:
            tuples = triplet_epoch_tuples(sampler_cfg, dataset, rng, cfg.erasing)

        total = 0.0
        for start in range(0, len(tuples), cfg.batch_size):
            batch = tuples[start : start + cfg.batch_size]
            try:
                r, grads = tuple_batch_gradients(params, batch, loss_cfg, lam, dtype=np.float32)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch starting at tuple {start}: {exc}") from exc
            opt.step(grads)
            total += float(np.sum(r["total"]))
        mean_loss = total / len(tuples)

        gallery = build_gallery(params, train_images)
        emb_val = embed_batch(params, val_images).astype(np.float64)
        correct = 0
        for row, im in zip(emb_val, val_images):
            if knn_classify(gallery, row, k=cfg.k).predicted == im.label:
                correct += 1
        val_acc = correct / len(val_images)

        d_intra, d_adjacent = _distance_stats(gallery, loss_cfg.distance)
        d_anomaly = _probe_anomaly_distance(params, dataset, cfg, epoch, loss_cfg.distance)
        seconds = time.perf_counter() - t0
        history.records.append(EpochRecord(epoch, mean_loss, val_acc, d_intra, d_adjacent, d_anomaly, lam, seconds))
        if progress is not None:
            progress(history.records[-1])
        if out is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(params, cfg, out / f"checkpoint_epoch_{epoch:04d}.ckpt")

    if out is not None:
        save_checkpoint(params, cfg, out / "checkpoint_final.ckpt")
        history.to_csv(out / "metrics.csv")
    return params, history


def save_checkpoint(params: Parameters, cfg, path: Path | str) -> None:
    """Binary checkpoint: magic, version, architecture, config JSON, then
    raw float32 tensors in declaration order. Written atomically."""
    path = Path(path)
    arch = params.arch
    blob = json.dumps(config_mod.train_config_to_dict(cfg), sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<6I", arch.input_size, *arch.conv_channels, arch.embed_dim))
        f.write(struct.pack("<B", int(arch.two_digit_guard)))
        f.write(struct.pack("<q", params.init_seed))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, shape in arch.tensor_shapes():
            tensor = params.tensors[name]
            if tuple(tensor.shape) != shape:
                raise ValueError(f"tensor {name} has shape {tensor.shape}, expected {shape}")
            f.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    tmp.replace(path)


def _read_exact(f, size: int, what: str) -> bytes:
    buf = f.read(size)
    if len(buf) != size:
        raise ValueError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path: Path | str):
    """Inverse of save_checkpoint; returns (Parameters, TrainConfig)."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = _read_exact(f, len(CHECKPOINT_MAGIC), "magic")
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint (bad magic {magic!r})")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        vals = struct.unpack("<6I", _read_exact(f, 24, "architecture"))
        (guard,) = struct.unpack("<B", _read_exact(f, 1, "architecture flags"))
        (init_seed,) = struct.unpack("<q", _read_exact(f, 8, "init seed"))
        arch = ArchSpec(vals[0], tuple(vals[1:5]), vals[5], bool(guard))
        (blob_len,) = struct.unpack("<I", _read_exact(f, 4, "config length"))
        cfg_dict = json.loads(_read_exact(f, blob_len, "config").decode("utf-8"))
        cfg = config_mod.train_config_from_dict(cfg_dict)
        tensors = {}
        for name, shape in arch.tensor_shapes():
            n_bytes = int(np.prod(shape)) * 4
            raw = _read_exact(f, n_bytes, f"tensor {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        extra = f.read(1)
        if extra:
            raise ValueError("checkpoint has trailing bytes; file may be corrupt")
    return Parameters(arch, tensors, init_seed=init_seed), cfg
