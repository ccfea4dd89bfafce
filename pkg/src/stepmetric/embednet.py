"""Shared-weight convolutional embedding network with exact gradients.

Four 3x3 convolution blocks (stride 1, zero padding, rectifier, 2x2 max
pool) quarter the spatial side twice over, 448 -> 28 or 64 -> 4, then a
single fully connected layer projects the flattened map to the embedding
dimension. The same parameter set serves every branch of a training
tuple, and reverse-mode gradients are computed by hand against the im2col
formulation, so correctness is checkable against finite differences.

Activations are NHWC; weights are stored HWIO so the im2col patch axis
flattens straight into the GEMM contraction axis. All heavy data
movement goes through `stepmetric.kernels`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .labels import LabeledImage
from .loss import LossBreakdown, LossConfig, anomaly_quadruplet_loss, anomaly_triplet_loss, quadruplet_loss_batch, triplet_loss_batch
from .sampler import QuadrupletTuple, TripletTuple


class TrainingError(RuntimeError):
    """Raised when training math produces non-finite values."""


@dataclass
class ArchSpec:
    input_size: int = 64
    conv_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    embed_dim: int = 64
    two_digit_guard: bool = True

    def validate(self) -> None:
        if self.input_size < 16 or self.input_size % 16 != 0:
            raise ValueError(f"input_size must be >= 16 and divisible by 16, got {self.input_size}")
        if len(self.conv_channels) != 4 or any(c < 1 for c in self.conv_channels):
            raise ValueError(f"conv_channels must be four positive counts, got {self.conv_channels}")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be positive")
        if self.two_digit_guard and self.embed_dim > 99:
            raise ValueError(
                f"embed_dim={self.embed_dim} exceeds the two-digit guard; distance "
                "contrast degrades in high dimensions. Disable two_digit_guard to override."
            )

    def feature_map_shape(self) -> tuple[int, int, int]:
        side = self.input_size // 16
        return side, side, self.conv_channels[3]

    def flat_dim(self) -> int:
        side, _, ch = self.feature_map_shape()
        return side * side * ch

    def tensor_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Checkpoint declaration order: conv1..conv4 weight/bias, then fc."""
        shapes: list[tuple[str, tuple[int, ...]]] = []
        c_in = 3
        for i, c_out in enumerate(self.conv_channels, start=1):
            shapes.append((f"conv{i}.weight", (3, 3, c_in, c_out)))
            shapes.append((f"conv{i}.bias", (c_out,)))
            c_in = c_out
        shapes.append(("fc.weight", (self.flat_dim(), self.embed_dim)))
        shapes.append(("fc.bias", (self.embed_dim,)))
        return shapes


@dataclass
class Parameters:
    arch: ArchSpec
    tensors: dict[str, np.ndarray]
    init_seed: int = 0

    @property
    def dtype(self) -> np.dtype:
        return self.tensors["fc.weight"].dtype

    def param_count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self) -> "Parameters":
        return Parameters(self.arch, {k: v.copy() for k, v in self.tensors.items()}, self.init_seed)

    def astype(self, dtype) -> "Parameters":
        return Parameters(self.arch, {k: v.astype(dtype) for k, v in self.tensors.items()}, self.init_seed)

    def check_finite(self) -> None:
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t)):
                raise TrainingError(f"non-finite values in parameter tensor {name}")


def init_network(arch: ArchSpec, seed: int) -> Parameters:
    """Fan-in-scaled uniform weights (limit sqrt(6/fan_in), which keeps
    signal variance roughly constant through rectifier layers), zero
    biases. Deterministic under seed."""
    arch.validate()
    tensors: dict[str, np.ndarray] = {}
    for idx, (name, shape) in enumerate(arch.tensor_shapes()):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, idx])))
        if name.endswith("weight"):
            fan_in = int(np.prod(shape[:-1]))
            limit = np.sqrt(6.0 / fan_in)
            tensors[name] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
        else:
            tensors[name] = np.zeros(shape, dtype=np.float32)
    return Parameters(arch, tensors, init_seed=seed)


def stack_images(images, dtype=np.float32) -> np.ndarray:
    arr = np.stack([im.pixels if isinstance(im, LabeledImage) else im for im in images])
    return np.ascontiguousarray(arr, dtype=dtype)


def _forward(params: Parameters, x: np.ndarray, keep_cache: bool):
    arch = params.arch
    if x.shape[1] != arch.input_size or x.shape[2] != arch.input_size:
        raise ValueError(f"input is {x.shape[1]}x{x.shape[2]}, network expects {arch.input_size}x{arch.input_size}")
    dtype = x.dtype
    cache = []
    for i in range(1, 5):
        w = params.tensors[f"conv{i}.weight"].astype(dtype, copy=False)
        bias = params.tensors[f"conv{i}.bias"].astype(dtype, copy=False)
        b, h, wd, c = x.shape
        cols = kernels.im2col3x3(x)
        cols2 = cols.reshape(b * h * wd, 9 * c)
        z2 = cols2 @ w.reshape(9 * c, -1)
        z2 += bias
        mask = z2 > 0
        np.maximum(z2, dtype.type(0.0), out=z2)
        a = np.ascontiguousarray(z2.reshape(b, h, wd, -1))
        x, idx = kernels.maxpool2x2(a)
        if keep_cache:
            cache.append((cols2, mask, idx, (b, h, wd, c)))
        else:
            cache.append(None)
    b = x.shape[0]
    flat = x.reshape(b, -1)
    wfc = params.tensors["fc.weight"].astype(dtype, copy=False)
    bfc = params.tensors["fc.bias"].astype(dtype, copy=False)
    emb = flat @ wfc + bfc
    return emb, (cache, flat, x.shape)


def _backward(params: Parameters, cache_pack, demb: np.ndarray) -> dict[str, np.ndarray]:
    cache, flat, last_shape = cache_pack
    dtype = demb.dtype
    grads: dict[str, np.ndarray] = {}
    wfc = params.tensors["fc.weight"].astype(dtype, copy=False)
    grads["fc.weight"] = flat.T @ demb
    grads["fc.bias"] = demb.sum(axis=0)
    dx = np.ascontiguousarray((demb @ wfc.T).reshape(last_shape))
    for i in range(4, 0, -1):
        cols2, mask, idx, (b, h, wd, c) = cache[i - 1]
        w = params.tensors[f"conv{i}.weight"].astype(dtype, copy=False)
        da = kernels.maxpool2x2_backward(dx, idx)
        dz2 = da.reshape(b * h * wd, -1)
        dz2 *= mask
        grads[f"conv{i}.weight"] = (cols2.T @ dz2).reshape(3, 3, c, -1)
        grads[f"conv{i}.bias"] = dz2.sum(axis=0)
        dcols2 = dz2 @ w.reshape(9 * c, -1).T
        dx = kernels.col2im3x3(np.ascontiguousarray(dcols2.reshape(b, h, wd, 9, c)))
    return grads


def embed(params: Parameters, image: LabeledImage | np.ndarray, dtype=None) -> np.ndarray:
    """Embedding of one image; a pure function of (params, image)."""
    dtype = params.dtype if dtype is None else np.dtype(dtype)
    x = stack_images([image], dtype=dtype)
    emb, _ = _forward(params, x, keep_cache=False)
    return emb[0]


def embed_batch(params: Parameters, images, dtype=None, batch_size: int = 128) -> np.ndarray:
    """Embeddings for a sequence of images, processed in chunks."""
    dtype = params.dtype if dtype is None else np.dtype(dtype)
    if len(images) == 0:
        return np.zeros((0, params.arch.embed_dim), dtype=dtype)
    out = []
    for start in range(0, len(images), batch_size):
        x = stack_images(images[start : start + batch_size], dtype=dtype)
        emb, _ = _forward(params, x, keep_cache=False)
        out.append(emb)
    return np.concatenate(out, axis=0)


def _split_rows(emb: np.ndarray, groups: int) -> list[np.ndarray]:
    b = emb.shape[0] // groups
    return [emb[g * b : (g + 1) * b] for g in range(groups)]


def tuple_batch_gradients(params: Parameters, tuples, loss_cfg: LossConfig, lam: float, dtype=np.float32):
    """Loss and averaged parameter gradients over a mini-batch of tuples.

    Works for quadruplet and triplet batches (homogeneous). Returns
    (per-tuple stats dict, gradient dict averaged over the batch).
    """
    if not tuples:
        raise ValueError("empty tuple batch")
    quad = isinstance(tuples[0], QuadrupletTuple)
    n_groups = 5 if quad else 4
    images = []
    if quad:
        for role in ("anchor", "positive", "negative1", "negative2", "anomaly"):
            images.extend(getattr(t, role) for t in tuples)
    else:
        for role in ("anchor", "positive", "negative", "anomaly"):
            images.extend(getattr(t, role) for t in tuples)

    x = stack_images(images, dtype=dtype)
    emb, cache_pack = _forward(params, x, keep_cache=True)
    if not np.all(np.isfinite(emb)):
        raise TrainingError("non-finite embedding in forward pass")
    groups = _split_rows(emb, n_groups)
    if quad:
        r = quadruplet_loss_batch(*groups, loss_cfg, lam)
    else:
        r = triplet_loss_batch(*groups, loss_cfg, lam)

    b = len(tuples)
    demb = np.concatenate([g / b for g in r["grads"]], axis=0).astype(dtype, copy=False)
    grads = _backward(params, cache_pack, demb)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for tensor {name}")
    return r, grads


def loss_gradients(
    params: Parameters,
    tup: QuadrupletTuple | TripletTuple,
    loss_cfg: LossConfig,
    lam: float,
    dtype=np.float64,
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Exact loss value and reverse-mode gradients for one tuple.

    Gradients flow through all shared-weight branches; hinge terms
    sitting exactly at their kink contribute zero.
    """
    r, grads = tuple_batch_gradients(params, [tup], loss_cfg, lam, dtype=dtype)
    if isinstance(tup, QuadrupletTuple):
        breakdown = LossBreakdown(
            total=float(r["total"][0]), term_n1=float(r["term_n1"][0]), term_n2=float(r["term_n2"][0]),
            term_anomaly=float(r["term_anomaly"][0]), d_p=float(r["d_p"][0]), d_n1=float(r["d_n1"][0]),
            d_n2=float(r["d_n2"][0]), d_ano=float(r["d_ano"][0]), lam=float(lam),
        )
    else:
        breakdown = LossBreakdown(
            total=float(r["total"][0]), term_n1=float(r["term_n1"][0]), term_n2=0.0,
            term_anomaly=float(r["term_anomaly"][0]), d_p=float(r["d_p"][0]), d_n1=float(r["d_n1"][0]),
            d_n2=float("nan"), d_ano=float(r["d_ano"][0]), lam=float(lam),
        )
    return breakdown, grads


def tuple_loss(params: Parameters, tup, loss_cfg: LossConfig, lam: float, dtype=np.float64) -> LossBreakdown:
    """Loss value only (no gradients); used by finite-difference checks."""
    if isinstance(tup, QuadrupletTuple):
        images = [tup.anchor, tup.positive, tup.negative1, tup.negative2, tup.anomaly]
        x = stack_images(images, dtype=dtype)
        emb, _ = _forward(params, x, keep_cache=False)
        return anomaly_quadruplet_loss(emb[0], emb[1], emb[2], emb[3], emb[4], loss_cfg, lam)
    images = [tup.anchor, tup.positive, tup.negative, tup.anomaly]
    x = stack_images(images, dtype=dtype)
    emb, _ = _forward(params, x, keep_cache=False)
    return anomaly_triplet_loss(emb[0], emb[1], emb[2], emb[3], loss_cfg, lam)
