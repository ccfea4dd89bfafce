"""Hinge losses over embedding distances, and the anomaly-weight ramp.

The quadruplet objective is

    max(d_p - d_n1 + m_alpha, 0) + max(d_p - d_n2 + m_beta, 0)
    + lambda * max(d_p - d_ano + m_c, 0)

where d_p, d_n1, d_n2 are anchor distances to the positive and the two
negatives, and d_ano is the distance from the anomaly embedding to the
centroid of the other four. The triplet baseline drops the second
negative term and measures its anomaly against the three-sample
centroid. lambda stays at 0 until the anomaly start epoch and then
ramps linearly, reaching exactly 1 at the last epoch, so clean-class
structure is learned before pseudo-occlusions are pushed away.

Batched variants return per-sample terms plus gradients with respect to
every embedding; the scalar entry points wrap them for a single tuple.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DISTANCE_METRICS = ("squared_euclidean", "euclidean")


@dataclass
class LossConfig:
    m_alpha: float = 1.0
    m_beta: float = 1.0
    m_c: float = 1.0
    distance: str = "squared_euclidean"
    # lambda ramp; kept in sync with the trainer's epoch budget.
    anomaly_start_epoch: int = 50
    total_epochs: int = 100
    ramp_shape: str = "linear"
    # Optional margin overrides for the triplet baseline; None reuses
    # m_alpha / m_c.
    triplet_m_alpha: float | None = None
    triplet_m_c: float | None = None

    def validate(self) -> None:
        if min(self.m_alpha, self.m_beta, self.m_c) < 0:
            raise ValueError("margins must be nonnegative")
        if self.distance not in DISTANCE_METRICS:
            raise ValueError(f"distance must be one of {DISTANCE_METRICS}, got {self.distance!r}")
        if not 0 < self.total_epochs:
            raise ValueError("total_epochs must be positive")
        if not 0 < self.anomaly_start_epoch < self.total_epochs:
            raise ValueError("anomaly_start_epoch must satisfy 0 < start < total_epochs")
        if self.ramp_shape != "linear":
            raise ValueError(f"unsupported ramp shape {self.ramp_shape!r}")

    def margins_for(self, mode: str) -> tuple[float, float, float]:
        if mode == "triplet":
            ma = self.m_alpha if self.triplet_m_alpha is None else self.triplet_m_alpha
            mc = self.m_c if self.triplet_m_c is None else self.triplet_m_c
            return ma, self.m_beta, mc
        return self.m_alpha, self.m_beta, self.m_c


@dataclass
class LossBreakdown:
    """One tuple's loss with its raw ingredients.

    total == term_n1 + term_n2 + lam * term_anomaly; terms are the
    unweighted hinge values. Triplet breakdowns set term_n2 = 0 and
    d_n2 = nan.
    """

    total: float
    term_n1: float
    term_n2: float
    term_anomaly: float
    d_p: float
    d_n1: float
    d_n2: float
    d_ano: float
    lam: float


def pairwise_distance(u: np.ndarray, v: np.ndarray, metric: str = "squared_euclidean") -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    if metric not in DISTANCE_METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    sq = float(np.sum((u - v) ** 2))
    return sq if metric == "squared_euclidean" else math.sqrt(sq)


def centroid(vectors) -> np.ndarray:
    vectors = [np.asarray(v, dtype=np.float64) for v in vectors]
    if not vectors:
        raise ValueError("centroid of an empty list")
    dims = {v.shape for v in vectors}
    if len(dims) != 1:
        raise ValueError(f"mixed vector lengths: {sorted(dims)}")
    return np.mean(np.stack(vectors), axis=0)


def lambda_schedule(epoch: int, cfg: LossConfig) -> float:
    """Anomaly weight for a 1-indexed epoch in 1..total_epochs."""
    cfg.validate()
    if not 1 <= epoch <= cfg.total_epochs:
        raise ValueError(f"epoch must be in 1..{cfg.total_epochs}, got {epoch}")
    if epoch < cfg.anomaly_start_epoch:
        return 0.0
    return (epoch - cfg.anomaly_start_epoch) / (cfg.total_epochs - cfg.anomaly_start_epoch)


def _dist_batch(u, v, metric):
    """Distances (B,) and d(dist)/du (B,D) for row-paired embeddings."""
    diff = u - v
    sq = np.sum(diff * diff, axis=1)
    if metric == "squared_euclidean":
        return sq, 2.0 * diff
    d = np.sqrt(sq)
    safe = np.where(d > 0, d, 1.0)
    grad = diff / safe[:, None]
    grad[d == 0] = 0.0
    return d, grad


def quadruplet_loss_batch(ea, ep, en1, en2, eano, cfg: LossConfig, lam: float, mode: str = "quadruplet"):
    """Vectorized loss and embedding gradients for B quadruplet tuples.

    Returns a dict with per-sample distances, hinge terms, totals, and
    gradients (d total / d embedding) for each of the five roles. Hinge
    subgradients at exactly zero are zero.
    """
    cfg.validate()
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be within [0, 1], got {lam}")
    ea, ep, en1, en2, eano = (np.asarray(e) for e in (ea, ep, en1, en2, eano))
    for name, e in (("anchor", ea), ("positive", ep), ("negative1", en1), ("negative2", en2), ("anomaly", eano)):
        if e.shape != ea.shape:
            raise ValueError(f"{name} embeddings have shape {e.shape}, expected {ea.shape}")
        if not np.all(np.isfinite(e)):
            raise ValueError(f"non-finite values in {name} embeddings")
    m_alpha, m_beta, m_c = cfg.margins_for(mode)

    d_p, g_p = _dist_batch(ea, ep, cfg.distance)
    d_n1, g_n1 = _dist_batch(ea, en1, cfg.distance)
    d_n2, g_n2 = _dist_batch(ea, en2, cfg.distance)
    g = (ea + ep + en1 + en2) / 4.0
    d_ano, g_ano = _dist_batch(eano, g, cfg.distance)

    arg1 = d_p - d_n1 + m_alpha
    arg2 = d_p - d_n2 + m_beta
    arg3 = d_p - d_ano + m_c
    t1 = np.maximum(arg1, 0.0)
    t2 = np.maximum(arg2, 0.0)
    t3 = np.maximum(arg3, 0.0)
    total = t1 + t2 + lam * t3

    a1 = (arg1 > 0).astype(ea.dtype)[:, None]
    a2 = (arg2 > 0).astype(ea.dtype)[:, None]
    a3 = (arg3 > 0).astype(ea.dtype)[:, None] * ea.dtype.type(lam)

    # d(d_ano)/d(centroid) = -g_ano; each of the four samples feeds the
    # centroid with weight 1/4.
    gc = -0.25 * g_ano
    d_ea = a1 * (g_p - g_n1) + a2 * (g_p - g_n2) + a3 * (g_p - gc)
    d_ep = a1 * (-g_p) + a2 * (-g_p) + a3 * (-g_p - gc)
    d_en1 = a1 * g_n1 + a3 * (-gc)
    d_en2 = a2 * g_n2 + a3 * (-gc)
    d_eano = a3 * (-g_ano)

    return {
        "d_p": d_p, "d_n1": d_n1, "d_n2": d_n2, "d_ano": d_ano,
        "term_n1": t1, "term_n2": t2, "term_anomaly": t3, "total": total,
        "grads": (d_ea, d_ep, d_en1, d_en2, d_eano),
    }


def triplet_loss_batch(ea, ep, en, eano, cfg: LossConfig, lam: float):
    """Vectorized baseline loss: one negative hinge plus the anomaly
    hinge against the three-sample centroid."""
    cfg.validate()
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be within [0, 1], got {lam}")
    ea, ep, en, eano = (np.asarray(e) for e in (ea, ep, en, eano))
    for name, e in (("anchor", ea), ("positive", ep), ("negative", en), ("anomaly", eano)):
        if e.shape != ea.shape:
            raise ValueError(f"{name} embeddings have shape {e.shape}, expected {ea.shape}")
        if not np.all(np.isfinite(e)):
            raise ValueError(f"non-finite values in {name} embeddings")
    m_alpha, _m_beta, m_c = cfg.margins_for("triplet")

    d_p, g_p = _dist_batch(ea, ep, cfg.distance)
    d_n, g_n = _dist_batch(ea, en, cfg.distance)
    g = (ea + ep + en) / 3.0
    d_ano, g_ano = _dist_batch(eano, g, cfg.distance)

    arg1 = d_p - d_n + m_alpha
    arg3 = d_p - d_ano + m_c
    t1 = np.maximum(arg1, 0.0)
    t3 = np.maximum(arg3, 0.0)
    total = t1 + lam * t3

    a1 = (arg1 > 0).astype(ea.dtype)[:, None]
    a3 = (arg3 > 0).astype(ea.dtype)[:, None] * ea.dtype.type(lam)
    gc = -g_ano / 3.0
    d_ea = a1 * (g_p - g_n) + a3 * (g_p - gc)
    d_ep = a1 * (-g_p) + a3 * (-g_p - gc)
    d_en = a1 * g_n + a3 * (-gc)
    d_eano = a3 * (-g_ano)

    return {
        "d_p": d_p, "d_n1": d_n, "d_ano": d_ano,
        "term_n1": t1, "term_anomaly": t3, "total": total,
        "grads": (d_ea, d_ep, d_en, d_eano),
    }


def anomaly_quadruplet_loss(e_a, e_p, e_n1, e_n2, e_ano, cfg: LossConfig, lam: float) -> LossBreakdown:
    rows = [np.asarray(e, dtype=np.float64)[None, :] for e in (e_a, e_p, e_n1, e_n2, e_ano)]
    r = quadruplet_loss_batch(*rows, cfg, lam)
    return LossBreakdown(
        total=float(r["total"][0]),
        term_n1=float(r["term_n1"][0]),
        term_n2=float(r["term_n2"][0]),
        term_anomaly=float(r["term_anomaly"][0]),
        d_p=float(r["d_p"][0]),
        d_n1=float(r["d_n1"][0]),
        d_n2=float(r["d_n2"][0]),
        d_ano=float(r["d_ano"][0]),
        lam=float(lam),
    )


def anomaly_triplet_loss(e_a, e_p, e_n, e_ano, cfg: LossConfig, lam: float) -> LossBreakdown:
    rows = [np.asarray(e, dtype=np.float64)[None, :] for e in (e_a, e_p, e_n, e_ano)]
    r = triplet_loss_batch(*rows, cfg, lam)
    return LossBreakdown(
        total=float(r["total"][0]),
        term_n1=float(r["term_n1"][0]),
        term_n2=0.0,
        term_anomaly=float(r["term_anomaly"][0]),
        d_p=float(r["d_p"][0]),
        d_n1=float(r["d_n1"][0]),
        d_n2=float("nan"),
        d_ano=float(r["d_ano"][0]),
        lam=float(lam),
    )
