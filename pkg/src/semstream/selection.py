"""Similarity-based token importance scoring and drop-mask construction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import TokenMatrix

# Proactive dropping is capped below the 0.30 loss tolerance to reserve
# headroom for network loss.
DROP_RATE_CAP = 0.25
LOSS_TOLERANCE = 0.30


@dataclass(frozen=True)
class SimilarityMap:
    """Per-location cosine similarity between P and I token vectors."""

    values: np.ndarray
    gop_id: int = 0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"similarity map must be 2-D, got shape {values.shape}")
        if values.size and (values.min() < -1.0 - 1e-9 or values.max() > 1.0 + 1e-9):
            raise ValueError("similarity values must lie in [-1, 1]")
        object.__setattr__(self, "values", np.clip(values, -1.0, 1.0))


def token_similarity(p: TokenMatrix, i: TokenMatrix) -> SimilarityMap:
    """Cosine similarity of co-located token vectors.

    Zero-norm conventions: both vectors zero -> 1 (maximally redundant),
    exactly one zero -> 0.
    """
    if p.kind != "P" or i.kind != "I":
        raise ValueError(f"expected (P, I) token matrices, got ({p.kind}, {i.kind})")
    if p.values.shape != i.values.shape:
        raise ValueError(f"shape mismatch: {p.values.shape} vs {i.values.shape}")
    pv, iv = p.values, i.values
    dot = np.sum(pv * iv, axis=-1)
    pn = np.linalg.norm(pv, axis=-1)
    inorm = np.linalg.norm(iv, axis=-1)
    denom = pn * inorm
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = np.where(denom > 0.0, dot / np.where(denom > 0.0, denom, 1.0), 0.0)
    both_zero = (pn == 0.0) & (inorm == 0.0)
    sim = np.where(both_zero, 1.0, sim)
    return SimilarityMap(np.clip(sim, -1.0, 1.0), gop_id=p.gop_id)


def top_k_drop_mask(sim: SimilarityMap, k: int) -> np.ndarray:
    """Boolean mask (True = drop) marking the k highest-similarity positions,
    ties broken by row-major order."""
    h, w = sim.values.shape
    total = h * w
    if not 0 <= k <= total:
        raise ValueError(f"k must be in [0, {total}], got {k}")
    mask = np.zeros(total, dtype=bool)
    if k:
        # Stable sort on negated similarity keeps row-major order among ties.
        order = np.argsort(-sim.values.ravel(), kind="stable")
        mask[order[:k]] = True
    return mask.reshape(h, w)


def build_drop_mask(sim: SimilarityMap, drop_rate: float) -> np.ndarray:
    """Drop mask for a target drop rate in [0, 0.30]; exactly
    round(drop_rate * H' * W') positions are marked, highest similarity first."""
    if drop_rate < 0.0:
        raise ValueError(f"drop rate must be non-negative, got {drop_rate}")
    if drop_rate > LOSS_TOLERANCE:
        raise ValueError(
            f"drop rate {drop_rate} exceeds the {LOSS_TOLERANCE} tolerance envelope")
    k = int(np.floor(drop_rate * sim.values.size + 0.5))
    return top_k_drop_mask(sim, k)


def drop_rate_for_bandwidth(b_avail: float, r_full: float) -> float:
    """Linear shortfall mapping clamp(1 - b/r_full, 0, 0.25); the cap keeps
    proactive dropping inside the tolerated envelope."""
    if r_full <= 0.0:
        raise ValueError(f"full-stream rate must be positive, got {r_full}")
    return float(np.clip(1.0 - b_avail / r_full, 0.0, DROP_RATE_CAP))
