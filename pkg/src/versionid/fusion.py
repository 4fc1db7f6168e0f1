"""Late fusion of per-feature embeddings.

Embeddings are concatenated in a fixed global order (Me, Ha, Rh, Ly) and
L2-renormalized; because every part is unit-norm the renormalization is an
exact division by sqrt(n).  The distance between two such concatenations
equals the quadratic mean of the per-feature distances, which lets subset
lookups run on per-feature distances alone (zero-masking the rest).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fileformats import FEATURE_KINDS

UNIT_NORM_TOL = 1e-4


@dataclass
class FusedEmbedding:
    """Ordered map of feature kind -> unit-norm embedding vector."""

    parts: dict = field(default_factory=dict)

    def __post_init__(self):
        ordered = {}
        for kind in FEATURE_KINDS:
            if kind in self.parts:
                vec = np.asarray(self.parts[kind], dtype=np.float64)
                norm = np.linalg.norm(vec)
                if abs(norm - 1.0) > 1e-6:
                    raise ValueError(
                        f"{kind} part is not unit norm (|v| = {norm:.8f})"
                    )
                ordered[kind] = vec
        unknown = set(self.parts) - set(FEATURE_KINDS)
        if unknown:
            raise ValueError(f"unknown feature kinds: {sorted(unknown)}")
        self.parts = ordered

    @property
    def present(self):
        return tuple(self.parts)


def normalize_mask(mask) -> tuple:
    """Canonicalize a feature subset (e.g. 'me,ly' or ['Ly','Me'])."""
    if isinstance(mask, str):
        items = [m for m in mask.replace("+", ",").split(",") if m]
    else:
        items = list(mask)
    kinds = set()
    for item in items:
        key = item.strip().capitalize()
        if key not in FEATURE_KINDS:
            raise ValueError(f"unknown feature kind {item!r}")
        kinds.add(key)
    if not kinds:
        raise ValueError("mask must name at least one feature")
    return tuple(k for k in FEATURE_KINDS if k in kinds)


def concat_normalize(parts) -> np.ndarray:
    """Concatenate unit-norm embeddings and renormalize (divide by sqrt(n))."""
    parts = [np.asarray(p, dtype=np.float64) for p in parts]
    if not parts:
        raise ValueError("need at least one embedding part")
    for i, p in enumerate(parts):
        norm = np.linalg.norm(p)
        if abs(norm - 1.0) > UNIT_NORM_TOL:
            raise ValueError(f"part {i} is not unit norm (|v| = {norm:.6f})")
    return np.concatenate(parts) / np.sqrt(len(parts))


def per_feature_distances(a: FusedEmbedding, b: FusedEmbedding, mask) -> np.ndarray:
    """Euclidean distance per masked feature, each in [0, 2]."""
    kinds = normalize_mask(mask)
    for kind in kinds:
        if kind not in a.parts or kind not in b.parts:
            raise ValueError(f"feature {kind} missing from one of the embeddings")
    return np.array(
        [np.linalg.norm(a.parts[k] - b.parts[k]) for k in kinds], dtype=np.float64
    )


def fused_distance(a: FusedEmbedding, b: FusedEmbedding, mask) -> float:
    """Quadratic mean of the per-feature distances over the mask.

    Identical to the Euclidean distance between the masked, renormalized
    concatenations of the two embeddings.
    """
    d = per_feature_distances(a, b, mask)
    return float(np.sqrt(np.mean(d**2)))
