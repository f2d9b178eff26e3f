"""Observation encoders: the inventory/mainhand feature vector and frame scaling.

Vector layout (187 entries, see ``docs/encoding.md``)::

    [0:4]      one-hot mainhand: none, wooden_pickaxe, stone_pickaxe, iron_pickaxe
    [4:184]    multi-hot blocks, one per item in MULTI_HOT_ITEMS order;
               an item with count k sets the first min(k, size) entries of its block
    [184:187]  dirt, cobblestone, stone as count / mean-count-over-expert-data

Cobblestone appears both as a multi-hot block and as a float entry.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Union

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

logger = logging.getLogger(__name__)

MAINHAND_ITEMS = ("none", "wooden_pickaxe", "stone_pickaxe", "iron_pickaxe")
MULTI_HOT_ITEMS = (
    ("coal", 16),
    ("crafting_table", 3),
    ("furnace", 3),
    ("cobblestone", 16),
    ("iron_ingot", 8),
    ("iron_ore", 8),
    ("iron_pickaxe", 3),
    ("log", 3),
    ("planks", 64),
    ("stick", 32),
    ("stone_pickaxe", 4),
    ("torch", 16),
    ("wooden_pickaxe", 4),
)
FLOAT_ITEMS = ("dirt", "cobblestone", "stone")


def _block_offsets():
    offsets = {}
    start = len(MAINHAND_ITEMS)
    for name, size in MULTI_HOT_ITEMS:
        offsets[name] = (start, start + size)
        start += size
    return offsets, start


BLOCK_SLICES, FLOAT_START = _block_offsets()
VECTOR_DIM = FLOAT_START + len(FLOAT_ITEMS)
KNOWN_ITEMS = frozenset(BLOCK_SLICES) | frozenset(FLOAT_ITEMS)
FRAME_SHAPE = (64, 64, 3)


@dataclass
class NormStats:
    """Mean inventory count of each float-encoded item over the expert data."""

    means: Dict[str, float] = field(default_factory=lambda: {k: 1.0 for k in FLOAT_ITEMS})

    def __post_init__(self):
        missing = set(FLOAT_ITEMS) - set(self.means)
        if missing:
            raise ValueError(f"NormStats missing items {sorted(missing)}")
        for k, v in self.means.items():
            if not v > 0:
                raise ValueError(f"NormStats mean for {k} must be positive, got {v}")

    def as_array(self) -> np.ndarray:
        return np.array([self.means[k] for k in FLOAT_ITEMS], dtype=np.float32)

    def to_json(self) -> str:
        return json.dumps({"means": {k: float(self.means[k]) for k in FLOAT_ITEMS}}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NormStats":
        return cls(means={k: float(v) for k, v in json.loads(text)["means"].items()})


def encode_vector(
    inventory: Mapping[str, int], mainhand: str, stats: Optional[NormStats] = None
) -> np.ndarray:
    """Encode inventory and held item into the 187-dim feature vector.

    With ``stats=None`` the float entries hold raw counts; this is what
    CraftWorld emits and what gets stored on disk.
    """
    vec = np.zeros(VECTOR_DIM, dtype=np.float32)
    if mainhand not in MAINHAND_ITEMS:
        raise ValueError(f"unknown mainhand item {mainhand!r}")
    vec[MAINHAND_ITEMS.index(mainhand)] = 1.0
    for item, count in inventory.items():
        if count < 0:
            raise ValueError(f"negative count for {item}: {count}")
        if item not in KNOWN_ITEMS:
            logger.warning("ignoring unknown inventory item %r", item)
            continue
        if item in BLOCK_SLICES:
            lo, hi = BLOCK_SLICES[item]
            vec[lo : lo + min(int(count), hi - lo)] = 1.0
    means = stats.as_array() if stats is not None else np.ones(len(FLOAT_ITEMS), dtype=np.float32)
    for i, item in enumerate(FLOAT_ITEMS):
        vec[FLOAT_START + i] = inventory.get(item, 0) / means[i]
    return vec


def compute_norm_stats(vectors: Union[np.ndarray, Iterable[np.ndarray]]) -> NormStats:
    """Mean raw count of each float item over all given states, floored at 1.0.

    ``vectors`` holds raw-count encodings (``stats=None``), either one
    ``(T, 187)`` array or an iterable of them.
    """
    if isinstance(vectors, np.ndarray):
        vectors = [vectors]
    total = np.zeros(len(FLOAT_ITEMS), dtype=np.float64)
    n = 0
    for block in vectors:
        block = np.asarray(block, dtype=np.float64).reshape(-1, VECTOR_DIM)
        total += block[:, FLOAT_START:].sum(axis=0)
        n += block.shape[0]
    if n == 0:
        raise ValueError("cannot compute normalization statistics from zero states")
    means = np.maximum(total / n, 1.0)
    return NormStats(means={k: float(m) for k, m in zip(FLOAT_ITEMS, means)})


def encode_frame(frame: np.ndarray) -> np.ndarray:
    """Scale uint8 HWC frame(s) to float32 CHW in [0, 1]."""
    frame = np.asarray(frame)
    if frame.shape[-3:] != FRAME_SHAPE:
        raise ValueError(f"expected frame(s) of shape {FRAME_SHAPE}, got {frame.shape}")
    out = frame.astype(np.float32) / 255.0
    return np.moveaxis(out, -1, -3)


class InventoryEncoder(TransformerMixin, BaseEstimator):
    """Normalize stored raw-count vectors with statistics fitted on expert data.

    ``fit`` learns :class:`NormStats` (``norm_stats_``); ``transform`` divides the
    float block by the fitted means and leaves the one-hot/multi-hot part alone.
    """

    def __init__(self, floor: float = 1.0):
        self.floor = floor

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float32)
        if X.shape[1] != VECTOR_DIM:
            raise ValueError(f"expected {VECTOR_DIM} features, got {X.shape[1]}")
        means = np.maximum(X[:, FLOAT_START:].astype(np.float64).mean(axis=0), self.floor)
        self.norm_stats_ = NormStats(means={k: float(m) for k, m in zip(FLOAT_ITEMS, means)})
        self.n_features_in_ = VECTOR_DIM
        return self

    def transform(self, X):
        check_is_fitted(self, "norm_stats_")
        X = check_array(X, dtype=np.float32, copy=True)
        if X.shape[1] != VECTOR_DIM:
            raise ValueError(f"expected {VECTOR_DIM} features, got {X.shape[1]}")
        X[:, FLOAT_START:] /= self.norm_stats_.as_array()
        return X

    @classmethod
    def from_stats(cls, stats: NormStats) -> "InventoryEncoder":
        enc = cls()
        enc.norm_stats_ = stats
        enc.n_features_in_ = VECTOR_DIM
        return enc
