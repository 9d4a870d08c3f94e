"""Clustering feature space: pooled ego embeddings plus weighted difficulty.

The per-scenario embedding is the encoder's ego row mean-pooled over time,
taken from an unmasked pass.  For clustering, embeddings are standardized
per dimension and the difficulty score, already in [0,1], is appended
scaled by a weight knob: weight 0 recovers similarity-only clustering,
weight 1 gives difficulty the pull of one embedding dimension.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import mae
from .autodiff import Tensor, no_grad
from .binio import MAGIC_EMBEDDINGS, Reader, Writer
from .mae import EncoderConfig
from .scene import Scenario

EMBEDDING_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ScenarioRecord:
    """Everything the samplers and the evaluator know about one scenario.

    The label is ground truth for evaluation only; samplers must not read it.
    """

    scenario_id: str
    z: np.ndarray
    d: float
    label: int
    cluster: int | None = None

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        if z.ndim != 1 or not np.all(np.isfinite(z)):
            raise ValueError(
                f"embedding for {self.scenario_id!r} must be a finite vector"
            )
        object.__setattr__(self, "z", z)
        if not 0.0 <= self.d <= 1.0:
            raise ValueError(f"difficulty must lie in [0, 1], got {self.d}")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


def ego_pool(emb: mae.Embeddings) -> np.ndarray:
    """[B, D] mean of the ego row over time."""
    return np.asarray(emb.z_v.data[:, 0].mean(axis=1))


def ego_embedding(
    scenario: Scenario, params: dict[str, Tensor], encoder: EncoderConfig
) -> np.ndarray:
    """[D] pooled ego embedding from one unmasked encoder pass."""
    return embed_corpus([scenario], params, encoder, batch=1)[0]


def embed_corpus(
    scenarios: list[Scenario],
    params: dict[str, Tensor],
    encoder: EncoderConfig,
    batch: int = 32,
) -> np.ndarray:
    """[N, D] pooled ego embeddings, batched."""
    if not scenarios:
        raise ValueError("no scenarios to embed")
    dims = scenarios[0].dims
    out = []
    for start in range(0, len(scenarios), batch):
        chunk = scenarios[start : start + batch]
        arrays = mae.batch_scenarios(chunk)
        masks = mae.batch_masks([mae.no_masks(dims) for _ in chunk])
        with no_grad():
            emb = mae.encode_arrays(arrays, masks, params, encoder)
        out.append(ego_pool(emb))
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# Standardization and the clustering feature
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureStats:
    """Per-dimension corpus mean and std; zero stds are replaced by 1."""

    mean: np.ndarray
    std: np.ndarray
    degenerate: tuple[int, ...] = field(default=())


def compute_stats(rows: np.ndarray) -> FeatureStats:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ValueError(f"need an [N, D] matrix of embeddings, got {rows.shape}")
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    degenerate = tuple(int(i) for i in np.flatnonzero(std == 0.0))
    if degenerate:
        warnings.warn(
            f"constant embedding dimensions {list(degenerate)}; std set to 1",
            RuntimeWarning,
            stacklevel=2,
        )
        std = std.copy()
        std[list(degenerate)] = 1.0
    return FeatureStats(mean, std, degenerate)


def dice_feature(
    z: np.ndarray, d: float, stats: FeatureStats, weight: float = 1.0
) -> np.ndarray:
    """[D+1] standardized embedding with the weighted difficulty appended."""
    z = np.asarray(z, dtype=np.float64)
    return np.concatenate([(z - stats.mean) / stats.std, [d * weight]])


def dice_features(
    rows: np.ndarray, d: np.ndarray, stats: FeatureStats, weight: float = 1.0
) -> np.ndarray:
    """[N, D+1] batch version of dice_feature."""
    rows = np.asarray(rows, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if d.shape != (rows.shape[0],):
        raise ValueError(f"need one difficulty per row, got {d.shape}")
    scaled = (rows - stats.mean) / stats.std
    return np.concatenate([scaled, (d * weight)[:, None]], axis=1)


# ---------------------------------------------------------------------------
# Embedding file
# ---------------------------------------------------------------------------


def write_embeddings(path, ids, rows: np.ndarray, meta: dict | None = None) -> None:
    rows = np.asarray(rows, dtype=np.float32)
    ids = list(ids)
    if rows.ndim != 2 or rows.shape[0] != len(ids):
        raise ValueError(
            f"need one id per row: {len(ids)} ids vs rows {rows.shape}"
        )
    with open(path, "wb") as f:
        w = Writer(f, str(path))
        w.raw(MAGIC_EMBEDDINGS)
        w.u32(EMBEDDING_FORMAT_VERSION)
        w.u32(rows.shape[0])
        w.u32(rows.shape[1])
        w.json_blob(meta)
        w.f32_array(rows)
        for sid in ids:
            w.str16(sid)


def read_embeddings(path) -> tuple[list[str], np.ndarray, dict]:
    with open(path, "rb") as f:
        r = Reader(f, str(path))
        r.expect_magic(MAGIC_EMBEDDINGS, "embedding file")
        r.expect_version(EMBEDDING_FORMAT_VERSION, "embedding file")
        count = r.u32("embedding count")
        width = r.u32("embedding width")
        meta = r.json_blob("header metadata")
        rows = r.f32_array((count, width), "embedding rows")
        ids = [r.str16(f"scenario id {i}") for i in range(count)]
    return ids, rows, meta


def build_records(ids, rows: np.ndarray, d: np.ndarray, labels) -> list[ScenarioRecord]:
    """Zip parallel arrays into records; lengths must agree."""
    ids = list(ids)
    rows = np.asarray(rows)
    d = np.asarray(d, dtype=np.float64)
    labels = np.asarray(labels)
    if not (len(ids) == rows.shape[0] == d.shape[0] == labels.shape[0]):
        raise ValueError(
            f"length mismatch: {len(ids)} ids, {rows.shape[0]} rows, "
            f"{d.shape[0]} difficulties, {labels.shape[0]} labels"
        )
    return [
        ScenarioRecord(sid, rows[i], float(d[i]), int(labels[i]))
        for i, sid in enumerate(ids)
    ]
