"""k-means clustering and the four samplers, all without replacement.

Cluster-based samplers share one loop: draw a cluster (uniformly or by
importance weight), skip it if exhausted, otherwise remove a uniformly
chosen member.  The draw itself runs in a kernel fed with pre-drawn
uniforms so both backends consume the stream identically.  Importance
weights follow K_0 + mean(difficulty) per cluster, so the spread between
the hottest and coldest cluster never exceeds (K_0 + 1)/K_0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import kernels
from .binio import MAGIC_CENTROIDS, Reader, Writer
from .embedding import ScenarioRecord

CENTROID_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Clustering:
    """Cluster index per input row, plus the centroids that produced it."""

    centroids: np.ndarray
    labels: np.ndarray
    ids: tuple[str, ...] | None = None

    def __post_init__(self):
        centroids = np.asarray(self.centroids, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if centroids.ndim != 2 or not np.all(np.isfinite(centroids)):
            raise ValueError("centroids must be a finite [M, width] matrix")
        if labels.ndim != 1:
            raise ValueError(f"labels must be one index per row, got {labels.shape}")
        m = centroids.shape[0]
        if labels.size and (labels.min() < 0 or labels.max() >= m):
            raise ValueError(f"labels must lie in [0, {m}), got "
                             f"[{labels.min()}, {labels.max()}]")
        if self.ids is not None and len(self.ids) != labels.size:
            raise ValueError(
                f"{len(self.ids)} ids for {labels.size} labeled rows"
            )
        object.__setattr__(self, "centroids", centroids)
        object.__setattr__(self, "labels", labels)

    @property
    def m(self) -> int:
        return self.centroids.shape[0]

    @property
    def n(self) -> int:
        return self.labels.size

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.m)

    def members(self) -> tuple[np.ndarray, ...]:
        return tuple(np.flatnonzero(self.labels == j) for j in range(self.m))

    def assignments_by_id(self) -> dict[str, int]:
        if self.ids is None:
            raise ValueError("clustering carries no record ids")
        return {sid: int(c) for sid, c in zip(self.ids, self.labels)}


def _kmeans_pp(points: np.ndarray, m: int, rng) -> np.ndarray:
    """k-means++ seeding; shared plain-numpy path for both backends."""
    n = points.shape[0]
    chosen = np.empty((m, points.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    chosen[0] = points[first]
    d2 = ((points - chosen[0]) ** 2).sum(axis=1)
    for i in range(1, m):
        total = d2.sum()
        if total > 0.0:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            idx = min(idx, n - 1)
        else:
            # every remaining point sits on a centroid already
            idx = int(rng.integers(n))
        chosen[i] = points[idx]
        d2 = np.minimum(d2, ((points - chosen[i]) ** 2).sum(axis=1))
    return chosen


def kmeans(points, m: int, seed, ids=None, max_iter: int = 100) -> Clustering:
    """k-means++ seeding plus Lloyd iterations to an assignment fixpoint.

    Deterministic per seed; empty clusters are repaired inside the kernel by
    stealing the farthest member of the largest cluster, so every returned
    cluster is non-empty.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"points must be [N, width], got {points.shape}")
    if not np.all(np.isfinite(points)):
        raise ValueError("points must be finite")
    n = points.shape[0]
    if m < 1 or m > n:
        raise ValueError(f"cannot split {n} points into {m} clusters")
    rng = np.random.default_rng(seed)
    init = _kmeans_pp(points, m, rng)
    labels, centroids, _ = kernels.lloyd(points, init, max_iter)
    return Clustering(
        centroids=centroids,
        labels=labels,
        ids=None if ids is None else tuple(ids),
    )


# ---------------------------------------------------------------------------
# Importance weights
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ImportanceWeights:
    """Per-cluster sampling weights, each inside [K_0, K_0 + 1]."""

    w: np.ndarray
    k0: float

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if not self.k0 > 0.0:
            raise ValueError(f"K_0 must be positive, got {self.k0}")
        if w.ndim != 1 or not np.all(np.isfinite(w)):
            raise ValueError("weights must be a finite vector")
        if np.any(w < self.k0) or np.any(w > self.k0 + 1.0):
            raise ValueError(
                f"weights must lie in [K_0, K_0 + 1] = "
                f"[{self.k0}, {self.k0 + 1.0}]"
            )
        object.__setattr__(self, "w", w)


def score_importance(
    clustering: Clustering,
    difficulties,
    k0: float,
    percentile: float | None = None,
) -> ImportanceWeights:
    """K_0 plus the mean (or a percentile) of each cluster's difficulties.

    An empty cluster scores bare K_0.
    """
    if not k0 > 0.0:
        raise ValueError(f"K_0 must be positive, got {k0}")
    d = np.asarray(difficulties, dtype=np.float64)
    if d.shape != (clustering.n,):
        raise ValueError(
            f"need one difficulty per clustered row, got {d.shape} for "
            f"{clustering.n} rows"
        )
    if d.size and (d.min() < 0.0 or d.max() > 1.0):
        raise ValueError("difficulties must lie in [0, 1]")
    if percentile is not None and not 0.0 <= percentile <= 100.0:
        raise ValueError(f"percentile must lie in [0, 100], got {percentile}")
    w = np.full(clustering.m, float(k0))
    for j, members in enumerate(clustering.members()):
        if members.size == 0:
            continue
        pooled = (
            d[members].mean()
            if percentile is None
            else np.percentile(d[members], percentile)
        )
        w[j] += pooled
    return ImportanceWeights(w, float(k0))


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SampleSet:
    """Selection order matters; ids never repeat."""

    ids: tuple[str, ...]
    budget: int

    def __post_init__(self):
        if self.budget < 0:
            raise ValueError(f"budget must be >= 0, got {self.budget}")
        if len(self.ids) > self.budget:
            raise ValueError(
                f"{len(self.ids)} selections exceed budget {self.budget}"
            )
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("sample contains duplicate ids")
        object.__setattr__(self, "ids", tuple(self.ids))


def _draw_from_clusters(
    clustering: Clustering, weights: np.ndarray, budget: int, rng
) -> SampleSet:
    if clustering.ids is None:
        raise ValueError("clustering carries no record ids")
    if budget < 0:
        raise ValueError(f"budget must be >= 0, got {budget}")
    labels = clustering.labels
    m = clustering.m
    order = np.argsort(labels, kind="stable").astype(np.int64)
    sizes = np.bincount(labels, minlength=m).astype(np.int64)
    offsets = np.zeros(m, dtype=np.int64)
    np.cumsum(sizes[:-1], out=offsets[1:])
    cumw = np.cumsum(np.asarray(weights, dtype=np.float64))
    take = min(budget, labels.size)
    out = np.empty(take, dtype=np.int64)
    members = order.copy()
    picked = 0
    while picked < take:
        uniforms = rng.random(max(64, 4 * (take - picked)))
        picked, _ = kernels.draw_clustered(
            members, sizes, offsets, cumw, uniforms, out, picked
        )
    return SampleSet(tuple(clustering.ids[i] for i in out), budget)


def sample_uniform_clusters(clustering: Clustering, budget: int, rng) -> SampleSet:
    """Round-robin in expectation: clusters drawn uniformly, members removed."""
    rng = np.random.default_rng(rng)
    return _draw_from_clusters(clustering, np.ones(clustering.m), budget, rng)


def sample_dice(
    clustering: Clustering, weights: ImportanceWeights, budget: int, rng
) -> SampleSet:
    """Clusters drawn proportionally to their importance weights."""
    rng = np.random.default_rng(rng)
    if weights.w.shape != (clustering.m,):
        raise ValueError(
            f"{weights.w.shape[0]} weights for {clustering.m} clusters"
        )
    return _draw_from_clusters(clustering, weights.w, budget, rng)


def sample_top_difficulty(records: list[ScenarioRecord], budget: int) -> SampleSet:
    """The budget highest difficulties; ties break by id ascending."""
    if budget < 0:
        raise ValueError(f"budget must be >= 0, got {budget}")
    ranked = sorted(records, key=lambda r: (-r.d, r.scenario_id))
    take = min(budget, len(ranked))
    return SampleSet(tuple(r.scenario_id for r in ranked[:take]), budget)


def sample_random(records: list[ScenarioRecord], budget: int, rng) -> SampleSet:
    """Uniform without replacement over the whole corpus."""
    if budget < 0:
        raise ValueError(f"budget must be >= 0, got {budget}")
    rng = np.random.default_rng(rng)
    take = min(budget, len(records))
    picked = rng.permutation(len(records))[:take]
    return SampleSet(tuple(records[i].scenario_id for i in picked), budget)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def write_samples(path, sample: SampleSet, clusters, difficulties) -> None:
    """CSV of (rank, scenario id, cluster id, difficulty) in selection order."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("rank", "scenario_id", "cluster", "difficulty"))
        for rank, (sid, c, d) in enumerate(
            zip(sample.ids, clusters, difficulties, strict=True)
        ):
            w.writerow((rank, sid, int(c), float(d)))


def read_samples(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    """(ids, clusters, difficulties) in selection order."""
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if tuple(header) != ("rank", "scenario_id", "cluster", "difficulty"):
            raise ValueError(f"unexpected sample columns {header}")
        ids = []
        clusters = []
        diffs = []
        for i, row in enumerate(r):
            if int(row[0]) != i:
                raise ValueError(f"sample ranks out of order at line {i + 2}")
            ids.append(row[1])
            clusters.append(int(row[2]))
            diffs.append(float(row[3]))
    return ids, np.array(clusters, dtype=np.int64), np.array(diffs)


def write_clustering(csv_path, centroid_path, clustering: Clustering) -> None:
    """Assignments as CSV plus centroids in the binary table format."""
    if clustering.ids is None:
        raise ValueError("clustering carries no record ids")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("scenario_id", "cluster"))
        for sid, c in zip(clustering.ids, clustering.labels):
            w.writerow((sid, int(c)))
    with open(centroid_path, "wb") as f:
        w = Writer(f, str(centroid_path))
        w.raw(MAGIC_CENTROIDS)
        w.u32(CENTROID_FORMAT_VERSION)
        w.u32(clustering.m)
        w.u32(clustering.centroids.shape[1])
        w.json_blob(None)
        w.f32_array(clustering.centroids)


def read_clustering(csv_path, centroid_path) -> Clustering:
    with open(centroid_path, "rb") as f:
        r = Reader(f, str(centroid_path))
        r.expect_magic(MAGIC_CENTROIDS, "centroid file")
        r.expect_version(CENTROID_FORMAT_VERSION, "centroid file")
        m = r.u32("centroid count")
        width = r.u32("centroid width")
        r.json_blob("header metadata")
        centroids = r.f32_array((m, width), "centroid rows").astype(np.float64)
    ids = []
    labels = []
    with open(csv_path, newline="") as f:
        rd = csv.reader(f)
        header = next(rd)
        if tuple(header) != ("scenario_id", "cluster"):
            raise ValueError(f"unexpected clustering columns {header}")
        for row in rd:
            ids.append(row[0])
            labels.append(int(row[1]))
    return Clustering(
        centroids=centroids,
        labels=np.array(labels, dtype=np.int64),
        ids=tuple(ids),
    )
