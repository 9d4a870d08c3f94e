"""Collision-difficulty scoring on top of a frozen backbone.

Labels come straight from simulation outcomes: 1 for a collision, 0
otherwise, one example per (scenario, policy version) pair, so the same
inputs can appear with both labels.  Features are four mean-pools of the
encoder output (ego row, existing track rows, signal rows, road rows)
concatenated in that order.  Only the small MLP head trains; the backbone
is read once per scenario and its parameters never change.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import mae
from .autodiff import Tensor
from .checkpoint import load_checkpoint, params_digest, save_checkpoint
from .mae import EncoderConfig
from .optim import AdamState, adam_step, zero_grad
from .pretrain import read_training_checkpoint
from .scene import TRACK_EXIST, Scenario


class MissingOutcome(LookupError):
    """A referenced scenario has no simulation outcome."""

    def __init__(self, scenario_id: str):
        super().__init__(f"no outcome recorded for scenario {scenario_id!r}")
        self.scenario_id = scenario_id


@dataclass(frozen=True)
class LabeledExample:
    scenario_id: str
    label: int
    version: str

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


def build_labels(scenario_ids, outcomes) -> list[LabeledExample]:
    """One example per outcome; every referenced scenario needs at least one."""
    ids = list(scenario_ids)
    known = set(ids)
    by_id: dict[str, list] = {sid: [] for sid in ids}
    seen: set[tuple[str, str]] = set()
    for o in outcomes:
        if o.scenario_id not in known:
            raise ValueError(f"outcome references unknown scenario {o.scenario_id!r}")
        key = (o.scenario_id, o.policy_version)
        if key in seen:
            raise ValueError(
                f"duplicate outcome for scenario {key[0]!r} under version {key[1]!r}"
            )
        seen.add(key)
        by_id[o.scenario_id].append(o)
    examples = []
    for sid in ids:
        if not by_id[sid]:
            raise MissingOutcome(sid)
        for o in by_id[sid]:
            examples.append(LabeledExample(sid, o.label, o.policy_version))
    return examples


# ---------------------------------------------------------------------------
# Pooled features
# ---------------------------------------------------------------------------


def pool_concat(emb: mae.Embeddings, track_existence: np.ndarray) -> np.ndarray:
    """[B, 4D] feature: ego-pool ++ track-pool ++ signal-pool ++ road-pool.

    Track rows are weighted by existence so padded rows do not dilute the
    mean; the other three blocks are plain means.
    """
    z_v = emb.z_v.data
    z_r = emb.z_r.data
    n_t = emb.n_tracks
    ego = z_v[:, 0].mean(axis=1)
    w = np.asarray(track_existence, dtype=z_v.dtype)
    expected = (z_v.shape[0], n_t, z_v.shape[2])
    if w.shape != expected:
        raise ValueError(f"track existence shape {w.shape} does not match {expected}")
    total = w.sum(axis=(1, 2))
    tracks = (z_v[:, :n_t] * w[..., None]).sum(axis=(1, 2)) / np.maximum(
        total, 1e-8
    )[:, None]
    signals = z_v[:, n_t:].mean(axis=(1, 2))
    road = z_r.mean(axis=1)
    return np.concatenate([ego, tracks, signals, road], axis=1)


def features_for(
    scenarios: list[Scenario],
    params: dict[str, Tensor],
    encoder: EncoderConfig,
    batch: int = 32,
) -> np.ndarray:
    """One unmasked backbone pass per scenario, pooled to [N, 4D]."""
    if not scenarios:
        raise ValueError("no scenarios to embed")
    dims = scenarios[0].dims
    out = []
    for start in range(0, len(scenarios), batch):
        chunk = scenarios[start : start + batch]
        arrays = mae.batch_scenarios(chunk)
        masks = mae.batch_masks([mae.no_masks(dims) for _ in chunk])
        # frozen pass: no tape, gradients can never reach the backbone
        with ad.no_grad():
            emb = mae.encode_arrays(arrays, masks, params, encoder)
        out.append(pool_concat(emb, arrays["tracks"][..., TRACK_EXIST]))
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# Head
# ---------------------------------------------------------------------------


@dataclass
class DifficultyHead:
    input_width: int
    widths: tuple[int, ...]
    params: dict[str, Tensor]


def init_head(
    input_width: int, widths: tuple[int, ...] = (64,), rng=None
) -> DifficultyHead:
    if rng is None:
        rng = np.random.default_rng(0)
    widths = tuple(int(w) for w in widths)
    if input_width < 1 or any(w < 1 for w in widths):
        raise ValueError("head widths must be positive")
    sizes = (int(input_width),) + widths + (1,)
    params: dict[str, Tensor] = {}
    for i in range(len(sizes) - 1):
        fan_in = sizes[i]
        params[f"head/{i}/w"] = Tensor(
            rng.normal(0.0, fan_in**-0.5, (fan_in, sizes[i + 1])).astype(np.float32),
            requires_grad=True,
        )
        params[f"head/{i}/b"] = Tensor(
            np.zeros(sizes[i + 1], dtype=np.float32), requires_grad=True
        )
    return DifficultyHead(int(input_width), widths, params)


def head_logits(head: DifficultyHead, features: np.ndarray) -> Tensor:
    feats = np.asarray(features)
    if feats.ndim == 1:
        feats = feats[None, :]
    if feats.shape[-1] != head.input_width:
        raise ValueError(
            f"feature width {feats.shape[-1]} does not match head input "
            f"{head.input_width}"
        )
    h = Tensor(feats.astype(head.params["head/0/w"].data.dtype))
    last = len(head.widths)
    for i in range(last + 1):
        h = ad.affine(h, head.params[f"head/{i}/w"], head.params[f"head/{i}/b"])
        if i != last:
            h = ad.gelu(h)
    return h.reshape((feats.shape[0],))


def write_head(path, head: DifficultyHead) -> None:
    meta = {"input_width": head.input_width, "widths": list(head.widths)}
    save_checkpoint(path, {k: p.data for k, p in head.params.items()}, meta=meta)


def read_head(path) -> DifficultyHead:
    entries, meta = load_checkpoint(path)
    return DifficultyHead(
        int(meta["input_width"]),
        tuple(int(w) for w in meta["widths"]),
        {k: Tensor(v, requires_grad=True) for k, v in entries.items()},
    )


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int
    lr: float = 1e-3
    batch: int = 32
    seed: int = 0
    holdout: float = 0.2
    widths: tuple[int, ...] = (64,)

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if not self.lr > 0.0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.holdout < 1.0:
            raise ValueError(f"holdout must lie in [0, 1), got {self.holdout}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))


@dataclass
class FinetuneResult:
    head: DifficultyHead
    auc: float | None
    backbone_digest: str
    train_count: int
    holdout_count: int


def _stratified_split(labels: np.ndarray, fraction: float, rng):
    hold = []
    train = []
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(fraction * len(idx)))
        hold.extend(idx[:k])
        train.extend(idx[k:])
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(hold, dtype=int))


def finetune(
    checkpoint_path,
    scenarios: list[Scenario],
    examples: list[LabeledExample],
    cfg: FinetuneConfig,
) -> FinetuneResult:
    """Train the head by uniform-weight BCE; the backbone never changes."""
    backbone, encoder, dims, _ = read_training_checkpoint(checkpoint_path)
    digest_before = params_digest({k: p.data for k, p in backbone.items()})

    labels = np.array([e.label for e in examples], dtype=np.int64)
    if labels.size == 0:
        raise ValueError("no labeled examples")
    if labels.min() == labels.max():
        raise ValueError("labeled data needs both classes, got only "
                         f"label {int(labels[0])}")

    by_id = {s.scenario_id: s for s in scenarios}
    unique_ids = []
    for e in examples:
        if e.scenario_id not in by_id:
            raise ValueError(f"no scenario stored for example {e.scenario_id!r}")
        if e.scenario_id not in unique_ids:
            unique_ids.append(e.scenario_id)
    # one backbone pass per distinct scenario; versions share the same row
    feats = features_for([by_id[sid] for sid in unique_ids], backbone, encoder)
    row_of = {sid: i for i, sid in enumerate(unique_ids)}
    x = feats[[row_of[e.scenario_id] for e in examples]]

    rng = np.random.default_rng(cfg.seed)
    head = init_head(x.shape[1], cfg.widths, rng)
    train_idx, hold_idx = _stratified_split(labels, cfg.holdout, rng)
    if train_idx.size == 0:
        raise ValueError("holdout fraction leaves no training examples")

    state = AdamState(lr=cfg.lr)
    order = rng.permutation(train_idx.size)
    pos = 0
    for _ in range(cfg.steps):
        take = []
        for _ in range(min(cfg.batch, train_idx.size)):
            if pos == len(order):
                order = rng.permutation(train_idx.size)
                pos = 0
            take.append(train_idx[order[pos]])
            pos += 1
        zero_grad(head.params)
        logits = head_logits(head, x[take])
        loss = ad.bce_with_logits(logits, labels[take].astype(np.float32))
        loss.backward()
        adam_step(state, head.params)

    digest_after = params_digest({k: p.data for k, p in backbone.items()})
    if digest_after != digest_before:
        raise RuntimeError("backbone parameters changed during fine-tuning")

    auc = None
    y_hold = labels[hold_idx]
    if hold_idx.size and y_hold.min() != y_hold.max():
        s_hold = _sigmoid(head_logits(head, x[hold_idx]).data)
        auc = roc_auc(y_hold, s_hold)
    return FinetuneResult(head, auc, digest_after, int(train_idx.size), int(hold_idx.size))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def score_features(head: DifficultyHead, features: np.ndarray) -> np.ndarray:
    """Difficulty in (0,1) for each pooled feature row."""
    return _sigmoid(head_logits(head, features).data)


def score(
    scenario: Scenario,
    backbone: dict[str, Tensor],
    encoder: EncoderConfig,
    head: DifficultyHead,
) -> float:
    feats = features_for([scenario], backbone, encoder, batch=1)
    return float(score_features(head, feats)[0])


def write_scores(path, ids, scores) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("scenario_id", "difficulty"))
        for sid, d in zip(ids, scores, strict=True):
            w.writerow((sid, float(d)))


def read_scores(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if tuple(header) != ("scenario_id", "difficulty"):
            raise ValueError(f"unexpected score columns {header}")
        ids = []
        vals = []
        for row in r:
            ids.append(row[0])
            vals.append(float(row[1]))
    return ids, np.array(vals, dtype=np.float64)


def roc_auc(labels, scores) -> float:
    """Rank-based AUC with tie-averaged ranks."""
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape:
        raise ValueError(f"labels {y.shape} and scores {s.shape} differ")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one example of each class")
    order = np.argsort(s, kind="stable")
    ranks = np.empty(s.size, dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < s.size:
        j = i
        while j < s.size and sorted_s[j] == sorted_s[i]:
            j += 1
        # ties share the average of the ranks they straddle (1-based)
        ranks[order[i:j]] = 0.5 * (i + j + 1)
        i = j
    rank_sum = ranks[y == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
