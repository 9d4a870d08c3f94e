"""Self-supervised pretraining: batching, seeding, optimization, checkpoints.

The loop visits the corpus in a shuffle order drawn from the run seed,
re-shuffling at each epoch boundary, one optimizer step per batch.  Inputs
are masked at the encoder's mask ratio while the loss covers entries drawn
at the independent loss-mask ratio, so the two never have to agree.
Evaluation masks nothing and covers everything.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import mae
from .autodiff import Tensor, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .mae import EncoderConfig
from .optim import AdamState, adam_step, zero_grad
from .scene import Scenario, ScenarioDims, read_scenarios, validate


class TrainingDiverged(RuntimeError):
    """Loss left the reals; carries the step index where it happened."""

    def __init__(self, step: int, value: float):
        super().__init__(f"loss became non-finite at step {step}: {value}")
        self.step = step
        self.value = value


@dataclass(frozen=True)
class TrainConfig:
    """Run settings; everything downstream is determined by these plus data."""

    dataset: str
    steps: int
    lr: float = 3e-4
    batch: int = 32
    seed: int = 0
    checkpoint_interval: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if not self.lr > 0.0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.checkpoint_interval < 0:
            raise ValueError(
                f"checkpoint_interval must be >= 0, got {self.checkpoint_interval}"
            )


@dataclass(frozen=True)
class TraceRow:
    step: int
    total: float
    tracks: float
    signals: float
    road: float
    ego: float


TRACE_COLUMNS = ("step", "total", "tracks", "signals", "road", "ego")


@dataclass
class PretrainResult:
    params: dict[str, Tensor]
    encoder: EncoderConfig
    dims: ScenarioDims
    trace: list[TraceRow]


def _check_corpus(scenarios: list[Scenario]) -> None:
    for s in scenarios:
        bad = validate(s)
        if bad:
            v = bad[0]
            raise ValueError(
                f"scenario {s.scenario_id!r} fails validation: "
                f"{v.tensor}{list(v.index)}: {v.rule}"
            )


def write_training_checkpoint(
    path, params: dict[str, Tensor], encoder: EncoderConfig,
    dims: ScenarioDims, step: int,
) -> None:
    meta = {
        "encoder_config": encoder.to_json(),
        "dims": list(dims.header_tuple()),
        "step": step,
    }
    save_checkpoint(path, {k: p.data for k, p in params.items()}, meta=meta)


def read_training_checkpoint(path):
    """Load (params, encoder, dims, meta); params come back as Tensors."""
    entries, meta = load_checkpoint(path)
    encoder = EncoderConfig.from_json(meta["encoder_config"])
    dims = ScenarioDims.from_header_tuple(tuple(meta["dims"]))
    params = {k: Tensor(v, requires_grad=True) for k, v in entries.items()}
    return params, encoder, dims, meta


def write_trace(path, trace: list[TraceRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow([row.step, row.total, row.tracks, row.signals, row.road, row.ego])


def read_trace(path) -> list[TraceRow]:
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if tuple(header) != TRACE_COLUMNS:
            raise ValueError(f"unexpected trace columns {header}")
        return [
            TraceRow(int(row[0]), *(float(v) for v in row[1:6])) for row in r
        ]


def _interval_path(path, step: int) -> Path:
    p = Path(path)
    return p.with_name(f"{p.stem}.step{step:06d}{p.suffix}")


def pretrain(
    cfg: TrainConfig,
    encoder: EncoderConfig | None = None,
    checkpoint_path=None,
    trace_path=None,
) -> PretrainResult:
    """Train from scratch on the configured corpus; fully seeded."""
    if encoder is None:
        encoder = EncoderConfig()
    scenarios = read_scenarios(cfg.dataset)
    _check_corpus(scenarios)
    dims = scenarios[0].dims
    n = len(scenarios)

    rng = np.random.default_rng(cfg.seed)
    params = mae.init_params(encoder, dims, rng)
    state = AdamState(lr=cfg.lr)
    order = rng.permutation(n)
    pos = 0
    trace: list[TraceRow] = []

    for step in range(cfg.steps):
        batch: list[Scenario] = []
        for _ in range(cfg.batch):
            if pos == len(order):
                order = rng.permutation(n)
                pos = 0
            batch.append(scenarios[order[pos]])
            pos += 1
        arrays = mae.batch_scenarios(batch)
        in_masks = mae.batch_masks(
            [mae.sample_masks(dims, encoder.mask_ratio, rng) for _ in batch]
        )
        cover = mae.batch_masks(
            [mae.sample_masks(dims, encoder.loss_mask_ratio, rng) for _ in batch]
        )

        zero_grad(params)
        emb = mae.encode_arrays(arrays, in_masks, params, encoder)
        recon = mae.decode(emb, params)
        total, comps = mae.reconstruction_loss_arrays(recon, arrays, cover, encoder)
        value = total.item()
        if not np.isfinite(value):
            raise TrainingDiverged(step, value)
        total.backward()
        adam_step(state, params)
        trace.append(
            TraceRow(
                step,
                value,
                comps["tracks"].item(),
                comps["signals"].item(),
                comps["road"].item(),
                comps["ego"].item(),
            )
        )
        done = step + 1
        if (
            checkpoint_path is not None
            and cfg.checkpoint_interval > 0
            and done % cfg.checkpoint_interval == 0
            and done < cfg.steps
        ):
            write_training_checkpoint(
                _interval_path(checkpoint_path, done), params, encoder, dims, done
            )

    if checkpoint_path is not None:
        write_training_checkpoint(checkpoint_path, params, encoder, dims, cfg.steps)
    if trace_path is not None:
        write_trace(trace_path, trace)
    return PretrainResult(params, encoder, dims, trace)


def reconstruction_report(
    params: dict[str, Tensor],
    encoder: EncoderConfig,
    scenarios: list[Scenario],
    batch: int = 32,
) -> dict[str, float]:
    """Per-stream loss means with no input masking and full loss coverage."""
    if not scenarios:
        raise ValueError("cannot evaluate an empty scenario list")
    dims = scenarios[0].dims
    sums = {"total": 0.0, "tracks": 0.0, "signals": 0.0, "road": 0.0, "ego": 0.0}
    for start in range(0, len(scenarios), batch):
        chunk = scenarios[start : start + batch]
        arrays = mae.batch_scenarios(chunk)
        masks = mae.batch_masks([mae.no_masks(dims) for _ in chunk])
        cover = mae.batch_masks([mae.full_masks(dims) for _ in chunk])
        with no_grad():
            emb = mae.encode_arrays(arrays, masks, params, encoder)
            recon = mae.decode(emb, params)
            total, comps = mae.reconstruction_loss_arrays(recon, arrays, cover, encoder)
        # full coverage makes every per-batch count proportional to the batch
        # size, so weighting the means by it reproduces the corpus mean
        w = len(chunk)
        sums["total"] += total.item() * w
        for key in ("tracks", "signals", "road", "ego"):
            sums[key] += comps[key].item() * w
    return {k: v / len(scenarios) for k, v in sums.items()}


def eval_reconstruction(checkpoint_path, dataset_path, batch: int = 32) -> dict[str, float]:
    """Evaluate a stored checkpoint against a stored corpus."""
    params, encoder, dims, _ = read_training_checkpoint(checkpoint_path)
    scenarios = read_scenarios(dataset_path)
    if not scenarios:
        raise ValueError(f"no scenarios in {dataset_path}")
    if scenarios[0].dims != dims:
        raise ValueError(
            f"checkpoint dims {dims} do not match dataset dims {scenarios[0].dims}"
        )
    return reconstruction_report(params, encoder, scenarios, batch=batch)
