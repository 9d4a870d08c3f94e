"""Shared fixtures: small dims, quick corpora, and scenario builders."""

from __future__ import annotations

import numpy as np
import pytest

from dicekit.scene import (
    Polylines,
    Scenario,
    ScenarioDims,
    SignalTensor,
    TrackTensor,
)

TINY_DIMS = ScenarioDims(
    num_steps=4,
    max_tracks=3,
    num_signals=2,
    num_polylines=4,
    points_per_polyline=4,
    embed_width=8,
)


def random_scenario(rng: np.random.Generator, dims: ScenarioDims = TINY_DIMS,
                    scenario_id: str = "scn-test") -> Scenario:
    """Random (not necessarily physically valid) scenario for IO tests."""
    tracks = rng.normal(size=(dims.max_tracks, dims.num_steps, dims.track_width))
    signals = rng.normal(size=(dims.num_signals, dims.num_steps, dims.signal_width))
    frames = rng.normal(size=(dims.num_polylines, dims.frame_width))
    labels = rng.normal(size=(dims.num_polylines, dims.polyline_classes))
    points = rng.normal(size=(dims.num_polylines, dims.points_per_polyline, dims.point_width))
    return Scenario(
        scenario_id=scenario_id,
        dt=0.5,
        dims=dims,
        tracks=TrackTensor(tracks),
        signals=SignalTensor(signals),
        polylines=Polylines(frames, labels, points),
    )


def valid_random_scenario(rng: np.random.Generator, dims: ScenarioDims = TINY_DIMS,
                          scenario_id: str = "scn-valid") -> Scenario:
    """Random scenario that passes validate(): binary existence, zero padding,
    one-hot categories, unit headings, ego present at every step."""
    tracks = np.zeros((dims.max_tracks, dims.num_steps, dims.track_width), dtype=np.float32)
    for i in range(dims.max_tracks):
        on = np.ones(dims.num_steps, bool) if i == 0 else rng.random(dims.num_steps) < 0.7
        th = rng.uniform(0.0, 2.0 * np.pi, dims.num_steps)
        row = np.zeros((dims.num_steps, dims.track_width), dtype=np.float32)
        row[:, 0:2] = rng.normal(0.0, 30.0, (dims.num_steps, 2))
        row[:, 2] = np.sin(th, dtype=np.float32)
        row[:, 3] = np.cos(th, dtype=np.float32)
        row[:, 4:6] = rng.normal(0.0, 8.0, (dims.num_steps, 2))
        row[:, 6:8] = rng.normal(0.0, 3.0, (dims.num_steps, 2))
        row[:, 8] = rng.uniform(1.0, 6.0, dims.num_steps)
        row[:, 9] = rng.uniform(0.5, 2.5, dims.num_steps)
        row[:, 10 + int(rng.integers(5))] = 1.0
        row[:, 15] = 1.0
        row[~on] = 0.0
        # float32 sin/cos pairs can miss unit norm by more than the validator
        # tolerance; renormalize in float32
        norm = np.sqrt(row[:, 2] ** 2 + row[:, 3] ** 2)
        row[on, 2] /= norm[on]
        row[on, 3] /= norm[on]
        tracks[i] = row
    signals = np.zeros((dims.num_signals, dims.num_steps, dims.signal_width), dtype=np.float32)
    for j in range(dims.num_signals):
        th = float(rng.uniform(0.0, 2.0 * np.pi))
        signals[j, :, 0:2] = rng.normal(0.0, 30.0, 2)
        sin, cos = np.float32(np.sin(th)), np.float32(np.cos(th))
        n = np.sqrt(sin * sin + cos * cos)
        signals[j, :, 2] = sin / n
        signals[j, :, 3] = cos / n
        for t in range(dims.num_steps):
            signals[j, t, 4 + int(rng.integers(4))] = 1.0
    frames = np.zeros((dims.num_polylines, dims.frame_width), dtype=np.float32)
    labels = np.zeros((dims.num_polylines, dims.polyline_classes), dtype=np.float32)
    points = np.zeros((dims.num_polylines, dims.points_per_polyline, dims.point_width),
                      dtype=np.float32)
    n_live = max(1, dims.num_polylines - 1)
    for k in range(n_live):
        th = float(rng.uniform(0.0, 2.0 * np.pi))
        frames[k, 0:2] = rng.normal(0.0, 40.0, 2)
        sin, cos = np.float32(np.sin(th)), np.float32(np.cos(th))
        n = np.sqrt(sin * sin + cos * cos)
        frames[k, 2] = sin / n
        frames[k, 3] = cos / n
        labels[k, int(rng.integers(dims.polyline_classes))] = 1.0
        m = int(rng.integers(1, dims.points_per_polyline + 1))
        points[k, :m, 0:2] = rng.normal(0.0, 20.0, (m, 2))
        points[k, :m, 2] = rng.uniform(0.1, 4.0, m)
        points[k, :m, 3] = 1.0
    return scene_from_arrays(dims, tracks, signals, frames, labels, points,
                             scenario_id=scenario_id)


def empty_scene_arrays(dims: ScenarioDims):
    """All-zero tensors with a valid stationary ego row."""
    tracks = np.zeros((dims.max_tracks, dims.num_steps, dims.track_width), dtype=np.float32)
    tracks[0, :, 3] = 1.0   # heading cos
    tracks[0, :, 8] = 4.6
    tracks[0, :, 9] = 1.9
    tracks[0, :, 10] = 1.0  # vehicle
    tracks[0, :, 15] = 1.0  # existence
    signals = np.zeros((dims.num_signals, dims.num_steps, dims.signal_width), dtype=np.float32)
    signals[:, :, 3] = 1.0  # unit heading
    signals[:, :, 7] = 1.0  # unknown state
    frames = np.zeros((dims.num_polylines, dims.frame_width), dtype=np.float32)
    labels = np.zeros((dims.num_polylines, dims.polyline_classes), dtype=np.float32)
    points = np.zeros((dims.num_polylines, dims.points_per_polyline, dims.point_width),
                      dtype=np.float32)
    return tracks, signals, frames, labels, points


def scene_from_arrays(dims, tracks, signals, frames, labels, points,
                      scenario_id="scn-manual", dt=0.5) -> Scenario:
    return Scenario(
        scenario_id=scenario_id,
        dt=dt,
        dims=dims,
        tracks=TrackTensor(tracks),
        signals=SignalTensor(signals),
        polylines=Polylines(frames, labels, points),
    )


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260822)
