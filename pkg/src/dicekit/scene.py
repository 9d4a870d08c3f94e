"""Sparse scenario tensors: shape contracts, validation, and .scn serialization.

A scenario is a fixed-size, zero-padded snapshot of a driving scene:

* tracks  [max_tracks, num_steps, 16]  per-agent per-step features
* signals [num_signals, num_steps, 8]  traffic-signal features
* polylines: frames [num_polylines, 4], labels [num_polylines, 4],
  points [num_polylines, points_per_polyline, 4]

Row 0 of the track tensor is always the ego vehicle and exists at every step.
All coordinates are in the ego-centric frame of the first timestep (ego at the
origin, heading along +x).  Padding entries are exactly zero, which is what
lets a single existence channel mark real content.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .binio import MAGIC_SCENARIOS, BinaryFormatError, Reader, Writer

SCENARIO_FORMAT_VERSION = 1

TRACK_CLASSES = ("vehicle", "pedestrian", "cyclist", "cone", "other")
POLYLINE_CLASSES = ("lane_center", "stop_line", "crosswalk", "parking")
SIGNAL_STATES = ("red", "yellow", "green", "unknown")

# Track feature layout (one row per track-timestep):
#   0:4   pose        x, y, sin(heading), cos(heading)
#   4:6   velocity    vx, vy
#   6:8   accel       ax, ay
#   8:10  extents     length, width
#   10:15 class       one-hot over TRACK_CLASSES
#   15    existence   1.0 when the agent is observed at this step
TRACK_POSE = slice(0, 4)
TRACK_VEL = slice(4, 6)
TRACK_ACC = slice(6, 8)
TRACK_EXTENT = slice(8, 10)
TRACK_CLASS = slice(10, 15)
TRACK_EXIST = 15
TRACK_CONTINUOUS = slice(0, 10)
TRACK_WIDTH = 16

# Signal feature layout (one row per signal-timestep):
#   0:4  pose   x, y, sin(orientation), cos(orientation)
#   4:8  state  one-hot over SIGNAL_STATES
SIGNAL_POSE = slice(0, 4)
SIGNAL_STATE = slice(4, 8)
SIGNAL_WIDTH = 8

# Polyline frame: reference pose of the polyline, x, y, sin, cos.
# Polyline point: x, y (frame-local), width, existence.
FRAME_WIDTH = 4
POINT_XY = slice(0, 2)
POINT_SPAN = 2
POINT_EXIST = 3
POINT_WIDTH = 4


@dataclass(frozen=True)
class ScenarioDims:
    """Shape parameters shared by every scenario in a corpus.

    The feature widths are fixed by the layouts above; they are still carried
    explicitly so serialized files are self-describing.  ``embed_width`` is
    the model hidden width the corpus was produced for; it rides along in the
    file header so downstream artifacts can cross-check.
    """

    num_steps: int = 20
    max_tracks: int = 16
    track_width: int = TRACK_WIDTH
    num_signals: int = 4
    signal_width: int = SIGNAL_WIDTH
    num_polylines: int = 32
    points_per_polyline: int = 10
    frame_width: int = FRAME_WIDTH
    polyline_classes: int = 4
    point_width: int = POINT_WIDTH
    embed_width: int = 64

    def __post_init__(self):
        for name in (
            "num_steps",
            "max_tracks",
            "track_width",
            "num_signals",
            "signal_width",
            "num_polylines",
            "points_per_polyline",
            "frame_width",
            "polyline_classes",
            "point_width",
            "embed_width",
        ):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v <= 0:
                raise ValueError(f"ScenarioDims.{name} must be a positive integer, got {v!r}")
        if self.track_width != TRACK_WIDTH:
            raise ValueError(f"track_width must be {TRACK_WIDTH} (fixed feature layout)")
        if self.signal_width != SIGNAL_WIDTH:
            raise ValueError(f"signal_width must be {SIGNAL_WIDTH} (fixed feature layout)")
        if self.frame_width != FRAME_WIDTH:
            raise ValueError(f"frame_width must be {FRAME_WIDTH}")
        if self.polyline_classes != len(POLYLINE_CLASSES):
            raise ValueError(f"polyline_classes must be {len(POLYLINE_CLASSES)}")
        if self.point_width != POINT_WIDTH:
            raise ValueError(f"point_width must be {POINT_WIDTH}")

    def header_tuple(self) -> tuple[int, ...]:
        """Dims in on-disk header order."""
        return (
            self.num_steps,
            self.max_tracks,
            self.track_width,
            self.num_signals,
            self.signal_width,
            self.num_polylines,
            self.points_per_polyline,
            self.frame_width,
            self.polyline_classes,
            self.point_width,
            self.embed_width,
        )

    @classmethod
    def from_header_tuple(cls, values: tuple[int, ...]) -> "ScenarioDims":
        return cls(*[int(v) for v in values])

    def to_json(self) -> dict:
        return {
            "num_steps": self.num_steps,
            "max_tracks": self.max_tracks,
            "num_signals": self.num_signals,
            "num_polylines": self.num_polylines,
            "points_per_polyline": self.points_per_polyline,
            "embed_width": self.embed_width,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ScenarioDims":
        return cls(**{k: int(v) for k, v in obj.items()})


def _freeze(arr: np.ndarray, dtype=np.float32) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=dtype)
    if out is arr:
        out = out.copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class TrackTensor:
    """Agent features, shape [max_tracks, num_steps, 16], float32."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _freeze(self.data))
        if self.data.ndim != 3 or self.data.shape[2] != TRACK_WIDTH:
            raise ValueError(f"track tensor must be [N, T, {TRACK_WIDTH}], got {self.data.shape}")

    @property
    def existence(self) -> np.ndarray:
        return self.data[:, :, TRACK_EXIST]


@dataclass(frozen=True)
class SignalTensor:
    """Traffic-signal features, shape [num_signals, num_steps, 8], float32."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _freeze(self.data))
        if self.data.ndim != 3 or self.data.shape[2] != SIGNAL_WIDTH:
            raise ValueError(f"signal tensor must be [N, T, {SIGNAL_WIDTH}], got {self.data.shape}")


@dataclass(frozen=True)
class Polylines:
    """Static map elements: frames [N, 4], labels [N, C], points [N, S, 4]."""

    frames: np.ndarray
    labels: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "frames", _freeze(self.frames))
        object.__setattr__(self, "labels", _freeze(self.labels))
        object.__setattr__(self, "points", _freeze(self.points))
        n = self.frames.shape[0]
        if self.frames.ndim != 2 or self.frames.shape[1] != FRAME_WIDTH:
            raise ValueError(f"frames must be [N, {FRAME_WIDTH}], got {self.frames.shape}")
        if self.labels.ndim != 2 or self.labels.shape[0] != n:
            raise ValueError(f"labels must be [N, C] with N={n}, got {self.labels.shape}")
        if (
            self.points.ndim != 3
            or self.points.shape[0] != n
            or self.points.shape[2] != POINT_WIDTH
        ):
            raise ValueError(f"points must be [N, S, {POINT_WIDTH}], got {self.points.shape}")


@dataclass(frozen=True)
class MaskSet:
    """Boolean masks over maskable slots; True marks a masked (hidden) slot.

    track_mask  [max_tracks, num_steps]
    signal_mask [num_signals, num_steps]
    polyline_mask [num_polylines]  (frames stay visible even when masked)
    """

    track_mask: np.ndarray
    signal_mask: np.ndarray
    polyline_mask: np.ndarray
    ratio: float

    def __post_init__(self):
        object.__setattr__(self, "track_mask", _freeze(self.track_mask, dtype=bool))
        object.__setattr__(self, "signal_mask", _freeze(self.signal_mask, dtype=bool))
        object.__setattr__(self, "polyline_mask", _freeze(self.polyline_mask, dtype=bool))
        if not (0.0 <= self.ratio <= 1.0):
            raise ValueError(f"mask ratio must lie in [0, 1], got {self.ratio}")


@dataclass(frozen=True)
class Scenario:
    """One serialized scene: id, step duration, and the three tensor groups."""

    scenario_id: str
    dt: float
    dims: ScenarioDims
    tracks: TrackTensor
    signals: SignalTensor
    polylines: Polylines

    def __post_init__(self):
        d = self.dims
        if self.tracks.data.shape != (d.max_tracks, d.num_steps, d.track_width):
            raise ValueError(
                f"track tensor shape {self.tracks.data.shape} does not match dims "
                f"{(d.max_tracks, d.num_steps, d.track_width)}"
            )
        if self.signals.data.shape != (d.num_signals, d.num_steps, d.signal_width):
            raise ValueError(
                f"signal tensor shape {self.signals.data.shape} does not match dims "
                f"{(d.num_signals, d.num_steps, d.signal_width)}"
            )
        if self.polylines.frames.shape != (d.num_polylines, d.frame_width):
            raise ValueError(
                f"frame shape {self.polylines.frames.shape} does not match dims "
                f"{(d.num_polylines, d.frame_width)}"
            )
        if self.polylines.labels.shape != (d.num_polylines, d.polyline_classes):
            raise ValueError(
                f"label shape {self.polylines.labels.shape} does not match dims "
                f"{(d.num_polylines, d.polyline_classes)}"
            )
        if self.polylines.points.shape != (
            d.num_polylines,
            d.points_per_polyline,
            d.point_width,
        ):
            raise ValueError(
                f"point shape {self.polylines.points.shape} does not match dims "
                f"{(d.num_polylines, d.points_per_polyline, d.point_width)}"
            )


@dataclass(frozen=True)
class Violation:
    """One invariant breach: which tensor, which index, which rule."""

    tensor: str
    index: tuple[int, ...]
    rule: str


def _is_binary(x: np.ndarray) -> np.ndarray:
    return (x == 0.0) | (x == 1.0)


def validate(scenario: Scenario) -> list[Violation]:
    """Check every scenario invariant; empty list iff the scenario is clean.

    Rules checked per entry: finiteness, binary existence channels, exact-zero
    padding behind existence 0, one-hot class/state rows, unit-norm heading
    encodings (tolerance 1e-6), and ego presence at every step.
    """
    out: list[Violation] = []
    tr = scenario.tracks.data
    sg = scenario.signals.data
    pl = scenario.polylines

    def bad(tensor: str, idx_arrays: tuple[np.ndarray, ...], rule: str) -> None:
        for idx in zip(*[a.tolist() for a in idx_arrays]):
            out.append(Violation(tensor, tuple(int(i) for i in idx), rule))

    # tracks
    finite = np.isfinite(tr).all(axis=2)
    bad("tracks", np.nonzero(~finite), "non_finite")
    exist = tr[:, :, TRACK_EXIST]
    bad("tracks", np.nonzero(~_is_binary(exist)), "existence_not_binary")
    padded = finite & (exist == 0.0)
    nonzero_pad = padded & (np.abs(tr[:, :, : TRACK_EXIST]).sum(axis=2) != 0.0)
    bad("tracks", np.nonzero(nonzero_pad), "padding_not_zero")
    live = finite & (exist == 1.0)
    cls = tr[:, :, TRACK_CLASS]
    cls_ok = _is_binary(cls).all(axis=2) & (cls.sum(axis=2) == 1.0)
    bad("tracks", np.nonzero(live & ~cls_ok), "class_not_onehot")
    heading = tr[:, :, 2] ** 2 + tr[:, :, 3] ** 2
    bad("tracks", np.nonzero(live & (np.abs(heading - 1.0) > 1e-6)), "heading_not_unit")
    ego_missing = exist[0] != 1.0
    bad("tracks", (np.zeros(ego_missing.sum(), dtype=int), np.nonzero(ego_missing)[0]), "ego_missing")

    # signals
    sfinite = np.isfinite(sg).all(axis=2)
    bad("signals", np.nonzero(~sfinite), "non_finite")
    st = sg[:, :, SIGNAL_STATE]
    st_ok = _is_binary(st).all(axis=2) & (st.sum(axis=2) == 1.0)
    bad("signals", np.nonzero(sfinite & ~st_ok), "state_not_onehot")
    sheading = sg[:, :, 2] ** 2 + sg[:, :, 3] ** 2
    bad("signals", np.nonzero(sfinite & (np.abs(sheading - 1.0) > 1e-6)), "heading_not_unit")

    # polylines: a slot is live when any of its points exists; padding slots
    # (frames, labels, points) must be exactly zero
    pfinite = np.isfinite(pl.points).all(axis=2)
    bad("polyline_points", np.nonzero(~pfinite), "non_finite")
    pexist = pl.points[:, :, POINT_EXIST]
    bad("polyline_points", np.nonzero(pfinite & ~_is_binary(pexist)), "existence_not_binary")
    ppad = pfinite & (pexist == 0.0)
    pnz = ppad & (np.abs(pl.points[:, :, :POINT_EXIST]).sum(axis=2) != 0.0)
    bad("polyline_points", np.nonzero(pnz), "padding_not_zero")
    poly_live = (pfinite & (pexist == 1.0)).any(axis=1)

    ffinite = np.isfinite(pl.frames).all(axis=1)
    bad("polyline_frames", (np.nonzero(~ffinite)[0],), "non_finite")
    fr_head = pl.frames[:, 2] ** 2 + pl.frames[:, 3] ** 2
    bad(
        "polyline_frames",
        (np.nonzero(poly_live & ffinite & (np.abs(fr_head - 1.0) > 1e-6))[0],),
        "heading_not_unit",
    )
    bad(
        "polyline_frames",
        (np.nonzero(~poly_live & ffinite & (np.abs(pl.frames).sum(axis=1) != 0.0))[0],),
        "padding_not_zero",
    )
    lfinite = np.isfinite(pl.labels).all(axis=1)
    bad("polyline_labels", (np.nonzero(~lfinite)[0],), "non_finite")
    lab_ok = _is_binary(pl.labels).all(axis=1) & (pl.labels.sum(axis=1) == 1.0)
    bad("polyline_labels", (np.nonzero(poly_live & lfinite & ~lab_ok)[0],), "label_not_onehot")
    bad(
        "polyline_labels",
        (np.nonzero(~poly_live & lfinite & (np.abs(pl.labels).sum(axis=1) != 0.0))[0],),
        "padding_not_zero",
    )

    return out


# ---------------------------------------------------------------------------
# .scn container: header (magic, version, count, dims, meta JSON) followed by
# one record per scenario.  Each tensor is prefixed with its own dims so a
# reader can tell a dimension mismatch from plain truncation.
# ---------------------------------------------------------------------------

_RECORD_TENSORS = ("tracks", "signals", "frames", "labels", "points")


def _record_shapes(dims: ScenarioDims) -> dict[str, tuple[int, ...]]:
    return {
        "tracks": (dims.max_tracks, dims.num_steps, dims.track_width),
        "signals": (dims.num_signals, dims.num_steps, dims.signal_width),
        "frames": (dims.num_polylines, dims.frame_width),
        "labels": (dims.num_polylines, dims.polyline_classes),
        "points": (dims.num_polylines, dims.points_per_polyline, dims.point_width),
    }


def _write_tensor(w: Writer, arr: np.ndarray) -> None:
    w.u8(arr.ndim)
    for s in arr.shape:
        w.u32(s)
    w.f32_array(arr)


def _read_tensor(r: Reader, expected: tuple[int, ...], what: str) -> np.ndarray:
    start = r.offset
    ndim = r.u8(f"{what} ndim")
    shape = tuple(r.u32(f"{what} dim {i}") for i in range(ndim))
    if shape != tuple(expected):
        raise BinaryFormatError(
            f"dimension mismatch in {what}: header declares {tuple(expected)}, "
            f"record carries {shape}",
            path=r.path,
            offset=start,
        )
    return r.f32_array(shape, f"{what} data")


class ScenarioWriter:
    """Streaming .scn writer; the scenario count is declared up front."""

    def __init__(self, path, dims: ScenarioDims, count: int, meta: dict | None = None):
        self.path = str(path)
        self.dims = dims
        self.count = int(count)
        self._written = 0
        self._f = open(self.path, "wb")
        w = Writer(self._f, self.path)
        w.raw(MAGIC_SCENARIOS)
        w.u32(SCENARIO_FORMAT_VERSION)
        w.u32(self.count)
        for v in dims.header_tuple():
            w.u32(v)
        w.json_blob(meta)
        self._w = w

    def add(self, scenario: Scenario) -> None:
        if scenario.dims != self.dims:
            raise ValueError(
                f"scenario dims {scenario.dims} do not match writer dims {self.dims}"
            )
        if self._written >= self.count:
            raise ValueError(f"writer declared {self.count} scenarios, got more")
        w = self._w
        w.str16(scenario.scenario_id)
        w.f32(scenario.dt)
        _write_tensor(w, scenario.tracks.data)
        _write_tensor(w, scenario.signals.data)
        _write_tensor(w, scenario.polylines.frames)
        _write_tensor(w, scenario.polylines.labels)
        _write_tensor(w, scenario.polylines.points)
        self._written += 1

    def close(self) -> None:
        if self._f.closed:
            return
        self._f.close()
        if self._written != self.count:
            raise ValueError(
                f"writer declared {self.count} scenarios but only {self._written} were added"
            )

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self._f.close()


def write_scenarios(path, scenarios: list[Scenario], meta: dict | None = None) -> None:
    """Serialize a homogeneous list of scenarios to a .scn file."""
    if not scenarios:
        raise ValueError("cannot write an empty scenario file")
    dims = scenarios[0].dims
    with ScenarioWriter(path, dims, len(scenarios), meta) as w:
        for s in scenarios:
            w.add(s)


def read_scenario_header(path) -> tuple[int, ScenarioDims, dict]:
    """Read (count, dims, meta) without touching the records."""
    with open(path, "rb") as f:
        r = Reader(f, str(path))
        return _read_header(r)


def _read_header(r: Reader) -> tuple[int, ScenarioDims, dict]:
    r.expect_magic(MAGIC_SCENARIOS, "scenario file")
    r.expect_version(SCENARIO_FORMAT_VERSION, "scenario file")
    count = r.u32("scenario count")
    dims_offset = r.offset
    values = tuple(r.u32(f"dims field {i}") for i in range(11))
    try:
        dims = ScenarioDims.from_header_tuple(values)
    except ValueError as e:
        raise BinaryFormatError(
            f"dimension mismatch in header: {e}", path=r.path, offset=dims_offset
        ) from e
    meta = r.json_blob("header metadata")
    return count, dims, meta


def _read_record(r: Reader, dims: ScenarioDims) -> Scenario:
    shapes = _record_shapes(dims)
    sid = r.str16("scenario id")
    dt = r.f32("scenario dt")
    tracks = _read_tensor(r, shapes["tracks"], "tracks")
    signals = _read_tensor(r, shapes["signals"], "signals")
    frames = _read_tensor(r, shapes["frames"], "polyline frames")
    labels = _read_tensor(r, shapes["labels"], "polyline labels")
    points = _read_tensor(r, shapes["points"], "polyline points")
    return Scenario(
        scenario_id=sid,
        dt=float(dt),
        dims=dims,
        tracks=TrackTensor(tracks),
        signals=SignalTensor(signals),
        polylines=Polylines(frames, labels, points),
    )


def iter_scenarios(path) -> Iterator[Scenario]:
    """Stream scenarios one at a time; memory stays flat for large corpora."""
    with open(path, "rb") as f:
        r = Reader(f, str(path))
        count, dims, _ = _read_header(r)
        for _ in range(count):
            yield _read_record(r, dims)


def read_scenarios(path) -> list[Scenario]:
    """Read a whole .scn file into memory."""
    return list(iter_scenarios(path))
