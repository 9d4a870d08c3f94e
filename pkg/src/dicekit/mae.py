"""Masked scenario autoencoder: encoder, decoder heads, and reconstruction loss.

The encoder maps one scenario to latent embeddings in a shared hidden width:

* polyline points collapse through a small per-point MLP and a max-pool
  (order-invariant), concatenate with the polyline labels, and project to
  road tokens Y_R; the projected coordinate frames F_proj are added on top
  and double as the road positional code,
* tracks and signals project per slot-step and concatenate along the object
  axis into the time-variant tokens Y_V, with sin/cos codes added
  independently over the object and time axes,
* Y_R runs through pre-norm self-attention blocks to give Z_R,
* Y_V runs through factorized blocks (time attention, object attention,
  cross-attention onto the finished Z_R, MLP) to give Z_V.

Road tokens never read from tracks or signals, so map embeddings are
reusable across different traffic in the same scene.

Masking has two layers with one observable effect each: masked slots are
zeroed in the raw tensors (no information leaks through projection biases)
and their projected vectors are zeroed again before positional codes are
added.  Coordinate frames of masked polylines stay visible; their labels and
points, existence included, do not.

The loss is a weighted sum of per-stream means over loss-mask-covered slots:
L1 on continuous channels plus cross-entropy on categorical channels, with
existence channels supervised everywhere and gating the other channels.
The ego row gets an extra dedicated term.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .scene import (
    POINT_EXIST,
    POINT_WIDTH,
    SIGNAL_POSE,
    SIGNAL_STATE,
    TRACK_CLASS,
    TRACK_CONTINUOUS,
    TRACK_EXIST,
    MaskSet,
    Polylines,
    Scenario,
    ScenarioDims,
    SignalTensor,
    TrackTensor,
)

@dataclass(frozen=True)
class EncoderConfig:
    """Architecture and loss settings for the scenario autoencoder."""

    hidden: int = 64
    heads: int = 4
    road_layers: int = 2
    fact_layers: int = 2
    pointnet_widths: tuple[int, ...] = (32, 64)
    mlp_ratio: int = 2
    mask_ratio: float = 0.5
    loss_mask_ratio: float = 1.0
    lambda_tracks: float = 1.0
    lambda_signals: float = 1.0
    lambda_road: float = 1.0
    lambda_ego: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "pointnet_widths", tuple(int(w) for w in self.pointnet_widths))
        if self.hidden < 1:
            raise ValueError(f"hidden width must be positive, got {self.hidden}")
        if self.heads < 1 or self.hidden % self.heads != 0:
            raise ValueError(f"hidden width {self.hidden} is not divisible by {self.heads} heads")
        if self.road_layers < 1 or self.fact_layers < 1:
            raise ValueError("encoder needs at least one road layer and one factorized layer")
        if not self.pointnet_widths or any(w < 1 for w in self.pointnet_widths):
            raise ValueError(f"pointnet widths must be positive, got {self.pointnet_widths}")
        if self.mlp_ratio < 1:
            raise ValueError(f"mlp ratio must be at least 1, got {self.mlp_ratio}")
        for name in ("mask_ratio", "loss_mask_ratio"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for f in fields(self):
            if f.name.startswith("lambda_") and getattr(self, f.name) < 0.0:
                raise ValueError(f"{f.name} must be non-negative, got {getattr(self, f.name)}")

    def to_json(self) -> str:
        obj = asdict(self)
        obj["pointnet_widths"] = list(self.pointnet_widths)
        return json.dumps(obj, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EncoderConfig":
        obj = json.loads(text)
        known = {f.name for f in fields(cls)}
        extra = sorted(set(obj) - known)
        if extra:
            raise ValueError(f"unknown encoder config fields: {extra}")
        return cls(**obj)


@dataclass(frozen=True)
class Embeddings:
    """Encoder outputs, all batched [B, ...] in the shared hidden width D.

    y_r     [B, N_Z, D]          road tokens fed to the road stack
    f_proj  [B, N_Z, D]          projected coordinate frames (road positions)
    y_v     [B, N_T + N_S, T, D] time-variant tokens fed to the factorized stack
    z_r     [B, N_Z, D]          encoded road tokens
    z_v     [B, N_T + N_S, T, D] encoded object tokens, tracks first, ego row 0
    """

    y_r: Tensor
    f_proj: Tensor
    y_v: Tensor
    z_r: Tensor
    z_v: Tensor
    n_tracks: int


@dataclass(frozen=True)
class Reconstruction:
    """Decoder outputs mirroring the input tensors, batched [B, ...].

    Continuous channels are direct predictions; class, state, and existence
    channels are logits.
    """

    tracks: Tensor
    signals: Tensor
    labels: Tensor
    points: Tensor


def sinusoidal_encoding(length: int, width: int) -> np.ndarray:
    """Classic sin/cos position code, shape [length, width], float32."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(0, width, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, idx / width)
    out = np.zeros((length, width), dtype=np.float64)
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle[:, : out[:, 1::2].shape[1]])
    return out.astype(np.float32)


# -- masks -------------------------------------------------------------------


def sample_masks(dims: ScenarioDims, ratio: float, rng: np.random.Generator) -> MaskSet:
    """Independent Bernoulli(ratio) masks per track-step, signal-step, polyline."""
    return MaskSet(
        track_mask=rng.random((dims.max_tracks, dims.num_steps)) < ratio,
        signal_mask=rng.random((dims.num_signals, dims.num_steps)) < ratio,
        polyline_mask=rng.random(dims.num_polylines) < ratio,
        ratio=float(ratio),
    )


def no_masks(dims: ScenarioDims) -> MaskSet:
    """Everything visible; what inference uses."""
    return MaskSet(
        track_mask=np.zeros((dims.max_tracks, dims.num_steps), bool),
        signal_mask=np.zeros((dims.num_signals, dims.num_steps), bool),
        polyline_mask=np.zeros(dims.num_polylines, bool),
        ratio=0.0,
    )


def full_masks(dims: ScenarioDims) -> MaskSet:
    """Every slot selected; as a loss mask this covers the whole scenario."""
    return MaskSet(
        track_mask=np.ones((dims.max_tracks, dims.num_steps), bool),
        signal_mask=np.ones((dims.num_signals, dims.num_steps), bool),
        polyline_mask=np.ones(dims.num_polylines, bool),
        ratio=1.0,
    )


def apply_masks(scenario: Scenario, masks: MaskSet) -> Scenario:
    """Zero the raw features of masked slots.

    Masked polylines keep their coordinate frame but lose labels and points,
    existence channel included.  Unmasked entries are bit-identical.
    """
    keep_t = ~masks.track_mask
    keep_s = ~masks.signal_mask
    keep_z = ~masks.polyline_mask
    return Scenario(
        scenario_id=scenario.scenario_id,
        dt=scenario.dt,
        dims=scenario.dims,
        tracks=TrackTensor(scenario.tracks.data * keep_t[:, :, None]),
        signals=SignalTensor(scenario.signals.data * keep_s[:, :, None]),
        polylines=Polylines(
            frames=scenario.polylines.frames,
            labels=scenario.polylines.labels * keep_z[:, None],
            points=scenario.polylines.points * keep_z[:, None, None],
        ),
    )


def batch_scenarios(scenarios: list[Scenario]) -> dict[str, np.ndarray]:
    """Stack scenario tensors along a new leading batch axis."""
    return {
        "tracks": np.stack([s.tracks.data for s in scenarios]),
        "signals": np.stack([s.signals.data for s in scenarios]),
        "frames": np.stack([s.polylines.frames for s in scenarios]),
        "labels": np.stack([s.polylines.labels for s in scenarios]),
        "points": np.stack([s.polylines.points for s in scenarios]),
    }


def batch_masks(masks: list[MaskSet]) -> dict[str, np.ndarray]:
    """Stack mask sets along a new leading batch axis."""
    return {
        "tracks": np.stack([m.track_mask for m in masks]),
        "signals": np.stack([m.signal_mask for m in masks]),
        "polylines": np.stack([m.polyline_mask for m in masks]),
    }


# -- parameters ---------------------------------------------------------------


def init_params(
    config: EncoderConfig, dims: ScenarioDims, rng: np.random.Generator
) -> dict[str, Tensor]:
    """Fresh float32 parameters, normal(0, 1/sqrt(fan_in)) weights, zero biases."""
    d = config.hidden
    params: dict[str, Tensor] = {}

    def tensor(value):
        return Tensor(value.astype(np.float32), requires_grad=True)

    def linear(name, fan_in, fan_out):
        params[name + "/w"] = tensor(rng.normal(0.0, fan_in**-0.5, (fan_in, fan_out)))
        params[name + "/b"] = tensor(np.zeros(fan_out))

    def norm(name):
        params[name + "/g"] = tensor(np.ones(d))
        params[name + "/b"] = tensor(np.zeros(d))

    def attention(prefix):
        for part in ("q", "k", "v", "o"):
            linear(f"{prefix}{part}", d, d)

    def mlp(prefix):
        linear(prefix + "0", d, config.mlp_ratio * d)
        linear(prefix + "1", config.mlp_ratio * d, d)

    widths = (dims.point_width,) + config.pointnet_widths
    for i in range(len(config.pointnet_widths)):
        linear(f"pointnet/{i}", widths[i], widths[i + 1])
        # zero-padded points must not land on the activation's exact
        # saturation value, where max-pool ties pick up flat subgradients
        params[f"pointnet/{i}/b"] = tensor(rng.normal(0.0, 0.05, widths[i + 1]))
    linear("proj/road", config.pointnet_widths[-1] + dims.polyline_classes, d)
    linear("proj/frames", dims.frame_width, d)
    linear("proj/tracks", dims.track_width, d)
    linear("proj/signals", dims.signal_width, d)

    for i in range(config.road_layers):
        p = f"road/{i}/"
        norm(p + "ln1")
        attention(p + "attn/")
        norm(p + "ln2")
        mlp(p + "mlp/")
    norm("road/out")

    for i in range(config.fact_layers):
        p = f"fact/{i}/"
        norm(p + "ln_t")
        attention(p + "time/")
        norm(p + "ln_o")
        attention(p + "obj/")
        norm(p + "ln_q")
        norm(p + "ln_kv")
        attention(p + "cross/")
        norm(p + "ln_m")
        mlp(p + "mlp/")
    norm("fact/out")

    linear("head/tracks", d, dims.track_width)
    linear("head/signals", d, dims.signal_width)
    linear("head/labels", d, dims.polyline_classes)
    linear("head/points", d, dims.points_per_polyline * dims.point_width)
    return params


# -- encoder ------------------------------------------------------------------


def _norm(x, params, prefix):
    return ad.layer_norm(x, params[prefix + "/g"], params[prefix + "/b"])


def _mlp(x, params, prefix):
    h = ad.gelu(ad.affine(x, params[prefix + "0/w"], params[prefix + "0/b"]))
    return ad.affine(h, params[prefix + "1/w"], params[prefix + "1/b"])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.data.shape
    return x.reshape((b, n, heads, d // heads)).transpose((0, 2, 1, 3))


def _attention(q_in: Tensor, kv_in: Tensor, params, prefix: str, heads: int) -> Tensor:
    q = ad.affine(q_in, params[prefix + "q/w"], params[prefix + "q/b"])
    k = ad.affine(kv_in, params[prefix + "k/w"], params[prefix + "k/b"])
    v = ad.affine(kv_in, params[prefix + "v/w"], params[prefix + "v/b"])
    per_head = q.data.shape[-1] // heads
    out = ad.softmax_attention(
        _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads), per_head**-0.5
    )
    b, _, n, _ = out.data.shape
    merged = out.transpose((0, 2, 1, 3)).reshape((b, n, heads * per_head))
    return ad.affine(merged, params[prefix + "o/w"], params[prefix + "o/b"])


def _road_layer(x: Tensor, params, prefix: str, heads: int) -> Tensor:
    h = _norm(x, params, prefix + "ln1")
    x = x + _attention(h, h, params, prefix + "attn/", heads)
    return x + _mlp(_norm(x, params, prefix + "ln2"), params, prefix + "mlp/")


def _factorized_layer(v: Tensor, z_r: Tensor, params, prefix: str, heads: int) -> Tensor:
    b, n_obj, steps, d = v.data.shape
    # time axis: one sequence per object
    h = _norm(v, params, prefix + "ln_t").reshape((b * n_obj, steps, d))
    v = v + _attention(h, h, params, prefix + "time/", heads).reshape((b, n_obj, steps, d))
    # object axis: one sequence per step
    h = _norm(v, params, prefix + "ln_o").transpose((0, 2, 1, 3)).reshape((b * steps, n_obj, d))
    dx = _attention(h, h, params, prefix + "obj/", heads)
    v = v + dx.reshape((b, steps, n_obj, d)).transpose((0, 2, 1, 3))
    # every object-step queries the finished road tokens
    q = _norm(v, params, prefix + "ln_q").reshape((b, n_obj * steps, d))
    kv = _norm(z_r, params, prefix + "ln_kv")
    v = v + _attention(q, kv, params, prefix + "cross/", heads).reshape((b, n_obj, steps, d))
    return v + _mlp(_norm(v, params, prefix + "ln_m"), params, prefix + "mlp/")


def _pointnet(points: np.ndarray, params, config: EncoderConfig) -> Tensor:
    """Per-point MLP then max-pool over the point axis; order-invariant.

    The last layer stays linear: a saturating activation before the pool
    parks dissimilar points on the same exact value, and the tied max then
    carries a flat subgradient for some of them.
    """
    h = Tensor(points)
    last = len(config.pointnet_widths) - 1
    for i in range(len(config.pointnet_widths)):
        h = ad.affine(h, params[f"pointnet/{i}/w"], params[f"pointnet/{i}/b"])
        if i != last:
            h = ad.gelu(h)
    return ad.max_pool(h, axis=-2)


def pointnet_collapse(points: np.ndarray, params, config: EncoderConfig) -> Tensor:
    """Collapse one polyline's points [S, point_width] to a single vector."""
    return _pointnet(np.asarray(points), params, config)


def encode_arrays(
    arrays: dict[str, np.ndarray],
    masks: dict[str, np.ndarray],
    params: dict[str, Tensor],
    config: EncoderConfig,
    *,
    object_pe: bool = True,
    time_pe: bool = True,
) -> Embeddings:
    """Encode a batch of scenario tensors under the given input masks."""
    dt = params["proj/tracks/w"].data.dtype
    tracks = np.asarray(arrays["tracks"], dtype=dt)
    signals = np.asarray(arrays["signals"], dtype=dt)
    frames = np.asarray(arrays["frames"], dtype=dt)
    labels = np.asarray(arrays["labels"], dtype=dt)
    points = np.asarray(arrays["points"], dtype=dt)
    for name, want in (
        ("tracks", tracks.shape[:3]),
        ("signals", signals.shape[:3]),
        ("polylines", frames.shape[:2]),
    ):
        if masks[name].shape != want:
            raise ValueError(f"{name} mask shape {masks[name].shape} does not match {want}")
    keep_t = (~masks["tracks"]).astype(dt)
    keep_s = (~masks["signals"]).astype(dt)
    keep_z = (~masks["polylines"]).astype(dt)

    # raw zeroing: hidden slots must not leak through projection biases
    tracks = tracks * keep_t[..., None]
    signals = signals * keep_s[..., None]
    labels = labels * keep_z[..., None]
    points = points * keep_z[..., None, None]

    collapsed = _pointnet(points, params, config)
    y_r = ad.affine(
        ad.concat([collapsed, Tensor(labels)], axis=-1),
        params["proj/road/w"],
        params["proj/road/b"],
    )
    y_r = y_r * keep_z[..., None]
    f_proj = ad.affine(Tensor(frames), params["proj/frames/w"], params["proj/frames/b"])
    # the frame projection doubles as the road positional code and is never masked
    y_r = y_r + f_proj

    y_t = ad.affine(Tensor(tracks), params["proj/tracks/w"], params["proj/tracks/b"])
    y_s = ad.affine(Tensor(signals), params["proj/signals/w"], params["proj/signals/b"])
    y_v = ad.concat([y_t * keep_t[..., None], y_s * keep_s[..., None]], axis=1)
    n_obj, steps = y_v.data.shape[1], y_v.data.shape[2]
    if object_pe:
        y_v = y_v + sinusoidal_encoding(n_obj, config.hidden).astype(dt)[None, :, None, :]
    if time_pe:
        y_v = y_v + sinusoidal_encoding(steps, config.hidden).astype(dt)[None, None, :, :]

    z_r = y_r
    for i in range(config.road_layers):
        z_r = _road_layer(z_r, params, f"road/{i}/", config.heads)
    z_r = _norm(z_r, params, "road/out")

    z_v = y_v
    for i in range(config.fact_layers):
        z_v = _factorized_layer(z_v, z_r, params, f"fact/{i}/", config.heads)
    z_v = _norm(z_v, params, "fact/out")

    return Embeddings(
        y_r=y_r, f_proj=f_proj, y_v=y_v, z_r=z_r, z_v=z_v, n_tracks=tracks.shape[1]
    )


def encode(
    scenario: Scenario,
    masks: MaskSet,
    params: dict[str, Tensor],
    config: EncoderConfig,
    **kwargs,
) -> Embeddings:
    """Encode one scenario; returned embeddings carry a batch axis of size 1."""
    return encode_arrays(batch_scenarios([scenario]), batch_masks([masks]), params, config, **kwargs)


def decode(emb: Embeddings, params: dict[str, Tensor]) -> Reconstruction:
    """Linear heads from the latents back to input-shaped tensors."""
    z_t = emb.z_v[:, : emb.n_tracks]
    z_s = emb.z_v[:, emb.n_tracks :]
    tracks = ad.affine(z_t, params["head/tracks/w"], params["head/tracks/b"])
    signals = ad.affine(z_s, params["head/signals/w"], params["head/signals/b"])
    labels = ad.affine(emb.z_r, params["head/labels/w"], params["head/labels/b"])
    flat = ad.affine(emb.z_r, params["head/points/w"], params["head/points/b"])
    b, n_z, wide = flat.data.shape
    points = flat.reshape((b, n_z, wide // POINT_WIDTH, POINT_WIDTH))
    return Reconstruction(tracks=tracks, signals=signals, labels=labels, points=points)


# -- loss ---------------------------------------------------------------------


def _track_term(pred: Tensor, target: np.ndarray, covered: np.ndarray) -> Tensor:
    """Sum of per-slot L1 + class CE (existence-gated) + existence BCE."""
    exist = target[..., TRACK_EXIST]
    cont = ad.masked_l1(
        pred[..., TRACK_CONTINUOUS],
        target[..., TRACK_CONTINUOUS],
        (covered * exist)[..., None],
    )
    cls = ad.cross_entropy_logits(pred[..., TRACK_CLASS], target[..., TRACK_CLASS], covered * exist)
    ex = ad.masked_bce(pred[..., TRACK_EXIST], exist, covered)
    return cont + cls + ex


def reconstruction_loss_arrays(
    recon: Reconstruction,
    targets: dict[str, np.ndarray],
    cover: dict[str, np.ndarray],
    config: EncoderConfig,
) -> tuple[Tensor, dict]:
    """Weighted reconstruction loss over loss-mask-covered slots.

    `cover` holds boolean arrays (True = loss applies) shaped like the mask
    arrays from batch_masks.  Returns (total, components); components maps
    tracks/signals/road/ego to their mean-loss tensors and "zero_coverage"
    to the names whose cover was empty (their term is an ungraded zero).
    """
    dt = recon.tracks.data.dtype
    cov_t = np.asarray(cover["tracks"], dtype=dt)
    cov_s = np.asarray(cover["signals"], dtype=dt)
    cov_z = np.asarray(cover["polylines"], dtype=dt)
    track_t = np.asarray(targets["tracks"], dtype=dt)
    signal_t = np.asarray(targets["signals"], dtype=dt)
    label_t = np.asarray(targets["labels"], dtype=dt)
    point_t = np.asarray(targets["points"], dtype=dt)

    components: dict = {}
    zero: list[str] = []

    def finish(name: str, term: Tensor, count: float):
        if count > 0:
            components[name] = term / count
        else:
            zero.append(name)
            components[name] = Tensor(np.asarray(0.0, dtype=dt))

    finish("tracks", _track_term(recon.tracks, track_t, cov_t), float(cov_t.sum()))
    finish(
        "ego",
        _track_term(recon.tracks[:, :1], track_t[:, :1], cov_t[:, :1]),
        float(cov_t[:, :1].sum()),
    )

    pose = ad.masked_l1(
        recon.signals[..., SIGNAL_POSE], signal_t[..., SIGNAL_POSE], cov_s[..., None]
    )
    state = ad.cross_entropy_logits(recon.signals[..., SIGNAL_STATE], signal_t[..., SIGNAL_STATE], cov_s)
    finish("signals", pose + state, float(cov_s.sum()))

    # dead polylines have all-zero label rows, which contribute nothing to CE
    label_ce = ad.cross_entropy_logits(recon.labels, label_t, cov_z)
    p_exist = point_t[..., POINT_EXIST]
    span = ad.masked_l1(
        recon.points[..., :POINT_EXIST],
        point_t[..., :POINT_EXIST],
        (cov_z[..., None] * p_exist)[..., None],
    )
    p_ex = ad.masked_bce(recon.points[..., POINT_EXIST], p_exist, cov_z[..., None])
    finish("road", label_ce + span + p_ex, float(cov_z.sum()))

    components["zero_coverage"] = tuple(zero)
    total = (
        config.lambda_tracks * components["tracks"]
        + config.lambda_signals * components["signals"]
        + config.lambda_road * components["road"]
        + config.lambda_ego * components["ego"]
    )
    return total, components


def reconstruction_loss(
    recon: Reconstruction,
    scenario: Scenario,
    loss_mask: MaskSet,
    config: EncoderConfig,
) -> tuple[Tensor, dict]:
    """Single-scenario wrapper; the loss applies where loss_mask is True."""
    return reconstruction_loss_arrays(
        recon, batch_scenarios([scenario]), batch_masks([loss_mask]), config
    )
