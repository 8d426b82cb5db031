"""Dual-stream encoder / fusion / decoder forecaster and its single-stream variants.

Three variants share the same building blocks:

* ``rap_dual_stream``: independent query and reference encoders, latents fused
  by channel concatenation, decoder fed skips from both encoders.
* ``baseline_single_stream``: query encoder only.
* ``naive_concat``: the reference future is stacked onto the query channels
  and pushed through the unmodified single-stream network.

Time is folded into channels at the input (``t * c`` channels) and unfolded at
the output. Internally activations are channels-last batches.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ..field import DimensionError, NonFiniteError, SpatiotemporalField
from . import layers as L

VARIANTS = ("rap_dual_stream", "baseline_single_stream", "naive_concat")
GROUPS = ("theta_query", "theta_ref", "theta_dec")
_GROUP_PREFIX = {"theta_query": "query.", "theta_ref": "ref.", "theta_dec": "dec."}


class UsageError(RuntimeError):
    """Raised when an operation is called with arguments its variant forbids."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ArchitectureConfig:
    t_in: int
    t_out: int
    c: int
    h: int
    w: int
    levels: int = 3
    base_channels: int = 8
    variant: str = "rap_dual_stream"
    ref_encoder_depth: Optional[int] = None
    kernel_size: int = 3
    growth: int = 2
    downsample: int = 2
    activation: str = "leaky_relu_0.1"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.levels < 2:
            raise ConfigError("levels must be >= 2")
        if (self.kernel_size, self.growth, self.downsample, self.activation) != (
            3,
            2,
            2,
            "leaky_relu_0.1",
        ):
            raise ConfigError("only 3x3 kernels, x2 growth/downsampling and leaky ReLU(0.1) are supported")
        div = 2 ** (self.levels - 1)
        if self.h % div or self.w % div:
            raise ConfigError(f"grid {self.h}x{self.w} not divisible by 2^(L-1)={div}")
        if self.ref_encoder_depth is None:
            object.__setattr__(self, "ref_encoder_depth", self.levels)
        if not 1 <= self.ref_encoder_depth <= self.levels:
            raise ConfigError("ref_encoder_depth must lie in [1, levels]")

    def channels(self, level: int) -> int:
        """Feature width at encoder level ``level`` (1-based)."""
        return self.base_channels * self.growth ** (level - 1)

    @property
    def uses_reference(self) -> bool:
        return self.variant != "baseline_single_stream"

    @property
    def query_in_channels(self) -> int:
        n = self.t_in * self.c
        if self.variant == "naive_concat":
            n += self.t_out * self.c
        return n

    @property
    def out_channels(self) -> int:
        return self.t_out * self.c

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        return cls(**d)


def _shapes(cfg: ArchitectureConfig) -> dict[str, tuple]:
    """Ordered name -> tensor shape for every learnable tensor of ``cfg``."""
    k = cfg.kernel_size
    shapes: dict[str, tuple] = {}

    def encoder(prefix, in_ch, depth):
        prev = in_ch
        for lvl in range(1, cfg.levels):
            ch = cfg.channels(lvl)
            if lvl < depth:
                shapes[f"{prefix}stage{lvl}.w"] = (ch, prev, k, k)
                shapes[f"{prefix}stage{lvl}.b"] = (ch,)
                prev = ch
            nxt = cfg.channels(lvl + 1)
            shapes[f"{prefix}down{lvl}.w"] = (nxt, prev, k, k)
            shapes[f"{prefix}down{lvl}.b"] = (nxt,)
            prev = nxt
        top = cfg.channels(cfg.levels)
        shapes[f"{prefix}latent.w"] = (top, prev, k, k)
        shapes[f"{prefix}latent.b"] = (top,)

    dual = cfg.variant == "rap_dual_stream"
    encoder("query.", cfg.query_in_channels, cfg.levels)
    if dual:
        encoder("ref.", cfg.t_out * cfg.c, cfg.ref_encoder_depth)
    streams = 2 if dual else 1
    z_ch = cfg.channels(cfg.levels) * streams
    for step in range(1, cfg.levels):
        lvl = cfg.levels - step
        ch = cfg.channels(lvl)
        shapes[f"dec.up{step}.w"] = (ch, z_ch + ch * streams, k, k)
        shapes[f"dec.up{step}.b"] = (ch,)
        z_ch = ch
    shapes["dec.out.w"] = (cfg.out_channels, z_ch, k, k)
    shapes["dec.out.b"] = (cfg.out_channels,)
    return shapes


@dataclass
class DualStreamParameters:
    """All learnable tensors of one forecaster, keyed by dotted name.

    Names start with ``query.``, ``ref.`` or ``dec.``; the three groups are
    exposed as ``theta_query``, ``theta_ref`` and ``theta_dec``.
    """

    config: ArchitectureConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, config: ArchitectureConfig, seed: int = 0) -> "DualStreamParameters":
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in _shapes(config).items():
            if name.endswith(".b"):
                tensors[name] = np.zeros(shape, dtype=np.float32)
            else:
                bound = np.sqrt(1.0 / (shape[1] * shape[2] * shape[3]))
                tensors[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        return cls(config, tensors)

    @classmethod
    def zeros(cls, config: ArchitectureConfig) -> "DualStreamParameters":
        return cls(config, {n: np.zeros(s, np.float32) for n, s in _shapes(config).items()})

    def group(self, name: str) -> dict[str, np.ndarray]:
        prefix = _GROUP_PREFIX[name]
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}

    @property
    def theta_query(self):
        return self.group("theta_query")

    @property
    def theta_ref(self):
        return self.group("theta_ref")

    @property
    def theta_dec(self):
        return self.group("theta_dec")

    def copy(self) -> "DualStreamParameters":
        return DualStreamParameters(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def n_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def check_finite(self) -> None:
        for k, v in self.tensors.items():
            if not np.isfinite(v).all():
                raise NonFiniteError(f"parameter {k} holds non-finite values")


# ---------------------------------------------------------------------------
# layout helpers


def fold(batch: np.ndarray) -> np.ndarray:
    """(B, t, c, h, w) -> channels-last (B, h, w, t*c)."""
    b, t, c, h, w = batch.shape
    return np.ascontiguousarray(batch.reshape(b, t * c, h, w).transpose(0, 2, 3, 1))


def unfold(z: np.ndarray, t: int, c: int) -> np.ndarray:
    """Channels-last (B, h, w, t*c) -> (B, t, c, h, w)."""
    b, h, w, _ = z.shape
    return np.ascontiguousarray(z.transpose(0, 3, 1, 2)).reshape(b, t, c, h, w)


# ---------------------------------------------------------------------------
# encoder


def _conv_act(p, name, x, stride, tape):
    pre, cache = L.conv2d(x, p[name + ".w"], p[name + ".b"], stride)
    out = L.leaky_relu(pre)
    if tape is not None:
        tape.append((name, cache, pre))
    return out


def _conv_act_back(p, grads, tape_entry, dout):
    name, cache, pre = tape_entry
    dpre = L.leaky_relu_backward(dout, pre)
    dx, dw, db = L.conv2d_backward(dpre, cache, p[name + ".w"])
    grads[name + ".w"] = grads.get(name + ".w", 0) + dw
    grads[name + ".b"] = grads.get(name + ".b", 0) + db
    return dx


def _encode(p, prefix, cfg, depth, z, tape):
    """Returns (latent, skips) with skips finest-first; missing skips are zeros."""
    skips = []
    h = z
    for lvl in range(1, cfg.levels):
        if lvl < depth:
            h = _conv_act(p, f"{prefix}stage{lvl}", h, 1, tape)
            skips.append(h)
        else:
            b, hh, ww, _ = h.shape
            skips.append(np.zeros((b, hh, ww, cfg.channels(lvl)), dtype=h.dtype))
        h = _conv_act(p, f"{prefix}down{lvl}", h, 2, tape)
    latent = _conv_act(p, f"{prefix}latent", h, 1, tape)
    return latent, skips


def _encode_back(p, prefix, cfg, depth, tape, grads, dlatent, dskips):
    entries = {e[0]: e for e in tape if e[0].startswith(prefix)}
    dh = _conv_act_back(p, grads, entries[f"{prefix}latent"], dlatent)
    for lvl in range(cfg.levels - 1, 0, -1):
        dh = _conv_act_back(p, grads, entries[f"{prefix}down{lvl}"], dh)
        if lvl < depth:
            dh = dh + dskips[lvl - 1]
            dh = _conv_act_back(p, grads, entries[f"{prefix}stage{lvl}"], dh)
    return dh


# ---------------------------------------------------------------------------
# decoder


def _decode(p, cfg, h_fused, skips_q, skips_r, tape):
    if len(skips_q) != cfg.levels - 1 or (skips_r is not None and len(skips_r) != cfg.levels - 1):
        raise ConfigError(f"decoder needs {cfg.levels - 1} skips per stream")
    z = h_fused
    widths = []
    for step in range(1, cfg.levels):
        lvl = cfg.levels - step
        parts = [L.upsample2(z), skips_q[lvl - 1]]
        if skips_r is not None:
            parts.append(skips_r[lvl - 1])
        widths.append([q.shape[-1] for q in parts])
        z = _conv_act(p, f"dec.up{step}", L.concat(parts), 1, tape)
    out, cache = L.conv2d(z, p["dec.out.w"], p["dec.out.b"], 1)
    if tape is not None:
        tape.append(("dec.out", cache, None))
        tape.append(("dec.widths", widths, None))
    return out


def _decode_back(p, cfg, tape, grads, dout, dual):
    entries = {e[0]: e for e in tape}
    widths = entries["dec.widths"][1]
    _, cache, _ = entries["dec.out"]
    dz, dw, db = L.conv2d_backward(dout, cache, p["dec.out.w"])
    grads["dec.out.w"] = dw
    grads["dec.out.b"] = db
    n = cfg.levels - 1
    dskips_q = [None] * n
    dskips_r = [None] * n if dual else None
    for step in range(cfg.levels - 1, 0, -1):
        lvl = cfg.levels - step
        dcat = _conv_act_back(p, grads, entries[f"dec.up{step}"], dz)
        pieces = L.split(dcat, widths[step - 1])
        dz = L.upsample2_backward(pieces[0])
        dskips_q[lvl - 1] = pieces[1]
        if dual:
            dskips_r[lvl - 1] = pieces[2]
    return dz, dskips_q, dskips_r


# ---------------------------------------------------------------------------
# batched forward / backward


@dataclass
class Tape:
    """Activations retained by a training-mode forward pass."""

    variant: str
    entries: list
    latent_q_ch: int
    batch: int


def _check_inputs(cfg, xq, yr):
    exp_x = (cfg.t_in, cfg.c, cfg.h, cfg.w)
    if xq.shape[1:] != exp_x:
        raise DimensionError(f"query batch shape {xq.shape[1:]} != expected {exp_x}")
    if cfg.uses_reference:
        if yr is None:
            raise UsageError(f"variant {cfg.variant} requires a reference target")
        exp_y = (cfg.t_out, cfg.c, cfg.h, cfg.w)
        if yr.shape[1:] != exp_y or yr.shape[0] != xq.shape[0]:
            raise DimensionError(f"reference batch shape {yr.shape} != expected (B,) + {exp_y}")
    elif yr is not None:
        raise UsageError("baseline_single_stream takes no reference target")


def forward_batch(params: DualStreamParameters, xq, yr=None, keep: bool = False):
    """Forecast a batch. ``xq``: (B, t_in, c, h, w); ``yr``: (B, t_out, c, h, w).

    Returns ``(y_hat, tape)``; ``tape`` is None unless ``keep`` is set.
    """
    cfg = params.config
    p = params.tensors
    xq = np.asarray(xq, dtype=np.float32)
    if yr is not None:
        yr = np.asarray(yr, dtype=np.float32)
    _check_inputs(cfg, xq, yr)
    tape = [] if keep else None
    zq = fold(xq)
    if cfg.variant == "naive_concat":
        zq = L.concat([zq, fold(yr)])
    latent_q, skips_q = _encode(p, "query.", cfg, cfg.levels, zq, tape)
    if cfg.variant == "rap_dual_stream":
        latent_r, skips_r = _encode(p, "ref.", cfg, cfg.ref_encoder_depth, fold(yr), tape)
        h_fused = L.concat([latent_q, latent_r])
    else:
        skips_r = None
        h_fused = latent_q
    out = _decode(p, cfg, h_fused, skips_q, skips_r, tape)
    y_hat = unfold(out, cfg.t_out, cfg.c)
    t = Tape(cfg.variant, tape, latent_q.shape[-1], xq.shape[0]) if keep else None
    return y_hat, t


def backward_batch(params: DualStreamParameters, tape: Optional[Tape], dy_hat) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of ``sum(dy_hat * y_hat)`` for every parameter."""
    if tape is None or not tape.entries:
        raise UsageError("backward needs the activations of a forward(..., keep=True) pass")
    cfg = params.config
    p = params.tensors
    dual = cfg.variant == "rap_dual_stream"
    grads: dict[str, np.ndarray] = {}
    dout = fold(np.asarray(dy_hat, dtype=np.float32))
    dfused, dskips_q, dskips_r = _decode_back(p, cfg, tape.entries, grads, dout, dual)
    if dual:
        dlat_q, dlat_r = L.split(dfused, [tape.latent_q_ch, dfused.shape[-1] - tape.latent_q_ch])
        _encode_back(p, "ref.", cfg, cfg.ref_encoder_depth, tape.entries, grads, dlat_r, dskips_r)
    else:
        dlat_q = dfused
    _encode_back(p, "query.", cfg, cfg.levels, tape.entries, grads, dlat_q, dskips_q)
    out = {}
    for name, v in p.items():
        g = grads.get(name)
        out[name] = np.zeros_like(v) if g is None else np.asarray(g, dtype=np.float32).reshape(v.shape)
    return out


# ---------------------------------------------------------------------------
# single-sample public API


@dataclass
class EncodeOutput:
    """Latent and finest-first skip features, each channels-first ``(C, H, W)``."""

    h_latent: np.ndarray
    skips: list


def _chw(a):
    return np.ascontiguousarray(a[0].transpose(2, 0, 1))


def _hwc(a):
    return np.ascontiguousarray(np.asarray(a, dtype=np.float32).transpose(1, 2, 0))[None]


def encode(params: DualStreamParameters, z: SpatiotemporalField, stream: str = "query") -> EncodeOutput:
    """Run the ``query`` or ``ref`` encoder on one field."""
    cfg = params.config
    if stream == "query":
        prefix, depth, want = "query.", cfg.levels, cfg.query_in_channels
    elif stream == "ref":
        if cfg.variant != "rap_dual_stream":
            raise UsageError(f"variant {cfg.variant} has no reference encoder")
        prefix, depth, want = "ref.", cfg.ref_encoder_depth, cfg.t_out * cfg.c
    else:
        raise ValueError("stream must be 'query' or 'ref'")
    if z.t * z.c != want or (z.h, z.w) != (cfg.h, cfg.w):
        raise DimensionError(f"{stream} encoder expects {want} folded channels at {cfg.h}x{cfg.w}, got {z.shape}")
    latent, skips = _encode(params.tensors, prefix, cfg, depth, fold(z.data[None]), None)
    return EncodeOutput(_chw(latent), [_chw(s) for s in skips])


def fuse(hq: np.ndarray, hr: np.ndarray) -> np.ndarray:
    """Channel concatenation of two ``(C, H, W)`` feature maps, query block first."""
    if hq.shape[1:] != hr.shape[1:]:
        raise DimensionError(f"cannot fuse features of spatial size {hq.shape[1:]} and {hr.shape[1:]}")
    return np.concatenate([hq, hr], axis=0)


def decode(params: DualStreamParameters, h_fused, skips_q, skips_r=None) -> SpatiotemporalField:
    cfg = params.config
    out = _decode(
        params.tensors,
        cfg,
        _hwc(h_fused),
        [_hwc(s) for s in skips_q],
        None if skips_r is None else [_hwc(s) for s in skips_r],
        None,
    )
    return SpatiotemporalField(unfold(out, cfg.t_out, cfg.c)[0])


def forward(
    params: DualStreamParameters,
    x_query: SpatiotemporalField,
    y_ref: Optional[SpatiotemporalField] = None,
    return_tape: bool = False,
):
    """Forecast one sample. With ``return_tape`` also returns the activation tape."""
    y_hat, tape = forward_batch(
        params, x_query.data[None], None if y_ref is None else y_ref.data[None], keep=return_tape
    )
    out = SpatiotemporalField(y_hat[0])
    return (out, tape) if return_tape else out


def backward(params: DualStreamParameters, tape: Optional[Tape], upstream_grad) -> dict[str, np.ndarray]:
    """Parameter gradients of ``<upstream_grad, y_hat>`` for a single-sample tape."""
    g = upstream_grad.data if isinstance(upstream_grad, SpatiotemporalField) else np.asarray(upstream_grad)
    if g.ndim == 4:
        g = g[None]
    return backward_batch(params, tape, g)
