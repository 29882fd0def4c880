"""Time-conditioned 1D U-Net noise predictor.

Layout, from input to output::

    in_conv
    down stage s (s = 0..S-1): res_blocks_down ResBlocks, each output kept
                               as a skip; DownSample between stages
    mid:                       mid_blocks x (ResBlock + AttnBlock)
    up stage s (s = S-1..0):   res_blocks_up ResBlocks; the first
                               res_blocks_down concatenate a skip of the same
                               length; AttnBlock after ResBlock number
                               ``attn_block`` on stages in ``attn_stages``;
                               UpSample between stages
    out: GroupNorm -> SiLU -> conv to one channel (zero-initialized)

Parameters live in a flat ``dict[str, np.ndarray]`` whose keys and shapes
depend only on the :class:`UNetConfig`.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autograd as ag
from .diffusion import q_sample
from .schedule import NoiseSchedule

Params = dict


@dataclass(frozen=True)
class UNetConfig:
    length: int = 2048
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2, 4)
    res_blocks_down: int = 2
    res_blocks_up: int = 3
    mid_blocks: int = 2
    attn_stages: Optional[tuple] = None  # None: every up stage
    attn_block: int = 3  # 1-based ResBlock index within an up stage
    time_embed_dim: Optional[int] = None  # None: 4 * base_channels
    norm_groups: int = 8
    init_gain: float = 1.0
    precision: str = "single"
    padding: str = "zeros"  # "circular" wraps records end to end

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))
        if self.attn_stages is not None:
            object.__setattr__(self, "attn_stages", tuple(self.attn_stages))
        self.validate()

    @property
    def num_stages(self) -> int:
        return len(self.channel_multipliers)

    @property
    def num_downsamples(self) -> int:
        return self.num_stages - 1

    @property
    def temb_dim(self) -> int:
        return self.time_embed_dim or 4 * self.base_channels

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32

    def stage_has_attention(self, stage: int) -> bool:
        return self.attn_stages is None or stage in self.attn_stages

    def validate(self) -> None:
        ints = {
            "length": self.length,
            "base_channels": self.base_channels,
            "res_blocks_down": self.res_blocks_down,
            "res_blocks_up": self.res_blocks_up,
            "mid_blocks": self.mid_blocks,
            "norm_groups": self.norm_groups,
            "temb_dim": self.temb_dim,
        }
        for k, v in ints.items():
            if int(v) != v or v < 1:
                raise ValueError(f"{k} must be a positive integer, got {v!r}")
        if not self.channel_multipliers or any(m < 1 for m in self.channel_multipliers):
            raise ValueError("channel_multipliers must be a nonempty list of positive ints")
        if self.length % (2 ** self.num_downsamples):
            raise ValueError(
                f"length {self.length} not divisible by 2^{self.num_downsamples}"
            )
        if self.base_channels % 2:
            raise ValueError("base_channels must be even (it sets the sinusoid width)")
        if self.res_blocks_up < self.res_blocks_down:
            raise ValueError("res_blocks_up must be >= res_blocks_down (one skip per down block)")
        if self.precision not in ("single", "double"):
            raise ValueError(f"precision must be 'single' or 'double', got {self.precision!r}")
        if self.padding not in ("zeros", "circular"):
            raise ValueError(f"padding must be 'zeros' or 'circular', got {self.padding!r}")
        if self.attn_stages is not None and any(
            s < 0 or s >= self.num_stages for s in self.attn_stages
        ):
            raise ValueError(f"attn_stages out of range: {self.attn_stages}")

    def to_json(self) -> str:
        """Canonical JSON (sorted keys, no whitespace)."""
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        if self.attn_stages is not None:
            d["attn_stages"] = list(self.attn_stages)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown UNetConfig keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, s: str) -> "UNetConfig":
        return cls.from_dict(json.loads(s))


def norm_groups_for(channels: int, max_groups: int) -> int:
    g = min(max_groups, channels)
    while channels % g:
        g -= 1
    return g


# architecture walk shared by the shape table and the forward pass


@dataclass
class _Block:
    kind: str  # conv | res | attn | down | up | norm
    name: str
    c_in: int
    c_out: int
    skip_in: int = 0  # channels concatenated from the encoder
    push_skip: bool = False
    extra: dict = field(default_factory=dict)


def architecture(config: UNetConfig) -> list:
    """Ordered block list of the network (after the time embedding MLP)."""
    base = config.base_channels
    chans = [base * m for m in config.channel_multipliers]
    blocks = [_Block("conv", "in_conv", 1, chans[0])]
    skips = []
    cur = chans[0]
    for s, ch in enumerate(chans):
        for r in range(config.res_blocks_down):
            blocks.append(_Block("res", f"down{s}.res{r}", cur, ch, push_skip=True))
            cur = ch
            skips.append(ch)
        if s < config.num_stages - 1:
            blocks.append(_Block("down", f"down{s}.downsample", cur, cur))
    for m in range(config.mid_blocks):
        blocks.append(_Block("res", f"mid.res{m}", cur, cur))
        blocks.append(_Block("attn", f"mid.attn{m}", cur, cur))
    for s in reversed(range(config.num_stages)):
        ch = chans[s]
        for r in range(config.res_blocks_up):
            skip = skips.pop() if r < config.res_blocks_down else 0
            blocks.append(_Block("res", f"up{s}.res{r}", cur, ch, skip_in=skip))
            cur = ch
            if r + 1 == config.attn_block and config.stage_has_attention(s):
                blocks.append(_Block("attn", f"up{s}.attn{r}", cur, cur))
        if s > 0:
            blocks.append(_Block("up", f"up{s}.upsample", cur, cur))
    blocks.append(_Block("norm", "out.norm", cur, cur))
    blocks.append(_Block("conv", "out.conv", cur, 1))
    return blocks


def param_shapes(config: UNetConfig) -> "OrderedDict[str, tuple]":
    """Name -> shape table; a pure function of the config."""
    D = config.temb_dim
    shapes = OrderedDict()
    shapes["temb.dense0.w"] = (D, config.base_channels)
    shapes["temb.dense0.b"] = (D,)
    shapes["temb.dense1.w"] = (D, D)
    shapes["temb.dense1.b"] = (D,)
    for blk in architecture(config):
        n = blk.name
        if blk.kind == "conv":
            shapes[f"{n}.w"] = (blk.c_out, blk.c_in, 3)
            shapes[f"{n}.b"] = (blk.c_out,)
        elif blk.kind == "down":
            shapes[f"{n}.w"] = (blk.c_out, blk.c_in, 4)
            shapes[f"{n}.b"] = (blk.c_out,)
        elif blk.kind == "up":
            shapes[f"{n}.w"] = (blk.c_out, blk.c_in, 3)
            shapes[f"{n}.b"] = (blk.c_out,)
        elif blk.kind == "norm":
            shapes[f"{n}.g"] = (blk.c_in,)
            shapes[f"{n}.b"] = (blk.c_in,)
        elif blk.kind == "res":
            cin = blk.c_in + blk.skip_in
            shapes[f"{n}.norm1.g"] = (cin,)
            shapes[f"{n}.norm1.b"] = (cin,)
            shapes[f"{n}.conv1.w"] = (blk.c_out, cin, 3)
            shapes[f"{n}.conv1.b"] = (blk.c_out,)
            shapes[f"{n}.temb.w"] = (blk.c_out, D)
            shapes[f"{n}.temb.b"] = (blk.c_out,)
            shapes[f"{n}.norm2.g"] = (blk.c_out,)
            shapes[f"{n}.norm2.b"] = (blk.c_out,)
            shapes[f"{n}.conv2.w"] = (blk.c_out, blk.c_out, 3)
            shapes[f"{n}.conv2.b"] = (blk.c_out,)
            if cin != blk.c_out:
                shapes[f"{n}.shortcut.w"] = (blk.c_out, cin, 1)
                shapes[f"{n}.shortcut.b"] = (blk.c_out,)
        elif blk.kind == "attn":
            c = blk.c_in
            shapes[f"{n}.norm.g"] = (c,)
            shapes[f"{n}.norm.b"] = (c,)
            for p in ("q", "k", "v", "proj"):
                shapes[f"{n}.{p}.w"] = (c, c, 1)
                shapes[f"{n}.{p}.b"] = (c,)
    return shapes


def parameter_count(config: UNetConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def init_params(config: UNetConfig, seed: int = 0) -> Params:
    """Fan-in scaled normal weights, unit norm scales, zero biases.

    The output convolution starts at zero so the untrained model predicts
    zero noise.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    dtype = config.dtype
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "g":
            arr = np.ones(shape)
        elif leaf == "b":
            arr = np.zeros(shape)
        elif name == "out.conv.w":
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            arr = rng.standard_normal(shape) * (config.init_gain / np.sqrt(fan_in))
        params[name] = arr.astype(dtype)
    return params


def time_embedding(t, dim: int) -> np.ndarray:
    """Interleaved sinusoidal embedding: ``[sin(t w_0), cos(t w_0), sin(t w_1), ...]``.

    ``w_i = 10000^(-2i/dim)``. Scalar ``t`` gives a ``(dim,)`` vector, an
    array of steps gives ``(len(t), dim)``.
    """
    if dim % 2:
        raise ValueError(f"embedding width must be even, got {dim}")
    t_arr = np.asarray(t, dtype=np.float64)
    freqs = 10000.0 ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    args = t_arr[..., None] * freqs
    out = np.empty(t_arr.shape + (dim,))
    out[..., 0::2] = np.sin(args)
    out[..., 1::2] = np.cos(args)
    return out


def _conv(tp, config, name, h, stride=1, pad=1):
    if config.padding == "circular" and pad:
        return ag.conv1d(ag.pad_circular(h, pad), tp[f"{name}.w"], tp[f"{name}.b"], stride, 0)
    return ag.conv1d(h, tp[f"{name}.w"], tp[f"{name}.b"], stride, pad)


def _res_block(tp, config, name, h, temb_act):
    groups = norm_groups_for(h.shape[1], config.norm_groups)
    x_in = h
    h = ag.silu(ag.group_norm(h, tp[f"{name}.norm1.g"], tp[f"{name}.norm1.b"], groups))
    h = _conv(tp, config, f"{name}.conv1", h)
    h = ag.add_channel(h, ag.linear(temb_act, tp[f"{name}.temb.w"], tp[f"{name}.temb.b"]))
    groups = norm_groups_for(h.shape[1], config.norm_groups)
    h = ag.silu(ag.group_norm(h, tp[f"{name}.norm2.g"], tp[f"{name}.norm2.b"], groups))
    h = _conv(tp, config, f"{name}.conv2", h)
    if f"{name}.shortcut.w" in tp:
        x_in = ag.conv1d(x_in, tp[f"{name}.shortcut.w"], tp[f"{name}.shortcut.b"])
    return ag.add(x_in, h)


def _attn_block(tp, config, name, h):
    groups = norm_groups_for(h.shape[1], config.norm_groups)
    n = ag.group_norm(h, tp[f"{name}.norm.g"], tp[f"{name}.norm.b"], groups)
    q = ag.conv1d(n, tp[f"{name}.q.w"], tp[f"{name}.q.b"])
    k = ag.conv1d(n, tp[f"{name}.k.w"], tp[f"{name}.k.b"])
    v = ag.conv1d(n, tp[f"{name}.v.w"], tp[f"{name}.v.b"])
    a = ag.attention(q, k, v)
    return ag.add(h, ag.conv1d(a, tp[f"{name}.proj.w"], tp[f"{name}.proj.b"]))


def forward_graph(tp: dict, config: UNetConfig, x_t: np.ndarray, t) -> ag.Tensor:
    """Build the prediction as an autograd tensor of shape ``(B, 1, L)``.

    ``tp`` maps parameter names to :class:`autograd.Tensor` leaves.
    """
    dtype = config.dtype
    x = np.asarray(x_t)
    if x.ndim != 2 or x.shape[1] != config.length:
        raise ValueError(f"expected input (B, {config.length}), got {x.shape}")
    t = np.broadcast_to(np.asarray(t), (x.shape[0],))
    emb = ag.tensor(time_embedding(t, config.base_channels).astype(dtype))
    temb = ag.linear(emb, tp["temb.dense0.w"], tp["temb.dense0.b"])
    temb = ag.linear(ag.silu(temb), tp["temb.dense1.w"], tp["temb.dense1.b"])
    temb_act = ag.silu(temb)

    h = ag.tensor(x.astype(dtype)[:, None, :])
    skips = []
    for blk in architecture(config):
        n = blk.name
        if blk.kind == "conv":
            h = _conv(tp, config, n, h)
        elif blk.kind == "res":
            if blk.skip_in:
                s = skips.pop()
                if s.shape[2] != h.shape[2]:
                    raise AssertionError(f"skip length mismatch at {n}")
                h = ag.concat(h, s)
            h = _res_block(tp, config, n, h, temb_act)
            if blk.push_skip:
                skips.append(h)
        elif blk.kind == "attn":
            h = _attn_block(tp, config, n, h)
        elif blk.kind == "down":
            h = _conv(tp, config, n, h, stride=2)
        elif blk.kind == "up":
            h = _conv(tp, config, n, ag.upsample_nearest(h))
        elif blk.kind == "norm":
            groups = norm_groups_for(h.shape[1], config.norm_groups)
            h = ag.silu(ag.group_norm(h, tp[f"{n}.g"], tp[f"{n}.b"], groups))
    return h


def _leaves(params: Params, requires_grad: bool) -> dict:
    return {k: ag.Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def forward(params: Params, config: UNetConfig, x_t, t, debug: bool = False) -> np.ndarray:
    """Predicted noise, same ``(B, L)`` shape as ``x_t``."""
    with ag.no_grad():
        if debug:
            with ag.detect_anomaly():
                out = forward_graph(_leaves(params, False), config, x_t, t)
        else:
            out = forward_graph(_leaves(params, False), config, x_t, t)
    return out.data[:, 0, :]


def loss_and_gradients(params: Params, config: UNetConfig, x0, t, eps, schedule: NoiseSchedule):
    """Simplified objective and its exact gradient w.r.t. every parameter."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    x_t = q_sample(x0, t, eps, schedule)
    tp = _leaves(params, True)
    pred = forward_graph(tp, config, x_t, t)
    loss = ag.mse(pred, eps[:, None, :])
    value = float(loss.data)
    if not np.isfinite(value):
        bad = next((k for k, v in params.items() if not np.all(np.isfinite(v))), None)
        where = f"parameter {bad!r}" if bad else "an intermediate activation"
        raise FloatingPointError(f"non-finite loss; first offending tensor: {where}")
    loss.backward()
    grads = {}
    for k, leaf in tp.items():
        g = leaf.grad
        grads[k] = np.zeros_like(params[k]) if g is None else np.asarray(g, dtype=params[k].dtype)
        if not np.all(np.isfinite(grads[k])):
            raise FloatingPointError(f"non-finite gradient in {k!r}")
    return value, grads


class UNetPredictor:
    """Callable ``(x_t, t) -> eps_hat`` binding parameters to a config."""

    def __init__(self, params: Params, config: UNetConfig):
        self.params = params
        self.config = config

    def __call__(self, x_t, t):
        return forward(self.params, self.config, x_t, t)
