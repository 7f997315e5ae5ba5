"""Conditional time-dependent vector-field regressor: a ViT with long skip
connections (U-shape pairing), one token per latent pixel plus a time token.

Token layout: token 0 carries the embedded integration time, tokens 1.. are
spatial sites in row-major order. The noisy state and the condition frames
are channel-concatenated per site before the input projection; a sinusoidal
embedding of each condition's (signed) temporal distance is added on top.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

INIT_STD = 0.02
TIME_SCALE = 1000.0  # t in [0,1] is scaled before the sinusoidal embedding
MLP_RATIO = 4


@dataclass(frozen=True)
class ModelConfig:
    latent_height: int = 16
    latent_width: int = 16
    latent_channels: int = 1
    token_dim: int = 64
    depth: int = 5
    heads: int = 4
    skip_pairs: int = 2
    max_distance: int = 32
    use_reference: bool = True
    condition_slots: int = 1

    def __post_init__(self):
        if self.depth < 2 * self.skip_pairs + 1:
            raise ValueError(f"depth {self.depth} must be >= 2*skip_pairs+1")
        if self.token_dim % self.heads != 0:
            raise ValueError(f"token_dim {self.token_dim} not divisible by "
                             f"{self.heads} heads")
        if self.max_distance < 1 or self.condition_slots < 1:
            raise ValueError("max_distance and condition_slots must be >= 1")

    @property
    def n_tokens(self) -> int:
        return self.latent_height * self.latent_width + 1

    @property
    def in_features(self) -> int:
        return (1 + int(self.use_reference) + self.condition_slots) \
            * self.latent_channels

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_channels, self.latent_height, self.latent_width)


ModelParams = dict[str, Tensor]


# ---------------------------------------------------------------------------
# fixed (parameter-free) embeddings


def sinusoidal_embedding(pos: float, dim: int) -> np.ndarray:
    """Standard transformer embedding: interleaved sin/cos halves over
    geometrically spaced frequencies. Odd sign of `pos` survives in the sin
    half, which is how signed temporal offsets stay distinguishable."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = pos * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)])
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(1)])
    return emb


def positional_encoding_2d(h: int, w: int, dim: int) -> np.ndarray:
    """Fixed 2D encoding: first half encodes the row, second half the column."""
    half = dim // 2
    rows = np.stack([sinusoidal_embedding(r, half) for r in range(h)])
    cols = np.stack([sinusoidal_embedding(c, dim - half) for c in range(w)])
    grid = np.concatenate(
        [np.repeat(rows, w, axis=0), np.tile(cols, (h, 1))], axis=1)
    return grid  # [h*w, dim]


# ---------------------------------------------------------------------------
# parameters


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """N(0, std^2) truncated at 2 std, by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.token_dim
    c = cfg.latent_channels
    shapes: dict[str, tuple[int, ...]] = {
        "in_proj/w": (cfg.in_features, d),
        "in_proj/b": (d,),
        "time_proj/w": (d, d),
        "time_proj/b": (d,),
    }
    for s in range(cfg.condition_slots):
        shapes[f"dist{s}/w"] = (d, d)
        shapes[f"dist{s}/b"] = (d,)
    for i in range(cfg.depth):
        p = f"block{i}"
        shapes[f"{p}/ln1/g"] = (d,)
        shapes[f"{p}/ln1/b"] = (d,)
        shapes[f"{p}/attn/w_qkv"] = (d, 3 * d)
        shapes[f"{p}/attn/b_qkv"] = (3 * d,)
        shapes[f"{p}/attn/w_out"] = (d, d)
        shapes[f"{p}/attn/b_out"] = (d,)
        shapes[f"{p}/ln2/g"] = (d,)
        shapes[f"{p}/ln2/b"] = (d,)
        shapes[f"{p}/mlp/w1"] = (d, MLP_RATIO * d)
        shapes[f"{p}/mlp/b1"] = (MLP_RATIO * d,)
        shapes[f"{p}/mlp/w2"] = (MLP_RATIO * d, d)
        shapes[f"{p}/mlp/b2"] = (d,)
    for i in range(cfg.skip_pairs):
        j = cfg.depth - 1 - i  # receiving block
        shapes[f"skip{j}/w"] = (2 * d, d)
        shapes[f"skip{j}/b"] = (d,)
    shapes["out/lin/w"] = (d, d)
    shapes["out/lin/b"] = (d,)
    shapes["out/ln/g"] = (d,)
    shapes["out/ln/b"] = (d,)
    shapes["out/conv/w"] = (c, d, 3, 3)
    shapes["out/conv/b"] = (c,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init_params(cfg: ModelConfig, rng: np.random.Generator,
                dtype=np.float32) -> ModelParams:
    """Truncated-normal weights, zero biases, unit norm gains, and a zeroed
    final convolution so the initial field is identically zero."""
    params: ModelParams = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("/g"):
            data = np.ones(shape)
        elif name.endswith(("/b", "/b1", "/b2", "/b_qkv", "/b_out")):
            data = np.zeros(shape)
        elif name.startswith("out/conv"):
            data = np.zeros(shape)
        else:
            data = _trunc_normal(rng, shape, INIT_STD)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return params


def decayable(name: str) -> bool:
    """Weight decay applies to projection/attention/MLP weight matrices only."""
    return name.endswith(("/w", "/w_qkv", "/w_out", "/w1", "/w2")) \
        and not name.startswith("out/conv")


# ---------------------------------------------------------------------------
# 3x3 convolution (unit stride, zero padding 1) — the single conv in the repo


def conv3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x: [batch..., c_in, h, w] with 0 or 1 leading axes; w: [c_out, c_in, 3, 3]."""
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.data.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv3x3: bad shapes x={x.shape} w={w.shape}")
    if xd.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3x3: channel mismatch x={x.shape} w={w.shape}")
    pad = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.lib.stride_tricks.sliding_window_view(pad, (3, 3), axis=(2, 3))
    y = np.einsum("bchwij,ocij->bohw", cols, w.data) + b.data[:, None, None]
    out = Tensor(y[0] if squeeze else y)

    def adjoint(g):
        gd = g[None] if squeeze else g
        gw = np.einsum("bohw,bchwij->ocij", gd, cols)
        gb = gd.sum(axis=(0, 2, 3))
        gpad = np.pad(gd, ((0, 0), (0, 0), (1, 1), (1, 1)))
        gcols = np.lib.stride_tricks.sliding_window_view(gpad, (3, 3), axis=(2, 3))
        wflip = w.data[:, :, ::-1, ::-1]
        gx = np.einsum("bohwij,ocij->bchw", gcols, wflip)
        return (gx[0] if squeeze else gx), gw, gb

    return T._record(out, (x, w, b), adjoint)


# ---------------------------------------------------------------------------
# tokenization and forward


def _as_latent(arr, cfg: ModelConfig, what: str) -> np.ndarray:
    a = np.asarray(arr)
    if a.shape != cfg.latent_shape:
        raise ShapeError(f"{what} has shape {a.shape}, expected {cfg.latent_shape}")
    return a


def build_tokens(x, conds: list[tuple[np.ndarray, int]], t: float,
                 cfg: ModelConfig, params: ModelParams,
                 ref=None) -> Tensor:
    """Assemble the [n_tokens, token_dim] input sequence.

    `conds` is a list of (frame, signed temporal distance) pairs; `ref` is the
    immediately preceding frame (omitted when cfg.use_reference is false or in
    interpolation mode). Distance embeddings are added to every spatial token;
    the time token (index 0) never sees them.
    """
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"t must lie in [0,1], got {t}")
    if len(conds) != cfg.condition_slots:
        raise ShapeError(f"expected {cfg.condition_slots} condition frames, "
                         f"got {len(conds)}")
    for _, dist in conds:
        if dist == 0 or abs(dist) > cfg.max_distance:
            raise ValueError(f"condition distance {dist} outside "
                             f"[1, {cfg.max_distance}] in magnitude")
    dtype = params["in_proj/w"].dtype
    parts = [_as_latent(x, cfg, "x")]
    if cfg.use_reference:
        if ref is None:
            raise ValueError("reference frame required by this config")
        parts.append(_as_latent(ref, cfg, "ref"))
    elif ref is not None:
        raise ValueError("reference frame supplied but cfg.use_reference is false")
    parts.extend(_as_latent(f, cfg, "cond") for f, _ in conds)

    hw = cfg.latent_height * cfg.latent_width
    feats = np.concatenate(parts, axis=0)                     # [F, H, W]
    feats = feats.reshape(cfg.in_features, hw).T.astype(dtype)  # [HW, F]

    d = cfg.token_dim
    pos = positional_encoding_2d(cfg.latent_height, cfg.latent_width, d)
    spatial = T.add(T.matmul(Tensor(feats), params["in_proj/w"]),
                    params["in_proj/b"])
    spatial = T.add(spatial, Tensor(pos.astype(dtype)))
    # each slot projects its own distance embedding, so the association
    # between a condition frame and its temporal offset is preserved even
    # with several slots
    for s, (_, dist) in enumerate(conds):
        demb = Tensor(sinusoidal_embedding(float(dist), d).astype(dtype)[None])
        spatial = T.add(spatial, T.add(T.matmul(demb, params[f"dist{s}/w"]),
                                       params[f"dist{s}/b"]))

    temb = Tensor(sinusoidal_embedding(t * TIME_SCALE, d).astype(dtype)[None])
    token0 = T.add(T.matmul(temb, params["time_proj/w"]), params["time_proj/b"])
    return T.concat([token0, spatial], axis=0)


def tokenize(x, ref, cond, t: float, dist: int, cfg: ModelConfig,
             params: ModelParams) -> Tensor:
    """Next-frame-prediction tokenization: one condition frame at positive
    temporal distance `dist`, plus the reference frame when configured."""
    if dist < 1:
        raise ValueError(f"dist must be >= 1 in prediction mode, got {dist}")
    return build_tokens(x, [(cond, dist)], t, cfg, params,
                        ref=ref if cfg.use_reference else None)


def _vit_block(h: Tensor, cfg: ModelConfig, params: ModelParams, i: int) -> Tensor:
    p = f"block{i}"
    a = T.layer_norm(h, params[f"{p}/ln1/g"], params[f"{p}/ln1/b"])
    a = T.mhsa(a, params[f"{p}/attn/w_qkv"], params[f"{p}/attn/b_qkv"],
               params[f"{p}/attn/w_out"], params[f"{p}/attn/b_out"], cfg.heads)
    h = T.add(h, a)
    m = T.layer_norm(h, params[f"{p}/ln2/g"], params[f"{p}/ln2/b"])
    m = T.add(T.matmul(m, params[f"{p}/mlp/w1"]), params[f"{p}/mlp/b1"])
    m = T.gelu(m)
    m = T.add(T.matmul(m, params[f"{p}/mlp/w2"]), params[f"{p}/mlp/b2"])
    return T.add(h, m)


def forward(seq: Tensor, cfg: ModelConfig, params: ModelParams) -> Tensor:
    """Run the transformer trunk and project spatial tokens back to the
    latent grid. Accepts [n_tokens, d] or [batch, n_tokens, d]."""
    if seq.shape[-2] != cfg.n_tokens or seq.shape[-1] != cfg.token_dim:
        raise ShapeError(f"token sequence {seq.shape} inconsistent with config "
                         f"({cfg.n_tokens} tokens, dim {cfg.token_dim})")
    h = seq
    saved: list[Tensor] = []
    for i in range(cfg.depth):
        j = cfg.depth - 1 - i
        if j < cfg.skip_pairs:  # receiving side of the U: merge block j's twin
            h = T.add(T.matmul(T.concat([h, saved[j]], axis=-1),
                               params[f"skip{i}/w"]), params[f"skip{i}/b"])
        h = _vit_block(h, cfg, params, i)
        if i < cfg.skip_pairs:
            saved.append(h)

    spatial = T.tslice(h, (..., slice(1, None), slice(None)))
    o = T.add(T.matmul(spatial, params["out/lin/w"]), params["out/lin/b"])
    o = T.gelu(o)
    o = T.layer_norm(o, params["out/ln/g"], params["out/ln/b"])
    lead = seq.shape[:-2]
    o = T.reshape(o, lead + (cfg.latent_height, cfg.latent_width, cfg.token_dim))
    nd = len(lead)
    o = T.transpose(o, tuple(range(nd)) + (nd + 2, nd, nd + 1))  # [..., d, H, W]
    return conv3x3(o, params["out/conv/w"], params["out/conv/b"])
