"""Training loop: randomized target/condition sampling, the flow-matching
loss through the vector-field network, AdamW with linear warmup followed by
square-root decay, and binary checkpointing.

Prediction mode draws a target frame tau in {3..m}, conditions on one past
frame c in {1..tau-2} at distance tau-c, and always feeds frame tau-1 as the
motion reference. Interpolation mode drops the reference and draws one
condition from each temporal side of the target.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .flow import PathParams, cfm_loss, sample_conditional, target_field
from .model import ModelConfig, ModelParams, Tensor, build_tokens, decayable, \
    forward, param_shapes
from .rngutil import substream

CKPT_MAGIC = b"FCKP"
CKPT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


class CheckpointFormatError(ValueError):
    """Bad magic or unsupported version."""


class CheckpointTruncatedError(ValueError):
    """File ends mid-record; the message names the offending parameter."""


class CheckpointShapeError(ValueError):
    """Stored tensor shapes disagree with the embedded config."""


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 3000
    batch_size: int = 16
    base_lr: float = 5e-3
    weight_decay: float = 5e-6
    warmup_iters: int = 200
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    sigma_min: float = 1e-7
    seed: int = 0
    mode: str = "predict"  # or "interpolate"
    augment_brightness: float = 0.0

    def __post_init__(self):
        if self.iterations < 0 or self.base_lr <= 0 or self.warmup_iters < 0:
            raise ValueError("bad iterations/base_lr/warmup_iters")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("betas must lie in (0,1)")
        if self.mode not in ("predict", "interpolate"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.augment_brightness < 0:
            raise ValueError("augment_brightness must be >= 0")


@dataclass
class TrainingTuple:
    tau: int
    t: float
    x_noisy: np.ndarray
    u_target: np.ndarray
    conds: list  # [(frame, signed distance)] pairs
    ref: np.ndarray | None = None
    c: int = 0
    dist: int = 0


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def sample_training_tuple(clip, p: PathParams, mode: str,
                          rng: np.random.Generator,
                          augment_brightness: float = 0.0) -> TrainingTuple:
    """Draw one (target, time, noisy state, conditions) tuple from a clip.

    All indices are drawn uniformly from their legal sets; t ~ U[0,1) to stay
    clear of the degenerate path denominator at t=1.
    """
    m = len(clip)
    if m < 3:
        raise ValueError(f"clip too short ({m} frames, need >= 3)")
    frames = clip.frames
    if augment_brightness > 0:
        delta = rng.uniform(-augment_brightness, augment_brightness)
        frames = np.clip(frames + delta, 0.0, 1.0).astype(frames.dtype)

    def frame(i: int) -> np.ndarray:  # 1-indexed
        return frames[i - 1]

    if mode == "predict":
        tau = int(rng.integers(3, m + 1))
        c = int(rng.integers(1, tau - 1))
        t = float(rng.uniform(0.0, 1.0))
        x1 = frame(tau)
        x = sample_conditional(t, x1, p, rng)
        u = target_field(t, x, x1, p)
        return TrainingTuple(tau=tau, t=t, x_noisy=x, u_target=u,
                             conds=[(frame(c), tau - c)], ref=frame(tau - 1),
                             c=c, dist=tau - c)
    # interpolate: target strictly inside the clip, one condition per side
    tau = int(rng.integers(2, m))
    c_past = int(rng.integers(1, tau))
    c_future = int(rng.integers(tau + 1, m + 1))
    t = float(rng.uniform(0.0, 1.0))
    x1 = frame(tau)
    x = sample_conditional(t, x1, p, rng)
    u = target_field(t, x, x1, p)
    return TrainingTuple(tau=tau, t=t, x_noisy=x, u_target=u,
                         conds=[(frame(c_past), tau - c_past),
                                (frame(c_future), tau - c_future)])


def lr_schedule(it: int, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr, then base_lr * sqrt(warmup/it); continuous
    at the joint. With warmup 0 the decay is anchored at iteration 1."""
    if it < 1:
        raise ValueError("iteration index starts at 1")
    w = max(cfg.warmup_iters, 1)
    if it <= cfg.warmup_iters:
        return cfg.base_lr * it / w
    return cfg.base_lr * (w / it) ** 0.5


def batch_loss(params: ModelParams, batch: list[TrainingTuple],
               mcfg: ModelConfig) -> Tensor:
    """Flow-matching loss averaged over a batch of tuples (taped)."""
    if not batch:
        raise ValueError("batch must be non-empty")
    seqs = [build_tokens(tp.x_noisy, tp.conds, tp.t, mcfg, params,
                         ref=tp.ref if mcfg.use_reference else None)
            for tp in batch]
    tokens = T.stack(seqs, axis=0)
    v = forward(tokens, mcfg, params)
    u = Tensor(np.stack([tp.u_target for tp in batch]).astype(v.dtype))
    return cfm_loss(v, u)


def adamw_update(params: ModelParams, grads: dict[int, np.ndarray],
                 opt: OptimizerState, lr: float,
                 cfg: TrainConfig) -> tuple[ModelParams, OptimizerState]:
    """Decoupled-weight-decay Adam; decay skips biases, norm gains, and the
    zero-initialized output convolution."""
    step = opt.step + 1
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    new_params: ModelParams = {}
    new_m, new_v = {}, {}
    for name, p in params.items():
        g = grads[id(p)].astype(np.float32)
        m = b1 * opt.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * opt.v.get(name, 0.0) + (1 - b2) * g * g
        mhat = m / (1 - b1 ** step)
        vhat = v / (1 - b2 ** step)
        upd = lr * mhat / (np.sqrt(vhat) + eps)
        if cfg.weight_decay > 0 and decayable(name):
            upd = upd + lr * cfg.weight_decay * p.data
        new_params[name] = Tensor((p.data - upd).astype(p.data.dtype),
                                  requires_grad=True, name=name)
        new_m[name], new_v[name] = m, v
    return new_params, OptimizerState(step=step, m=new_m, v=new_v)


def train_step(params: ModelParams, opt: OptimizerState,
               batch: list[TrainingTuple], mcfg: ModelConfig,
               cfg: TrainConfig) -> tuple[ModelParams, OptimizerState, float]:
    """One forward/backward/AdamW step; returns the pre-update loss."""
    with T.Tape() as tape:
        loss = batch_loss(params, batch, mcfg)
    loss_val = loss.item()
    if not np.isfinite(loss_val):
        raise TrainingDivergedError(opt.step + 1, loss_val)
    grads = T.backward(loss, tape, leaves=params.values())
    lr = lr_schedule(opt.step + 1, cfg)
    new_params, new_opt = adamw_update(params, grads, opt, lr, cfg)
    return new_params, new_opt, loss_val


def train_loop(dataset, mcfg: ModelConfig, cfg: TrainConfig,
               params: ModelParams, opt: OptimizerState | None = None,
               callback=None, checkpoint_path: str | None = None,
               checkpoint_every: int = 0) -> tuple[ModelParams, OptimizerState]:
    """Run cfg.iterations optimization steps, sampling one clip uniformly per
    batch element. Each iteration derives its own rng sub-stream from
    (seed, iteration), so a resumed run replays the exact same draws."""
    if not dataset:
        raise ValueError("dataset must be non-empty")
    opt = opt or OptimizerState()
    p = PathParams(cfg.sigma_min)
    while opt.step < cfg.iterations:
        it = opt.step + 1
        rng = substream(cfg.seed, f"train/{it}")
        batch = []
        for _ in range(cfg.batch_size):
            clip = dataset[int(rng.integers(0, len(dataset)))]
            batch.append(sample_training_tuple(clip, p, cfg.mode, rng,
                                               cfg.augment_brightness))
        params, opt, loss = train_step(params, opt, batch, mcfg, cfg)
        if callback is not None:
            callback(it, loss, lr_schedule(it, cfg))
        if checkpoint_path and checkpoint_every and it % checkpoint_every == 0:
            save_checkpoint(params, opt, mcfg, cfg, checkpoint_path)
    return params, opt


# ---------------------------------------------------------------------------
# checkpoint serialization
#
# Layout (little-endian throughout): magic "FCKP", version u32, length-
# prefixed UTF-8 config text, parameter count u32, per-parameter records
# (length-prefixed name, rank u32, extents u32[], f32 data), optimizer-state
# count u32 and records in the same format (names prefixed "m/" and "v/"),
# then the step counter u64.


def _config_text(mcfg: ModelConfig, cfg: TrainConfig) -> str:
    items = {
        "model.latent_height": mcfg.latent_height,
        "model.latent_width": mcfg.latent_width,
        "model.latent_channels": mcfg.latent_channels,
        "model.token_dim": mcfg.token_dim,
        "model.depth": mcfg.depth,
        "model.heads": mcfg.heads,
        "model.skip_pairs": mcfg.skip_pairs,
        "model.max_distance": mcfg.max_distance,
        "model.use_reference": int(mcfg.use_reference),
        "model.condition_slots": mcfg.condition_slots,
        "train.mode": cfg.mode,
        "train.sigma_min": repr(cfg.sigma_min),
        "train.iterations": cfg.iterations,
        "train.batch_size": cfg.batch_size,
        "train.base_lr": repr(cfg.base_lr),
        "train.weight_decay": repr(cfg.weight_decay),
        "train.warmup_iters": cfg.warmup_iters,
        "train.seed": cfg.seed,
        "train.augment_brightness": repr(cfg.augment_brightness),
    }
    return "\n".join(f"{k}={v}" for k, v in items.items())


def _parse_config_text(text: str) -> tuple[ModelConfig, TrainConfig]:
    kv = dict(line.split("=", 1) for line in text.splitlines() if line)
    mcfg = ModelConfig(
        latent_height=int(kv["model.latent_height"]),
        latent_width=int(kv["model.latent_width"]),
        latent_channels=int(kv["model.latent_channels"]),
        token_dim=int(kv["model.token_dim"]),
        depth=int(kv["model.depth"]),
        heads=int(kv["model.heads"]),
        skip_pairs=int(kv["model.skip_pairs"]),
        max_distance=int(kv["model.max_distance"]),
        use_reference=bool(int(kv["model.use_reference"])),
        condition_slots=int(kv["model.condition_slots"]),
    )
    cfg = TrainConfig(
        iterations=int(kv["train.iterations"]),
        batch_size=int(kv["train.batch_size"]),
        base_lr=float(kv["train.base_lr"]),
        weight_decay=float(kv["train.weight_decay"]),
        warmup_iters=int(kv["train.warmup_iters"]),
        sigma_min=float(kv["train.sigma_min"]),
        seed=int(kv["train.seed"]),
        mode=kv["train.mode"],
        augment_brightness=float(kv["train.augment_brightness"]),
    )
    return mcfg, cfg


def _write_record(f, name: str, arr: np.ndarray) -> None:
    nb = name.encode()
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.astype("<f4").tobytes())


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointTruncatedError(
                f"{self.path}: truncated while reading {what}")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def read_record(self) -> tuple[str, np.ndarray]:
        (nlen,) = struct.unpack("<I", self.take(4, "record name length"))
        name = self.take(nlen, "record name").decode()
        (rank,) = struct.unpack("<I", self.take(4, f"rank of {name!r}"))
        shape = struct.unpack(f"<{rank}I",
                              self.take(4 * rank, f"extents of {name!r}"))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        raw = self.take(4 * count, f"data of {name!r}")
        return name, np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def save_checkpoint(params: ModelParams, opt: OptimizerState,
                    mcfg: ModelConfig, cfg: TrainConfig, path: str) -> None:
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        text = _config_text(mcfg, cfg).encode()
        f.write(struct.pack("<I", len(text)))
        f.write(text)
        f.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            _write_record(f, name, params[name].data)
        opt_records = []
        for name in sorted(params):
            if name in opt.m:
                opt_records.append((f"m/{name}", np.asarray(opt.m[name])))
                opt_records.append((f"v/{name}", np.asarray(opt.v[name])))
        f.write(struct.pack("<I", len(opt_records)))
        for name, arr in opt_records:
            _write_record(f, name, np.broadcast_to(arr, params[name[2:]].shape))
        f.write(struct.pack("<Q", opt.step))


def load_checkpoint(path: str) -> tuple[ModelParams, OptimizerState,
                                        ModelConfig, TrainConfig]:
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob, path)
    if r.take(4, "magic") != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    (version,) = struct.unpack("<I", r.take(4, "version"))
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    (tlen,) = struct.unpack("<I", r.take(4, "config length"))
    mcfg, cfg = _parse_config_text(r.take(tlen, "config text").decode())
    expected = param_shapes(mcfg)
    (count,) = struct.unpack("<I", r.take(4, "parameter count"))
    params: ModelParams = {}
    for _ in range(count):
        name, arr = r.read_record()
        if name not in expected or expected[name] != arr.shape:
            raise CheckpointShapeError(
                f"{path}: parameter {name!r} has shape {arr.shape}, "
                f"config implies {expected.get(name)}")
        params[name] = Tensor(arr, requires_grad=True, name=name)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        raise CheckpointShapeError(f"{path}: missing parameters {missing}")
    (ocount,) = struct.unpack("<I", r.take(4, "optimizer record count"))
    opt = OptimizerState()
    for _ in range(ocount):
        name, arr = r.read_record()
        kind, pname = name.split("/", 1)
        if pname not in expected:
            raise CheckpointShapeError(f"{path}: optimizer record for unknown "
                                       f"parameter {pname!r}")
        (opt.m if kind == "m" else opt.v)[pname] = arr
    (opt.step,) = struct.unpack("<Q", r.take(8, "step counter"))
    return params, opt, mcfg, cfg
