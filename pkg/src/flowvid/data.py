"""Synthetic video generation, latent codecs, and the dataset file format.

Frames are grayscale-by-default arrays [channels, height, width] with pixel
values in [0, 1]. A dataset is a list of clips of identical geometry and is
serialized to a small binary format (magic "FVDS") documented in save_dataset.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"FVDS"
VERSION = 1
SCALAR_F32 = 0


class DatasetFormatError(ValueError):
    """Magic/version/header disagreement."""


class DatasetTruncatedError(ValueError):
    """File ends before the payload announced by the header."""


@dataclass
class VideoClip:
    frames: np.ndarray  # [n_frames, channels, height, width]

    def __post_init__(self):
        if self.frames.ndim != 4:
            raise ValueError(f"clip must be 4-d, got shape {self.frames.shape}")
        if self.frames.shape[0] < 3:
            raise ValueError("clip must have at least 3 frames")

    def __len__(self) -> int:
        return self.frames.shape[0]

    def frame(self, i: int) -> np.ndarray:
        """1-indexed frame access, matching the temporal index conventions."""
        return self.frames[i - 1]


Dataset = list[VideoClip]


# ---------------------------------------------------------------------------
# generators


def gen_constant_velocity(n_clips: int, frames: int, grid: int,
                          seed: int, channels: int = 1,
                          square: int = 4, max_speed: int = 2) -> Dataset:
    """Single bright square translating with a per-clip random constant
    integer velocity, wrapping toroidally. Frame k is frame 0 circularly
    shifted by k*v, so frames t-1, t determine frame t+1 exactly."""
    if grid < 8:
        raise ValueError("grid must be >= 8")
    rng = np.random.default_rng(seed)
    clips = []
    for _ in range(n_clips):
        base = np.zeros((channels, grid, grid), dtype=np.float32)
        r = int(rng.integers(0, grid))
        c = int(rng.integers(0, grid))
        rows = (np.arange(square) + r) % grid
        cols = (np.arange(square) + c) % grid
        base[:, rows[:, None], cols[None, :]] = 1.0
        v = rng.integers(-max_speed, max_speed + 1, size=2)
        while v[0] == 0 and v[1] == 0:
            v = rng.integers(-max_speed, max_speed + 1, size=2)
        seq = np.stack([np.roll(base, (k * int(v[0]), k * int(v[1])),
                                axis=(1, 2)) for k in range(frames)])
        clips.append(VideoClip(seq))
    return clips


def _render_balls(centers: np.ndarray, radius: float, grid: int,
                  channels: int) -> np.ndarray:
    """Anti-aliased discs: per-pixel coverage ramps linearly over a one-pixel
    band at the rim so sub-pixel motion changes the image."""
    yy, xx = np.mgrid[0:grid, 0:grid]
    img = np.zeros((grid, grid), dtype=np.float32)
    for cy, cx in centers:
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        img += np.clip(radius + 0.5 - d, 0.0, 1.0)
    img = np.clip(img, 0.0, 1.0)
    return np.repeat(img[None], channels, axis=0)


def gen_bouncing_balls(n_clips: int, frames: int, grid: int, n_balls: int,
                       speed_range: tuple[float, float], seed: int,
                       channels: int = 1, radius: float = 2.0) -> Dataset:
    """Discs with constant velocity reflecting elastically off the walls.

    Two consecutive frames fully determine the motion. Centers are kept at
    least `radius + 1` away from the walls so no disc mass is ever clipped.
    """
    if grid < 8:
        raise ValueError("grid must be >= 8")
    lo, hi = radius + 1.0, grid - 1 - radius - 1.0
    if hi <= lo:
        raise ValueError(f"grid {grid} too small for radius {radius}")
    rng = np.random.default_rng(seed)
    clips = []
    for _ in range(n_clips):
        pos = rng.uniform(lo, hi, size=(n_balls, 2))
        ang = rng.uniform(0, 2 * np.pi, size=n_balls)
        spd = rng.uniform(*speed_range, size=n_balls)
        vel = np.stack([np.sin(ang), np.cos(ang)], axis=1) * spd[:, None]
        seq = []
        for _ in range(frames):
            seq.append(_render_balls(pos, radius, grid, channels))
            pos = pos + vel
            for ax in (0, 1):
                over = pos[:, ax] > hi
                under = pos[:, ax] < lo
                pos[over, ax] = 2 * hi - pos[over, ax]
                pos[under, ax] = 2 * lo - pos[under, ax]
                vel[over | under, ax] *= -1
        clips.append(VideoClip(np.stack(seq)))
    return clips


# ---------------------------------------------------------------------------
# codecs


class IdentityCodec:
    """Pass-through: the pixel space is the latent space."""

    def latent_shape(self, pixel_shape):
        return tuple(pixel_shape)

    def encode(self, frame: np.ndarray) -> np.ndarray:
        return frame

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return latent


class NormalizeCodec:
    """Affine map from [0,1] pixels to [-1,1] latents.

    The flow source is a standard normal, so symmetric unit-scale latents
    give the field roughly twice the signal amplitude of raw [0,1] pixels;
    sparse bright-on-dark content benefits the most.
    """

    SCALE = 2.0
    SHIFT = -1.0

    def latent_shape(self, pixel_shape):
        return tuple(pixel_shape)

    def encode(self, frame: np.ndarray) -> np.ndarray:
        return frame * self.SCALE + self.SHIFT

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return (latent - self.SHIFT) / self.SCALE


class AvgPoolCodec:
    """Non-overlapping k x k mean pooling; nearest-neighbor upsample back."""

    def __init__(self, k: int):
        if k < 1:
            raise ValueError("pool factor must be >= 1")
        self.k = k

    def latent_shape(self, pixel_shape):
        c, h, w = pixel_shape
        if h % self.k or w % self.k:
            raise ValueError(f"spatial extent {h}x{w} not divisible by {self.k}")
        return (c, h // self.k, w // self.k)

    def encode(self, frame: np.ndarray) -> np.ndarray:
        c, h, w = frame.shape
        if h % self.k or w % self.k:
            raise ValueError(f"spatial extent {h}x{w} not divisible by {self.k}")
        k = self.k
        return frame.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4))

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return latent.repeat(self.k, axis=1).repeat(self.k, axis=2)


def make_codec(name: str, k: int = 2):
    if name == "identity":
        return IdentityCodec()
    if name == "normalize":
        return NormalizeCodec()
    if name == "avgpool":
        return AvgPoolCodec(k)
    raise ValueError(f"unknown codec {name!r}")


def encode_clip(clip: VideoClip, codec) -> VideoClip:
    return VideoClip(np.stack([codec.encode(f) for f in clip.frames]))


def decode_clip(clip: VideoClip, codec) -> VideoClip:
    return VideoClip(np.stack([codec.decode(f) for f in clip.frames]))


# ---------------------------------------------------------------------------
# serialization


def save_dataset(clips: Dataset, path: str) -> None:
    """Binary layout (all integers little-endian): magic "FVDS", version u32,
    clip_count u32, frames_per_clip u32, channels u32, height u32, width u32,
    scalar tag u8 (0 = f32 LE), then clips concatenated frame-major,
    row-major."""
    if clips:
        n_frames, c, h, w = clips[0].frames.shape
        for clip in clips:
            if clip.frames.shape != (n_frames, c, h, w):
                raise ValueError("all clips must share geometry")
    else:
        n_frames = c = h = w = 0
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIIIII", VERSION, len(clips), n_frames, c, h, w))
        f.write(struct.pack("<B", SCALAR_F32))
        for clip in clips:
            f.write(clip.frames.astype("<f4").tobytes())


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 29:
        raise DatasetTruncatedError(f"{path}: file shorter than the header")
    if blob[:4] != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {blob[:4]!r}")
    version, count, n_frames, c, h, w = struct.unpack_from("<IIIIII", blob, 4)
    if version != VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    (tag,) = struct.unpack_from("<B", blob, 28)
    if tag != SCALAR_F32:
        raise DatasetFormatError(f"{path}: unknown scalar tag {tag}")
    need = 29 + count * n_frames * c * h * w * 4
    if len(blob) < need:
        raise DatasetTruncatedError(
            f"{path}: payload truncated ({len(blob)} bytes, expected {need})")
    data = np.frombuffer(blob, dtype="<f4", offset=29,
                         count=count * n_frames * c * h * w)
    data = data.reshape(count, n_frames, c, h, w)
    return [VideoClip(data[i].copy()) for i in range(count)]


# ---------------------------------------------------------------------------
# PGM export for visual inspection


def save_pgm(frame: np.ndarray, path: str) -> None:
    """Binary PGM (P5, maxval 255) of a single-channel-averaged frame."""
    img = frame.mean(axis=0) if frame.ndim == 3 else frame
    px = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{px.shape[1]} {px.shape[0]}\n255\n".encode())
        f.write(px.tobytes())


def save_montage(frames, path: str) -> None:
    """Horizontal strip of frames, one PGM per clip."""
    imgs = [f.mean(axis=0) if f.ndim == 3 else f for f in frames]
    save_pgm(np.concatenate(imgs, axis=1), path)
