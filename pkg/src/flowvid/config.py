"""Flat key=value run configuration.

One `key=value` per line, `#` comments, every key namespaced. Unknown keys
are a hard error so typos cannot silently fall back to defaults. The
effective configuration is echoed into run outputs and can be fed back in
to reproduce a run bit-exactly.
"""

from __future__ import annotations

from .model import ModelConfig
from .sample import SampleConfig
from .train import TrainConfig

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "strict_sequential": True,
    # synthetic data
    "data.kind": "const-velocity",      # or "bouncing-balls"
    "data.clips": 64,
    "data.frames": 12,
    "data.grid": 16,
    "data.channels": 1,
    "data.square": 4,
    "data.max_speed": 2,
    "data.balls": 1,
    "data.radius": 2.0,
    "data.speed_min": 0.5,
    "data.speed_max": 1.5,
    "data.codec": "normalize",          # or "identity", "avgpool"
    "data.pool": 2,
    # vector-field network (desk-scale defaults)
    "model.token_dim": 64,
    "model.depth": 5,
    "model.heads": 4,
    "model.skip_pairs": 2,
    "model.max_distance": 32,
    "model.use_reference": True,
    "model.condition_slots": 1,
    # optimization
    "train.iterations": 3000,
    "train.batch_size": 16,
    "train.base_lr": 5e-3,
    "train.weight_decay": 5e-6,
    "train.warmup_iters": 200,
    "train.adam_beta1": 0.9,
    "train.adam_beta2": 0.999,
    "train.adam_eps": 1e-8,
    "train.sigma_min": 1e-7,
    "train.mode": "predict",            # or "interpolate"
    "train.augment_brightness": 0.0,
    "train.checkpoint_every": 0,
    "train.log_every": 50,
    # generation
    "sample.n_steps": 8,
    "sample.warm_start_s": 0.0,
    "sample.context_limit": 0,          # 0 = unlimited
    "sample.solver": "euler",
    # evaluation protocol
    "eval.context": 2,
    "eval.horizon": 5,
    "eval.against": "gt",               # or "ae-gt" (autoencoded ground truth)
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


class RunConfig(dict):
    """DEFAULTS overlaid with file values and command-line overrides."""

    @classmethod
    def load(cls, path: str | None = None,
             overrides: list[str] | None = None) -> "RunConfig":
        cfg = cls(DEFAULTS)
        if path:
            with open(path) as f:
                for ln, line in enumerate(f, start=1):
                    line = line.split("#", 1)[0].strip()
                    if not line:
                        continue
                    if "=" not in line:
                        raise ConfigError(f"{path}:{ln}: expected key=value")
                    cfg._set(*line.split("=", 1))
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"override {item!r}: expected key=value")
            cfg._set(*item.split("=", 1))
        return cfg

    def _set(self, key: str, raw: str) -> None:
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key {key!r}")
        self[key] = _coerce(key, raw.strip())

    def echo_text(self) -> str:
        lines = []
        for k in sorted(self):
            v = self[k]
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    def model_config(self, latent_shape: tuple[int, int, int]) -> ModelConfig:
        c, h, w = latent_shape
        return ModelConfig(
            latent_height=h, latent_width=w, latent_channels=c,
            token_dim=self["model.token_dim"], depth=self["model.depth"],
            heads=self["model.heads"], skip_pairs=self["model.skip_pairs"],
            max_distance=self["model.max_distance"],
            use_reference=self["model.use_reference"],
            condition_slots=self["model.condition_slots"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            iterations=self["train.iterations"],
            batch_size=self["train.batch_size"],
            base_lr=self["train.base_lr"],
            weight_decay=self["train.weight_decay"],
            warmup_iters=self["train.warmup_iters"],
            adam_beta1=self["train.adam_beta1"],
            adam_beta2=self["train.adam_beta2"],
            adam_eps=self["train.adam_eps"],
            sigma_min=self["train.sigma_min"],
            seed=self["seed"],
            mode=self["train.mode"],
            augment_brightness=self["train.augment_brightness"])

    def sample_config(self) -> SampleConfig:
        limit = self["sample.context_limit"]
        return SampleConfig(
            n_steps=self["sample.n_steps"],
            warm_start_s=self["sample.warm_start_s"],
            context_limit=None if limit == 0 else limit,
            seed=self["seed"],
            solver=self["sample.solver"])
