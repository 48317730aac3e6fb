"""
training.py — run configuration and the two training stages.

Stage 1 (single-view reconstruction): each step samples one view I_S at
pose P_S for each of `batch_size` distinct training objects, synthesizes
I_S^G at P_S from I_S alone and minimizes L_Total(I_S, I_S^G).

Stage 2 (reverse mapping): each step additionally draws a random pose
P_r from the training pose vocabulary, synthesizes I_r^G = synthesize(I_S, P_r)
with gradients blocked, and then trains on source I_r^G, target pose P_S,
ground truth I_S with the same loss.

Every step runs one forward pass and two backward passes: the critic
(disc.* parameters) is updated from L_D only, the generator (encoder.*,
ttm.*, vgm.*) from L_Total only. Both Adam steps read gradients computed
before either update.

Configuration file format (`key = value`, `#` comments, unknown keys are
errors); see `dump_config()` for every key and its default.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from audit_log import LossLog
from dataset import Dataset, ViewRef
from geometry import Pose, PoseError
from losses import FeatureNet, LossConfigError, LossWeights, total_loss
from model import (
    ModelConfig,
    ModelConfigError,
    ModelParams,
    discriminate,
    discriminator_params,
    forward,
    frozen,
    generator_params,
    init_model_params,
    synthesize,
)
from models import HISTORY_COLUMNS, LOSS_COLUMNS
from nn_ops import DEFAULT_LR, AdamState, NonFiniteGradientError, adam_step
from tensor_core import backward, derive_seed, make_rng, precision

logger = logging.getLogger(__name__)

PRECISIONS = ("float32", "float64")


class ConfigError(ValueError):
    """Raised for invalid run configuration values or config files."""


class TrainingDivergedError(RuntimeError):
    """Raised when a loss or gradient becomes non-finite."""

    def __init__(self, step: int, stage: int, losses: dict[str, float]):
        detail = ", ".join(f"{k}={v:.6g}" for k, v in losses.items())
        super().__init__(f"training diverged at stage {stage} step {step}: {detail}")
        self.step = step
        self.stage = stage
        self.losses = losses


# ---------------------------------------------------------------------------
# TrainConfig
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = DEFAULT_LR
    batch_size: int = 4
    stage1_steps: int = 2000
    stage2_steps: int = 500
    seed: int = 0
    dataset: str = ""
    checkpoint_dir: str = ""
    log_interval: int = 50
    checkpoint_interval: int = 0
    heldout_poses: tuple[Pose, ...] = ()
    precision: str = "float32"
    feature_net_weights: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.lr) and self.lr > 0):
            raise ConfigError(f"lr must be positive (got {self.lr})")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1 (got {self.batch_size})")
        for label in ("stage1_steps", "stage2_steps", "checkpoint_interval"):
            if getattr(self, label) < 0:
                raise ConfigError(f"{label} must be >= 0 (got {getattr(self, label)})")
        if self.log_interval < 1:
            raise ConfigError(f"log_interval must be >= 1 (got {self.log_interval})")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS} (got {self.precision!r})")
        object.__setattr__(self, "heldout_poses", tuple(self.heldout_poses))


# key -> (section, attribute, kind); section "" is TrainConfig itself
_KEYS: dict[str, tuple[str, str, str]] = {
    "image_size": ("model", "image_size", "int"),
    "encoder_channels": ("model", "encoder_channels", "ints"),
    "token_conv_layers": ("model", "token_conv_layers", "int"),
    "volume_size": ("model", "volume_size", "int"),
    "volume_channels": ("model", "volume_channels", "int"),
    "reference_pose": ("model", "reference_pose", "pose"),
    "discriminator_channels": ("model", "discriminator_channels", "ints"),
    "alpha": ("weights", "alpha", "float"),
    "beta": ("weights", "beta", "float"),
    "gamma": ("weights", "gamma", "float"),
    "lambda": ("weights", "lam", "float"),
    "lr": ("", "lr", "float"),
    "batch_size": ("", "batch_size", "int"),
    "stage1_steps": ("", "stage1_steps", "int"),
    "stage2_steps": ("", "stage2_steps", "int"),
    "seed": ("", "seed", "int"),
    "dataset": ("", "dataset", "str"),
    "checkpoint_dir": ("", "checkpoint_dir", "str"),
    "log_interval": ("", "log_interval", "int"),
    "checkpoint_interval": ("", "checkpoint_interval", "int"),
    "heldout_poses": ("", "heldout_poses", "poses"),
    "precision": ("", "precision", "str"),
    "feature_net_weights": ("", "feature_net_weights", "str"),
}


def _parse_value(kind: str, text: str) -> Any:
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "ints":
        return tuple(int(part) for part in text.split(",") if part.strip())
    if kind == "pose":
        return Pose.parse(text)
    if kind == "poses":
        return tuple(Pose.parse(part.strip()) for part in text.split(";") if part.strip())
    return text


def _format_value(kind: str, value: Any) -> str:
    if kind == "float":
        return repr(float(value))
    if kind == "ints":
        return ",".join(str(v) for v in value)
    if kind == "pose":
        return f"{value.azimuth!r},{value.elevation!r}"
    if kind == "poses":
        return "; ".join(f"{p.azimuth!r},{p.elevation!r}" for p in value)
    return str(value)


def parse_config(text: str, source: str = "<config>") -> TrainConfig:
    """Parse `key = value` lines over the defaults."""
    sections: dict[str, dict[str, Any]] = {"": {}, "model": {}, "weights": {}}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        section, attr, kind = _KEYS[key]
        try:
            sections[section][attr] = _parse_value(kind, value)
        except (ValueError, PoseError) as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    try:
        model = ModelConfig(**sections["model"])
        weights = LossWeights(**sections["weights"])
        return TrainConfig(model=model, weights=weights, **sections[""])
    except (ModelConfigError, LossConfigError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def dump_config(config: TrainConfig) -> str:
    lines = ["# view synthesis run configuration"]
    for key, (section, attr, kind) in _KEYS.items():
        owner = getattr(config, section) if section else config
        lines.append(f"{key} = {_format_value(kind, getattr(owner, attr))}".rstrip())
    return "\n".join(lines) + "\n"


def load_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), source=str(path))


def save_config(config: TrainConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(config), encoding="utf-8")
    return path


def config_overrides(config: TrainConfig, **values: Any) -> TrainConfig:
    """Replace top-level TrainConfig fields, ignoring None values."""
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config fields {unknown}")
    return replace(config, **{k: v for k, v in values.items() if v is not None})


# ---------------------------------------------------------------------------
# Training state
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    config: TrainConfig
    params: ModelParams
    gen_adam: AdamState
    disc_adam: AdamState
    rng: np.random.Generator
    stage1_step: int = 0
    stage2_step: int = 0

    @property
    def global_step(self) -> int:
        return self.stage1_step + self.stage2_step


def init_state(config: TrainConfig) -> TrainState:
    """Fresh parameters, zero optimizer moments, the run RNG at its seed."""
    with precision(config.precision):
        params = init_model_params(config.model, derive_seed(config.seed, 1))
    return TrainState(
        config=config,
        params=params,
        gen_adam=AdamState.create(generator_params(params)),
        disc_adam=AdamState.create(discriminator_params(params)),
        rng=make_rng(derive_seed(config.seed, 2)),
    )


def build_feature_net(config: TrainConfig) -> FeatureNet:
    with precision(config.precision):
        if config.feature_net_weights:
            return FeatureNet.from_npz(config.feature_net_weights)
        return FeatureNet.create(derive_seed(config.seed, 3))


def smooth_losses(history: pd.DataFrame, window: int = 50, column: str = "L_Total") -> pd.Series:
    """Trailing rolling mean of one loss column."""
    return history[column].rolling(window, min_periods=1).mean()


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

class _Sampler:
    """Per step: `batch_size` distinct training objects, one pose each."""

    def __init__(self, dataset: Dataset, config: TrainConfig):
        heldout = set(config.heldout_poses)
        self.poses = [p for p in dataset.poses if p not in heldout]
        if not self.poses:
            raise ConfigError("every dataset pose is held out; nothing left to train on")
        self.index = {(r.object_id, r.pose): r for r in dataset.refs("train")}
        self.objects = dataset.object_ids("train")
        if not self.objects:
            raise ConfigError("the dataset has no training objects")
        self.batch_size = min(config.batch_size, len(self.objects))
        if self.batch_size < config.batch_size:
            logger.warning(
                "batch_size %d exceeds the %d training objects; using %d",
                config.batch_size, len(self.objects), self.batch_size,
            )

    def sample(self, rng: np.random.Generator) -> list[ViewRef]:
        chosen = rng.choice(len(self.objects), size=self.batch_size, replace=False)
        pose_idx = rng.integers(len(self.poses), size=self.batch_size)
        return [self.index[(self.objects[o], self.poses[p])] for o, p in zip(chosen, pose_idx)]

    def random_poses(self, rng: np.random.Generator, n: int) -> list[Pose]:
        return [self.poses[i] for i in rng.integers(len(self.poses), size=n)]


# ---------------------------------------------------------------------------
# Steps + stages
# ---------------------------------------------------------------------------

def _check_dataset(config: TrainConfig, dataset: Dataset) -> None:
    size = dataset.image_size
    if size != config.model.image_size:
        raise ConfigError(f"dataset images are {size}x{size} but the model expects {config.model.image_size}")


def train_step(state: TrainState, dataset: Dataset, sampler: _Sampler, net: FeatureNet,
               stage: int) -> dict[str, float]:
    """One critic update and one generator update. Mutates `state`."""
    cfg, mc, params = state.config, state.config.model, state.params
    step = state.stage1_step if stage == 1 else state.stage2_step
    refs = sampler.sample(state.rng)
    batch = dataset.load_batch(refs, step=state.global_step)

    if stage == 2:
        random_poses = sampler.random_poses(state.rng, len(refs))
        source = synthesize(batch.images, random_poses, frozen(params), mc).detach()
    else:
        source = batch.images

    out = forward(source, batch.poses, params, mc)
    breakdown = total_loss(
        batch.images, out.image, cfg.weights, net,
        lambda image: discriminate(image, params, mc),
        predicted_segment=out.segment, target_segment=batch.segments,
    )
    losses = breakdown.as_dict()
    if not breakdown.is_finite():
        raise TrainingDivergedError(step, stage, losses)

    gen_grads = backward(breakdown.l_total)
    disc_grads = backward(breakdown.l_d)
    try:
        state.disc_adam = adam_step(discriminator_params(params), disc_grads, state.disc_adam, cfg.lr)
        state.gen_adam = adam_step(generator_params(params), gen_grads, state.gen_adam, cfg.lr)
    except NonFiniteGradientError as exc:
        raise TrainingDivergedError(step, stage, losses) from exc

    if stage == 1:
        state.stage1_step += 1
    else:
        state.stage2_step += 1
    return losses


def run_stage(state: TrainState, dataset: Dataset, stage: int, *, until: Optional[int] = None,
              loss_log: Optional[str | Path] = None,
              on_checkpoint: Optional[Callable[[TrainState], None]] = None,
              progress: bool = False) -> tuple[TrainState, pd.DataFrame]:
    """Advance `stage` from its saved step to its configured step count.

    `until` stops early (the state can be saved and resumed later).
    `on_checkpoint` is called every `checkpoint_interval` steps and once
    at the end.
    """
    if stage not in (1, 2):
        raise ConfigError(f"stage must be 1 or 2 (got {stage})")
    cfg = state.config
    _check_dataset(cfg, dataset)
    target = cfg.stage1_steps if stage == 1 else cfg.stage2_steps
    if until is not None:
        target = min(target, until)
    start = state.stage1_step if stage == 1 else state.stage2_step
    log = LossLog(loss_log) if loss_log else None
    if log is not None:
        log.truncate(start)
    sampler = _Sampler(dataset, cfg)
    rows: list[dict[str, Any]] = []

    with precision(cfg.precision):
        net = build_feature_net(cfg)
        for step in tqdm(range(start, target), desc=f"stage {stage}", disable=not progress):
            losses = train_step(state, dataset, sampler, net, stage)
            rows.append({"stage": stage, "step": step, **losses})
            if log is not None:
                log.append(step, losses)
            if (step + 1) % cfg.log_interval == 0 or step == start:
                logger.info(
                    "stage %d step %d/%d  %s  L_D=%.4f", stage, step + 1, target,
                    "  ".join(f"{k}={losses[k]:.4f}" for k in LOSS_COLUMNS), losses["L_D"],
                )
            done = step + 1
            if on_checkpoint and cfg.checkpoint_interval and done % cfg.checkpoint_interval == 0 and done < target:
                on_checkpoint(state)
    if on_checkpoint:
        on_checkpoint(state)
    history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
    return state, history


def train_stage1(config: TrainConfig, dataset: Dataset, state: Optional[TrainState] = None,
                 **kwargs: Any) -> tuple[TrainState, pd.DataFrame]:
    """Single-view training; starts from `state` (resume) or a fresh init."""
    state = init_state(config) if state is None else _adopt(state, config)
    return run_stage(state, dataset, 1, **kwargs)


def train_stage2(config: TrainConfig, state: TrainState, dataset: Dataset,
                 **kwargs: Any) -> tuple[TrainState, pd.DataFrame]:
    """Reverse-mapping fine-tuning on top of a stage-1 state."""
    return run_stage(_adopt(state, config), dataset, 2, **kwargs)


def _adopt(state: TrainState, config: TrainConfig) -> TrainState:
    """Continue `state` under `config` (step counts may change, the network may not)."""
    if state.config.model != config.model:
        raise ConfigError("the checkpoint was trained with a different model configuration")
    state.config = config
    return state


def parameters_equal(a: ModelParams, b: ModelParams) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[k].data, b[k].data) for k in a)


def describe(history: pd.DataFrame, window: int = 50) -> dict[str, float]:
    """First/last smoothed L_Total for a run summary."""
    if history.empty:
        return {"steps": 0}
    smooth = smooth_losses(history, window)
    return {
        "steps": int(len(history)),
        "first_smoothed_total": float(smooth.iloc[min(len(smooth) - 1, window - 1)]),
        "last_smoothed_total": float(smooth.iloc[-1]),
    }
