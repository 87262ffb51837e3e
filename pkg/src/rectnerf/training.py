"""End-to-end training: configuration, photometric loss, optimizer loop and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import torch

from . import archive
from .errors import CheckpointError, ConfigError, DomainError, NumericalError
from .data import SceneRecord, difficulty_sources
from .field import APPEARANCE_FIRST, GEOMETRY_FIRST
from .geometry import generate_rays, image_pixels
from .model import ModelConfig, SparseViewNeRF

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

#: Ablation presets; each maps to field switches.
PRESETS = {
    "BL": dict(use_geometry=False, use_appearance=False, query="VD"),
    "A_V": dict(use_geometry=False, use_appearance=True, query="V"),
    "A_VD": dict(use_geometry=False, use_appearance=True, query="VD"),
    "G_V": dict(use_geometry=True, use_appearance=False, query="V"),
    "G_VD": dict(use_geometry=True, use_appearance=False, query="VD"),
    "AG_VD": dict(use_geometry=True, use_appearance=True, query="VD", order=APPEARANCE_FIRST),
    "GA_VD": dict(use_geometry=True, use_appearance=True, query="VD", order=GEOMETRY_FIRST),
}

_MODEL_FIELDS = {f.name for f in fields(ModelConfig)}


@dataclass(frozen=True)
class TrainConfig:
    # model
    num_planes: int = 128
    num_samples: int = 128
    feature_channels: int = 32
    volume_channels: int = 8
    unet_channels: int = 8
    radiance_dim: int = 64
    model_dim: int = 64
    num_heads: int = 4
    hidden_dim: int = 128
    use_geometry: bool = True
    use_appearance: bool = True
    order: str = GEOMETRY_FIRST
    query: str = "VD"
    residual: bool = True
    appearance_skip: bool = True
    density_cue: bool = True
    color_anchor: bool = True
    normalized_density: bool = True
    strict_delta: bool = False
    appearance_mean: str = "all"
    white_background: bool = False
    # optimisation
    rays_per_batch: int = 1024
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 10000
    seed: int = 0
    lr_schedule: str = "none"
    grad_clip: float = 0.0
    jitter: bool = True
    # data
    num_sources: int = 3
    train_split: str = "small"
    holdout_views: tuple = ()
    # bookkeeping
    log_every: int = 1
    checkpoint_every: int = 0
    preset: str = ""

    def __post_init__(self):
        if self.rays_per_batch < 1:
            raise ConfigError("rays_per_batch must be >= 1")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.lr_schedule not in ("none", "cosine"):
            raise ConfigError(f"lr_schedule must be 'none' or 'cosine', got {self.lr_schedule!r}")
        if self.preset and self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")
        self.model_config()

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{k: v for k, v in asdict(self).items() if k in _MODEL_FIELDS})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["holdout_views"] = list(self.holdout_views)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "holdout_views" in d:
            d["holdout_views"] = tuple(int(v) for v in d["holdout_views"])
        return cls(**d)

    @classmethod
    def tiny(cls, **overrides) -> "TrainConfig":
        base = {k: v for k, v in ModelConfig.tiny().to_dict().items()}
        base.update(rays_per_batch=64, steps=100)
        base.update(overrides)
        return cls(**base)

    def with_preset(self, name: str) -> "TrainConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}")
        return replace(self, preset=name, **PRESETS[name])


# --------------------------------------------------------------------------
# flat key = value config files


def _coerce(name: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        if kind in (tuple, "tuple"):
            return tuple(int(x) for x in raw.replace(",", " ").split())
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r}") from exc


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key = value`` lines (``#`` starts a comment).

    A ``preset`` line applies that ablation preset before the other keys,
    so explicit keys always win.
    """
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        if key not in kinds:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        values[key] = _coerce(key, raw, kinds[key])
    config = base or TrainConfig()
    preset = values.pop("preset", None)
    if preset:
        config = config.with_preset(preset)
    try:
        return replace(config, **values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> TrainConfig:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def format_config(config: TrainConfig) -> str:
    lines = ["# training configuration"]
    for f in fields(TrainConfig):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# loss


def photometric_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean over rays of the squared L2 color error."""
    if pred.shape != gt.shape:
        raise DomainError(f"prediction {tuple(pred.shape)} and target {tuple(gt.shape)} differ in shape")
    return ((pred - gt) ** 2).sum(dim=-1).mean()


# --------------------------------------------------------------------------
# trainer


@dataclass
class Batch:
    scene_index: int
    target: int
    sources: list
    rays: object
    colors: torch.Tensor


@dataclass
class StepRecord:
    step: int
    scene: str
    loss: float
    time: float = field(default=0.0, compare=False)

    def to_json(self):
        return json.dumps({"step": self.step, "scene": self.scene, "loss": self.loss, "time": round(self.time, 4)})


class Trainer:
    """Owns a model, its Adam state and the random streams for one training run."""

    def __init__(self, config: TrainConfig, scenes: list[SceneRecord], dtype=torch.float32):
        if not scenes:
            raise DomainError("training needs at least one scene")
        self.config = config
        self.scenes = scenes
        self.dtype = dtype
        torch.manual_seed(config.seed)
        self.model = SparseViewNeRF(config.model_config()).to(dtype)
        self.optimizer = torch.optim.Adam(
            self.model.parameters(),
            lr=config.learning_rate,
            betas=(config.beta1, config.beta2),
            eps=config.adam_eps,
        )
        self.rng = np.random.default_rng(config.seed)
        self.generator = torch.Generator().manual_seed(config.seed)
        self.step_count = 0
        self.history: list[StepRecord] = []
        self._targets = [self._training_targets(s) for s in scenes]

    def _training_targets(self, scene: SceneRecord):
        out = []
        for t in range(len(scene)):
            if t in self.config.holdout_views:
                continue
            try:
                difficulty_sources(scene, t, self.config.train_split, self.config.num_sources)
            except Exception:
                continue
            out.append(t)
        if not out:
            raise DomainError(f"scene {scene.scene_id!r} has no usable training targets")
        return out

    def sample_batch(self) -> Batch:
        si = int(self.rng.integers(len(self.scenes)))
        scene = self.scenes[si]
        target = int(self.rng.choice(self._targets[si]))
        sources = difficulty_sources(scene, target, self.config.train_split, self.config.num_sources)
        view = scene.views[target]
        valid = np.flatnonzero(scene.valid_mask().ravel())
        n = min(self.config.rays_per_batch, len(valid))
        pick = valid[torch.randperm(len(valid), generator=self.generator)[:n].numpy()]
        pixels = image_pixels(view.intrinsics.height, view.intrinsics.width)[pick]
        rays = generate_rays(view.intrinsics, view.pose, pixels, view.near, view.far, dtype=self.dtype)
        colors = torch.as_tensor(view.image.reshape(-1, 3)[pick], dtype=self.dtype)
        return Batch(si, target, sources, rays, colors)

    def learning_rate(self, step: int) -> float:
        lr = self.config.learning_rate
        if self.config.lr_schedule == "cosine":
            lr *= 0.5 * (1.0 + math.cos(math.pi * min(step, self.config.steps) / max(self.config.steps, 1)))
        return lr

    def loss_on(self, batch: Batch) -> torch.Tensor:
        scene = self.scenes[batch.scene_index]
        context = self.model.encode([scene.views[i] for i in batch.sources], ref=0)
        out, _ = self.model.render_rays(batch.rays, context, jitter=self.config.jitter, generator=self.generator)
        return photometric_loss(out.color, batch.colors)

    def parameter_norms(self) -> dict:
        return {
            name: float(torch.sqrt(sum((p.detach() ** 2).sum() for p in params)))
            for name, params in self.model.parameter_groups().items()
        }

    def train_step(self, batch: Batch | None = None) -> float:
        start = time.perf_counter()
        batch = batch or self.sample_batch()
        self.model.train()
        for group in self.optimizer.param_groups:
            group["lr"] = self.learning_rate(self.step_count)
        self.optimizer.zero_grad(set_to_none=True)
        loss = self.loss_on(batch)
        scene_id = self.scenes[batch.scene_index].scene_id
        if not torch.isfinite(loss):
            raise NumericalError(
                f"non-finite loss at step {self.step_count} on scene {scene_id}",
                {"step": self.step_count, "scene": scene_id, "parameter_norms": self.parameter_norms()},
            )
        loss.backward()
        if self.config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.grad_clip)
        self.optimizer.step()
        self.step_count += 1
        record = StepRecord(self.step_count, scene_id, float(loss.detach()), time.perf_counter() - start)
        self.history.append(record)
        return record.loss

    def run(self, steps: int | None = None, log_path=None, checkpoint_path=None, callback=None):
        """Train until ``steps`` total steps (default: ``config.steps``) have run."""
        total = self.config.steps if steps is None else steps
        log_fh = open(log_path, "a") if log_path else None
        try:
            while self.step_count < total:
                self.train_step()
                record = self.history[-1]
                if log_fh and record.step % max(self.config.log_every, 1) == 0:
                    log_fh.write(record.to_json() + "\n")
                    log_fh.flush()
                if record.step % 100 == 0:
                    log.info("step %d loss %.6f", record.step, record.loss)
                every = self.config.checkpoint_every
                if checkpoint_path and every and record.step % every == 0:
                    self.save_checkpoint(checkpoint_path)
                if callback:
                    callback(self)
        finally:
            if log_fh:
                log_fh.close()
        if checkpoint_path:
            self.save_checkpoint(checkpoint_path)
        return [r.loss for r in self.history]

    # -- checkpoints -------------------------------------------------------

    def save_checkpoint(self, path):
        arrays = {f"model/{k}": v for k, v in self.model.state_dict().items()}
        state = self.optimizer.state_dict()
        for idx, st in state["state"].items():
            for key, value in st.items():
                arrays[f"optim/{idx}/{key}"] = torch.as_tensor(value)
        arrays["rng/torch"] = self.generator.get_state()
        arrays["history/loss"] = np.array([r.loss for r in self.history], dtype=np.float64)
        meta = {
            "kind": "checkpoint",
            "version": CHECKPOINT_VERSION,
            "config_hash": archive.config_hash(self.config.model_config().to_dict()),
            "train_config": self.config.to_dict(),
            "step": self.step_count,
            "dtype": str(self.dtype).replace("torch.", ""),
            "numpy_rng": self.rng.bit_generator.state,
            "history_scenes": [r.scene for r in self.history],
            "scene_ids": [s.scene_id for s in self.scenes],
        }
        archive.save(path, arrays, meta)

    @classmethod
    def resume(cls, path, scenes, config: TrainConfig | None = None) -> "Trainer":
        """Rebuild a trainer from a checkpoint, optionally with new run settings."""
        arrays, meta = read_checkpoint(path)
        saved = TrainConfig.from_dict(meta["train_config"])
        config = config or saved
        if archive.config_hash(config.model_config().to_dict()) != meta["config_hash"]:
            raise CheckpointError(f"{path}: model configuration differs from the checkpoint")
        trainer = cls(config, scenes, dtype=getattr(torch, meta["dtype"]))
        trainer._restore(arrays, meta)
        return trainer

    def _restore(self, arrays, meta):
        model_state = {k[len("model/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("model/")}
        try:
            self.model.load_state_dict(model_state)
        except RuntimeError as exc:
            raise CheckpointError(f"checkpoint parameters do not fit the model: {exc}") from exc
        state = self.optimizer.state_dict()
        restored = {}
        for key, value in arrays.items():
            if key.startswith("optim/"):
                _, idx, name = key.split("/")
                restored.setdefault(int(idx), {})[name] = torch.from_numpy(value.copy())
        state["state"] = restored
        self.optimizer.load_state_dict(state)
        self.generator.set_state(torch.from_numpy(arrays["rng/torch"].copy()))
        self.rng.bit_generator.state = meta["numpy_rng"]
        self.step_count = int(meta["step"])
        self.history = [StepRecord(i + 1, s, float(l)) for i, (s, l) in enumerate(zip(meta["history_scenes"], arrays["history/loss"]))]


def read_checkpoint(path):
    arrays, meta = archive.load(path)
    if meta.get("kind") != "checkpoint":
        raise CheckpointError(f"{path} is not a training checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {meta.get('version')} is not supported")
    expected = {"model/", "rng/torch", "history/loss"}
    if meta.get("step", 0) > 0:
        expected.add("optim/")
    if not all(any(k.startswith(p) for k in arrays) for p in expected):
        raise CheckpointError(f"{path}: checkpoint is incomplete")
    return arrays, meta


def load_model(path, dtype=None) -> tuple[SparseViewNeRF, TrainConfig]:
    """Model weights and training configuration from a checkpoint, for rendering."""
    arrays, meta = read_checkpoint(path)
    config = TrainConfig.from_dict(meta["train_config"])
    if archive.config_hash(config.model_config().to_dict()) != meta["config_hash"]:
        raise CheckpointError(f"{path}: stored configuration does not match its hash")
    model = SparseViewNeRF(config.model_config())
    state = {k[len("model/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("model/")}
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not fit the model: {exc}") from exc
    model.to(dtype or getattr(torch, meta["dtype"]))
    model.eval()
    return model, config


def write_log(path, history):
    with open(path, "w") as fh:
        for record in history:
            fh.write(record.to_json() + "\n")


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
