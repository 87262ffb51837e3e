"""A scikit-learn style facade over :class:`~rectnerf.training.Trainer`.

``X`` is a list of :class:`~rectnerf.data.SceneRecord`.  ``fit`` trains on
every view except ``holdout_views``.  ``predict`` takes ``(scene, target)``
pairs and returns rendered images.  ``score`` is the mean held-out PSNR.
"""

from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import SceneRecord, difficulty_sources
from .errors import DomainError
from .evaluation import evaluate
from .renderer import render_image
from .training import TrainConfig, Trainer, load_model

_CONFIG_FIELDS = {f.name for f in fields(TrainConfig)}


class RectNeRFRegressor(BaseEstimator):
    """Train and render a sparse-view radiance field with the sklearn estimator API.

    Every constructor argument is a :class:`TrainConfig` field except
    ``preset`` (an ablation row name, empty for the config defaults),
    ``base`` (a ``TrainConfig`` the other arguments override, default
    :meth:`TrainConfig.tiny`) and ``chunk_size`` for rendering.
    """

    def __init__(self, preset="GA_VD", steps=5000, rays_per_batch=1024, learning_rate=5e-4, seed=0,
                 num_planes=None, num_samples=None, holdout_views=(), train_split="small", jitter=True,
                 base=None, chunk_size=4096):
        self.preset = preset
        self.steps = steps
        self.rays_per_batch = rays_per_batch
        self.learning_rate = learning_rate
        self.seed = seed
        self.num_planes = num_planes
        self.num_samples = num_samples
        self.holdout_views = holdout_views
        self.train_split = train_split
        self.jitter = jitter
        self.base = base
        self.chunk_size = chunk_size

    def build_config(self) -> TrainConfig:
        config = self.base if self.base is not None else TrainConfig.tiny()
        if self.preset:
            config = config.with_preset(self.preset)
        params = self.get_params(deep=False)
        changes = {k: v for k, v in params.items() if k in _CONFIG_FIELDS and v is not None}
        changes["holdout_views"] = tuple(int(v) for v in self.holdout_views)
        return TrainConfig.from_dict({**config.to_dict(), **changes})

    @staticmethod
    def _scenes(X):
        scenes = list(X)
        if not scenes or not all(isinstance(s, SceneRecord) for s in scenes):
            raise DomainError("X must be a non-empty sequence of SceneRecord")
        return scenes

    def fit(self, X, y=None, callback=None):
        scenes = self._scenes(X)
        self.trainer_ = Trainer(self.build_config(), scenes)
        self.loss_curve_ = self.trainer_.run(callback=callback)
        self.model_ = self.trainer_.model
        self.config_ = self.trainer_.config
        return self

    def render(self, scene: SceneRecord, target: int, split: str | None = None):
        """Full :class:`~rectnerf.renderer.RenderedImage` (color, depth, opacity) for one view."""
        check_is_fitted(self, "model_")
        split = split or self.config_.train_split
        sources = difficulty_sources(scene, target, split, self.config_.num_sources)
        view = scene.views[target]
        return render_image(self.model_, [scene.views[i] for i in sources], view.intrinsics, view.pose,
                            view.near, view.far, chunk_size=self.chunk_size)

    def predict(self, X):
        """Rendered ``(H, W, 3)`` images for each ``(scene, target)`` pair."""
        return [self.render(scene, int(target)).image for scene, target in X]

    def evaluate(self, X, split: str | None = None):
        check_is_fitted(self, "model_")
        split = split or self.config_.train_split
        targets = list(self.config_.holdout_views) or None
        return evaluate(self.model_, self._scenes(X), split, targets, chunk_size=self.chunk_size)

    def score(self, X, y=None):
        """Mean PSNR (dB) over the held-out views of ``X``."""
        return float(np.mean([r.psnr for r in self.evaluate(X)]))

    def save(self, path):
        check_is_fitted(self, "trainer_")
        self.trainer_.save_checkpoint(path)

    @classmethod
    def load(cls, path) -> "RectNeRFRegressor":
        """An estimator that can render and score, restored from a checkpoint."""
        model, config = load_model(path)
        est = cls(preset="", steps=config.steps, rays_per_batch=config.rays_per_batch,
                  learning_rate=config.learning_rate, seed=config.seed, holdout_views=config.holdout_views,
                  train_split=config.train_split, jitter=config.jitter, base=config)
        est.model_ = model
        est.config_ = config
        return est
