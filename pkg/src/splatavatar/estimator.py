"""scikit-learn style wrapper around training and rendering."""
from __future__ import annotations

from sklearn.base import BaseEstimator

from ._validation import ConfigError, check_is_fitted
from .data import Dataset
from .train import TrainConfig, evaluate, load_model, render_novel, save_checkpoint, train


_OWN = ("iterations", "seed", "sh_degree", "voxel_size", "knn", "ablations", "deterministic")


class AvatarEstimator(BaseEstimator):
    """Fit an avatar to a sequence, then render it under new poses and views.

    ``options`` takes any further training keys (see :class:`TrainConfig`).
    """

    def __init__(self, iterations=5000, seed=0, sh_degree=0, voxel_size=0.05, knn=5, ablations=(),
                 deterministic=False, options=None):
        self.iterations = iterations
        self.seed = seed
        self.sh_degree = sh_degree
        self.voxel_size = voxel_size
        self.knn = knn
        self.ablations = ablations
        self.deterministic = deterministic
        self.options = options

    def _config(self) -> TrainConfig:
        d = dict(self.options or {})
        clash = set(_OWN) & set(d)
        if clash:
            raise ConfigError(f"set {sorted(clash)[0]!r} as an estimator parameter, not in options")
        d.update(iterations=self.iterations, seed=self.seed, sh_degree=self.sh_degree,
                 voxel_size=self.voxel_size, knn=self.knn, ablations=tuple(self.ablations),
                 deterministic=self.deterministic)
        return TrainConfig.from_dict(d)

    def fit(self, X, y=None, out_dir=None):
        """``X`` is a :class:`Dataset` or a sequence directory."""
        ds = X if isinstance(X, Dataset) else Dataset.load(X)
        result = train(ds, self._config(), out_dir=out_dir)
        self.model_ = result.model
        self.optimizer_ = result.optimizer
        self.config_ = result.config
        self.history_ = result.history
        self.n_points_ = len(result.model.cloud)
        return self

    def predict(self, X):
        """Render each frame of ``X``; returns dicts with rgb, labels and alpha."""
        check_is_fitted(self, ["model_"])
        return [render_novel(self.model_, f.pose, f.camera) for f in X]

    def score(self, X, y=None):
        """Mean PSNR over the frames of ``X``."""
        check_is_fitted(self, ["model_"])
        return evaluate(self.model_, X).psnr

    def evaluate(self, X):
        check_is_fitted(self, ["model_"])
        return evaluate(self.model_, X)

    def save(self, path):
        check_is_fitted(self, ["model_"])
        save_checkpoint(path, self.model_, self.optimizer_, self.config_.iterations, self.config_)

    @classmethod
    def load(cls, path):
        model, optim, config, _ = load_model(path)
        defaults = TrainConfig().to_dict()
        rest = {k: v for k, v in config.to_dict().items()
                if k not in _OWN and v != defaults[k]}
        est = cls(config.iterations, config.seed, config.sh_degree, config.voxel_size, config.knn,
                  tuple(config.ablations), config.deterministic, rest or None)
        est.model_, est.optimizer_, est.config_ = model, optim, config
        est.history_ = []
        est.n_points_ = len(model.cloud)
        return est
