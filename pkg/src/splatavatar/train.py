"""Training loop, checkpoints, evaluation metrics and novel-view rendering."""
from __future__ import annotations

import ast
import csv
import io
import logging
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from ._validation import ConfigError, NumericalError, UsageError
from .annotator import BACKGROUND, annotate_frame
from .data import Dataset
from .density import DensifyConfig, DensifyStats, densify_and_prune, scene_extent, semantic_guided_densify, write_events
from .formats import config_hash, encode_checkpoint, decode_checkpoint, atomic_write_bytes, load_checkpoint
from .gaussians import GaussianCloud, PARAM_NAMES
from .losses import LossReport, LossWeights, knn_indices, ssim
from .model import ABLATIONS, AvatarModel, ModelConfig, check_ablations
from .nn import Adam, exponential_lr
from .render import Camera
from .template import Pose, TemplateBody

log = logging.getLogger(__name__)

PSNR_CAP = 100.0


@dataclass
class TrainConfig:
    iterations: int = 5000
    seed: int = 0
    # learning rates per parameter group
    lr_positions: float = 1.6e-4
    lr_positions_final: float = 0.01     # decay ratio reached at the last iteration
    lr_sh: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_semantic: float = 2.5e-3
    lr_networks: float = 1e-3
    # loss weights
    w_mask: float = 0.1
    w_ssim: float = 0.2
    w_lpips: float = 0.0
    w_skin: float = 0.1
    w_isopos: float = 1.0
    w_semantic: float = 0.1
    w_neighborhood: float = 0.01
    # density control
    densify_start: int = 500
    densify_interval: int = 100
    densify_stop_fraction: float = 0.6
    sgd_interval: int = 500
    grad_threshold: float = 2e-4
    min_opacity: float = 0.05
    scale_fraction: float = 0.01
    max_points: int = 0
    # model
    sh_degree: int = 0
    voxel_size: float = 0.05
    knn: int = 5
    feature_dim: int = 16
    init_opacity: float = 0.9
    annotate_k: int = 5
    ablations: tuple = ()
    deterministic: bool = False
    log_every: int = 100

    def __post_init__(self):
        self.ablations = check_ablations(self.ablations)
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        for f in fields(self):
            if f.name.startswith("lr_") or f.name.startswith("w_"):
                v = getattr(self, f.name)
                if not (np.isfinite(v) and v >= 0):
                    raise ConfigError(f"{f.name} must be a finite non-negative number")
        if self.w_lpips != 0:
            raise ConfigError("w_lpips must be 0: the perceptual term is not implemented")

    def loss_weights(self) -> LossWeights:
        return LossWeights(mask=self.w_mask, ssim=self.w_ssim, lpips=self.w_lpips, skin=self.w_skin,
                           isopos=self.w_isopos, semantic=self.w_semantic, neighborhood=self.w_neighborhood)

    def model_config(self) -> ModelConfig:
        return ModelConfig(sh_degree=self.sh_degree, voxel_size=self.voxel_size, knn=self.knn,
                           feature_dim=self.feature_dim, init_opacity=self.init_opacity,
                           topogeo="no_topogeo" not in self.ablations,
                           pointwise_features="mlp" in self.ablations, seed=self.seed)

    def densify_config(self) -> DensifyConfig:
        return DensifyConfig(grad_threshold=self.grad_threshold, min_opacity=self.min_opacity,
                             scale_fraction=self.scale_fraction, max_points=self.max_points)

    def learning_rates(self, step: int) -> dict:
        return {
            "positions": exponential_lr(step, self.iterations, self.lr_positions, self.lr_positions_final),
            "sh": self.lr_sh, "opacity_logit": self.lr_opacity, "log_scale": self.lr_scale,
            "rotation": self.lr_rotation, "semantic_logits": self.lr_semantic,
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablations"] = list(self.ablations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
        d = dict(d)
        if "ablations" in d:
            d["ablations"] = tuple(d["ablations"])
        return cls(**d)


def parse_value(text: str, like):
    """Coerce a ``key=value`` string to the type of the field default ``like``."""
    text = text.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            if not text:
                return ()
            if text[0] in "([":
                return tuple(ast.literal_eval(text))
            return tuple(t.strip() for t in text.split(",") if t.strip())
    except (ValueError, SyntaxError) as exc:
        raise ConfigError(f"cannot parse {text!r} as {type(like).__name__}") from exc
    return text


def apply_overrides(config, pairs):
    """Apply ``key=value`` strings on top of a config dataclass."""
    cls = type(config)
    d = asdict(config)
    defaults = asdict(cls())
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"expected key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        key = key.strip()
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        d[key] = parse_value(value, defaults[key])
    return cls(**d)


def read_config_file(path, base):
    """Apply a ``key=value`` text file (``#`` comments) on top of ``base``."""
    pairs = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            pairs.append(line)
    return apply_overrides(base, pairs)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

_BODY_FIELDS = ("vertices", "parents", "heads", "tails", "radii", "lbs_weights", "part_labels", "bone_parts", "owner")


def checkpoint_arrays(model: AvatarModel, optimizer: Adam | None) -> dict:
    arrays = {f"param/{k}": v for k, v in model.parameters().items()}
    if model.cloud.parent_index is not None:
        arrays["cloud_parent_index"] = model.cloud.parent_index
    for k in _BODY_FIELDS:
        arrays[f"body/{k}"] = getattr(model.body, k)
    if optimizer is not None:
        arrays.update({f"optim/{k}": v for k, v in optimizer.state().items()})
    return arrays


def save_checkpoint(path, model: AvatarModel, optimizer: Adam | None, iteration: int, config: TrainConfig,
                    extra: dict | None = None) -> None:
    meta = {"iteration": int(iteration), "config": config.to_dict(), "config_hash": config_hash(config.to_dict()),
            "n_points": len(model.cloud)}
    if extra:
        meta.update(extra)
    atomic_write_bytes(path, encode_checkpoint(checkpoint_arrays(model, optimizer), meta))


def model_from_arrays(arrays: dict, meta: dict):
    config = TrainConfig.from_dict(meta["config"])
    body = TemplateBody(**{k: arrays[f"body/{k}"] for k in _BODY_FIELDS})
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    cloud = GaussianCloud(**{k: params[f"cloud/{k}"] for k in PARAM_NAMES},
                          parent_index=arrays.get("cloud_parent_index"))
    model = AvatarModel(body, config.model_config(), cloud=cloud)
    model.load_parameters(params)
    model.cloud.parent_index = arrays.get("cloud_parent_index")
    optim = Adam()
    optim.load_state({k[len("optim/"):]: v for k, v in arrays.items() if k.startswith("optim/")})
    return model, optim, config


def load_model(path):
    """Returns ``(model, optimizer, config, meta)``."""
    arrays, meta = load_checkpoint(path)
    model, optim, config = model_from_arrays(arrays, meta)
    return model, optim, config, meta


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: AvatarModel
    optimizer: Adam
    config: TrainConfig
    history: list = field(default_factory=list)     # LossReport per iteration
    events: list = field(default_factory=list)
    seconds: float = 0.0

    def loss_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LossReport.csv_header())
        for it, rep in enumerate(self.history, start=1):
            w.writerow([repr(v) if isinstance(v, float) else v for v in rep.csv_row(it)])
        return buf.getvalue()


def _param_lrs(model: AvatarModel, config: TrainConfig, step: int) -> dict:
    cloud_lr = config.learning_rates(step)
    lrs = {}
    for name in model.parameters():
        group, key = name.split("/", 1)
        lrs[name] = cloud_lr[key] if group == "cloud" else config.lr_networks
    return lrs


def training_labels(dataset: Dataset, frames, config: TrainConfig) -> dict:
    return {f.frame_id: annotate_frame(f, dataset.body, dataset.label_cache, config.annotate_k) for f in frames}


def _restructure(model: AvatarModel, optimizer: Adam, new_cloud: GaussianCloud, source) -> None:
    model.cloud = new_cloud
    for k in PARAM_NAMES:
        optimizer.remap(f"cloud/{k}", source)


def train(dataset: Dataset, config: TrainConfig | None = None, out_dir=None, model: AvatarModel | None = None,
          progress=None) -> TrainResult:
    """Fit the avatar to the training split of ``dataset``.

    With ``out_dir`` the loss CSV, density event log and final checkpoint are
    written there. A non-finite loss aborts with a diagnostic checkpoint.
    """
    config = config or TrainConfig()
    limit = threadpool_limits(1) if config.deterministic else nullcontext()
    with limit:
        return _train(dataset, config, out_dir, model, progress)


def _train(dataset, config, out_dir, model, progress):
    frames = dataset.split("train")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "events.log").write_text("")
    labels = training_labels(dataset, frames, config)
    model = model or AvatarModel(dataset.body, config.model_config())
    optim = Adam()
    weights = config.loss_weights()
    dcfg = config.densify_config()
    extent = scene_extent(model.cloud.positions)
    stats = DensifyStats.zeros(len(model.cloud))
    rng = np.random.default_rng(config.seed)
    use_sem = "no_semantic" not in config.ablations
    use_nb = "no_neighborhood" not in config.ablations
    use_sgd = "no_sgd" not in config.ablations
    stop = int(config.densify_stop_fraction * config.iterations)
    result = TrainResult(model, optim, config)
    t0 = time.perf_counter()
    for step in range(1, config.iterations + 1):
        fr = frames[int(rng.integers(len(frames)))]
        neighbors = knn_indices(model.cloud.positions, config.knn)
        _, st = model.render(fr.pose, fr.camera, retain=True)
        report, seeds = model.losses(st, fr.image, fr.mask, labels[fr.frame_id], weights, neighbors,
                                     semantic=use_sem, neighborhood=use_nb)
        if not np.isfinite(report.total):
            if out_dir is not None:
                save_checkpoint(out_dir / "diverged.ckpt", model, optim, step, config)
            raise NumericalError(f"non-finite loss at iteration {step} (frame {fr.frame_id}): {report.terms}")
        grads = model.backward(st, seeds)
        g2d = grads.pop("_mean2d")
        stats.add(g2d, np.any(g2d != 0, axis=1))
        optim.step(model.parameters(), grads, _param_lrs(model, config, step))
        model.cloud.renormalize()
        model.cloud.check_invariants()
        result.history.append(report)

        events = []
        if config.densify_start <= step <= stop:
            if step % config.densify_interval == 0:
                cloud, source, ev = densify_and_prune(model.cloud, stats, dcfg, extent, step, config.seed)
                _restructure(model, optim, cloud, source)
                events += ev
                stats.reset(len(model.cloud))
            if use_sgd and step % config.sgd_interval == 0:
                cloud, source, ev = semantic_guided_densify(model.cloud, None, dcfg, step, config.seed)
                _restructure(model, optim, cloud, source)
                events += ev
                stats.reset(len(model.cloud))
        if events:
            result.events += events
            if out_dir is not None:
                write_events(out_dir / "events.log", events)
        if progress is not None and (step % config.log_every == 0 or step == config.iterations):
            progress(step, report, len(model.cloud), time.perf_counter() - t0)
    result.seconds = time.perf_counter() - t0
    if out_dir is not None:
        atomic_write_bytes(out_dir / "loss.csv", result.loss_csv().encode())
        save_checkpoint(out_dir / "model.ckpt", model, optim, config.iterations, config)
    return result


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def psnr(img, ref) -> float:
    mse = float(np.mean((np.asarray(img, dtype=np.float64) - np.asarray(ref, dtype=np.float64)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def semantic_accuracy(semantic, parts, mask=None) -> float:
    """Share of foreground pixels whose rendered argmax part equals the truth."""
    parts = np.asarray(parts)
    fg = parts != BACKGROUND if mask is None else (np.asarray(mask) > 0) & (parts != BACKGROUND)
    if not fg.any():
        return float("nan")
    return float(np.mean(np.argmax(semantic, axis=-1)[fg] == parts[fg]))


@dataclass
class Metrics:
    psnr: float
    ssim: float
    semantic_accuracy: float
    fps: float
    n_frames: int

    def csv(self) -> str:
        return ("psnr,ssim,semantic_accuracy,fps,n_frames\n"
                f"{self.psnr!r},{self.ssim!r},{self.semantic_accuracy!r},{self.fps!r},{self.n_frames}\n")


def evaluate(model: AvatarModel, frames) -> Metrics:
    frames = list(frames)
    if not frames:
        raise UsageError("cannot evaluate an empty split")
    model.render(frames[0].pose, frames[0].camera)   # warm-up (JIT), not timed
    p, s, a = [], [], []
    elapsed = 0.0
    for fr in frames:
        t = time.perf_counter()
        out, _ = model.render(fr.pose, fr.camera)
        elapsed += time.perf_counter() - t
        p.append(psnr(out.color, fr.image))
        s.append(ssim(out.color, fr.image))
        if fr.parts is not None:
            a.append(semantic_accuracy(out.semantic, fr.parts, fr.mask))
    acc = float(np.nanmean(a)) if a else float("nan")
    return Metrics(float(np.mean(p)), float(np.mean(s)), acc, len(frames) / max(elapsed, 1e-12), len(frames))


def label_map(out, alpha_threshold: float = 0.5):
    lab = np.argmax(out.semantic, axis=-1).astype(np.uint8)
    return np.where(out.alpha >= alpha_threshold, lab, BACKGROUND).astype(np.uint8)


def render_novel(model: AvatarModel, pose: Pose, cam: Camera) -> dict:
    out, _ = model.render(pose, cam)
    return {"rgb": out.color, "labels": label_map(out), "alpha": out.alpha, "semantic": out.semantic}
