"""Training objectives with their gradients.

Each ``*_loss`` returns ``(value, grad)`` (or several grads) so the trainer can
chain them without an autodiff framework.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import correlate1d
from scipy.spatial import cKDTree

from ._validation import UsageError, check_same_shape
from .nn import scatter_add_rows

BACKGROUND_LABEL = 255
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
BCE_EPS = 1e-6
KL_EPS = 1e-8

TERMS = ("rgb", "mask", "ssim", "lpips", "skin", "isopos", "semantic", "neighborhood")


@dataclass
class LossWeights:
    """Multipliers of the auxiliary terms; the RGB term has weight 1.

    ``lpips`` is kept for completeness of the objective but has no
    implementation, so it must stay 0.
    """

    mask: float = 0.1
    ssim: float = 0.2
    lpips: float = 0.0
    skin: float = 0.1
    isopos: float = 1.0
    semantic: float = 0.1
    neighborhood: float = 0.01

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {k} must be finite and non-negative")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["rgb"] = 1.0
        return d


@dataclass
class LossReport:
    terms: dict = field(default_factory=dict)
    total: float = 0.0

    def csv_row(self, iteration: int) -> list:
        return [iteration] + [self.terms.get(t, 0.0) for t in TERMS] + [self.total]

    @staticmethod
    def csv_header() -> list:
        return ["iteration", *TERMS, "total"]


def total_loss(terms: dict, weights: LossWeights) -> LossReport:
    w = weights.as_dict()
    total = 0.0
    for name, value in terms.items():
        total += w[name] * value
    return LossReport(terms=dict(terms), total=float(total))


# --------------------------------------------------------------------------
# image terms
# --------------------------------------------------------------------------

def rgb_loss(rendered, target, mask=None):
    """Mean absolute error over foreground pixels (all pixels if no mask)."""
    check_same_shape(rendered, target, "rendered and target images")
    diff = rendered - target
    if mask is None:
        m = np.ones(rendered.shape[:2])
    else:
        check_same_shape(rendered.shape[:2], np.shape(mask), "image and mask")
        m = (np.asarray(mask) > 0).astype(np.float64)
    denom = max(m.sum() * rendered.shape[2], 1.0)
    value = float(np.sum(np.abs(diff) * m[..., None]) / denom)
    grad = np.sign(diff) * m[..., None] / denom
    return value, grad


def mask_loss(alpha, mask):
    check_same_shape(alpha, mask, "alpha and mask")
    diff = alpha - np.asarray(mask, dtype=np.float64)
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def gaussian_window(size: int = 11, sigma: float = 1.5):
    x = np.arange(size) - size // 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _blur(img, win):
    out = correlate1d(img, win, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, win, axis=1, mode="constant", cval=0.0)


def ssim(img1, img2, window: int = 11, sigma: float = 1.5, return_map: bool = False):
    """Mean SSIM over pixels and channels; zero-padded Gaussian window."""
    check_same_shape(img1, img2, "SSIM inputs")
    win = gaussian_window(window, sigma)
    x = np.asarray(img1, dtype=np.float64)
    y = np.asarray(img2, dtype=np.float64)
    mx, my = _blur(x, win), _blur(y, win)
    sxx = _blur(x * x, win) - mx * mx
    syy = _blur(y * y, win) - my * my
    sxy = _blur(x * y, win) - mx * my
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * sxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    smap = a1 * a2 / (b1 * b2)
    if return_map:
        return float(smap.mean()), smap
    return float(smap.mean())


def ssim_loss(rendered, target, window: int = 11, sigma: float = 1.5):
    """1 - SSIM and its gradient w.r.t. ``rendered``."""
    check_same_shape(rendered, target, "SSIM inputs")
    win = gaussian_window(window, sigma)
    x = np.asarray(rendered, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    mx, my = _blur(x, win), _blur(y, win)
    sxx = _blur(x * x, win) - mx * mx
    syy = _blur(y * y, win) - my * my
    sxy = _blur(x * y, win) - mx * my
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * sxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    smap = a1 * a2 / (b1 * b2)
    g = -1.0 / smap.size
    d_mx = g * (2 * my * a2 / (b1 * b2) - 2 * my * a1 / (b1 * b2) - smap * 2 * mx / b1 + smap * 2 * mx / b2)
    d_m2x = g * (-smap / b2)
    d_mxy = g * (2 * a1 / (b1 * b2))
    grad = _blur(d_mx, win) + 2 * x * _blur(d_m2x, win) + y * _blur(d_mxy, win)
    return 1.0 - float(smap.mean()), grad


# --------------------------------------------------------------------------
# semantic terms
# --------------------------------------------------------------------------

def semantic_loss(rendered_sem, labels):
    """Per-channel BCE between rendered semantics and one-hot part labels.

    Averaged over foreground pixels and channels. Probabilities are clamped to
    [BCE_EPS, 1 - BCE_EPS] for the value; the gradient is evaluated at the
    clamped point rather than zeroed, so uncovered pixels still pull.
    """
    H, W, P = rendered_sem.shape
    labels = np.asarray(labels)
    if labels.shape != (H, W):
        raise UsageError("label image resolution differs from the render")
    fg = labels != BACKGROUND_LABEL
    n = int(fg.sum())
    grad = np.zeros_like(rendered_sem)
    if n == 0:
        return 0.0, grad
    p = np.clip(rendered_sem[fg], BCE_EPS, 1 - BCE_EPS)
    t = np.zeros_like(p)
    t[np.arange(n), labels[fg]] = 1.0
    value = -np.sum(t * np.log(p) + (1 - t) * np.log(1 - p)) / (n * P)
    grad[fg] = (-t / p + (1 - t) / (1 - p)) / (n * P)
    return float(value), grad


def knn_indices(points, k: int):
    """k nearest neighbours of each point, self excluded; (N, k)."""
    n = points.shape[0]
    if n <= k:
        raise UsageError(f"need more than k={k} points, got {n}")
    tree = cKDTree(points)
    _, idx = tree.query(points, k=k + 1)
    not_self = idx != np.arange(n)[:, None]
    order = np.argsort(~not_self, axis=1, kind="stable")
    return np.take_along_axis(idx, order, axis=1)[:, :k]


def neighborhood_loss(probs, neighbors):
    """(1/N) sum_m sum_{n in N_k(m)} KL(O_m || O_n); returns (value, grad_probs)."""
    N = probs.shape[0]
    p = np.maximum(probs, KL_EPS)
    q = p[neighbors]                      # (N, k, P)
    pm = p[:, None, :]
    lr = np.log(pm) - np.log(q)
    value = float(np.sum(pm * lr) / N)
    g = np.sum(lr + 1.0, axis=1) / N
    gq = -pm / q / N
    g += scatter_add_rows(neighbors, gq, N)
    return value, g


def skin_loss(pred_weights, target_weights):
    """MSE between predicted weights and the template rows they should match."""
    diff = pred_weights - target_weights
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def nearest_template_weights(positions, template_tree: cKDTree, template_weights):
    _, nn = template_tree.query(positions)
    return template_weights[nn]


def isopos_loss(canonical, observed, neighbors):
    """Mean squared change of canonical k-NN edge lengths.

    Returns ``(value, grad_canonical, grad_observed)``.
    """
    i = np.repeat(np.arange(canonical.shape[0]), neighbors.shape[1])
    j = neighbors.reshape(-1)
    ec = canonical[i] - canonical[j]
    eo = observed[i] - observed[j]
    lc = np.linalg.norm(ec, axis=1)
    lo = np.linalg.norm(eo, axis=1)
    r = lo - lc
    m = r.shape[0]
    value = float(np.mean(r * r))
    coef = 2.0 * r / m
    with np.errstate(invalid="ignore", divide="ignore"):
        go = np.where(lo[:, None] > 0, coef[:, None] * eo / lo[:, None], 0.0)
        gc = np.where(lc[:, None] > 0, -coef[:, None] * ec / lc[:, None], 0.0)
    n = canonical.shape[0]
    ij = np.concatenate([i, j])
    g_obs = scatter_add_rows(ij, np.concatenate([go, -go]), n)
    g_can = scatter_add_rows(ij, np.concatenate([gc, -gc]), n)
    return value, g_can, g_obs
