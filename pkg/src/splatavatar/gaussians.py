"""Anisotropic 3D Gaussians: quaternion algebra, covariances, decoding and SH color.

Every batched routine takes arrays with a leading point axis. Quaternions are
stored ``(w, x, y, z)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._validation import InvalidInputError, NumericalError

EIGEN_FLOOR = 1e-8
QUAT_TOL = 1e-6

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)


def sh_count(degree: int) -> int:
    if not 0 <= degree <= 2:
        raise InvalidInputError(f"SH degree must be in [0, 2], got {degree}")
    return (degree + 1) ** 2


# --------------------------------------------------------------------------
# decoding
# --------------------------------------------------------------------------

def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def softmax(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(p, grad_p, axis=-1):
    """Vector-Jacobian product of softmax given its output ``p``."""
    return p * (grad_p - np.sum(grad_p * p, axis=axis, keepdims=True))


def normalize_quat(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def normalize_backward(v, grad_u):
    """Backward of ``u = v / |v|`` along the last axis."""
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    u = v / n
    return (grad_u - u * np.sum(grad_u * u, axis=-1, keepdims=True)) / n


# --------------------------------------------------------------------------
# quaternion algebra
# --------------------------------------------------------------------------

def quat_multiply(a, b):
    """Hamilton product ``a * b``; rotation matrix of the result is R(a) R(b)."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_multiply_backward(a, b, grad):
    """Gradients of ``quat_multiply(a, b)`` w.r.t. ``a`` and ``b``."""
    # d(a*b)/da applied transposed: grad * conj(b); likewise conj(a) * grad.
    ga = quat_multiply(grad, quat_conjugate(b))
    gb = quat_multiply(quat_conjugate(a), grad)
    return ga, gb


def quat_to_matrix(q):
    """Rotation matrices for unit quaternions, shape (..., 3, 3)."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    R = np.empty(np.shape(w) + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_matrix_backward(q, grad_R):
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    g = grad_R
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
              - 2 * x * g[..., 1, 1] - w * g[..., 1, 2] + z * g[..., 2, 0]
              + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    gy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
              + x * g[..., 1, 0] + z * g[..., 1, 2] - w * g[..., 2, 0]
              + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    gz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
              + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
              + x * g[..., 2, 0] + y * g[..., 2, 1])
    return np.stack([gw, gx, gy, gz], axis=-1)


# Shepperd branches: (principal component, diagonal signs, [(component, [(i, j, sign), ...])])
_SHEPPERD = (
    (0, (1, 1, 1), ((1, ((2, 1, 1), (1, 2, -1))), (2, ((0, 2, 1), (2, 0, -1))), (3, ((1, 0, 1), (0, 1, -1))))),
    (1, (1, -1, -1), ((0, ((2, 1, 1), (1, 2, -1))), (2, ((0, 1, 1), (1, 0, 1))), (3, ((0, 2, 1), (2, 0, 1))))),
    (2, (-1, 1, -1), ((0, ((0, 2, 1), (2, 0, -1))), (1, ((0, 1, 1), (1, 0, 1))), (3, ((1, 2, 1), (2, 1, 1))))),
    (3, (-1, -1, 1), ((0, ((1, 0, 1), (0, 1, -1))), (1, ((0, 2, 1), (2, 0, 1))), (2, ((1, 2, 1), (2, 1, 1))))),
)


def _shepperd_branch(R):
    d = np.stack([R[..., 0, 0] + R[..., 1, 1] + R[..., 2, 2],
                  R[..., 0, 0], R[..., 1, 1], R[..., 2, 2]], axis=-1)
    return np.argmax(d, axis=-1)


def matrix_to_quat(R):
    """Quaternion of a rotation matrix (Shepperd's method, branch-stable)."""
    R = np.asarray(R, dtype=np.float64)
    branch = _shepperd_branch(R)
    q = np.zeros(R.shape[:-2] + (4,))
    for k, (p, signs, others) in enumerate(_SHEPPERD):
        m = branch == k
        if not np.any(m):
            continue
        Rm = R[m]
        a = 1.0 + signs[0] * Rm[:, 0, 0] + signs[1] * Rm[:, 1, 1] + signs[2] * Rm[:, 2, 2]
        pv = 0.5 * np.sqrt(a)
        qm = np.zeros((Rm.shape[0], 4))
        qm[:, p] = pv
        for comp, terms in others:
            n = sum(s * Rm[:, i, j] for i, j, s in terms)
            qm[:, comp] = n / (4.0 * pv)
        q[m] = qm
    return q


def matrix_to_quat_backward(R, grad_q):
    R = np.asarray(R, dtype=np.float64)
    branch = _shepperd_branch(R)
    gR = np.zeros_like(R)
    for k, (p, signs, others) in enumerate(_SHEPPERD):
        m = branch == k
        if not np.any(m):
            continue
        Rm = R[m]
        gq = grad_q[m]
        a = 1.0 + signs[0] * Rm[:, 0, 0] + signs[1] * Rm[:, 1, 1] + signs[2] * Rm[:, 2, 2]
        pv = 0.5 * np.sqrt(a)
        g = np.zeros_like(Rm)
        gp = gq[:, p].copy()
        for comp, terms in others:
            n = sum(s * Rm[:, i, j] for i, j, s in terms)
            gn = gq[:, comp] / (4.0 * pv)
            gp -= gq[:, comp] * n / (4.0 * pv * pv)
            for i, j, s in terms:
                g[:, i, j] += s * gn
        ga = gp / (8.0 * pv)
        for ax in range(3):
            g[:, ax, ax] += signs[ax] * ga
        gR[m] = g
    return gR


def quaternion_offset(r_c, delta_r):
    """Compose ``r_c`` with the small-rotation quaternion ``[1, delta_r]``.

    The product is rescaled by ``|r_c| / |product|``; for unit ``r_c`` this is
    plain normalization, and a zero offset returns ``r_c`` bit for bit.
    """
    r_c = np.asarray(r_c, dtype=np.float64)
    delta_r = np.asarray(delta_r, dtype=np.float64)
    off = np.concatenate([np.ones(delta_r.shape[:-1] + (1,)), delta_r], axis=-1)
    p = quat_multiply(r_c, off)
    return p * (np.linalg.norm(r_c, axis=-1, keepdims=True) / np.linalg.norm(p, axis=-1, keepdims=True))


def quaternion_offset_backward(r_c, delta_r, grad_out):
    """Gradients of :func:`quaternion_offset` w.r.t. ``r_c`` and ``delta_r``."""
    off = np.concatenate([np.ones(delta_r.shape[:-1] + (1,)), delta_r], axis=-1)
    p = quat_multiply(r_c, off)
    nr = np.linalg.norm(r_c, axis=-1, keepdims=True)
    np_ = np.linalg.norm(p, axis=-1, keepdims=True)
    u = p / np_
    # out = nr * u
    g_nr = np.sum(grad_out * u, axis=-1, keepdims=True)
    g_p = normalize_backward(p, grad_out * nr)
    g_rc, g_off = quat_multiply_backward(r_c, off, g_p)
    g_rc = g_rc + g_nr * r_c / nr
    return g_rc, g_off[..., 1:]


# --------------------------------------------------------------------------
# covariance and density
# --------------------------------------------------------------------------

def build_covariance(scales, rotation, check: bool = True):
    """Sigma = R S S^T R^T for positive ``scales`` and unit quaternion ``rotation``."""
    s = np.asarray(scales, dtype=np.float64)
    q = np.asarray(rotation, dtype=np.float64)
    if check:
        if np.any(s <= 0):
            raise InvalidInputError("scales must be strictly positive")
        norms = np.linalg.norm(q, axis=-1)
        if np.any(np.abs(norms - 1.0) > QUAT_TOL):
            raise InvalidInputError(f"rotation quaternion not unit (|q| = {norms.ravel()[0]:.3g})")
    R = quat_to_matrix(q)
    M = R * s[..., None, :]
    cov = M @ np.swapaxes(M, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def build_covariance_backward(scales, rotation, grad_cov):
    """Gradients of :func:`build_covariance` w.r.t. scales and the quaternion."""
    R = quat_to_matrix(rotation)
    G = 0.5 * (grad_cov + np.swapaxes(grad_cov, -1, -2))
    s2 = scales * scales
    # Sigma = R D R^T, D = diag(s^2)
    g_R = 2.0 * (G @ R) * s2[..., None, :]
    RtGR = np.swapaxes(R, -1, -2) @ G @ R
    g_s = 2.0 * scales * np.diagonal(RtGR, axis1=-2, axis2=-1)
    return g_s, quat_to_matrix_backward(rotation, g_R)


def gaussian_value(x, cov, index: Optional[int] = None):
    """exp(-1/2 x^T Sigma^-1 x) with eigenvalues floored at ``EIGEN_FLOOR``."""
    x = np.asarray(x, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    evals, evecs = np.linalg.eigh(0.5 * (cov + np.swapaxes(cov, -1, -2)))
    evals = np.maximum(evals, EIGEN_FLOOR)
    if not np.all(np.isfinite(evals)):
        where = "" if index is None else f" (point {index})"
        raise NumericalError(f"covariance not invertible{where}")
    y = np.einsum("...ji,...j->...i", evecs, x)
    return np.exp(-0.5 * np.sum(y * y / evals, axis=-1))


# --------------------------------------------------------------------------
# spherical harmonics (degree <= 2)
# --------------------------------------------------------------------------

def sh_basis(dirs, degree: int):
    """Real SH basis values for unit directions, shape (N, (degree+1)^2)."""
    n = sh_count(degree)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = np.empty((dirs.shape[0], n))
    out[:, 0] = SH_C0
    if degree >= 1:
        out[:, 1] = -SH_C1 * y
        out[:, 2] = SH_C1 * z
        out[:, 3] = -SH_C1 * x
    if degree >= 2:
        out[:, 4] = SH_C2[0] * x * y
        out[:, 5] = SH_C2[1] * y * z
        out[:, 6] = SH_C2[2] * (2 * z * z - x * x - y * y)
        out[:, 7] = SH_C2[3] * x * z
        out[:, 8] = SH_C2[4] * (x * x - y * y)
    return out


def _sh_basis_jacobian(dirs, degree: int):
    n = sh_count(degree)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    J = np.zeros((dirs.shape[0], n, 3))
    if degree >= 1:
        J[:, 1, 1] = -SH_C1
        J[:, 2, 2] = SH_C1
        J[:, 3, 0] = -SH_C1
    if degree >= 2:
        J[:, 4, 0], J[:, 4, 1] = SH_C2[0] * y, SH_C2[0] * x
        J[:, 5, 1], J[:, 5, 2] = SH_C2[1] * z, SH_C2[1] * y
        J[:, 6, 0], J[:, 6, 1], J[:, 6, 2] = -2 * SH_C2[2] * x, -2 * SH_C2[2] * y, 4 * SH_C2[2] * z
        J[:, 7, 0], J[:, 7, 2] = SH_C2[3] * z, SH_C2[3] * x
        J[:, 8, 0], J[:, 8, 1] = 2 * SH_C2[4] * x, -2 * SH_C2[4] * y
    return J


def sh_to_color(sh, positions, cam_center, degree: int):
    """Evaluate SH color toward the camera; returns (colors, cache)."""
    k = sh_count(degree)
    raw_dirs = positions - cam_center
    dirs = raw_dirs / np.linalg.norm(raw_dirs, axis=-1, keepdims=True)
    basis = sh_basis(dirs, degree)
    raw = np.einsum("nk,nkc->nc", basis, sh[:, :k]) + 0.5
    colors = np.maximum(raw, 0.0)
    return colors, (sh, raw_dirs, dirs, basis, raw, degree)


def sh_to_color_backward(cache, grad_colors):
    """Returns (grad_sh, grad_positions)."""
    sh, raw_dirs, dirs, basis, raw, degree = cache
    k = sh_count(degree)
    g = grad_colors * (raw > 0)
    g_sh = np.zeros_like(sh)
    g_sh[:, :k] = basis[:, :, None] * g[:, None, :]
    g_pos = np.zeros_like(raw_dirs)
    if degree > 0:
        J = _sh_basis_jacobian(dirs, degree)
        g_basis = np.einsum("nkc,nc->nk", sh[:, :k], g)
        g_dirs = np.einsum("nk,nkd->nd", g_basis, J)
        g_pos = normalize_backward(raw_dirs, g_dirs)
    return g_sh, g_pos


def rgb_to_sh0(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


# --------------------------------------------------------------------------
# the optimizable cloud
# --------------------------------------------------------------------------

PARAM_NAMES = ("positions", "sh", "opacity_logit", "log_scale", "rotation", "semantic_logits")


@dataclass
class GaussianCloud:
    """Stored (pre-activation) parameters of a semantic Gaussian cloud."""

    positions: np.ndarray          # (N, 3)
    sh: np.ndarray                 # (N, k, 3)
    opacity_logit: np.ndarray      # (N,)
    log_scale: np.ndarray          # (N, 3)
    rotation: np.ndarray           # (N, 4) unit
    semantic_logits: np.ndarray    # (N, P)
    parent_index: Optional[np.ndarray] = field(default=None)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    @property
    def n_parts(self) -> int:
        return self.semantic_logits.shape[1]

    @property
    def opacity(self):
        return sigmoid(self.opacity_logit)

    @property
    def scales(self):
        return np.exp(self.log_scale)

    @property
    def semantics(self):
        return softmax(self.semantic_logits)

    def base_colors(self):
        """View-independent (degree-0) RGB."""
        return np.maximum(SH_C0 * self.sh[:, 0] + 0.5, 0.0)

    def params(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "GaussianCloud":
        parent = None if self.parent_index is None else self.parent_index.copy()
        return GaussianCloud(**{k: v.copy() for k, v in self.params().items()}, parent_index=parent)

    def subset(self, idx) -> "GaussianCloud":
        parent = None if self.parent_index is None else self.parent_index[idx]
        return GaussianCloud(**{k: v[idx].copy() for k, v in self.params().items()}, parent_index=parent)

    def renormalize(self) -> None:
        self.rotation = normalize_quat(self.rotation)

    def check_invariants(self) -> None:
        n = len(self)
        for name, arr in self.params().items():
            if arr.shape[0] != n:
                raise InvalidInputError(f"{name} has {arr.shape[0]} rows, expected {n}")
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"non-finite values in {name}")
        if np.any(np.abs(np.linalg.norm(self.rotation, axis=1) - 1.0) > QUAT_TOL):
            raise NumericalError("rotation quaternions drifted from unit norm")

    @classmethod
    def from_points(cls, positions, colors, labels, n_parts: int, scale: float,
                    opacity: float = 0.9, sh_degree: int = 0, label_logit: float = 10.0):
        """Initial cloud: isotropic Gaussians carrying one-hot part semantics."""
        positions = np.asarray(positions, dtype=np.float64)
        n = positions.shape[0]
        k = sh_count(sh_degree)
        sh = np.zeros((n, k, 3))
        sh[:, 0] = rgb_to_sh0(colors)
        sem = np.zeros((n, n_parts))
        sem[np.arange(n), np.asarray(labels)] = label_logit
        rot = np.zeros((n, 4))
        rot[:, 0] = 1.0
        return cls(
            positions=positions.copy(),
            sh=sh,
            opacity_logit=np.full(n, float(logit(opacity))),
            log_scale=np.full((n, 3), np.log(scale)),
            rotation=rot,
            semantic_logits=sem,
            parent_index=np.arange(n),
        )
