"""Canonical -> observation deformation of a Gaussian cloud.

Three stages, each with an explicit backward:

* pose-conditioned non-rigid offsets on every stored attribute,
* forward linear blend skinning with network-predicted weights,
* the fused (position, scale, rotation) correction from the topology net.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ._validation import ConfigError, UsageError
from .gaussians import (
    GaussianCloud,
    matrix_to_quat,
    matrix_to_quat_backward,
    quat_multiply,
    quat_multiply_backward,
    quaternion_offset,
    quaternion_offset_backward,
    sh_count,
    softmax,
    softmax_backward,
)
from .nn import TinyMLP, pe_width, positional_encoding, positional_encoding_backward

PE_OCTAVES = 4


@dataclass
class NonRigidOffsets:
    d_position: np.ndarray   # (N, 3)
    d_sh: np.ndarray         # (N, k, 3)
    d_opacity: np.ndarray    # (N,)
    d_log_scale: np.ndarray  # (N, 3)
    d_rotation: np.ndarray   # (N, 3)

    @classmethod
    def zeros(cls, n: int, k: int = 1) -> "NonRigidOffsets":
        return cls(np.zeros((n, 3)), np.zeros((n, k, 3)), np.zeros(n), np.zeros((n, 3)), np.zeros((n, 3)))


@dataclass
class FusedOffsets:
    d_position: np.ndarray   # (N, 3)
    d_log_scale: np.ndarray  # (N, 3)
    d_rotation: np.ndarray   # (N, 3)

    @classmethod
    def zeros(cls, n: int) -> "FusedOffsets":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 3)))


class NonRigidNet:
    """Offsets for (X, C, alpha, s, r) from the canonical position and pose code.

    Raw network outputs are multiplied by fixed per-attribute ``output_scale``
    factors so a single learning rate suits every attribute.
    """

    def __init__(self, pose_dim: int, sh_degree: int = 0, hidden=(128, 128, 128), seed: int = 0,
                 output_scale=(0.02, 0.1, 0.1, 0.02, 0.02)):
        self.pose_dim = pose_dim
        self.k = sh_count(sh_degree)
        self.n_out = 3 + 3 * self.k + 1 + 3 + 3
        self.mlp = TinyMLP([pe_width(3, PE_OCTAVES) + pose_dim, *hidden, self.n_out], seed=seed)
        sx, sc, sa, ss, sr = output_scale
        self.scale = np.concatenate([np.full(3, sx), np.full(3 * self.k, sc), [sa], np.full(3, ss), np.full(3, sr)])

    def _inputs(self, positions, z_pose):
        z_pose = np.asarray(z_pose, dtype=np.float64).ravel()
        if z_pose.shape[0] != self.pose_dim:
            raise ConfigError(f"pose code has {z_pose.shape[0]} values, network expects {self.pose_dim}")
        n = positions.shape[0]
        return np.concatenate([positions_encoding(positions), np.broadcast_to(z_pose, (n, self.pose_dim))], axis=1)

    def forward(self, positions, z_pose, retain: bool = True):
        feats = self._inputs(positions, z_pose)
        raw, tape = self.mlp.forward(feats, retain=retain)
        out = raw * self.scale
        k = self.k
        offsets = NonRigidOffsets(
            d_position=out[:, 0:3],
            d_sh=out[:, 3:3 + 3 * k].reshape(-1, k, 3),
            d_opacity=out[:, 3 + 3 * k],
            d_log_scale=out[:, 4 + 3 * k:7 + 3 * k],
            d_rotation=out[:, 7 + 3 * k:10 + 3 * k],
        )
        return offsets, ((positions, tape) if retain else None)

    def backward(self, tape, grads: NonRigidOffsets):
        """Returns ``(param_grads, grad_positions)``."""
        if tape is None:
            raise UsageError("NonRigidNet.backward needs a retained forward pass")
        positions, mlp_tape = tape
        n = positions.shape[0]
        g = np.concatenate([grads.d_position, grads.d_sh.reshape(n, -1), grads.d_opacity[:, None],
                            grads.d_log_scale, grads.d_rotation], axis=1) * self.scale
        pg, g_in = self.mlp.backward(mlp_tape, g)
        g_pos = positional_encoding_backward(positions, g_in[:, :pe_width(3, PE_OCTAVES)], PE_OCTAVES)
        return pg, g_pos


def positions_encoding(positions):
    return positional_encoding(positions, PE_OCTAVES)


def nonrigid_forward(cloud: GaussianCloud, z_pose, net: NonRigidNet, retain: bool = False):
    return net.forward(cloud.positions, z_pose, retain=retain)


def apply_offsets(cloud: GaussianCloud, off: NonRigidOffsets) -> GaussianCloud:
    """Additive updates in the stored domain; quaternion composed with [1, dr]."""
    k = cloud.sh.shape[1]
    sh = cloud.sh.copy()
    sh[:, : off.d_sh.shape[1]] += off.d_sh[:, :k]
    return GaussianCloud(
        positions=cloud.positions + off.d_position,
        sh=sh,
        opacity_logit=cloud.opacity_logit + off.d_opacity,
        log_scale=cloud.log_scale + off.d_log_scale,
        rotation=quaternion_offset(cloud.rotation, off.d_rotation),
        semantic_logits=cloud.semantic_logits,
        parent_index=cloud.parent_index,
    )


def apply_offsets_backward(cloud: GaussianCloud, off: NonRigidOffsets, grads: dict):
    """Gradients of :func:`apply_offsets`; ``grads`` keyed like cloud params.

    Returns ``(cloud_grads, offset_grads)``.
    """
    g_rc, g_dr = quaternion_offset_backward(cloud.rotation, off.d_rotation, grads["rotation"])
    cloud_grads = dict(grads)
    cloud_grads["rotation"] = g_rc
    offset_grads = NonRigidOffsets(
        d_position=grads["positions"],
        d_sh=grads["sh"][:, : off.d_sh.shape[1]],
        d_opacity=grads["opacity_logit"],
        d_log_scale=grads["log_scale"],
        d_rotation=g_dr,
    )
    return cloud_grads, offset_grads


# --------------------------------------------------------------------------
# skinning
# --------------------------------------------------------------------------

class SkinningNet:
    """Per-point bone weights: softmax over (template prior logits + MLP residual).

    The prior is the log LBS weight row of the nearest template vertex, so a
    zero residual reproduces the template skinning; the residual network sees
    the encoded deformed-space position.
    """

    def __init__(self, n_bones: int, hidden=(64, 64), seed: int = 0, template=None, prior_eps: float = 1e-6):
        self.n_bones = n_bones
        self.mlp = TinyMLP([pe_width(3, PE_OCTAVES), *hidden, n_bones], seed=seed)
        self.prior_eps = prior_eps
        self._tree = None
        self._prior = None
        if template is not None:
            self.set_template(template.vertices, template.lbs_weights)

    def set_template(self, vertices, weights) -> None:
        self._tree = cKDTree(vertices)
        self._prior = np.log(weights + self.prior_eps)
        self._template_weights = weights

    def prior_logits(self, positions):
        if self._tree is None:
            return np.zeros((positions.shape[0], self.n_bones))
        _, nn = self._tree.query(positions)
        return self._prior[nn]

    def forward(self, positions, retain: bool = True):
        feats = positions_encoding(positions)
        raw, tape = self.mlp.forward(feats, retain=retain)
        w = softmax(raw + self.prior_logits(positions))
        return w, ((positions, tape, w) if retain else None)

    def backward(self, tape, grad_w):
        if tape is None:
            raise UsageError("SkinningNet.backward needs a retained forward pass")
        positions, mlp_tape, w = tape
        g_logits = softmax_backward(w, grad_w)
        pg, g_in = self.mlp.backward(mlp_tape, g_logits)
        return pg, positional_encoding_backward(positions, g_in, PE_OCTAVES)


def polar_rotation(T, iterations: int = 30):
    """Rotation factor of the polar decomposition T = R H (det T > 0 assumed).

    Newton iteration X <- (X + X^-T) / 2; exact identity in gives identity out.
    """
    X = np.array(T, dtype=np.float64)
    for _ in range(iterations):
        Xn = 0.5 * (X + np.swapaxes(np.linalg.inv(X), -1, -2))
        if np.max(np.abs(Xn - X)) < 1e-15:
            X = Xn
            break
        X = Xn
    bad = np.linalg.det(X) <= 0
    if np.any(bad):
        U, _, Vt = np.linalg.svd(T[bad])
        D = np.ones((U.shape[0], 3))
        D[:, 2] = np.sign(np.linalg.det(U @ Vt))
        X[bad] = (U * D[:, None, :]) @ Vt
    return X


def polar_rotation_backward(T, R, grad_R):
    """VJP of the polar rotation factor: solve Omega H + H Omega = skew terms."""
    H = np.swapaxes(R, -1, -2) @ T
    H = 0.5 * (H + np.swapaxes(H, -1, -2))
    s, V = np.linalg.eigh(H)
    K = np.swapaxes(R, -1, -2) @ grad_R
    Vt = np.swapaxes(V, -1, -2)
    Kp = Vt @ K @ V
    Yp = Kp / (s[..., :, None] + s[..., None, :])
    Y = V @ Yp @ Vt
    return R @ (Y - np.swapaxes(Y, -1, -2))


def blend_transforms(weights, bones):
    """Returns (T, t), the weighted blend of the bones' linear parts and translations.

    The blend is written relative to bone 0, B_0 + sum_b w_b (B_b - B_0), which
    equals sum_b w_b B_b for weights on the simplex but is exact whenever every
    bone carries the same transform (the rest pose included).
    """
    R0 = bones[0, :3, :3]
    t0 = bones[0, :3, 3]
    T = R0 + np.einsum("nb,bij->nij", weights, bones[:, :3, :3] - R0)
    t = t0 + weights @ (bones[:, :3, 3] - t0)
    return T, t


def rigid_lbs(cloud: GaussianCloud, weights, bones, retain: bool = False):
    """Skin a (non-rigidly deformed) cloud into observation space.

    Position: X_o = T X_d. Rotation: polar factor of T's linear block composed
    with r_d. Scale, opacity, color and semantics pass through.
    """
    T_lin, t = blend_transforms(weights, bones)
    X_d = cloud.positions
    X_o = np.einsum("nij,nj->ni", T_lin, X_d) + t
    Rp = polar_rotation(T_lin)
    q_T = matrix_to_quat(Rp)
    r_o = quat_multiply(q_T, cloud.rotation)
    out = GaussianCloud(positions=X_o, sh=cloud.sh, opacity_logit=cloud.opacity_logit,
                        log_scale=cloud.log_scale, rotation=r_o,
                        semantic_logits=cloud.semantic_logits, parent_index=cloud.parent_index)
    tape = None
    if retain:
        tape = {"T": T_lin, "Rp": Rp, "q_T": q_T, "X_d": X_d, "r_d": cloud.rotation, "bones": bones}
    return out, tape


def rigid_lbs_backward(tape, g_pos, g_rot):
    """Returns (grad_X_d, grad_r_d, grad_weights)."""
    if tape is None:
        raise UsageError("rigid_lbs_backward needs a retained forward pass")
    T, X_d, bones = tape["T"], tape["X_d"], tape["bones"]
    g_qT, g_rd = quat_multiply_backward(tape["q_T"], tape["r_d"], g_rot)
    g_Rp = matrix_to_quat_backward(tape["Rp"], g_qT)
    g_T = polar_rotation_backward(T, tape["Rp"], g_Rp)
    g_T = g_T + g_pos[:, :, None] * X_d[:, None, :]
    g_Xd = np.einsum("nji,nj->ni", T, g_pos)
    g_w = (np.einsum("nij,bij->nb", g_T, bones[:, :3, :3] - bones[0, :3, :3])
           + g_pos @ (bones[:, :3, 3] - bones[0, :3, 3]).T)
    return g_Xd, g_rd, g_w


def fusion_apply(cloud: GaussianCloud, off: FusedOffsets) -> GaussianCloud:
    return GaussianCloud(
        positions=cloud.positions + off.d_position,
        sh=cloud.sh,
        opacity_logit=cloud.opacity_logit,
        log_scale=cloud.log_scale + off.d_log_scale,
        rotation=quaternion_offset(cloud.rotation, off.d_rotation),
        semantic_logits=cloud.semantic_logits,
        parent_index=cloud.parent_index,
    )


def fusion_apply_backward(cloud: GaussianCloud, off: FusedOffsets, g_pos, g_log_scale, g_rot):
    """Returns ``(grad_positions, grad_log_scale, grad_rotation, FusedOffsets grads)``."""
    g_rc, g_dr = quaternion_offset_backward(cloud.rotation, off.d_rotation, g_rot)
    return g_pos, g_log_scale, g_rc, FusedOffsets(g_pos, g_log_scale, g_dr)
