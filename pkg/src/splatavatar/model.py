"""The animatable avatar: canonical cloud, deformation networks, and the
forward/backward chain from parameters to training losses.

Forward order: non-rigid offsets -> skinning weights -> LBS -> (voxel U-Net
features -> fused offsets) -> decode -> splat. ``backward`` walks the same
chain in reverse and returns gradients for every optimizable array, keyed
``group/name``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from ._validation import ConfigError
from .deformation import (
    FusedOffsets,
    NonRigidNet,
    SkinningNet,
    apply_offsets,
    apply_offsets_backward,
    fusion_apply,
    fusion_apply_backward,
    rigid_lbs,
    rigid_lbs_backward,
)
from .gaussians import GaussianCloud, PARAM_NAMES, sh_to_color, sh_to_color_backward, softmax, softmax_backward
from .losses import (
    LossWeights,
    isopos_loss,
    knn_indices,
    mask_loss,
    neighborhood_loss,
    rgb_loss,
    semantic_loss,
    skin_loss,
    ssim_loss,
    total_loss,
)
from .nn import TinyMLP
from .render import Camera, render, render_backward
from .template import Pose, TemplateBody, bone_transforms, pose_encoding
from .topogeo import FusionNet, SparseUNet, gather_to_points, scatter_to_voxels, voxel_mean_backward, voxelize

ABLATIONS = ("no_topogeo", "no_semantic", "no_sgd", "no_neighborhood", "mlp")


@dataclass
class ModelConfig:
    sh_degree: int = 0
    nonrigid_hidden: tuple = (128, 128, 128)
    skin_hidden: tuple = (64, 64)
    fusion_hidden: tuple = (64, 64)
    unet_channels: tuple = (16, 32)
    feature_dim: int = 16
    voxel_size: float = 0.05
    knn: int = 5
    init_opacity: float = 0.9
    init_color: float = 0.5
    label_logit: float = 10.0
    background: tuple = (0.0, 0.0, 0.0)
    topogeo: bool = True            # False skips voxel features and fused offsets
    pointwise_features: bool = False  # True swaps the U-Net for a per-point MLP
    seed: int = 0


class PointwiseFeatureNet:
    """Per-point stand-in for the U-Net: semantic vector -> feature vector."""

    def __init__(self, in_channels: int, out_channels: int, hidden=(32, 32), seed: int = 0):
        self.mlp = TinyMLP([in_channels, *hidden, out_channels], seed=seed, zero_output=False)

    def parameters(self) -> dict:
        return self.mlp.parameters()

    def load_parameters(self, params: dict) -> None:
        self.mlp.load_parameters(params)


def init_scales(positions, k: int = 3):
    """Isotropic initial scale: mean distance to the k nearest other points."""
    d, _ = cKDTree(positions).query(positions, k=k + 1)
    return np.maximum(d[:, 1:].mean(axis=1), 1e-4)


@dataclass
class ForwardState:
    """Everything the backward pass needs from one forward evaluation."""

    z: np.ndarray
    bones: np.ndarray
    offsets: object
    nr_tape: object
    deformed: GaussianCloud
    weights: np.ndarray
    skin_tape: object
    lbs_tape: dict
    observed: GaussianCloud
    grid: object = None
    feat_tape: object = None
    point_features: Optional[np.ndarray] = None
    fused: Optional[FusedOffsets] = None
    fusion_tape: object = None
    final: Optional[GaussianCloud] = None
    color_cache: object = None
    semantics: Optional[np.ndarray] = None
    render_out: object = None


class AvatarModel:
    def __init__(self, body: TemplateBody, config: ModelConfig | None = None, cloud: GaussianCloud | None = None):
        self.body = body
        self.config = config or ModelConfig()
        c = self.config
        B, P = body.n_bones, body.n_parts
        self.pose_dim = 4 * B
        if cloud is None:
            colors = np.full((body.n_vertices, 3), c.init_color)
            cloud = GaussianCloud.from_points(body.vertices, colors, body.part_labels, P, 1.0,
                                              opacity=c.init_opacity, sh_degree=c.sh_degree,
                                              label_logit=c.label_logit)
            cloud.log_scale = np.repeat(np.log(init_scales(body.vertices))[:, None], 3, axis=1)
        self.cloud = cloud
        self.nonrigid = NonRigidNet(self.pose_dim, c.sh_degree, c.nonrigid_hidden, seed=c.seed)
        self.skin = SkinningNet(B, c.skin_hidden, seed=c.seed + 1, template=body)
        if c.pointwise_features:
            self.features = PointwiseFeatureNet(P, c.feature_dim, seed=c.seed + 2)
        else:
            self.features = SparseUNet(P, c.unet_channels, c.feature_dim, seed=c.seed + 2)
        self.fusion = FusionNet(c.feature_dim, self.pose_dim, c.fusion_hidden, seed=c.seed + 3)
        self._tmpl_tree = cKDTree(body.vertices)

    # ------------------------------------------------------------------
    # parameters
    # ------------------------------------------------------------------

    def networks(self) -> dict:
        return {"nonrigid": self.nonrigid.mlp, "skin": self.skin.mlp,
                "features": self.features, "fusion": self.fusion.mlp}

    def parameters(self) -> dict:
        """Flat ``group/name`` view of every optimizable array (no copies)."""
        out = {f"cloud/{k}": v for k, v in self.cloud.params().items()}
        for group, net in self.networks().items():
            for k, v in net.parameters().items():
                out[f"{group}/{k}"] = v
        return out

    def load_parameters(self, params: dict) -> None:
        self.cloud = GaussianCloud(**{k: np.array(params[f"cloud/{k}"], dtype=np.float64) for k in PARAM_NAMES},
                                   parent_index=params.get("cloud/parent_index"))
        for group, net in self.networks().items():
            prefix = group + "/"
            net.load_parameters({k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)})

    # ------------------------------------------------------------------
    # forward
    # ------------------------------------------------------------------

    def deform(self, pose: Pose, retain: bool = False) -> ForwardState:
        cloud = self.cloud
        z = pose_encoding(pose)
        bones = bone_transforms(self.body, pose)
        off, nr_tape = self.nonrigid.forward(cloud.positions, z, retain=retain)
        deformed = apply_offsets(cloud, off)
        w, skin_tape = self.skin.forward(deformed.positions, retain=retain)
        observed, lbs_tape = rigid_lbs(deformed, w, bones, retain=retain)
        st = ForwardState(z, bones, off, nr_tape, deformed, w, skin_tape, lbs_tape, observed)
        if self.config.topogeo:
            sem = cloud.semantics
            if self.config.pointwise_features:
                pf, st.feat_tape = self.features.mlp.forward(sem, retain=retain)
            else:
                st.grid = voxelize(cloud.positions, self.config.voxel_size, sem)
                fv, st.feat_tape = self.features.forward(st.grid, retain=retain)
                pf = gather_to_points(st.grid, fv)
            st.point_features = pf
            (dx, ds, dr), st.fusion_tape = self.fusion.forward(pf, deformed.positions, z, retain=retain)
            st.fused = FusedOffsets(dx, ds, dr)
            st.final = fusion_apply(observed, st.fused)
        else:
            st.final = observed
        return st

    def render(self, pose: Pose, cam: Camera, retain: bool = False, state: ForwardState | None = None):
        st = state if state is not None else self.deform(pose, retain=retain)
        g = st.final
        colors, st.color_cache = sh_to_color(g.sh, g.positions, cam.center, g.sh_degree)
        st.semantics = g.semantics
        st.render_out = render(g.positions, g.scales, g.rotation, g.opacity, colors, st.semantics, cam,
                               background=self.config.background, retain=retain)
        return st.render_out, st

    def render_canonical(self, cam: Camera):
        g = self.cloud
        colors, _ = sh_to_color(g.sh, g.positions, cam.center, g.sh_degree)
        return render(g.positions, g.scales, g.rotation, g.opacity, colors, g.semantics, cam,
                      background=self.config.background)

    # ------------------------------------------------------------------
    # losses and backward
    # ------------------------------------------------------------------

    def losses(self, st: ForwardState, image, mask, labels, weights: LossWeights, neighbors=None,
               semantic: bool = True, neighborhood: bool = True):
        """Loss terms and the upstream gradients they seed.

        Returns ``(LossReport, seeds)``; seeds hold image-space gradients and
        the direct per-point gradients of the 3D regularizers.
        """
        out = st.render_out
        cloud = self.cloud
        if neighbors is None:
            neighbors = knn_indices(cloud.positions, self.config.knn)
        terms, seeds = {}, {}
        terms["rgb"], g_rgb = rgb_loss(out.color, image, mask)
        terms["ssim"], g_ssim = ssim_loss(out.color, image)
        terms["mask"], g_mask = mask_loss(out.alpha, mask)
        seeds["color"] = g_rgb + weights.ssim * g_ssim
        seeds["alpha"] = weights.mask * g_mask
        seeds["semantic"] = None
        if semantic and weights.semantic > 0:
            terms["semantic"], g_sem = semantic_loss(out.semantic, labels)
            seeds["semantic"] = weights.semantic * g_sem
        target_w = self.body.lbs_weights[self._tmpl_tree.query(cloud.positions)[1]]
        terms["skin"], g_skin = skin_loss(st.weights, target_w)
        seeds["weights"] = weights.skin * g_skin
        terms["isopos"], g_can, g_obs = isopos_loss(cloud.positions, st.final.positions, neighbors)
        seeds["canonical"] = weights.isopos * g_can
        seeds["final_positions"] = weights.isopos * g_obs
        seeds["probs"] = None
        if neighborhood and weights.neighborhood > 0:
            terms["neighborhood"], g_nb = neighborhood_loss(cloud.semantics, neighbors)
            seeds["probs"] = weights.neighborhood * g_nb
        return total_loss(terms, weights), seeds

    def backward(self, st: ForwardState, seeds: dict) -> dict:
        cloud = self.cloud
        final = st.final
        g = render_backward(st.render_out, seeds["color"], seeds["semantic"], seeds["alpha"])
        g_sh, g_pos_color = sh_to_color_backward(st.color_cache, g["colors"])
        g_pos_f = g["positions"] + g_pos_color + seeds["final_positions"]
        g_ls_f = g["scales"] * final.scales
        g_rot_f = g["rotations"]
        op = final.opacity
        g_op_logit = g["opacity"] * op * (1.0 - op)
        g_probs = g["semantics"].copy()
        if seeds["probs"] is not None:
            g_probs += seeds["probs"]

        grads = {}
        g_xd_extra = np.zeros_like(cloud.positions)
        if self.config.topogeo:
            g_pos_o, g_ls_o, g_rot_o, g_fused = fusion_apply_backward(st.observed, st.fused, g_pos_f, g_ls_f, g_rot_f)
            pg, g_pf, g_xd_fusion = self.fusion.backward(st.fusion_tape, g_fused.d_position,
                                                         g_fused.d_log_scale, g_fused.d_rotation)
            grads.update({f"fusion/{k}": v for k, v in pg.items()})
            g_xd_extra += g_xd_fusion
            if self.config.pointwise_features:
                pg, g_sem_feat = self.features.mlp.backward(st.feat_tape, g_pf)
            else:
                pg, g_vox = self.features.backward(st.feat_tape, scatter_to_voxels(st.grid, g_pf))
                g_sem_feat = voxel_mean_backward(st.grid, g_vox)
            grads.update({f"features/{k}": v for k, v in pg.items()})
            g_probs += g_sem_feat
        else:
            g_pos_o, g_ls_o, g_rot_o = g_pos_f, g_ls_f, g_rot_f
            for k, v in self.fusion.mlp.parameters().items():
                grads[f"fusion/{k}"] = np.zeros_like(v)
            for k, v in self.features.parameters().items():
                grads[f"features/{k}"] = np.zeros_like(v)

        g_xd, g_rd, g_w = rigid_lbs_backward(st.lbs_tape, g_pos_o, g_rot_o)
        g_w = g_w + seeds["weights"]
        pg, g_xd_skin = self.skin.backward(st.skin_tape, g_w)
        grads.update({f"skin/{k}": v for k, v in pg.items()})
        g_xd = g_xd + g_xd_skin + g_xd_extra

        d_grads = {"positions": g_xd, "sh": g_sh, "opacity_logit": g_op_logit,
                   "log_scale": g_ls_o, "rotation": g_rd}
        cloud_g, off_g = apply_offsets_backward(cloud, st.offsets, d_grads)
        pg, g_xc_nr = self.nonrigid.backward(st.nr_tape, off_g)
        grads.update({f"nonrigid/{k}": v for k, v in pg.items()})

        grads["cloud/positions"] = cloud_g["positions"] + g_xc_nr + seeds["canonical"]
        grads["cloud/sh"] = cloud_g["sh"]
        grads["cloud/opacity_logit"] = cloud_g["opacity_logit"]
        grads["cloud/log_scale"] = cloud_g["log_scale"]
        grads["cloud/rotation"] = cloud_g["rotation"]
        grads["cloud/semantic_logits"] = softmax_backward(cloud.semantics, g_probs)
        grads["_mean2d"] = g["mean2d"]
        return grads


def check_ablations(names) -> tuple:
    names = tuple(names)
    bad = [n for n in names if n not in ABLATIONS]
    if bad:
        raise ConfigError(f"unknown ablation {bad[0]!r}; choose from {', '.join(ABLATIONS)}")
    return names
