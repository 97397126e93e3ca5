"""Topology/geometry features: voxelization, a sparse 3D U-Net and the fusion head.

The U-Net has two stride-2 levels. Convolutions are submanifold (3x3x3,
evaluated only at occupied sites), pooling halves coordinates and takes the
feature max over children, and decoder levels concatenate encoder skips.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from ._validation import ConfigError, EmptyInputError, UsageError
from .nn import TinyMLP, scatter_add_rows

OFFSETS = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], dtype=np.int64)
CENTER = 13


# --------------------------------------------------------------------------
# coordinate hash (open addressing, linear probing)
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _mix(x, y, z):
    h = np.uint64(x) * np.uint64(0x9E3779B97F4A7C15)
    h ^= np.uint64(y) * np.uint64(0xC2B2AE3D27D4EB4F) + (h << np.uint64(6)) + (h >> np.uint64(2))
    h ^= np.uint64(z) * np.uint64(0x165667B19E3779F9) + (h << np.uint64(6)) + (h >> np.uint64(2))
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xFF51AFD7ED558CCD)
    h ^= h >> np.uint64(33)
    return h


@numba.njit(cache=True)
def _hash_build(coords, capacity):
    keys = np.empty((capacity, 3), np.int64)
    slots = np.full(capacity, -1, np.int64)
    mask = np.uint64(capacity - 1)
    for i in range(coords.shape[0]):
        h = _mix(coords[i, 0], coords[i, 1], coords[i, 2]) & mask
        while slots[h] != -1:
            h = (h + np.uint64(1)) & mask
        slots[h] = i
        keys[h, 0] = coords[i, 0]
        keys[h, 1] = coords[i, 1]
        keys[h, 2] = coords[i, 2]
    return keys, slots


@numba.njit(cache=True)
def _hash_query(keys, slots, queries):
    mask = np.uint64(slots.shape[0] - 1)
    out = np.full(queries.shape[0], -1, np.int64)
    for i in range(queries.shape[0]):
        h = _mix(queries[i, 0], queries[i, 1], queries[i, 2]) & mask
        while slots[h] != -1:
            if keys[h, 0] == queries[i, 0] and keys[h, 1] == queries[i, 1] and keys[h, 2] == queries[i, 2]:
                out[i] = slots[h]
                break
            h = (h + np.uint64(1)) & mask
    return out


class CoordHash:
    """Integer 3D coordinate -> row lookup."""

    def __init__(self, coords):
        coords = np.ascontiguousarray(coords, dtype=np.int64)
        capacity = 16
        while capacity < 2 * max(coords.shape[0], 1):
            capacity *= 2
        self.keys, self.slots = _hash_build(coords, capacity)

    def lookup(self, queries):
        q = np.ascontiguousarray(np.asarray(queries, dtype=np.int64).reshape(-1, 3))
        return _hash_query(self.keys, self.slots, q)


def neighbor_table(coords, index: CoordHash | None = None):
    """(M, 27) row of each 3x3x3 neighbour, -1 where unoccupied."""
    index = index or CoordHash(coords)
    q = (coords[:, None, :] + OFFSETS[None]).reshape(-1, 3)
    return index.lookup(q).reshape(coords.shape[0], 27)


# --------------------------------------------------------------------------
# voxelization
# --------------------------------------------------------------------------

@dataclass
class SparseVoxelGrid:
    voxel_size: float
    coords: np.ndarray          # (M, 3) int, lexicographically sorted
    features: np.ndarray        # (M, F)
    point_voxel: np.ndarray     # (N,) row in coords
    counts: np.ndarray          # (M,) points per voxel
    index: CoordHash

    def __len__(self) -> int:
        return self.coords.shape[0]


def voxel_coords(positions, voxel_size: float):
    if not voxel_size > 0:
        raise ConfigError(f"voxel size must be positive, got {voxel_size}")
    return np.floor(np.asarray(positions, dtype=np.float64) / voxel_size).astype(np.int64)


def voxelize(positions, voxel_size: float, point_features=None) -> SparseVoxelGrid:
    """Floor-divide positions into voxels; voxel feature = mean of member features."""
    c = voxel_coords(positions, voxel_size)
    coords, inverse, counts = np.unique(c, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n = c.shape[0]
    if point_features is None:
        point_features = np.zeros((n, 0))
    feats = scatter_add_rows(inverse, point_features, coords.shape[0]) / counts[:, None]
    return SparseVoxelGrid(voxel_size, coords, feats, inverse, counts, CoordHash(coords))


def voxel_mean_backward(grid: SparseVoxelGrid, grad_features):
    """Gradient of the per-voxel mean w.r.t. the member point features."""
    return (grad_features / grid.counts[:, None])[grid.point_voxel]


def gather_to_points(grid: SparseVoxelGrid, voxel_features):
    return voxel_features[grid.point_voxel]


def scatter_to_voxels(grid: SparseVoxelGrid, point_grads):
    return scatter_add_rows(grid.point_voxel, point_grads, len(grid))


# --------------------------------------------------------------------------
# sparse layers
# --------------------------------------------------------------------------

def subm_conv(features, nbr, W, b):
    """Submanifold 3x3x3 convolution. W: (27, Cin, Cout)."""
    M, cin = features.shape
    padded = np.vstack([features, np.zeros((1, cin))])
    cols = padded[nbr].reshape(M, 27 * cin)  # -1 -> zero row
    return cols @ W.reshape(27 * cin, -1) + b, cols


def subm_conv_backward(cols, nbr, W, grad_out, cin):
    M = nbr.shape[0]
    gW = (cols.T @ grad_out).reshape(W.shape)
    gb = grad_out.sum(axis=0)
    gcols = (grad_out @ W.reshape(27 * cin, -1).T).reshape(M, 27, cin)
    gin = scatter_add_rows(np.where(nbr < 0, M, nbr), gcols, M + 1)
    return gW, gb, gin[:M]


def pool_level(coords):
    """Parent coordinates (floor halving) and child -> parent map."""
    parent = np.floor_divide(coords, 2)
    pcoords, inverse = np.unique(parent, axis=0, return_inverse=True)
    return pcoords, inverse.reshape(-1)


def max_pool(features, child_parent, n_parent):
    C = features.shape[1]
    out = np.full((n_parent, C), -np.inf)
    np.maximum.at(out, child_parent, features)
    # first child attaining the max (rows visited in ascending order)
    hit = features == out[child_parent]
    rows = np.where(hit, np.arange(features.shape[0])[:, None], np.iinfo(np.int64).max)
    arg = np.full((n_parent, C), np.iinfo(np.int64).max)
    np.minimum.at(arg, child_parent, rows)
    return out, arg


def max_pool_backward(arg, grad_out, n_child):
    C = grad_out.shape[1]
    flat = (arg * C + np.arange(C)).reshape(-1)
    return np.bincount(flat, weights=grad_out.reshape(-1), minlength=n_child * C).reshape(n_child, C)


class SparseUNet:
    """Two-level submanifold U-Net over an occupied voxel set."""

    LAYERS = ("enc0a", "enc0b", "enc1a", "enc1b", "mid", "dec1", "out")

    def __init__(self, in_channels: int, channels=(16, 32), out_channels: int = 16, seed: int = 0):
        c0, c1 = channels
        self.in_channels = in_channels
        self.out_channels = out_channels
        shapes = {
            "enc0a": (in_channels, c0),
            "enc0b": (c0, c0),
            "enc1a": (c0, c1),
            "enc1b": (c1, c1),
            "mid": (c1, c1),
            "dec1": (2 * c1, c1),
            "out": (c0 + c1, out_channels),
        }
        rng = np.random.default_rng(seed)
        self.params = {}
        for name in self.LAYERS:
            cin, cout = shapes[name]
            bound = np.sqrt(6.0 / (27 * cin))
            self.params[f"{name}.W"] = rng.uniform(-bound, bound, size=(27, cin, cout))
            self.params[f"{name}.b"] = np.zeros(cout)

    def parameters(self) -> dict:
        return self.params

    def load_parameters(self, params: dict) -> None:
        for k in self.params:
            self.params[k] = np.array(params[k], dtype=np.float64)

    def _conv(self, name, x, nbr):
        return subm_conv(x, nbr, self.params[f"{name}.W"], self.params[f"{name}.b"])

    def forward(self, grid: SparseVoxelGrid, retain: bool = True):
        """Per-voxel output features (M, out_channels) and an optional tape."""
        if len(grid) == 0:
            raise EmptyInputError("sparse U-Net needs at least one occupied voxel")
        x0 = grid.features
        if x0.shape[1] != self.in_channels:
            raise ConfigError(f"U-Net expects {self.in_channels} input channels, got {x0.shape[1]}")
        nbr0 = neighbor_table(grid.coords, grid.index)
        coords1, par0 = pool_level(grid.coords)
        nbr1 = neighbor_table(coords1)
        coords2, par1 = pool_level(coords1)
        nbr2 = neighbor_table(coords2)
        t = {}
        h, t["enc0a"] = self._conv("enc0a", x0, nbr0)
        a0a = np.maximum(h, 0)
        h, t["enc0b"] = self._conv("enc0b", a0a, nbr0)
        e0 = np.maximum(h, 0)
        p1, arg1 = max_pool(e0, par0, coords1.shape[0])
        h, t["enc1a"] = self._conv("enc1a", p1, nbr1)
        a1a = np.maximum(h, 0)
        h, t["enc1b"] = self._conv("enc1b", a1a, nbr1)
        e1 = np.maximum(h, 0)
        p2, arg2 = max_pool(e1, par1, coords2.shape[0])
        h, t["mid"] = self._conv("mid", p2, nbr2)
        m2 = np.maximum(h, 0)
        u1 = np.concatenate([e1, m2[par1]], axis=1)
        h, t["dec1"] = self._conv("dec1", u1, nbr1)
        d1 = np.maximum(h, 0)
        u0 = np.concatenate([e0, d1[par0]], axis=1)
        out, t["out"] = self._conv("out", u0, nbr0)
        tape = None
        if retain:
            tape = dict(t=t, nbr=(nbr0, nbr1, nbr2), par=(par0, par1), arg=(arg1, arg2),
                        acts=dict(a0a=a0a, e0=e0, a1a=a1a, e1=e1, m2=m2, d1=d1),
                        sizes=(len(grid), coords1.shape[0], coords2.shape[0]))
        return out, tape

    def backward(self, tape, grad_out):
        """Returns ``(param_grads, grad_input_features)``."""
        if tape is None:
            raise UsageError("SparseUNet.backward needs a retained forward pass")
        P = self.params
        t, acts = tape["t"], tape["acts"]
        nbr0, nbr1, nbr2 = tape["nbr"]
        par0, par1 = tape["par"]
        arg1, arg2 = tape["arg"]
        M0, M1, M2 = tape["sizes"]
        c0 = acts["e0"].shape[1]
        c1 = acts["e1"].shape[1]
        grads = {}

        def conv_back(name, g, nbr, cin):
            gW, gb, gin = subm_conv_backward(t[name], nbr, P[f"{name}.W"], g, cin)
            grads[f"{name}.W"] = gW
            grads[f"{name}.b"] = gb
            return gin

        g_u0 = conv_back("out", grad_out, nbr0, c0 + c1)
        g_e0 = g_u0[:, :c0].copy()
        g_d1 = scatter_add_rows(par0, g_u0[:, c0:], M1)
        g_u1 = conv_back("dec1", g_d1 * (acts["d1"] > 0), nbr1, 2 * c1)
        g_e1 = g_u1[:, :c1].copy()
        g_m2 = scatter_add_rows(par1, g_u1[:, c1:], M2)
        g_p2 = conv_back("mid", g_m2 * (acts["m2"] > 0), nbr2, c1)
        g_e1 += max_pool_backward(arg2, g_p2, M1)
        g_a1a = conv_back("enc1b", g_e1 * (acts["e1"] > 0), nbr1, c1)
        g_p1 = conv_back("enc1a", g_a1a * (acts["a1a"] > 0), nbr1, c0)
        g_e0 += max_pool_backward(arg1, g_p1, M0)
        g_a0a = conv_back("enc0b", g_e0 * (acts["e0"] > 0), nbr0, c0)
        g_x0 = conv_back("enc0a", g_a0a * (acts["a0a"] > 0), nbr0, self.in_channels)
        return grads, g_x0


def sparse_conv_forward(grid: SparseVoxelGrid, net: SparseUNet, retain: bool = True):
    """Per-voxel features and their per-point gather."""
    fv, tape = net.forward(grid, retain=retain)
    return fv, gather_to_points(grid, fv), tape


def sparse_conv_backward(grid: SparseVoxelGrid, net: SparseUNet, tape, point_grads):
    """Scatter point gradients to voxels, then backprop the U-Net."""
    if tape is None:
        raise UsageError("sparse_conv_backward needs a retained forward pass")
    return net.backward(tape, scatter_to_voxels(grid, point_grads))


class FusionNet:
    """Delta (X', s', r') from [point features, deformed position, pose code]."""

    def __init__(self, feature_dim: int, pose_dim: int, hidden=(64, 64), seed: int = 0,
                 output_scale=(0.02, 0.02, 0.02)):
        self.feature_dim = feature_dim
        self.pose_dim = pose_dim
        self.mlp = TinyMLP([feature_dim + 3 + pose_dim, *hidden, 9], seed=seed)
        self.scale = np.repeat(np.asarray(output_scale, dtype=np.float64), 3)

    def forward(self, point_features, positions, z_pose, retain: bool = True):
        z_pose = np.asarray(z_pose, dtype=np.float64).ravel()
        n = positions.shape[0]
        if point_features.shape[1] != self.feature_dim or z_pose.shape[0] != self.pose_dim:
            raise ConfigError("fusion network input width mismatch")
        x = np.concatenate([point_features, positions, np.broadcast_to(z_pose, (n, self.pose_dim))], axis=1)
        raw, tape = self.mlp.forward(x, retain=retain)
        out = raw * self.scale
        return (out[:, 0:3], out[:, 3:6], out[:, 6:9]), tape

    def backward(self, tape, g_dx, g_ds, g_dr):
        """Returns ``(param_grads, grad_point_features, grad_positions)``."""
        g = np.concatenate([g_dx, g_ds, g_dr], axis=1) * self.scale
        pg, g_in = self.mlp.backward(tape, g)
        f = self.feature_dim
        return pg, g_in[:, :f], g_in[:, f:f + 3]


def fusion_forward(point_features, positions, z_pose, net: FusionNet, retain: bool = True):
    return net.forward(point_features, positions, z_pose, retain=retain)
