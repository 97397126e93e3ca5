"""Adaptive density control with semantic inheritance.

Structural edits return the new cloud together with a ``source`` array: row i
of the new cloud came from old row ``source[i]`` (-1 for a newly created
point), which is all an optimizer needs to carry its moments across.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from ._validation import UsageError
from .gaussians import GaussianCloud, normalize_quat, quat_to_matrix


@dataclass
class DensifyConfig:
    grad_threshold: float = 2e-4     # mean pixel-space positional gradient
    min_opacity: float = 0.05
    scale_fraction: float = 0.01     # clone below, split above (of scene extent)
    split_factor: float = 1.6
    n_split: int = 2
    max_scale_fraction: float = 0.0  # > 0 also prunes huge Gaussians; off by default
    max_points: int = 0              # > 0 caps growth; 0 means unbounded


@dataclass
class DensifyEvent:
    iteration: int
    kind: str            # clone, split, prune, semantic_split
    parent: int
    children: tuple = ()

    def to_line(self) -> str:
        kids = ",".join(str(c) for c in self.children) or "-"
        return f"{self.iteration} {self.kind} {self.parent} {kids}"


@dataclass
class DensifyStats:
    """Accumulated screen-space gradient norms since the last density step."""

    grad_accum: np.ndarray
    count: np.ndarray
    events: list = field(default_factory=list)

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(np.zeros(n), np.zeros(n, dtype=np.int64))

    def __len__(self) -> int:
        return self.grad_accum.shape[0]

    def add(self, grad_mean2d, visible) -> None:
        visible = np.asarray(visible, dtype=bool)
        self.grad_accum[visible] += np.linalg.norm(grad_mean2d[visible], axis=1)
        self.count[visible] += 1

    def mean_grad(self):
        return np.where(self.count > 0, self.grad_accum / np.maximum(self.count, 1), 0.0)

    def reset(self, n: int) -> None:
        self.grad_accum = np.zeros(n)
        self.count = np.zeros(n, dtype=np.int64)


def write_events(path, events) -> None:
    if not events:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as f:
        for e in events:
            f.write(e.to_line() + "\n")


def scene_extent(positions) -> float:
    c = positions.mean(axis=0)
    return float(np.max(np.linalg.norm(positions - c, axis=1)))


def _concat(parts) -> GaussianCloud:
    fields = {k: np.concatenate([getattr(p, k) for p in parts]) for k in parts[0].params()}
    return GaussianCloud(**fields, parent_index=np.concatenate([p.parent_index for p in parts]))


def split_children(cloud: GaussianCloud, idx, rng, n_split: int = 2, factor: float = 1.6) -> GaussianCloud:
    """``n_split`` children per parent, drawn from the parent Gaussian, scales / factor.

    Children of one parent are contiguous; every other attribute (semantic
    logits included) is copied bit for bit.
    """
    idx = np.asarray(idx, dtype=np.int64)
    m = idx.shape[0]
    rep = np.repeat(idx, n_split)
    kids = cloud.subset(rep)
    R = quat_to_matrix(normalize_quat(cloud.rotation[idx]))
    z = rng.normal(size=(m, n_split, 3)) * cloud.scales[idx][:, None, :]
    offsets = np.einsum("mij,mkj->mki", R, z).reshape(-1, 3)
    kids.positions = cloud.positions[rep] + offsets
    kids.log_scale = cloud.log_scale[rep] - np.log(factor)
    kids.parent_index = rep
    return kids


def _rebuild(cloud, keep, new_parts):
    keep_idx = np.nonzero(keep)[0]
    kept = cloud.subset(keep_idx)
    kept.parent_index = keep_idx
    parts = [kept] + [p for p in new_parts if len(p)]
    out = _concat(parts)
    source = np.concatenate([keep_idx] + [np.full(len(p), -1) for p in parts[1:]]).astype(np.int64)
    return out, source


def densify_and_prune(cloud: GaussianCloud, stats: DensifyStats, config: DensifyConfig, extent: float,
                      iteration: int = 0, seed: int = 0):
    """Clone small / split large high-gradient points, then prune transparent ones.

    Returns ``(cloud, source, events)``; ``parent_index`` of the result holds
    each row's index in the input cloud.
    """
    n = len(cloud)
    if len(stats) != n:
        raise UsageError(f"density stats cover {len(stats)} points, cloud has {n}")
    rng = np.random.default_rng([seed, iteration])
    grads = stats.mean_grad()
    big = np.max(cloud.scales, axis=1) > config.scale_fraction * extent
    hot = grads > config.grad_threshold
    if config.max_points > 0:
        room = max(config.max_points - n, 0)
        # spend the budget on the strongest gradients first
        order = np.argsort(-grads, kind="stable")
        cand = order[hot[order]]
        cost = np.where(big[cand], config.n_split - 1, 1)
        allowed = cand[np.cumsum(cost) <= room]
        hot = np.zeros(n, dtype=bool)
        hot[allowed] = True
    clone_idx = np.nonzero(hot & ~big)[0]
    split_idx = np.nonzero(hot & big)[0]
    clones = cloud.subset(clone_idx)
    clones.parent_index = clone_idx
    kids = split_children(cloud, split_idx, rng, config.n_split, config.split_factor)
    keep = np.ones(n, dtype=bool)
    keep[split_idx] = False
    grown, source = _rebuild(cloud, keep, [clones, kids])

    n_kept = int(keep.sum())
    events = []
    for j, p in enumerate(clone_idx):
        events.append(DensifyEvent(iteration, "clone", int(p), (n_kept + j,)))
    base = n_kept + len(clone_idx)
    for j, p in enumerate(split_idx):
        events.append(DensifyEvent(iteration, "split", int(p),
                                   tuple(range(base + j * config.n_split, base + (j + 1) * config.n_split))))

    low = grown.opacity < config.min_opacity
    if config.max_scale_fraction > 0:
        low |= np.max(grown.scales, axis=1) > config.max_scale_fraction * extent
    if np.any(low):
        keep2 = ~low
        idx2 = np.nonzero(keep2)[0]
        pruned = grown.subset(idx2)
        for r in np.nonzero(low)[0]:
            events.append(DensifyEvent(iteration, "prune", int(grown.parent_index[r])))
        # renumber children recorded above to their post-prune rows
        new_row = np.full(len(grown), -1)
        new_row[idx2] = np.arange(idx2.shape[0])
        events = [e if e.kind == "prune" else
                  DensifyEvent(e.iteration, e.kind, e.parent, tuple(int(new_row[c]) for c in e.children if new_row[c] >= 0))
                  for e in events]
        grown, source = pruned, source[idx2]
    return grown, source, events


# --------------------------------------------------------------------------
# semantic-guided density
# --------------------------------------------------------------------------

def cluster_view(cloud: GaussianCloud):
    """Members of each part cluster (argmax of the decoded semantics), ascending."""
    lab = np.argmax(cloud.semantic_logits, axis=1)
    return [np.nonzero(lab == m)[0] for m in range(cloud.n_parts)]


def node_attributes(cloud: GaussianCloud):
    """Decoded degree-0 RGB and opacity, the attributes compared within a cluster."""
    return np.concatenate([cloud.base_colors(), cloud.opacity[:, None]], axis=1)


def mean_dissimilarity(attrs, block: int = 1024):
    """Mean Euclidean distance of each row to every other row."""
    n = attrs.shape[0]
    out = np.empty(n)
    for s in range(0, n, block):
        out[s:s + block] = cdist(attrs[s:s + block], attrs).sum(axis=1)
    return out / (n - 1)


def high_frequency_nodes(cloud: GaussianCloud, clusters=None):
    """One node per cluster: the member least similar on average to the rest.

    Returns ``{part: point index}``. Ties go to the smallest index; clusters
    with a single member are skipped with a warning, empty ones silently.
    """
    clusters = cluster_view(cloud) if clusters is None else clusters
    attrs = node_attributes(cloud)
    out = {}
    for m, members in enumerate(clusters):
        members = np.sort(np.asarray(members, dtype=np.int64))
        if members.shape[0] == 0:
            continue
        if members.shape[0] == 1:
            warnings.warn(f"part {m} has a single member; no high-frequency node", stacklevel=2)
            continue
        score = mean_dissimilarity(attrs[members])
        out[m] = int(members[np.argmax(score)])
    return out


def semantic_guided_densify(cloud: GaussianCloud, clusters=None, config: DensifyConfig | None = None,
                            iteration: int = 0, seed: int = 0):
    """Split every cluster's high-frequency node regardless of gradients.

    Returns ``(cloud, source, events)`` like :func:`densify_and_prune`.
    """
    config = config or DensifyConfig()
    nodes = high_frequency_nodes(cloud, clusters)
    idx = np.array(sorted(nodes.values()), dtype=np.int64)
    rng = np.random.default_rng([seed, iteration, 1])
    kids = split_children(cloud, idx, rng, config.n_split, config.split_factor)
    keep = np.ones(len(cloud), dtype=bool)
    keep[idx] = False
    out, source = _rebuild(cloud, keep, [kids])
    base = int(keep.sum())
    events = [DensifyEvent(iteration, "semantic_split", int(p),
                           tuple(range(base + j * config.n_split, base + (j + 1) * config.n_split)))
              for j, p in enumerate(idx)]
    return out, source, events
