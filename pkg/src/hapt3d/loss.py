"""Training losses: weighted cross-entropy for semantics, and the Lovász
hinge over offset-induced Gaussian soft masks for both instance tasks,
combined as a weighted sum.

All losses operate on autodiff ``Var`` values so gradients reach the
offset and logit heads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Var, as_var


@dataclass
class LossConfig:
    w_semantic: float = 1.0
    w_tree: float = 1.0
    w_instance: float = 1.0
    eta_tree: float = 0.5  # meters; clustering-region scale for tree offsets
    eta_instance: float = 0.05  # meters; trunk/fruit offsets
    class_weights: np.ndarray | None = None  # from cloud.class_frequencies
    centroid_mode: str = "embedding"  # or "spatial": ground-truth centroid

    def validate(self) -> "LossConfig":
        if self.eta_tree <= 0 or self.eta_instance <= 0:
            raise ValueError("eta values must be positive")
        if min(self.w_semantic, self.w_tree, self.w_instance) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.centroid_mode not in ("embedding", "spatial"):
            raise ValueError(f"unknown centroid_mode '{self.centroid_mode}'")
        return self


@dataclass
class InstanceSpec:
    """Ground-truth instances of one task level: member indices per instance."""

    members: list = field(default_factory=list)

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "InstanceSpec":
        labels = np.asarray(labels)
        spec = cls()
        for lab in np.unique(labels[labels >= 0]):
            spec.members.append(np.flatnonzero(labels == lab))
        return spec

    def __len__(self) -> int:
        return len(self.members)


def weighted_cross_entropy(logits, targets, class_weights) -> Var:
    """L = -(1/N) sum_p w_{t_p} log softmax(f_p)[t_p], max-shifted softmax."""
    logits = as_var(logits)
    targets = np.asarray(targets, dtype=np.intp)
    n, k = logits.shape
    if n == 0:
        raise ValueError("cross entropy over zero points")
    class_weights = np.asarray(class_weights, dtype=np.float64)
    if class_weights.shape != (k,):
        raise ValueError(f"class weights must have length {k}")
    if targets.min() < 0 or targets.max() >= k:
        raise ValueError("target labels out of range")
    shift = logits.data.max(axis=1, keepdims=True)  # constant: softmax is shift-invariant
    z = logits - shift
    log_probs = z - z.exp().sum(axis=1, keepdims=True).log()
    picked = log_probs.take_per_row(targets)
    return (picked * class_weights[targets]).sum() * (-1.0 / n)


def embeddings(positions, offsets) -> Var:
    """e_p = p + o_p."""
    offsets = as_var(offsets)
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != offsets.shape:
        raise ValueError(f"positions {positions.shape} vs offsets {offsets.shape}")
    return offsets + positions


def instance_centroid(e: Var, members) -> Var:
    members = np.asarray(members, dtype=np.intp)
    if len(members) == 0:
        raise ValueError("instance without members")
    return e.gather_rows(members).mean(axis=0, keepdims=True)


def soft_mask(e, centroid, eta: float) -> Var:
    """f_p = exp(-||e_p - c||^2 / (2 eta^2)), in (0, 1]."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    e = as_var(e)
    diff = e - as_var(centroid)
    sq = (diff * diff).sum(axis=1)
    return (sq * (-1.0 / (2.0 * eta * eta))).exp()


def lovasz_hinge(f, g) -> Var:
    """Lovász extension of the Jaccard error over a [0,1] soft mask.

    Errors are 1-f on foreground and f on background, sorted descending
    (stable, so ties break by original index); the loss is the dot product
    with the Jaccard-difference vector along that order. For binary f this
    equals 1 - IoU(f, g) exactly.
    """
    f = as_var(f)
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    if f.shape != g.shape:
        raise ValueError(f"mask shapes differ: {f.shape} vs {g.shape}")
    p = g.sum()
    if p == 0:
        raise ValueError("ground-truth mask has no foreground")
    m = f * (1.0 - 2.0 * g) + g  # 1-f on foreground, f on background
    perm = np.argsort(-m.data, kind="stable")
    g_sorted = g[perm]
    fg = np.cumsum(g_sorted)
    bg = np.cumsum(1.0 - g_sorted)
    jaccard = 1.0 - (p - fg) / (p + bg)
    delta = np.diff(jaccard, prepend=0.0)
    return (m.gather_rows(perm) * delta).sum()


def instance_level_loss(e, instances: InstanceSpec, eta: float,
                        centroid_mode: str = "embedding",
                        positions=None) -> tuple[Var, bool]:
    """Mean Lovász hinge over instances; the soft mask of each instance is
    evaluated over all points. Returns ``(loss, had_instances)``; a cloud
    with no instances contributes 0.
    """
    e = as_var(e)
    if len(instances) == 0:
        return Var(0.0, requires=False), False
    if centroid_mode == "spatial" and positions is None:
        raise ValueError("spatial centroid mode needs positions")
    total = None
    for members in instances.members:
        if centroid_mode == "embedding":
            c = instance_centroid(e, members)
        else:
            c = np.asarray(positions)[members].mean(axis=0, keepdims=True)
        g = np.zeros(e.shape[0])
        g[np.asarray(members, dtype=np.intp)] = 1.0
        term = lovasz_hinge(soft_mask(e, c, eta), g)
        total = term if total is None else total + term
    return total * (1.0 / len(instances)), True


def total_loss(sem_loss, tree_loss, ins_loss, config: LossConfig) -> Var:
    """L = w1 L_sem + w2 L_tree + w3 L_ins."""
    config.validate()
    return (
        as_var(sem_loss) * config.w_semantic
        + as_var(tree_loss) * config.w_tree
        + as_var(ins_loss) * config.w_instance
    )
