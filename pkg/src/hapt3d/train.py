"""AdamW optimization loop over per-cloud passes (batch size is one cloud),
periodic full-pipeline evaluation, best-checkpoint tracking, and the
four-scheme skip-connection ablation driver.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .cloud import AugmentConfig, LabeledCloud, augment, class_frequencies, voxelize
from .cluster import ClusterParams, instance_level_params, predict_instances, tree_level_params
from .loss import (
    InstanceSpec,
    LossConfig,
    embeddings,
    instance_level_loss,
    total_loss,
    weighted_cross_entropy,
)
from .metrics import EvalAccumulator, PanopticReport


class NonFiniteGradientError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 5e-3
    weight_decay: float = 0.99  # decoupled; unusually large but the stated default
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 50  # reference setup trains 500; desk default
    batch_size: int = 1  # fixed: one cloud per step
    seed: int = 0
    voxel_size: float = 0.003
    encoder_channels: tuple = (8, 16, 32, 64)
    decoder_channels: tuple | None = None
    skip_scheme: str = "EncoderDecoder"
    eval_every: int = 10  # epochs; 0 disables mid-training evaluation
    grad_clip: float = 0.0  # max gradient norm; 0 disables clipping
    lr_schedule: str = "constant"  # hook; only the constant schedule exists
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    cluster_tree: ClusterParams = field(default_factory=tree_level_params)
    cluster_instance: ClusterParams = field(default_factory=instance_level_params)

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size != 1:
            raise ValueError("batch_size is fixed to 1")
        if self.lr_schedule != "constant":
            raise ValueError("only the constant lr schedule is implemented")
        self.loss.validate()
        self.augment.validate()
        return self

    def network_config(self) -> nn.NetworkConfig:
        return nn.NetworkConfig(
            encoder_channels=self.encoder_channels,
            decoder_channels=self.decoder_channels,
            skip_scheme=self.skip_scheme,
            voxel_size=self.voxel_size,
            seed=self.seed,
        )


@dataclass
class OptimState:
    m: dict  # first moments, mirroring parameter shapes
    v: dict  # second moments
    step: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "OptimState":
        return cls(
            m={k: np.zeros_like(p.data if isinstance(p, nn.Var) else p) for k, p in params.items()},
            v={k: np.zeros_like(p.data if isinstance(p, nn.Var) else p) for k, p in params.items()},
        )


def adamw_step(params: dict, grads: dict, state: OptimState, config: TrainConfig) -> OptimState:
    """One decoupled-weight-decay Adam update, in place. A non-finite
    gradient rejects the whole step and leaves parameters untouched."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in '{name}'")
    state.step += 1
    t = state.step
    bc1 = 1.0 - config.beta1**t
    bc2 = 1.0 - config.beta2**t
    for name, p in params.items():
        theta = p.data if isinstance(p, nn.Var) else p
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        theta -= config.lr * (m_hat / (np.sqrt(v_hat) + config.eps)
                              + config.weight_decay * theta)
    return state


def clip_gradients(grads: dict, max_norm: float) -> dict:
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return grads


@dataclass
class TrainResult:
    network: nn.Network  # parameters after the last completed step
    best_state: dict  # parameter/buffer snapshot with the best validation mPQ
    best_mpq: float
    history: list  # one record per epoch
    aborted: bool = False

    def best_network(self) -> nn.Network:
        net = nn.Network(self.network.config)
        restore_state(net, self.best_state)
        return net


def snapshot_state(net: nn.Network) -> dict:
    snap = {name: v.data.copy() for name, v in net.store.params.items()}
    snap.update({name: a.copy() for name, a in net.store.buffers.items()})
    return snap


def restore_state(net: nn.Network, snap: dict) -> None:
    for name, v in net.store.params.items():
        v.data = snap[name].copy()
    for name in net.store.buffers:
        net.store.buffers[name] = snap[name].copy()


def cloud_losses(net: nn.Network, vox: LabeledCloud, weights, loss_cfg: LossConfig):
    """Forward one voxelized cloud and assemble the three loss terms."""
    out = net.forward(vox)
    m = out.semantic_logits.shape[0]
    if m != len(vox):
        raise AssertionError("voxelized cloud must map 1:1 onto network voxels")
    sem_t = np.empty(m, dtype=np.int64)
    tree_t = np.empty(m, dtype=np.int64)
    inst_t = np.empty(m, dtype=np.int64)
    sem_t[out.point_to_voxel] = vox.semantic
    tree_t[out.point_to_voxel] = vox.tree_id
    inst_t[out.point_to_voxel] = vox.instance_id

    centers = out.voxel_centers()
    l_sem = weighted_cross_entropy(out.semantic_logits, sem_t, weights)
    l_tree, _ = instance_level_loss(
        embeddings(centers, out.tree_offsets),
        InstanceSpec.from_labels(tree_t),
        loss_cfg.eta_tree,
        centroid_mode=loss_cfg.centroid_mode,
        positions=centers,
    )
    l_ins, _ = instance_level_loss(
        embeddings(centers, out.instance_offsets),
        InstanceSpec.from_labels(inst_t),
        loss_cfg.eta_instance,
        centroid_mode=loss_cfg.centroid_mode,
        positions=centers,
    )
    return l_sem, l_tree, l_ins


def evaluate(net: nn.Network, clouds, config: TrainConfig) -> PanopticReport:
    """Validation with the full inference path: forward, HDBSCAN clustering
    of both offset fields, then panoptic metrics."""
    was_training = net.training
    net.eval_mode()
    acc = EvalAccumulator()
    for cloud in clouds:
        out = net.forward(cloud)
        pred = predict_instances(out, cloud, config.cluster_tree, config.cluster_instance)
        acc.add_cloud(pred, cloud)
    net.train_mode(was_training)
    return acc.report()


def train(train_clouds, val_clouds, config: TrainConfig) -> TrainResult:
    """Seeded shuffle -> augment -> voxelize -> forward -> loss -> backward
    -> AdamW, at a constant learning rate; evaluates every ``eval_every``
    epochs and keeps the best-mPQ state. Divergence aborts with the last
    good parameters."""
    config.validate()
    if not train_clouds:
        raise ValueError("training needs at least one cloud")
    rng = np.random.default_rng(config.seed)
    net = nn.Network(config.network_config())
    weights = config.loss.class_weights
    if weights is None:
        weights = class_frequencies(train_clouds)
    state = OptimState.for_params(net.store.params)

    history = []
    best_state = snapshot_state(net)
    best_mpq = -1.0
    aborted = False

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_clouds))
        sums = np.zeros(4)
        t0 = time.perf_counter()
        for idx in order:
            cloud = augment(train_clouds[idx], config.augment, rng)
            vox = voxelize(cloud, config.voxel_size)
            l_sem, l_tree, l_ins = cloud_losses(net, vox, weights, config.loss)
            total = total_loss(l_sem, l_tree, l_ins, config.loss)
            if not np.isfinite(total.item()):
                aborted = True
                break
            grads = nn.backward(net, total)
            if config.grad_clip > 0:
                clip_gradients(grads, config.grad_clip)
            try:
                adamw_step(net.store.params, grads, state, config)
            except NonFiniteGradientError:
                aborted = True
                break
            sums += (total.item(), l_sem.item(), l_tree.item(), l_ins.item())
        if aborted:
            break
        n = len(order)
        record = {
            "epoch": epoch,
            "loss": sums[0] / n,
            "loss_sem": sums[1] / n,
            "loss_tree": sums[2] / n,
            "loss_ins": sums[3] / n,
            "seconds": time.perf_counter() - t0,
        }
        run_eval = config.eval_every > 0 and (
            epoch % config.eval_every == 0 or epoch == config.epochs
        )
        if run_eval and val_clouds:
            report = evaluate(net, val_clouds, config)
            record.update(
                miou=report.miou, pq=report.pq, pq_t=report.pq_tree, mpq=report.mpq
            )
            if report.mpq > best_mpq:
                best_mpq = report.mpq
                best_state = snapshot_state(net)
        history.append(record)

    if best_mpq < 0:  # never evaluated: the final parameters are the best known
        best_state = snapshot_state(net)
    return TrainResult(
        network=net, best_state=best_state, best_mpq=best_mpq, history=history,
        aborted=aborted,
    )


def history_lines(history) -> list:
    """Append-only key=value rendering; floats carry full precision so a
    rerun can be compared bit for bit."""
    lines = []
    for rec in history:
        parts = []
        for key, val in rec.items():
            if key == "seconds":
                parts.append(f"{key}={val:.3f}")
            elif isinstance(val, float):
                parts.append(f"{key}={val:.17g}")
            else:
                parts.append(f"{key}={val}")
        lines.append(" ".join(parts))
    return lines


ABLATION_ORDER = ("None", "Decoder", "Encoder", "EncoderDecoder")


def ablate(train_clouds, val_clouds, base_config: TrainConfig) -> list:
    """Train once per skip scheme with identical seeds and data; returns one
    row of validation metrics per scheme, in the fixed A-D order."""
    rows = []
    for scheme in ABLATION_ORDER:
        config = replace(base_config, skip_scheme=scheme)
        result = train(train_clouds, val_clouds, config)
        report = evaluate(result.best_network(), val_clouds, config)
        rows.append(
            {
                "scheme": scheme,
                "miou": report.miou,
                "pq": report.pq,
                "pq_t": report.pq_tree,
                "mpq": report.mpq,
            }
        )
    return rows


def ablation_table(rows) -> str:
    header = f"{'':2} {'scheme':<16} {'mIoU':>7} {'PQ':>7} {'PQ_T':>7} {'mPQ':>7}"
    out = [header, "-" * len(header)]
    for letter, row in zip("ABCD", rows):
        out.append(
            f"{letter:2} {row['scheme']:<16} {row['miou']:7.3f} {row['pq']:7.3f} "
            f"{row['pq_t']:7.3f} {row['mpq']:7.3f}"
        )
    return "\n".join(out)
