"""Sparse-convolution network: one encoder, three structurally identical
decoders (semantic logits, tree-level offsets, instance-level offsets),
with configurable skip wiring between encoder and decoders.

Autodiff-facing convolution and normalization ops live here; the pure
index machinery (kernel maps, coordinate handling) comes from ``sparse``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import sparse
from .autodiff import Var, accumulate, backward as _ad_backward
from .cloud import LabeledCloud

SKIP_SCHEMES = ("None", "Decoder", "Encoder", "EncoderDecoder")
SCHEME_LETTERS = {"A": "None", "B": "Decoder", "C": "Encoder", "D": "EncoderDecoder"}

CHECKPOINT_MAGIC = b"HAPT3D01"


class StateError(RuntimeError):
    """Raised when forward/backward are called out of order."""


def normalize_scheme(scheme: str) -> str:
    scheme = SCHEME_LETTERS.get(scheme.upper(), scheme) if len(scheme) == 1 else scheme
    for s in SKIP_SCHEMES:
        if scheme.lower() == s.lower():
            return s
    raise ValueError(f"unknown skip scheme '{scheme}' (expected one of {SKIP_SCHEMES} or A-D)")


@dataclass
class NetworkConfig:
    k_classes: int = 5
    encoder_channels: tuple = (8, 16, 32, 64)
    decoder_channels: tuple | None = None  # default: mirrored encoder widths
    stages: int = 4
    skip_scheme: str = "EncoderDecoder"
    norm_eps: float = 1e-5
    norm_momentum: float = 0.9
    voxel_size: float = 0.003
    seed: int = 0

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        if self.k_classes < 2:
            raise ValueError("k_classes must be >= 2")
        if len(self.encoder_channels) != self.stages:
            raise ValueError(f"encoder channel list must have length stages={self.stages}")
        if self.decoder_channels is None:
            enc = self.encoder_channels
            self.decoder_channels = tuple(
                enc[max(self.stages - 2 - j, 0)] for j in range(self.stages)
            )
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        if len(self.decoder_channels) != self.stages:
            raise ValueError(f"decoder channel list must have length stages={self.stages}")
        self.skip_scheme = normalize_scheme(self.skip_scheme)


@dataclass
class NetworkOutput:
    coords: np.ndarray  # M x 3 voxel coordinates at stride 1
    voxel_size: float
    point_to_voxel: np.ndarray  # maps input point -> voxel row
    semantic_logits: Var  # M x K
    tree_offsets: Var  # M x 3, meters
    instance_offsets: Var  # M x 3, meters

    def voxel_centers(self) -> np.ndarray:
        return (self.coords + 0.5) * self.voxel_size

    def semantic_labels(self) -> np.ndarray:
        return np.argmax(self.semantic_logits.data, axis=1)


# -- autodiff ops over sparse structure -----------------------------------------


def conv_apply(x: Var, w: Var, b: Var, kmap: sparse.KernelMap) -> Var:
    out_data = sparse.apply_kernel_map(kmap, x.data, w.data) + b.data
    out = Var(out_data, (x, w, b))
    n_in = x.data.shape[0]

    def bwd(g):
        if x.requires:
            accumulate(x, sparse.apply_kernel_map_t(kmap, g, w.data, n_in), owned=True)
        if w.requires:
            accumulate(w, sparse.kernel_map_weight_grad(kmap, x.data, g, w.data.shape[0]),
                       owned=True)
        if b.requires:
            accumulate(b, g.sum(axis=0), owned=True)

    out._backward = bwd
    return out


def batch_norm(x: Var, gamma: Var, beta: Var, eps: float) -> tuple[Var, np.ndarray, np.ndarray]:
    """Whole-cloud per-channel normalization (training mode); returns the
    batch mean/variance so the caller can update running statistics."""
    mu = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = Var(xhat * gamma.data + beta.data, (x, gamma, beta))
    n = x.data.shape[0]

    def bwd(g):
        if gamma.requires:
            accumulate(gamma, (g * xhat).sum(axis=0), owned=True)
        if beta.requires:
            accumulate(beta, g.sum(axis=0), owned=True)
        if x.requires:
            dxhat = g * gamma.data
            dx = (inv_std / n) * (
                n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
            )
            accumulate(x, dx, owned=True)

    out._backward = bwd
    return out, mu, var


def batch_norm_eval(x: Var, gamma: Var, beta: Var, rm, rv, eps: float) -> Var:
    scale = gamma.data / np.sqrt(rv + eps)
    return x * scale + (beta.data - rm * scale)


# -- parameter store and layers ---------------------------------------------------


class ParamStore:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Var] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def conv_weight(self, name: str, k3: int, c_in: int, c_out: int) -> Var:
        bound = np.sqrt(6.0 / (k3 * c_in))  # Kaiming-uniform, fan-in
        v = Var(self.rng.uniform(-bound, bound, (k3, c_in, c_out)), requires=True)
        self.params[name] = v
        return v

    def zeros(self, name: str, shape) -> Var:
        v = Var(np.zeros(shape), requires=True)
        self.params[name] = v
        return v

    def ones(self, name: str, shape) -> Var:
        v = Var(np.ones(shape), requires=True)
        self.params[name] = v
        return v

    def buffer(self, name: str, value: np.ndarray) -> str:
        self.buffers[name] = np.array(value, dtype=np.float64)
        return name


class NormLayer:
    def __init__(self, store: ParamStore, name: str, channels: int, eps: float, momentum: float):
        self.gamma = store.ones(f"{name}.gamma", channels)
        self.beta = store.zeros(f"{name}.beta", channels)
        self.store = store
        self.rm = store.buffer(f"{name}.running_mean", np.zeros(channels))
        self.rv = store.buffer(f"{name}.running_var", np.ones(channels))
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x: Var, training: bool) -> Var:
        if training:
            out, mu, var = batch_norm(x, self.gamma, self.beta, self.eps)
            m = self.momentum
            self.store.buffers[self.rm] = m * self.store.buffers[self.rm] + (1 - m) * mu
            self.store.buffers[self.rv] = m * self.store.buffers[self.rv] + (1 - m) * var
            return out
        return batch_norm_eval(
            x, self.gamma, self.beta, self.store.buffers[self.rm],
            self.store.buffers[self.rv], self.eps,
        )


class ConvBlock:
    """sparse conv -> normalization -> ReLU (norm/activation optional)."""

    def __init__(self, store, name, c_in, c_out, kernel_size=3, eps=1e-5,
                 momentum=0.9, norm=True, act=True):
        k3 = kernel_size**3
        self.w = store.conv_weight(f"{name}.conv.w", k3, c_in, c_out)
        self.b = store.zeros(f"{name}.conv.b", c_out)
        self.norm = NormLayer(store, f"{name}.norm", c_out, eps, momentum) if norm else None
        self.act = act

    def __call__(self, x: Var, kmap: sparse.KernelMap, training: bool) -> Var:
        out = conv_apply(x, self.w, self.b, kmap)
        if self.norm is not None:
            out = self.norm(out, training)
        return out.relu() if self.act else out


class ResidualBlock:
    """Two conv blocks plus additive shortcut (no activation after the add)."""

    def __init__(self, store, name, channels, eps=1e-5, momentum=0.9):
        self.block1 = ConvBlock(store, f"{name}.block1", channels, channels,
                                eps=eps, momentum=momentum)
        self.block2 = ConvBlock(store, f"{name}.block2", channels, channels,
                                eps=eps, momentum=momentum)

    def __call__(self, x: Var, kmap: sparse.KernelMap, training: bool) -> Var:
        return x + self.block2(self.block1(x, kmap, training), kmap, training)


class Head:
    """1x1x1 convolution (a per-voxel linear map), no normalization."""

    def __init__(self, store, name, c_in, c_out):
        self.w = store.conv_weight(f"{name}.w", 1, c_in, c_out)
        self.b = store.zeros(f"{name}.b", c_out)

    def __call__(self, x: Var) -> Var:
        return x.matmul(self.w.reshape(self.w.shape[1], self.w.shape[2])) + self.b


class DecoderStage:
    def __init__(self, store, name, c_in, c_out, skip_channels, eps, momentum):
        self.up = ConvBlock(store, f"{name}.up", c_in, c_out, eps=eps, momentum=momentum)
        self.fuse = ConvBlock(store, f"{name}.fuse", c_out + skip_channels, c_out,
                              eps=eps, momentum=momentum)
        self.res = ResidualBlock(store, f"{name}.res", c_out, eps=eps, momentum=momentum)


# -- the network -------------------------------------------------------------------


class Network:
    """Encoder (stem + downsampling stages) feeding three decoders whose
    skip wiring is selected by ``config.skip_scheme``."""

    def __init__(self, config: NetworkConfig):
        self.config = config
        self.store = ParamStore(config.seed)
        self.training = True
        self._graph_live = False
        eps, mom = config.norm_eps, config.norm_momentum
        enc, dec = config.encoder_channels, config.decoder_channels
        s = config.stages

        self.stem = ConvBlock(self.store, "stem", 3, enc[0], eps=eps, momentum=mom)
        self.enc_down = []
        self.enc_res = []
        for i in range(s):
            c_prev = enc[0] if i == 0 else enc[i - 1]
            self.enc_down.append(
                ConvBlock(self.store, f"enc{i}.down", c_prev, enc[i], eps=eps, momentum=mom)
            )
            self.enc_res.append(ResidualBlock(self.store, f"enc{i}.res", enc[i], eps=eps,
                                              momentum=mom))

        self.decoders = {}
        for d_idx, d_name in enumerate(("sem", "tree", "ins")):
            stages = []
            for j in range(s):
                c_in = enc[-1] if j == 0 else dec[j - 1]
                skip_ch = sum(ch for _, ch in self.skip_sources(d_name, j))
                stages.append(
                    DecoderStage(self.store, f"{d_name}{j}", c_in, dec[j], skip_ch, eps, mom)
                )
            self.decoders[d_name] = stages

        self.head_sem = Head(self.store, "head.sem", dec[-1], config.k_classes)
        self.head_tree = Head(self.store, "head.tree", dec[-1], 3)
        self.head_ins = Head(self.store, "head.ins", dec[-1], 3)

    # skip wiring table: (source, channels) per decoder stage
    def skip_sources(self, decoder: str, stage: int):
        cfg = self.config
        enc, dec = cfg.encoder_channels, cfg.decoder_channels
        level = cfg.stages - 1 - stage  # resolution level after upsampling
        enc_ch = enc[level - 1] if level >= 1 else enc[0]  # stem at level 0
        scheme = cfg.skip_scheme
        sources = []
        if scheme in ("Encoder", "EncoderDecoder"):
            sources.append(("encoder", enc_ch))
        if scheme in ("Decoder", "EncoderDecoder"):
            if decoder == "tree":
                sources.append(("sem", dec[stage]))
            elif decoder == "ins":
                sources.append(("tree", dec[stage]))
        return sources

    def train_mode(self, flag: bool = True):
        self.training = flag
        return self

    def eval_mode(self):
        return self.train_mode(False)

    def parameters(self) -> dict[str, Var]:
        return self.store.params

    def zero_grad(self):
        for v in self.store.params.values():
            v.grad = None

    def forward(self, cloud: LabeledCloud) -> NetworkOutput:
        if len(cloud) == 0:
            raise ValueError("forward on an empty cloud")
        cfg = self.config
        seed, p2v = sparse.unique_coords(cloud.positions, cloud.colors, cfg.voxel_size)

        # coordinate pyramid and kernel maps, shared by all decoders
        levels = [seed.coords]
        down_maps, up_maps = [], []
        for i in range(cfg.stages):
            stride = 2**i
            nxt = sparse.downsample_coords(levels[-1], stride)
            dmap = sparse.build_kernel_map(levels[-1], nxt, 3, stride, 2 * stride)
            umap = sparse.KernelMap(
                offsets=dmap.offsets,
                pairs=[(o.copy(), i_.copy()) for i_, o in dmap.pairs],
                n_out=len(levels[-1]),
            )
            down_maps.append(dmap)
            up_maps.append(umap)
            levels.append(nxt)
        s1_maps = [
            sparse.build_kernel_map(c, c, 3, 2**l, 2**l) for l, c in enumerate(levels)
        ]

        training = self.training
        x = self.stem(Var(seed.feats, requires=False), s1_maps[0], training)
        enc_feats = [x]  # per level 0..stages
        for i in range(cfg.stages):
            x = self.enc_down[i](x, down_maps[i], training)
            x = self.enc_res[i](x, s1_maps[i + 1], training)
            enc_feats.append(x)

        dec_feats = {}
        for d_name in ("sem", "tree", "ins"):
            y = enc_feats[-1]
            outs = []
            for j, stage in enumerate(self.decoders[d_name]):
                level = cfg.stages - 1 - j
                y = stage.up(y, up_maps[level], training)
                skips = [y]
                for src, _ in self.skip_sources(d_name, j):
                    skips.append(enc_feats[level] if src == "encoder" else dec_feats[src][j])
                if len(skips) > 1:
                    y = _concat(skips)
                y = stage.fuse(y, s1_maps[level], training)
                y = stage.res(y, s1_maps[level], training)
                outs.append(y)
            dec_feats[d_name] = outs

        self._graph_live = True
        return NetworkOutput(
            coords=levels[0],
            voxel_size=cfg.voxel_size,
            point_to_voxel=p2v,
            semantic_logits=self.head_sem(dec_feats["sem"][-1]),
            tree_offsets=self.head_tree(dec_feats["tree"][-1]),
            instance_offsets=self.head_ins(dec_feats["ins"][-1]),
        )


def _concat(vars_):
    from .autodiff import concat

    return concat(vars_, axis=1)


def build_network(config: NetworkConfig) -> Network:
    return Network(config)


def backward(network: Network, loss: Var) -> dict[str, np.ndarray]:
    """Run reverse mode from ``loss`` and return the gradient registry.
    The recorded graph is consumed; a new forward is required first."""
    if not network._graph_live:
        raise StateError("backward called without a preceding forward")
    network.zero_grad()
    _ad_backward(loss)
    network._graph_live = False
    return {
        name: (v.grad if v.grad is not None else np.zeros_like(v.data))
        for name, v in network.store.params.items()
    }


# -- checkpoint I/O -----------------------------------------------------------------


def _config_text(config: NetworkConfig) -> str:
    lines = [
        f"k_classes = {config.k_classes}",
        "encoder_channels = " + ",".join(str(c) for c in config.encoder_channels),
        "decoder_channels = " + ",".join(str(c) for c in config.decoder_channels),
        f"stages = {config.stages}",
        f"skip_scheme = {config.skip_scheme}",
        "norm_eps = %.17g" % config.norm_eps,
        "norm_momentum = %.17g" % config.norm_momentum,
        "voxel_size = %.17g" % config.voxel_size,
        f"seed = {config.seed}",
    ]
    return "\n".join(lines) + "\n"


def _config_from_text(text: str) -> NetworkConfig:
    kv = {}
    for line in text.splitlines():
        if "=" in line:
            key, val = line.split("=", 1)
            kv[key.strip()] = val.strip()
    return NetworkConfig(
        k_classes=int(kv["k_classes"]),
        encoder_channels=tuple(int(c) for c in kv["encoder_channels"].split(",")),
        decoder_channels=tuple(int(c) for c in kv["decoder_channels"].split(",")),
        stages=int(kv["stages"]),
        skip_scheme=kv["skip_scheme"],
        norm_eps=float(kv["norm_eps"]),
        norm_momentum=float(kv["norm_momentum"]),
        voxel_size=float(kv["voxel_size"]),
        seed=int(kv["seed"]),
    )


def save_checkpoint(network: Network, path) -> None:
    """Versioned binary: magic, config text block, then length-prefixed named
    float64 little-endian arrays (parameters and normalization statistics)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        cfg = _config_text(network.config).encode()
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        entries = [(n, v.data, 0) for n, v in sorted(network.store.params.items())]
        entries += [(n, a, 1) for n, a in sorted(network.store.buffers.items())]
        fh.write(struct.pack("<I", len(entries)))
        for name, arr, kind in entries:
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", kind))
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> Network:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (cfg_len,) = struct.unpack("<I", fh.read(4))
        config = _config_from_text(fh.read(cfg_len).decode())
        network = Network(config)
        (n_entries,) = struct.unpack("<I", fh.read(4))
        for _ in range(n_entries):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode()
            (kind,) = struct.unpack("<B", fh.read(1))
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            arr = np.frombuffer(fh.read(8 * int(np.prod(shape))), dtype="<f8").reshape(shape)
            if kind == 0:
                target = network.store.params.get(name)
                if target is None or target.data.shape != arr.shape:
                    raise ValueError(f"{path}: unexpected parameter '{name}' {arr.shape}")
                target.data = arr.astype(np.float64)
            else:
                if name not in network.store.buffers:
                    raise ValueError(f"{path}: unexpected buffer '{name}'")
                network.store.buffers[name] = arr.astype(np.float64)
    return network
