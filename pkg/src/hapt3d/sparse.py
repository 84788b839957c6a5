"""Sparse voxel tensors and generalized sparse 3D convolution.

Coordinates are integer voxel indices (N x 3, unique rows) at a given
stride; features are a dense N x C float64 matrix. Kernel maps list, for
every kernel offset, the (input_row, output_row) pairs it connects, which
reduces convolution to gather -> matmul -> scatter per offset.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class SparseTensor:
    coords: np.ndarray  # N x 3 int64, unique rows, divisible by stride
    feats: np.ndarray  # N x C float64
    stride: int = 1

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        self.feats = np.asarray(self.feats, dtype=np.float64)
        if self.feats.ndim == 1:
            self.feats = self.feats.reshape(-1, 1)
        if len(self.coords) != len(self.feats):
            raise ValueError(
                f"coords/feats row mismatch: {len(self.coords)} vs {len(self.feats)}"
            )
        if self.stride < 1:
            raise ValueError("stride must be positive")

    @property
    def n(self) -> int:
        return len(self.coords)

    @property
    def channels(self) -> int:
        return self.feats.shape[1]


@dataclass
class KernelMap:
    """Per-offset (input_row, output_row) index pairs of a convolution."""

    offsets: np.ndarray  # k^3 x 3 int64, lexicographic order
    pairs: list = field(default_factory=list)  # k^3 entries of (in_rows, out_rows)
    n_out: int = 0


def kernel_offsets(kernel_size: int) -> np.ndarray:
    """All k^3 offsets from (-r,-r,-r) to (r,r,r) in lexicographic order."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError("kernel_size must be odd and >= 1")
    r = kernel_size // 2
    ax = np.arange(-r, r + 1, dtype=np.int64)
    grid = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)
    return grid.reshape(-1, 3)


def _pack(coords: np.ndarray, mins: np.ndarray, dims: np.ndarray) -> np.ndarray:
    c = coords - mins
    return (c[:, 0] * dims[1] + c[:, 1]) * dims[2] + c[:, 2]


def _canonical_order(coords: np.ndarray) -> np.ndarray:
    """Row permutation sorting coordinates lexicographically by (x, y, z)."""
    return np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))


def unique_coords(positions, features, voxel_size: float):
    """Quantize points to stride-1 voxels, averaging features per voxel.

    Returns ``(tensor, mapping)`` where ``mapping[i]`` is the row of the
    voxel containing point ``i``, so per-voxel outputs can be read back per
    point. Voxel rows are sorted lexicographically for determinism; the
    merge order within a voxel is content-canonical, so the result does not
    depend on input point order.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features.reshape(-1, 1)
    if len(positions) == 0:
        empty = SparseTensor(np.zeros((0, 3), np.int64), np.zeros((0, features.shape[1])))
        return empty, np.zeros(0, dtype=np.intp)

    coords = np.floor(positions / voxel_size).astype(np.int64)
    mins = coords.min(axis=0)
    dims = coords.max(axis=0) - mins + 1
    keys = _pack(coords, mins, dims)

    sort_keys = [features[:, j] for j in range(features.shape[1] - 1, -1, -1)]
    sort_keys += [positions[:, 2], positions[:, 1], positions[:, 0], keys]
    order = np.lexsort(sort_keys)
    skeys = keys[order]
    starts = np.flatnonzero(np.r_[True, skeys[1:] != skeys[:-1]])
    ukeys = skeys[starts]
    counts = np.diff(np.r_[starts, len(skeys)])

    sums = np.add.reduceat(features[order], starts, axis=0)
    feats = sums / counts[:, None]
    ucoords = coords[order[starts]]

    mapping = np.searchsorted(ukeys, keys).astype(np.intp)
    return SparseTensor(ucoords, feats, stride=1), mapping


def build_kernel_map(
    in_coords: np.ndarray,
    out_coords: np.ndarray,
    kernel_size: int,
    in_stride: int,
    out_stride: int,
    transposed: bool = False,
) -> KernelMap:
    """Index pairs per kernel offset.

    Normal convolution: pair (i, j) is present for offset d iff
    ``in_coords[i] == out_coords[j] + d * in_stride``. Transposed
    (coordinate-restoring upsampling): ``out_coords[j] == in_coords[i] +
    d * out_stride``. Within one offset every input row and every output
    row appears at most once.
    """
    offsets = kernel_offsets(kernel_size)
    in_coords = np.asarray(in_coords, dtype=np.int64).reshape(-1, 3)
    out_coords = np.asarray(out_coords, dtype=np.int64).reshape(-1, 3)
    kmap = KernelMap(offsets=offsets, n_out=len(out_coords))
    if len(in_coords) == 0 or len(out_coords) == 0:
        empty = np.zeros(0, dtype=np.intp)
        kmap.pairs = [(empty, empty) for _ in offsets]
        return kmap

    mins = in_coords.min(axis=0)
    dims = in_coords.max(axis=0) - mins + 1
    table = _pack(in_coords, mins, dims)
    t_order = np.argsort(table, kind="stable")
    t_sorted = table[t_order]

    step = -out_stride if transposed else in_stride
    for delta in offsets:
        probe = out_coords + delta * step
        shifted = probe - mins
        valid = np.all((shifted >= 0) & (shifted < dims), axis=1)
        out_rows = np.flatnonzero(valid).astype(np.intp)
        pkeys = _pack(probe[valid], mins, dims)
        pos = np.searchsorted(t_sorted, pkeys)
        pos = np.minimum(pos, len(t_sorted) - 1)
        hit = t_sorted[pos] == pkeys
        in_rows = t_order[pos[hit]].astype(np.intp)
        kmap.pairs.append((in_rows, out_rows[hit]))
    return kmap


def apply_kernel_map(kmap: KernelMap, feats: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """out[j] += feats[i] @ weights[offset] over all mapped pairs."""
    out = np.zeros((kmap.n_out, weights.shape[2]), dtype=np.float64)
    for off, (in_rows, out_rows) in enumerate(kmap.pairs):
        if len(in_rows):
            out[out_rows] += feats[in_rows] @ weights[off]
    return out


def apply_kernel_map_t(kmap: KernelMap, grad_out: np.ndarray, weights: np.ndarray, n_in: int):
    """Adjoint of ``apply_kernel_map`` with respect to the features."""
    grad_in = np.zeros((n_in, weights.shape[1]), dtype=np.float64)
    for off, (in_rows, out_rows) in enumerate(kmap.pairs):
        if len(in_rows):
            grad_in[in_rows] += grad_out[out_rows] @ weights[off].T
    return grad_in


def kernel_map_weight_grad(kmap: KernelMap, feats: np.ndarray, grad_out: np.ndarray, k3: int):
    """Gradient of ``apply_kernel_map`` with respect to the weights."""
    c_in, c_out = feats.shape[1], grad_out.shape[1]
    grad_w = np.zeros((k3, c_in, c_out), dtype=np.float64)
    for off, (in_rows, out_rows) in enumerate(kmap.pairs):
        if len(in_rows):
            grad_w[off] = feats[in_rows].T @ grad_out[out_rows]
    return grad_w


def downsample_coords(coords: np.ndarray, stride: int) -> np.ndarray:
    """Unique coordinates snapped to the doubled stride, sorted."""
    if len(coords) == 0:
        return coords.reshape(0, 3)
    snapped = (coords // (2 * stride)) * (2 * stride)
    out = np.unique(snapped, axis=0)
    return out[_canonical_order(out)]


def _check_weights(weights: np.ndarray, c_in: int):
    weights = np.asarray(weights, dtype=np.float64)
    k3 = weights.shape[0]
    k = round(k3 ** (1 / 3))
    if weights.ndim != 3 or k**3 != k3 or k % 2 == 0:
        raise ValueError(f"weights must be k^3 x C_in x C_out with odd k, got {weights.shape}")
    if weights.shape[1] != c_in:
        raise ValueError(f"weight C_in {weights.shape[1]} != feature channels {c_in}")
    return weights, k


def sparse_conv(x: SparseTensor, weights, bias, stride: int = 1) -> SparseTensor:
    """Generalized sparse convolution; stride 1 keeps coordinates, stride 2
    snaps them onto the doubled grid."""
    weights, k = _check_weights(weights, x.channels)
    bias = np.asarray(bias, dtype=np.float64)
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    if stride == 1:
        out_coords, out_stride = x.coords, x.stride
    else:
        out_coords, out_stride = downsample_coords(x.coords, x.stride), 2 * x.stride
    kmap = build_kernel_map(x.coords, out_coords, k, x.stride, out_stride)
    feats = apply_kernel_map(kmap, x.feats, weights) + bias
    return SparseTensor(out_coords, feats, stride=out_stride)


def sparse_conv_transpose(x: SparseTensor, weights, bias, target_coords) -> SparseTensor:
    """Upsample onto ``target_coords`` (taken from the matching encoder
    level); adjoint coordinate pattern of the stride-2 convolution."""
    weights, k = _check_weights(weights, x.channels)
    bias = np.asarray(bias, dtype=np.float64)
    target_coords = np.asarray(target_coords, dtype=np.int64).reshape(-1, 3)
    if x.stride % 2 != 0:
        raise ValueError("transpose convolution requires an even input stride")
    out_stride = x.stride // 2
    if len(target_coords) and np.any(target_coords % out_stride):
        raise ValueError(f"target coordinates not divisible by stride {out_stride}")
    kmap = build_kernel_map(x.coords, target_coords, k, x.stride, out_stride, transposed=True)
    feats = apply_kernel_map(kmap, x.feats, weights) + bias
    return SparseTensor(target_coords, feats, stride=out_stride)
