"""Shared test utilities: finite differences and dense convolution oracles."""

import numpy as np

from hapt3d.autodiff import Var, backward, param


def fd_grad(f, x, h=1e-6):
    """Central finite-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def autodiff_grad(build, x):
    """Gradient of scalar build(Var(x)) via reverse mode."""
    v = param(x)
    out = build(v)
    assert isinstance(out, Var)
    backward(out)
    return v.grad


def check_op(build, x, h=1e-6, rtol=1e-6, atol=1e-9):
    ana = autodiff_grad(build, np.array(x, dtype=np.float64))
    num = fd_grad(lambda a: float(build(Var(a, requires=False)).data), np.array(x), h=h)
    np.testing.assert_allclose(ana, num, rtol=rtol, atol=atol)


def dense_conv3d(grid, weights, bias, kernel_size):
    """Direct dense 3D convolution oracle over a fully occupied block.

    grid: (D, H, W, C_in); output same spatial shape, out-of-range taps
    contribute nothing (matching sparse semantics where absent = no voxel).
    """
    d, h, w, _ = grid.shape
    c_out = weights.shape[2]
    r = kernel_size // 2
    out = np.zeros((d, h, w, c_out))
    idx = 0
    for dx in range(-r, r + 1):
        for dy in range(-r, r + 1):
            for dz in range(-r, r + 1):
                for x in range(d):
                    for y in range(h):
                        for z in range(w):
                            sx, sy, sz = x + dx, y + dy, z + dz
                            if 0 <= sx < d and 0 <= sy < h and 0 <= sz < w:
                                out[x, y, z] += grid[sx, sy, sz] @ weights[idx]
                idx += 1
    return out + bias
