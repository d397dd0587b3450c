"""Numba kernels. Must stay arithmetically in step with ``_kernels_np``.

Every parallel loop writes only to the voxel it visits, so results do not
depend on the thread count. Reductions are left to numpy on the caller side.
"""
import math

import numpy as np
from numba import njit, prange

# keeps |q| <= alpha after the rescale despite rounding in the norm
_SHRINK = 1.0 - 4.0 * np.finfo(np.float64).eps
_DEGENERATE = 1e-8


@njit(cache=True, inline="always")
def _axis_cell(x, n):
    if x < 0.0:
        x = 0.0
    elif x > n - 1.0:
        x = n - 1.0
    if n == 1:
        return 0, 0, 0.0
    i0 = int(math.floor(x))
    if i0 > n - 2:
        i0 = n - 2
    return i0, i0 + 1, x - i0


@njit(cache=True, parallel=True)
def warp_linear(vol, disp):
    nx, ny, nz = vol.shape
    out = np.empty_like(vol)
    for i in prange(nx):
        for j in range(ny):
            for k in range(nz):
                x0, x1, fx = _axis_cell(i + disp[0, i, j, k], nx)
                y0, y1, fy = _axis_cell(j + disp[1, i, j, k], ny)
                z0, z1, fz = _axis_cell(k + disp[2, i, j, k], nz)
                c00 = (1.0 - fx) * vol[x0, y0, z0] + fx * vol[x1, y0, z0]
                c10 = (1.0 - fx) * vol[x0, y1, z0] + fx * vol[x1, y1, z0]
                c01 = (1.0 - fx) * vol[x0, y0, z1] + fx * vol[x1, y0, z1]
                c11 = (1.0 - fx) * vol[x0, y1, z1] + fx * vol[x1, y1, z1]
                c0 = (1.0 - fy) * c00 + fy * c10
                c1 = (1.0 - fy) * c01 + fy * c11
                out[i, j, k] = (1.0 - fz) * c0 + fz * c1
    return out


@njit(cache=True, parallel=True)
def div_backward(v):
    _, nx, ny, nz = v.shape
    out = np.empty((nx, ny, nz))
    for i in prange(nx):
        for j in range(ny):
            for k in range(nz):
                s = 0.0
                if i < nx - 1:
                    s += v[0, i, j, k]
                if i > 0:
                    s -= v[0, i - 1, j, k]
                if j < ny - 1:
                    s += v[1, i, j, k]
                if j > 0:
                    s -= v[1, i, j - 1, k]
                if k < nz - 1:
                    s += v[2, i, j, k]
                if k > 0:
                    s -= v[2, i, j, k - 1]
                out[i, j, k] = s
    return out


@njit(cache=True, parallel=True)
def w_step(p0, g, gn, h, divq, c, w):
    nx, ny, nz = p0.shape
    for i in prange(nx):
        for j in range(ny):
            for k in range(nz):
                den = c * gn[i, j, k]
                if den < _DEGENERATE:
                    p = p0[i, j, k]
                    val = -1.0 if p > 0.0 else (1.0 if p < 0.0 else 0.0)
                else:
                    num = 0.0
                    for a in range(3):
                        t = h[a, i, j, k] / c - divq[a, i, j, k]
                        num += g[a, i, j, k] * t
                    val = (c * num - p0[i, j, k]) / den
                if val > 1.0:
                    val = 1.0
                elif val < -1.0:
                    val = -1.0
                w[i, j, k] = val


@njit(cache=True, inline="always")
def _dq(divq, h, w, g, c, i, j, k):
    return divq[i, j, k] - h[i, j, k] / c + w[i, j, k] * g[i, j, k]


@njit(cache=True, parallel=True)
def q_step(q, divq, h, w, g, gu, c, tau, alpha):
    nx, ny, nz = w.shape
    for i in prange(nx):
        for j in range(ny):
            for k in range(nz):
                d0 = _dq(divq, h, w, g, c, i, j, k)
                gx = _dq(divq, h, w, g, c, i + 1, j, k) - d0 if i < nx - 1 else 0.0
                gy = _dq(divq, h, w, g, c, i, j + 1, k) - d0 if j < ny - 1 else 0.0
                gz = _dq(divq, h, w, g, c, i, j, k + 1) - d0 if k < nz - 1 else 0.0
                a = q[0, i, j, k] + tau * (c * gx - gu[0, i, j, k])
                b = q[1, i, j, k] + tau * (c * gy - gu[1, i, j, k])
                e = q[2, i, j, k] + tau * (c * gz - gu[2, i, j, k])
                norm = math.sqrt(a * a + b * b + e * e)
                if norm > alpha:
                    s = alpha / norm * _SHRINK
                    a *= s
                    b *= s
                    e *= s
                q[0, i, j, k] = a
                q[1, i, j, k] = b
                q[2, i, j, k] = e


@njit(cache=True, parallel=True)
def h_step(w, g, divq, h, c, resid):
    nx, ny, nz = w.shape
    for i in prange(nx):
        for j in range(ny):
            for k in range(nz):
                for a in range(3):
                    f = w[i, j, k] * g[a, i, j, k] + divq[a, i, j, k]
                    resid[a, i, j, k] = f
                    h[a, i, j, k] -= c * f


@njit(cache=True)
def subgradient_energy(p0, g, ut, h, alpha, sub):
    """Primal energy and one subgradient of it with respect to ``h``."""
    nx, ny, nz = p0.shape
    sub[:] = 0.0
    energy = 0.0
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                r = p0[i, j, k]
                for a in range(3):
                    r += g[a, i, j, k] * h[a, i, j, k]
                energy += abs(r)
                s = 1.0 if r > 0.0 else (-1.0 if r < 0.0 else 0.0)
                for a in range(3):
                    sub[a, i, j, k] += s * g[a, i, j, k]
    for a in range(3):
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    v = ut[a, i, j, k] + h[a, i, j, k]
                    dx = ut[a, i + 1, j, k] + h[a, i + 1, j, k] - v if i < nx - 1 else 0.0
                    dy = ut[a, i, j + 1, k] + h[a, i, j + 1, k] - v if j < ny - 1 else 0.0
                    dz = ut[a, i, j, k + 1] + h[a, i, j, k + 1] - v if k < nz - 1 else 0.0
                    n = math.sqrt(dx * dx + dy * dy + dz * dz)
                    energy += alpha * n
                    if n > 0.0:
                        sub[a, i, j, k] -= alpha * (dx + dy + dz) / n
                        if i < nx - 1:
                            sub[a, i + 1, j, k] += alpha * dx / n
                        if j < ny - 1:
                            sub[a, i, j + 1, k] += alpha * dy / n
                        if k < nz - 1:
                            sub[a, i, j, k + 1] += alpha * dz / n
    return energy
