"""Pure-numpy kernels, the fallback for ``_kernels_nb`` (same signatures)."""
import numpy as np

_SHRINK = 1.0 - 4.0 * np.finfo(np.float64).eps
_DEGENERATE = 1e-8


def _axis_cell(x, n):
    x = np.clip(x, 0.0, n - 1.0)
    if n == 1:
        i0 = np.zeros(x.shape, dtype=np.intp)
        return i0, i0, np.zeros_like(x)
    i0 = np.minimum(np.floor(x).astype(np.intp), n - 2)
    return i0, i0 + 1, x - i0


def warp_linear(vol, disp):
    nx, ny, nz = vol.shape
    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    x0, x1, fx = _axis_cell(ii + disp[0], nx)
    y0, y1, fy = _axis_cell(jj + disp[1], ny)
    z0, z1, fz = _axis_cell(kk + disp[2], nz)
    c00 = (1.0 - fx) * vol[x0, y0, z0] + fx * vol[x1, y0, z0]
    c10 = (1.0 - fx) * vol[x0, y1, z0] + fx * vol[x1, y1, z0]
    c01 = (1.0 - fx) * vol[x0, y0, z1] + fx * vol[x1, y0, z1]
    c11 = (1.0 - fx) * vol[x0, y1, z1] + fx * vol[x1, y1, z1]
    c0 = (1.0 - fy) * c00 + fy * c10
    c1 = (1.0 - fy) * c01 + fy * c11
    return (1.0 - fz) * c0 + fz * c1


def grad_forward(u):
    g = np.zeros((3,) + u.shape)
    g[0, :-1] = u[1:] - u[:-1]
    g[1, :, :-1] = u[:, 1:] - u[:, :-1]
    g[2, :, :, :-1] = u[:, :, 1:] - u[:, :, :-1]
    return g


def div_backward(v):
    out = np.zeros(v.shape[1:])
    out[:-1] += v[0, :-1]
    out[1:] -= v[0, :-1]
    out[:, :-1] += v[1, :, :-1]
    out[:, 1:] -= v[1, :, :-1]
    out[:, :, :-1] += v[2, :, :, :-1]
    out[:, :, 1:] -= v[2, :, :, :-1]
    return out


def w_step(p0, g, gn, h, divq, c, w):
    den = c * gn
    ok = den >= _DEGENERATE
    num = (g * (h / c - divq)).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.where(ok, (c * num - p0) / np.where(ok, den, 1.0), -np.sign(p0))
    np.clip(val, -1.0, 1.0, out=w)


def q_step(q, divq, h, w, g, gu, c, tau, alpha):
    d = divq - h / c + w * g
    q += tau * (c * grad_forward(d) - gu)
    norm = np.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2])
    over = norm > alpha
    if over.any():
        q[:, over] *= alpha / norm[over] * _SHRINK


def h_step(w, g, divq, h, c, resid):
    resid[...] = w * g + divq
    h -= c * resid


def subgradient_energy(p0, g, ut, h, alpha, sub):
    r = p0 + (g * h).sum(axis=0)
    sub[...] = np.sign(r) * g
    energy = np.abs(r).sum()
    for a in range(3):
        d = grad_forward(ut[a] + h[a])
        n = np.sqrt((d * d).sum(axis=0))
        energy += alpha * n.sum()
        safe = np.where(n > 0.0, n, 1.0)
        unit = np.where(n > 0.0, d / safe, 0.0)
        # adjoint of the forward difference is minus the backward divergence
        sub[a] -= alpha * div_backward(unit)
    return energy
