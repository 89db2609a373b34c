"""Pure-numpy versions of the compiled transfer kernels (same signatures)."""
import math

import numpy as np


def _stencil_offsets(d, width):
    rng = np.arange(width)
    return np.stack(np.meshgrid(*([rng] * d), indexing="ij"), axis=-1).reshape(-1, d)


def deposit_bump(pos, beta, half_length, n, scale):
    pos = np.asarray(pos, dtype=float)
    npart, d = pos.shape
    h = 2.0 * half_length / n
    x = pos + half_length
    lo = np.ceil((x - beta) / h).astype(np.int64)
    width = int(math.ceil(2.0 * beta / h)) + 2
    offs = _stencil_offsets(d, width)
    out = np.zeros(n**d)
    # chunk over particles to bound memory; accumulation order is particle-major
    for start in range(0, npart, 512):
        idx = lo[start : start + 512, None, :] + offs[None, :, :]
        dx = idx * h - x[start : start + 512, None, :]
        r2 = np.sum(dx * dx, axis=-1) / beta**2
        inside = r2 < 1.0
        vals = np.zeros_like(r2)
        vals[inside] = scale * np.exp(-1.0 / (1.0 - r2[inside]))
        flat = np.zeros(r2.shape, dtype=np.int64)
        for a in range(d):
            flat = flat * n + np.mod(idx[..., a], n)
        out += np.bincount(flat[inside], weights=vals[inside], minlength=n**d)
    return out


def gather_linear(field, n, half_length, pos):
    pos = np.asarray(pos, dtype=float)
    npart, d = pos.shape
    h = 2.0 * half_length / n
    u = (pos + half_length) / h
    base = np.floor(u).astype(np.int64)
    frac = u - base
    out = np.zeros(npart)
    for corner in range(1 << d):
        w = np.ones(npart)
        flat = np.zeros(npart, dtype=np.int64)
        for a in range(d):
            bit = (corner >> (d - 1 - a)) & 1
            w *= frac[:, a] if bit else 1.0 - frac[:, a]
            flat = flat * n + np.mod(base[:, a] + bit, n)
        out += w * field[flat]
    return out
