"""Independent numpy implementation of the 27 per-parameter features.

Writes features_golden.json, read by tests/golden.rs. Parameters and
gradients are closed-form so the Rust side can rebuild them exactly.
"""
import json

import numpy as np

EPS = 1e-8
BETAS = [0.9, 0.99, 0.999, 0.999, 0.9, 0.99, 0.999]
SHAPES = [(3, 4), (4, 1), (4, 2), (2, 1)]
STEPS = 5


def weights(t, shape):
    idx = np.arange(shape[0] * shape[1], dtype=np.float64).reshape(shape)
    return 0.3 * np.sin(0.7 * idx + 1.3 * t)


def grad(t, shape, step):
    idx = np.arange(shape[0] * shape[1], dtype=np.float64).reshape(shape)
    return np.cos(0.37 * idx + 0.11 * step * (t + 1)) * (1.0 + 0.5 * t)


def factor(row_stat, col_stat):
    rf = np.sqrt(row_stat.mean() + EPS) / np.sqrt(row_stat + EPS)
    cf = 1.0 / np.sqrt(col_stat + EPS)
    return rf[:, None] * cf[None, :]


def run(normalize):
    blocks = []
    for t, shape in enumerate(SHAPES):
        m = [np.zeros(shape) for _ in range(3)]
        v = np.zeros(shape)
        r = [np.zeros(shape[0]) for _ in range(3)]
        c = [np.zeros(shape[1]) for _ in range(3)]
        g = None
        for step in range(STEPS):
            g = grad(t, shape, step)
            for k in range(3):
                m[k] = BETAS[k] * m[k] + (1 - BETAS[k]) * g
            v = BETAS[3] * v + (1 - BETAS[3]) * g * g
            d2 = (g * factor(v.mean(axis=1), v.mean(axis=0))) ** 2
            for k in range(3):
                b = BETAS[4 + k]
                r[k] = b * r[k] + (1 - b) * d2.mean(axis=1)
                c[k] = b * c[k] + (1 - b) * d2.mean(axis=0)
        base = factor(v.mean(axis=1), v.mean(axis=0))
        delta = g * base
        rsq = 1.0 / np.sqrt(v + EPS)
        cols = [weights(t, shape)] + m + [v] + [mk * rsq for mk in m] + [rsq]
        cols += [delta * factor(r[k], c[k]) for k in range(3)]
        cols += [np.broadcast_to(r[k][:, None], shape) for k in range(3)]
        cols += [np.broadcast_to(c[k][None, :], shape) for k in range(3)]
        cols += [np.broadcast_to(1.0 / np.sqrt(r[k][:, None] + EPS), shape) for k in range(3)]
        cols += [np.broadcast_to(1.0 / np.sqrt(c[k][None, :] + EPS), shape) for k in range(3)]
        cols += [m[k] * base * factor(r[k], c[k]) for k in range(3)]
        block = np.stack([col.reshape(-1) for col in cols], axis=1)
        if normalize:
            rms = np.sqrt((block**2).mean(axis=0))
            block = block / np.maximum(rms, EPS)
        blocks.append(block)
    return np.concatenate(blocks, axis=0)


if __name__ == "__main__":
    out = {"steps": STEPS, "raw": run(False).tolist(), "normalized": run(True).tolist()}
    with open("features_golden.json", "w") as f:
        json.dump(out, f)
