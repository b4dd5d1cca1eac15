"""Reference Adam on a fixed quadratic, written without the crate's code.

Parameters follow a 3-8-8-2 MLP layout ([W0, b0, W1, b1, W2, b2]) and the loss
is sum(a * (w - c)^2) / 2 per tensor. Per-tensor learning rates follow the
muP Adam rule (hidden weights scaled by hidden_lr_mult / fan_in). Writes
adam_golden.json for tests/golden.rs.
"""
import json
import math

SHAPES = [(3, 8), (8, 1), (8, 8), (8, 1), (8, 2), (2, 1)]
HIDDEN_WEIGHT = 2
LR, B1, B2, EPS, HIDDEN_MULT, STEPS = 0.01, 0.9, 0.999, 1e-8, 4.0, 10


def trajectory(mup):
    result = []
    for t, (rows, cols) in enumerate(SHAPES):
        n = rows * cols
        w = [0.5 * math.sin(1.7 * i + t) for i in range(n)]
        c = [0.1 * math.cos(i) for i in range(n)]
        a = [1.0 + (i % 5) for i in range(n)]
        lr = LR * HIDDEN_MULT / rows if (mup and t == HIDDEN_WEIGHT) else LR
        m, v = [0.0] * n, [0.0] * n
        for step in range(1, STEPS + 1):
            for i in range(n):
                g = a[i] * (w[i] - c[i])
                m[i] = B1 * m[i] + (1 - B1) * g
                v[i] = B2 * v[i] + (1 - B2) * g * g
                w[i] -= lr * (m[i] / (1 - B1**step)) / (math.sqrt(v[i] / (1 - B2**step)) + EPS)
        result.append(w)
    return result


if __name__ == "__main__":
    with open("adam_golden.json", "w") as f:
        json.dump({"sp": trajectory(False), "mup": trajectory(True)}, f)
