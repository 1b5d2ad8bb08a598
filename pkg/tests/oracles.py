"""Independent brute-force oracles shared by unit and acceptance tests."""

import math

import numpy as np


def brute_mse(a, b):
    total, count = 0.0, 0
    for x, y in zip(a.reshape(-1), b.reshape(-1)):
        total += (x - y) ** 2
        count += 1
    return total / count


def brute_mae(a, b):
    total, count = 0.0, 0
    for x, y in zip(a.reshape(-1), b.reshape(-1)):
        total += abs(x - y)
        count += 1
    return total / count


def brute_win_rate(method, unimodal):
    wins = 0
    for m, u in zip(method, unimodal):
        if m < u:
            wins += 1
    return round(100.0 * wins / len(method), 1)


def brute_normalized_mse(table):
    rows = []
    for i in range(table.shape[0]):
        vals = []
        for j in range(table.shape[1]):
            col = table[:, j]
            if col.max() > col.min():
                vals.append((table[i, j] - col.min()) / (col.max() - col.min()))
        rows.append(sum(vals) / len(vals))
    return rows


def jacobi_singular_values(a, sweeps=60, tol=1e-15):
    """One-sided Jacobi SVD: orthogonalize column pairs by plane rotations."""
    u = np.array(a, dtype=np.float64)
    if u.shape[0] < u.shape[1]:
        u = u.T
    n = u.shape[1]
    for _ in range(sweeps):
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = u[:, i] @ u[:, i]
                beta = u[:, j] @ u[:, j]
                gamma = u[:, i] @ u[:, j]
                if abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                off = max(off, abs(gamma))
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                ui = u[:, i].copy()
                u[:, i] = c * ui - s * u[:, j]
                u[:, j] = s * ui + c * u[:, j]
        if off == 0.0:
            break
    return np.linalg.norm(u, axis=0)


def brute_effective_rank(h):
    sigma = np.sort(jacobi_singular_values(h))[::-1]
    sigma = sigma[sigma > 1e-12 * sigma[0]]
    p = sigma / sigma.sum()
    return math.exp(-float(np.sum(p * np.log(p))))
