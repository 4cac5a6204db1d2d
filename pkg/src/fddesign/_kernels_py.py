"""Pure numpy versions of the design kernels (reference and fallback)."""
import numpy as np


def closed_form(g1, g2, c1, c2, eg2, ec2, lam, floor):
    g1, g2, c1, c2, eg2, ec2 = (np.asarray(a, dtype=float) for a in (g1, g2, c1, c2, eg2, ec2))
    with np.errstate(divide="ignore", invalid="ignore"):
        inner = g1 < lam * c1
        a = np.sqrt(g1 / (lam * c1))
        b = np.sqrt((g1 + eg2) / (lam * (c1 + ec2)))
        p1 = np.where(inner, np.minimum(1.0, np.maximum(a, b)), 1.0)
        ratio = np.where(inner, np.sqrt(g2 * c1 / (g1 * c2)), np.sqrt(g2 / (lam * c2)))
        # g2 = 0 never pays for x_r; g1 = 0 or c2 = 0 makes the ratio infinite
        ratio = np.where(g2 <= 0, 0.0, np.where((inner & (g1 <= 0)) | (c2 <= 0), 1.0, ratio))
        p2 = np.minimum(1.0, ratio)
    return np.maximum(p1, floor), np.maximum(p2, floor)


def totals(g1, g2, c1, c2, eg2, ec2, w, lam, floor):
    p1, p2 = closed_form(g1, g2, c1, c2, eg2, ec2, lam, floor)
    v = g1 / p1 + g2 / (p1 * p2)
    return (float(np.sum(w)), float(np.sum(w * (p1 * c1 + p1 * p2 * c2))),
            float(np.sum(w * v)), float(np.sum(w * v * v)))


def cond_norm_mean(base_sq, mean_M, pool, block=256):
    base_sq = np.asarray(base_sq, dtype=float)
    out = np.empty(base_sq.shape[0])
    for s in range(0, out.shape[0], block):
        m = mean_M[s:s + block, None, :] + pool[None, :, :]
        out[s:s + block] = np.sqrt(base_sq[s:s + block, None] + np.einsum("ikj,ikj->ik", m, m)).mean(1)
    return out
