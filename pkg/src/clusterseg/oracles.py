"""Brute-force reference implementations used to cross-check the fast paths.

These stay structurally independent of the production code: the assignment
oracle enumerates permutations, and the CRF oracle computes full dense
pairwise sums with an explicitly zeroed diagonal.
"""
from __future__ import annotations

from itertools import permutations

import numpy as np


def oracle_assignment(score: np.ndarray) -> list[int]:
    """Exhaustive-maximum assignment, n <= 8.  Ties resolve to the
    lexicographically smallest permutation (enumeration order)."""
    score = np.asarray(score, dtype=np.float64)
    n = score.shape[0]
    if score.shape != (n, n):
        raise ValueError("score matrix must be square")
    if n > 8:
        raise ValueError(f"enumeration oracle limited to n <= 8, got {n}")
    best_perm, best_total = None, -np.inf
    for perm in permutations(range(n)):
        total = sum(score[i, perm[i]] for i in range(n))
        if total > best_total:
            best_total, best_perm = total, perm
    return list(best_perm)


def oracle_dense_crf(
    mask: np.ndarray,
    image: np.ndarray,
    params,
    trace: list | None = None,
) -> np.ndarray:
    """Exact mean-field with O(n^2) pairwise sums; images up to 32x32 only."""
    mask = np.asarray(mask)
    image = np.asarray(image)
    h, w = mask.shape
    if h > 32 or w > 32:
        raise ValueError("dense oracle limited to 32x32 images")
    if image.shape[:2] != mask.shape:
        raise ValueError("mask/image dimension mismatch")
    n = h * w
    yy, xx = np.mgrid[0:h, 0:w]
    pos = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(np.float64)
    rgb = image.reshape(n, 3).astype(np.float64)

    def kernel(feats: np.ndarray) -> np.ndarray:
        diff = feats[:, None, :] - feats[None, :, :]
        k = np.exp(-0.5 * np.sum(diff ** 2, axis=2))
        np.fill_diagonal(k, 0.0)  # sum over j != i, exactly
        return k

    k_app = kernel(np.concatenate(
        [pos / params.sigma_xy_app, rgb / params.sigma_rgb], axis=1))
    k_sm = kernel(pos / params.sigma_xy_smooth)

    fg = mask.ravel().astype(bool)
    p = params.unary_confidence
    unary = np.empty((n, 2), dtype=np.float64)
    unary[:, 0] = np.where(fg, -np.log(1.0 - p), -np.log(p))
    unary[:, 1] = np.where(fg, -np.log(p), -np.log(1.0 - p))

    def normalize(energy):
        q = np.exp(-(energy - energy.min(axis=1, keepdims=True)))
        return q / q.sum(axis=1, keepdims=True)

    q = normalize(unary)
    for _ in range(params.iterations):
        pairwise = np.zeros_like(unary)
        for l in range(2):
            other = 1 - l
            pairwise[:, l] = (
                params.w_appearance * (k_app @ q[:, other])
                + params.w_smooth * (k_sm @ q[:, other])
            )
        q = normalize(unary + pairwise)
        if trace is not None:
            trace.append(q.copy())
    return np.argmax(q, axis=1).reshape(h, w).astype(np.uint8)
