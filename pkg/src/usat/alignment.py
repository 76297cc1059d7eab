"""Monotonic alignment search over a phoneme-by-frame log-likelihood matrix.

The alignment assigns each phoneme a contiguous, non-empty span of frames,
spans in order and jointly covering every frame. The search maximizes the
total log-likelihood; among equally scoring alignments it returns the
lexicographically earliest duration vector (first durations as small as
possible).
"""

from __future__ import annotations

import numpy as np

from .errors import DataError


def monotonic_alignment_search(log_lik: np.ndarray) -> np.ndarray:
    """Best duration vector for a [num_phonemes x num_frames] score matrix.

    Args:
        log_lik: log_lik[i, t] scores phoneme i occupying frame t.

    Returns:
        Integer durations [num_phonemes], each >= 1, summing to num_frames.

    Raises:
        DataError: fewer frames than phonemes, or empty input.
    """
    ll = np.asarray(log_lik, dtype=np.float64)
    if ll.ndim != 2:
        raise DataError("log-likelihood matrix must be 2-D [phonemes x frames]")
    n, t = ll.shape
    if n < 1:
        raise DataError("need at least one phoneme")
    if t < n:
        raise DataError(f"cannot align {n} phonemes to {t} frames (need frames >= phonemes)")
    if not np.all(np.isfinite(ll)):
        raise DataError("log-likelihood matrix contains non-finite entries")

    # best[i][u] = best score of phonemes i.. over frames u.., phoneme i
    # starting exactly at frame u; valid only while enough frames remain.
    neg = -np.inf
    best = np.full((n, t), neg)
    best[n - 1, :] = ll[n - 1, ::-1].cumsum()[::-1]
    for i in range(n - 2, -1, -1):
        upper = t - (n - i)  # last start leaving one frame per later phoneme
        for u in range(upper, i - 1, -1):
            stay = best[i, u + 1] if u + 1 <= upper else neg
            advance = best[i + 1, u + 1]
            best[i, u] = ll[i, u] + max(stay, advance)

    durations = np.zeros(n, dtype=np.int64)
    u = 0
    for i in range(n - 1):
        d = 1
        upper = t - (n - i)
        # prefer advancing on ties: earliest duration vector
        while u + d <= upper and best[i + 1, u + d] < best[i, u + d]:
            d += 1
        durations[i] = d
        u += d
    durations[n - 1] = t - u
    return durations


def gaussian_log_likelihood_matrix(
    frames: np.ndarray,
    means: np.ndarray,
    log_scales: np.ndarray,
) -> np.ndarray:
    """Per-(phoneme, frame) diagonal-Gaussian log density, summed over dims.

    frames: [T x D]; means/log_scales: [N x D]. Returns [N x T].
    """
    x = np.asarray(frames, dtype=np.float64)
    mu = np.asarray(means, dtype=np.float64)
    ls = np.asarray(log_scales, dtype=np.float64)
    if x.ndim != 2 or mu.shape != ls.shape or mu.shape[1] != x.shape[1]:
        raise DataError("shape mismatch between frames and phoneme statistics")
    inv_var = np.exp(-2.0 * ls)  # [N, D]
    # sum_d [ -0.5 log 2pi - ls_d - 0.5 (x_d - mu_d)^2 / var_d ]
    const = -0.5 * np.log(2.0 * np.pi) * x.shape[1] - ls.sum(axis=1)  # [N]
    x2 = (x * x) @ inv_var.T  # [T, N]
    xm = x @ (mu * inv_var).T
    m2 = np.sum(mu * mu * inv_var, axis=1)  # [N]
    quad = -0.5 * (x2 - 2.0 * xm + m2[None, :])
    return (const[None, :] + quad).T
