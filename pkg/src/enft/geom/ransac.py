import numpy as np


def as_rng(rng=None, seed=None) -> np.random.Generator:
    if rng is not None:
        return rng
    return np.random.default_rng(0 if seed is None else seed)


def ransac_iterations(inlier_ratio, sample_size, confidence=0.999) -> int:
    """Number of draws needed to hit one all-inlier sample with ``confidence``."""
    w = inlier_ratio ** sample_size
    if w >= 1.0:
        return 1
    if w <= 0.0:
        return np.iinfo(np.int32).max
    denom = np.log1p(-w)
    if denom == 0.0:
        return np.iinfo(np.int32).max
    return int(min(np.ceil(np.log(1.0 - confidence) / denom), np.iinfo(np.int32).max))


def draw_samples(rng, n, k, count) -> np.ndarray:
    """``count`` index rows of ``k`` distinct elements from ``range(n)``."""
    idx = rng.integers(0, n, size=(count, k))
    s = np.sort(idx, axis=1)
    ok = (np.diff(s, axis=1) > 0).all(axis=1)
    return idx[ok]


def hartley_batch(x):
    """Batched Hartley normalization of (B, k, 2) point sets -> (B, 3, 3)."""
    c = x.mean(axis=1)
    d = np.sqrt(((x - c[:, None]) ** 2).sum(axis=2)).mean(axis=1)
    s = np.sqrt(2.0) / np.where(d > 0, d, 1.0)
    T = np.zeros((len(x), 3, 3))
    T[:, 0, 0] = s
    T[:, 1, 1] = s
    T[:, 0, 2] = -s * c[:, 0]
    T[:, 1, 2] = -s * c[:, 1]
    T[:, 2, 2] = 1.0
    return T


def run_ransac(n, k, fit_batch, score, max_iters, confidence, rng, chunk=64):
    """Generic adaptive RANSAC over batched minimal solvers.

    ``fit_batch(samples)`` returns ``(models, valid)`` for a (B, k) index array;
    ``score(models)`` returns per-model inlier counts and masks. Returns the best
    ``(model, mask)`` or ``(None, None)``.
    """
    best_model, best_mask, best_count = None, None, -1
    needed, drawn = max_iters, 0
    while drawn < min(needed, max_iters):
        batch = min(chunk, min(needed, max_iters) - drawn)
        samples = draw_samples(rng, n, k, batch)
        drawn += batch
        if not len(samples):
            continue
        models, valid = fit_batch(samples)
        counts, masks = score(models)
        counts = np.where(valid, counts, -1)
        j = int(np.argmax(counts))
        if counts[j] > best_count:
            best_model, best_mask, best_count = models[j], masks[j], int(counts[j])
            needed = ransac_iterations(best_count / n, k, confidence)
    return best_model, best_mask
