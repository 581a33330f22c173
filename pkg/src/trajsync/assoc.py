"""Nearest-stamp association between two increasing stamp arrays."""

from __future__ import annotations

import numpy as np


def associate_stamps(ta, tb, tol: float) -> np.ndarray:
    """Greedy one-to-one matching of stamps with ``|ta[i] - tb[j]| <= tol``.

    Candidate pairs are each stamp's bracketing neighbours in the other
    array; they are accepted closest-first. Returns an ``(M, 2)`` int array
    of ``(i, j)`` sorted by ``i`` (possibly empty).
    """
    ta = np.asarray(ta, dtype=float)
    tb = np.asarray(tb, dtype=float)
    if tol <= 0:
        raise ValueError("association tolerance must be positive")
    if len(ta) == 0 or len(tb) == 0:
        return np.zeros((0, 2), dtype=int)

    cand = []
    k = np.searchsorted(tb, ta)
    ia = np.arange(len(ta))
    for jb in (k - 1, k):
        ok = (jb >= 0) & (jb < len(tb))
        cand.append(np.column_stack([ia[ok], jb[ok]]))
    k = np.searchsorted(ta, tb)
    jb = np.arange(len(tb))
    for ia_ in (k - 1, k):
        ok = (ia_ >= 0) & (ia_ < len(ta))
        cand.append(np.column_stack([ia_[ok], jb[ok]]))
    cand = np.unique(np.concatenate(cand), axis=0)
    dt = np.abs(ta[cand[:, 0]] - tb[cand[:, 1]])
    keep = dt <= tol
    cand, dt = cand[keep], dt[keep]
    order = np.lexsort((cand[:, 1], cand[:, 0], dt))

    used_a = np.zeros(len(ta), dtype=bool)
    used_b = np.zeros(len(tb), dtype=bool)
    pairs = []
    for i, j in cand[order]:
        if not used_a[i] and not used_b[j]:
            used_a[i] = used_b[j] = True
            pairs.append((i, j))
    if not pairs:
        return np.zeros((0, 2), dtype=int)
    pairs = np.array(pairs, dtype=int)
    return pairs[np.argsort(pairs[:, 0], kind="stable")]
