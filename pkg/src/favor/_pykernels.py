"""Pure-Python twins of the compiled kernels in ``_ckernels.pyx``.

Both modules must agree exactly, including the tie-breaking order used when
backtracking an edit-distance alignment (diagonal, then deletion, then
insertion).
"""

import numpy as np


def masked_softmax_forward(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    rows, cols = x.shape
    if mask.shape[1] != cols:
        raise ValueError("mask width does not match logits")
    allowed = mask.astype(bool)
    if rows % mask.shape[0] == 0:
        allowed = np.tile(allowed, (rows // mask.shape[0], 1))
    else:
        allowed = allowed[np.arange(rows) % mask.shape[0]]
    empty = ~allowed.any(axis=1)
    if empty.any():
        bad = int(np.flatnonzero(empty)[0])
        raise ValueError(f"row {bad} of the attention mask has no allowed entry")
    shifted = np.where(allowed, x, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted)  # exp(-inf) == 0 exactly
    return e / e.sum(axis=1, keepdims=True)


def masked_softmax_backward(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    return y * (gy - (gy * y).sum(axis=1, keepdims=True))


def edit_ops(ref, hyp) -> tuple[int, int, int]:
    """Return (substitutions, deletions, insertions) of one minimal alignment."""
    ref = list(ref)
    hyp = list(hyp)
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        row, prev = d[i], d[i - 1]
        r = ref[i - 1]
        for j in range(1, m + 1):
            row[j] = min(prev[j - 1] + (r != hyp[j - 1]), prev[j] + 1, row[j - 1] + 1)
    s = dl = it = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i -= 1
            j -= 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            dl += 1
            i -= 1
        else:
            it += 1
            j -= 1
    return s, dl, it
