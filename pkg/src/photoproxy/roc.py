"""Area under the ROC curve via the Mann-Whitney pair count."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def auroc(scores, labels) -> float:
    """(concordant + 0.5 * tied) / (n_pos * n_neg) over positive/negative pairs.

    Computed from midranks, which gives exactly the pair count: the rank sum
    of the positives minus ``n_pos * (n_pos + 1) / 2`` is the number of
    (positive, negative) pairs won by the positive, ties counting half.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes present")
    ranks = rankdata(scores)  # midranks; 2x is an exact integer
    u2 = 2.0 * ranks[pos].sum() - n_pos * (n_pos + 1)
    return u2 / (2.0 * n_pos * n_neg)
