"""Independent reference computations used by the metric and routing tests."""

from __future__ import annotations

import numpy as np


def confusion(gold, pred, classes):
    """Confusion matrix with an extra column for missing predictions."""
    index = {c: i for i, c in enumerate(classes)}
    m = np.zeros((len(classes), len(classes) + 1), dtype=np.int64)
    for g, p in zip(gold, pred):
        m[index[g], index[p] if p is not None else len(classes)] += 1
    return m


def oracle_scores(gold, pred, classes, positive=None):
    m = confusion(gold, pred, classes)
    k = len(classes)
    tp = np.diag(m[:, :k]).astype(float)
    predicted = m[:, :k].sum(axis=0).astype(float)
    support = m.sum(axis=1).astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        prec = np.where(predicted > 0, tp / predicted, 0.0)
        rec = np.where(support > 0, tp / support, 0.0)
        f1 = np.where(prec + rec > 0, 2 * prec * rec / (prec + rec), 0.0)
    out = {
        "accuracy": tp.sum() / m.sum() if m.sum() else 0.0,
        "macro": f1.mean(),
        "weighted": (f1 * support).sum() / support.sum() if support.sum() else 0.0,
    }
    if positive is not None:
        out["binary"] = f1[classes.index(positive)]
    return out


def route_oracle(ocr_len, count, simple):
    """Routing rules written out as a lookup, separate from the library code."""
    if simple:
        return set()
    tools = {"captioner"}
    if ocr_len >= 1:
        tools.add("ocr")
    if count >= 6:
        tools.add("detector")
    return tools
