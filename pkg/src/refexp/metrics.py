"""Evaluation metrics: consensus n-gram scoring for generated text, strict
IoU accuracy for grounding, and micro-F1 for predicted patch masks.

The n-gram metric is the CIDEr-D variant: TF-IDF vectors over 1..4-grams,
clipped candidate counts, a gaussian length penalty (sigma=6) and a x10
scale. Document frequencies come from the reference corpus of the evaluated
split, so absolute values are comparable only within one dataset.
"""

from __future__ import annotations

import math
from collections import defaultdict

import numpy as np

from .objectives import box_iou


def ngram_counts(tokens: list, n_max: int = 4) -> dict:
    counts: dict = defaultdict(int)
    for n in range(1, n_max + 1):
        for i in range(len(tokens) - n + 1):
            counts[tuple(tokens[i:i + n])] += 1
    return counts


class CiderD:
    def __init__(self, n: int = 4, sigma: float = 6.0):
        self.n = n
        self.sigma = sigma

    def _vector(self, counts: dict, df: dict, log_docs: float):
        vec = [defaultdict(float) for _ in range(self.n)]
        norm = [0.0] * self.n
        length = 0
        for ngram, tf in counts.items():
            idf = log_docs - math.log(max(1.0, df[ngram]))
            k = len(ngram) - 1
            vec[k][ngram] = tf * idf
            norm[k] += vec[k][ngram] ** 2
            if k == 0:
                length += tf
        return vec, [math.sqrt(x) for x in norm], length

    def _sim(self, vh, nh, lh, vr, nr, lr):
        penalty = math.exp(-((lh - lr) ** 2) / (2 * self.sigma ** 2))
        vals = np.zeros(self.n)
        for k in range(self.n):
            acc = 0.0
            for ngram, w in vh[k].items():
                acc += min(w, vr[k][ngram]) * vr[k][ngram]
            if nh[k] > 0 and nr[k] > 0:
                vals[k] = acc / (nh[k] * nr[k])
            vals[k] *= penalty
        return vals

    def score(self, candidates: dict, references: dict):
        """candidates: id -> token list; references: id -> list of token lists.
        Returns (corpus mean, per-id dict), on the x10 scale."""
        ids = list(candidates)
        if not ids:
            return 0.0, {}
        if set(ids) - set(references):
            raise ValueError("every candidate needs at least one reference")
        df: dict = defaultdict(float)
        for rid in ids:
            seen = set()
            for ref in references[rid]:
                seen.update(ngram_counts(ref, self.n))
            for ngram in seen:
                df[ngram] += 1
        log_docs = math.log(max(len(ids), 1))
        per = {}
        for rid in ids:
            vh, nh, lh = self._vector(ngram_counts(candidates[rid], self.n), df, log_docs)
            vals = np.zeros(self.n)
            for ref in references[rid]:
                vr, nr, lr = self._vector(ngram_counts(ref, self.n), df, log_docs)
                vals += self._sim(vh, nh, lh, vr, nr, lr)
            per[rid] = float(vals.mean() / len(references[rid]) * 10.0)
        return float(np.mean(list(per.values()))), per


def grounding_metrics(pred_boxes, true_boxes) -> dict:
    """Accuracy under the strict IoU > 0.5 rule, plus the mean IoU."""
    ious = [box_iou(p, t) for p, t in zip(pred_boxes, true_boxes)]
    ious = np.asarray(ious, dtype=np.float64)
    return {"accuracy": float((ious > 0.5).mean()),
            "mean_iou": float(ious.mean()),
            "ious": ious}


def mask_f1(pred_masks: np.ndarray, true_masks: np.ndarray) -> dict:
    """Micro-averaged F1 over all (sample, patch) cells."""
    pred = np.asarray(pred_masks, dtype=bool)
    true = np.asarray(true_masks, dtype=bool)
    if pred.shape != true.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {true.shape}")
    tp = int((pred & true).sum())
    fp = int((pred & ~true).sum())
    fn = int((~pred & true).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"f1": f1, "precision": precision, "recall": recall,
            "tp": tp, "fp": fp, "fn": fn}
