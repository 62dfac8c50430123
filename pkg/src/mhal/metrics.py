"""Micro-averaged, default-excluding (starred), span-level and sentence metrics.

All precision/recall/F values use the 0/0 -> 0 convention.  Values are kept in
[0, 1]; :meth:`MetricsReport.as_dict` reports percentages under the usual
column names (``P*``, ``F1*``, ``F0.5*``, ``Acc``, ``S-F1`` ...).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def f_beta(p: float, r: float, beta: float = 1.0) -> float:
    b2 = beta * beta
    return _ratio((1.0 + b2) * p * r, b2 * p + r)


def _flatten(seqs) -> np.ndarray:
    if len(seqs) and isinstance(seqs[0], (list, tuple, np.ndarray)):
        return np.concatenate([np.asarray(s, dtype=np.int64).reshape(-1) for s in seqs]) if len(seqs) else np.zeros(0, np.int64)
    return np.asarray(seqs, dtype=np.int64).reshape(-1)


@dataclass
class MetricsReport:
    per_label: dict[int, tuple[int, int, int]]  # label -> (tp, fp, fn)
    p: float
    r: float
    f1: float
    p_star: float
    r_star: float
    f1_star: float
    accuracy: float
    beta: float = 1.0
    f_beta: float = 0.0
    f_beta_star: float = 0.0
    prefix: str = ""

    def as_dict(self) -> dict[str, float]:
        x = self.prefix
        out = {
            f"{x}P": 100 * self.p,
            f"{x}R": 100 * self.r,
            f"{x}F1": 100 * self.f1,
            f"{x}P*": 100 * self.p_star,
            f"{x}R*": 100 * self.r_star,
            f"{x}F1*": 100 * self.f1_star,
            f"{x}Acc": 100 * self.accuracy,
        }
        if self.beta != 1.0:
            out[f"{x}F{self.beta:g}"] = 100 * self.f_beta
            out[f"{x}F{self.beta:g}*"] = 100 * self.f_beta_star
        return out


def _report(pred: np.ndarray, gold: np.ndarray, default: int, beta: float, prefix: str) -> MetricsReport:
    if pred.shape != gold.shape:
        raise ValueError(f"prediction and gold lengths differ: {pred.size} vs {gold.size}")
    labels = sorted(set(pred.tolist()) | set(gold.tolist()))
    per_label = {}
    for k in labels:
        tp = int(np.sum((pred == k) & (gold == k)))
        fp = int(np.sum((pred == k) & (gold != k)))
        fn = int(np.sum((pred != k) & (gold == k)))
        per_label[k] = (tp, fp, fn)
    tp = sum(c[0] for c in per_label.values())
    fp = sum(c[1] for c in per_label.values())
    fn = sum(c[2] for c in per_label.values())
    nd = [c for k, c in per_label.items() if k != default]
    tp_s, fp_s, fn_s = (sum(c[i] for c in nd) for i in range(3))
    p, r = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
    ps, rs = _ratio(tp_s, tp_s + fp_s), _ratio(tp_s, tp_s + fn_s)
    return MetricsReport(
        per_label=per_label,
        p=p,
        r=r,
        f1=f_beta(p, r),
        p_star=ps,
        r_star=rs,
        f1_star=f_beta(ps, rs),
        accuracy=_ratio(int(np.sum(pred == gold)), pred.size),
        beta=beta,
        f_beta=f_beta(p, r, beta),
        f_beta_star=f_beta(ps, rs, beta),
        prefix=prefix,
    )


def token_micro(pred, gold, default: int, beta: float = 1.0) -> MetricsReport:
    """Micro-averaged token metrics; starred figures treat ``default`` as negative."""
    return _report(_flatten(pred), _flatten(gold), default, beta, "")


def sentence_metrics(pred, gold, default: int, beta: float = 1.0) -> MetricsReport:
    return _report(_flatten(pred), _flatten(gold), default, beta, "S-")


# ---------------------------------------------------------------------------
# entity spans (IO scheme)
# ---------------------------------------------------------------------------


@dataclass
class SpanReport:
    tp: int
    fp: int
    fn: int
    p: float = field(init=False)
    r: float = field(init=False)
    f1: float = field(init=False)

    def __post_init__(self):
        self.p = _ratio(self.tp, self.tp + self.fp)
        self.r = _ratio(self.tp, self.tp + self.fn)
        self.f1 = f_beta(self.p, self.r)

    def as_dict(self) -> dict[str, float]:
        return {"span-P": 100 * self.p, "span-R": 100 * self.r, "span-F1": 100 * self.f1}


def extract_spans(labels: Sequence[int], default: int) -> set[tuple[int, int, int]]:
    """Maximal runs of one non-default label as ``(label, start, end)``, end inclusive."""
    spans = set()
    start = None
    for i, lab in enumerate(list(labels) + [default]):
        if start is not None and lab != labels[start]:
            spans.add((labels[start], start, i - 1))
            start = None
        if start is None and lab != default and i < len(labels):
            start = i
    return spans


def span_f1(pred, gold, default: int) -> SpanReport:
    """Entity-level scores: a predicted span is correct only on exact label and boundaries.

    Accepts one sequence or a list of sentence sequences (spans never cross
    sentence boundaries).
    """
    if len(pred) and not isinstance(pred[0], (list, tuple, np.ndarray)):
        pred, gold = [pred], [gold]
    if len(pred) != len(gold):
        raise ValueError("prediction and gold sentence counts differ")
    tp = fp = fn = 0
    for p_seq, g_seq in zip(pred, gold):
        if len(p_seq) != len(g_seq):
            raise ValueError("prediction and gold lengths differ")
        ps, gs = extract_spans(list(p_seq), default), extract_spans(list(g_seq), default)
        hit = len(ps & gs)
        tp += hit
        fp += len(ps) - hit
        fn += len(gs) - hit
    return SpanReport(tp, fp, fn)


# ---------------------------------------------------------------------------
# random baseline
# ---------------------------------------------------------------------------


def random_baseline(gold, n_labels: int, default: int, rng: np.random.Generator, trials: int = 10, beta: float = 1.0) -> dict[str, float]:
    """Mean metrics (percent) over ``trials`` uniformly random labellings of ``gold``."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    seqs = [list(s) for s in gold] if len(gold) and isinstance(gold[0], (list, tuple, np.ndarray)) else [list(gold)]
    total: dict[str, float] = {}
    for _ in range(trials):
        pred = [rng.integers(0, n_labels, size=len(s)).tolist() for s in seqs]
        values = token_micro(pred, seqs, default, beta).as_dict()
        values.update(span_f1(pred, seqs, default).as_dict())
        for k, v in values.items():
            total[k] = total.get(k, 0.0) + v
    return {k: v / trials for k, v in total.items()}
