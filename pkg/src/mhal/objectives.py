"""Loss terms and their weighted combination.

Every term is summed over the sentences of a batch, so a batch of one gives
the per-sentence value.
"""

from __future__ import annotations

from dataclasses import astuple, dataclass

import numpy as np

from . import tensor as T
from .corpus import LabelScheme
from .model import MHAL, Batch, ForwardOutputs
from .tensor import Tensor

NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    sent: float = 1.0
    tok: float = 1.0
    attn: float = 0.0
    rq: float = 0.0
    lm: float = 0.0

    def __post_init__(self):
        values = astuple(self)
        if any(v < 0 for v in values):
            raise ValueError(f"loss weights must be nonnegative, got {values}")
        if not any(v > 0 for v in values):
            raise ValueError("at least one loss weight must be positive")


@dataclass
class LossBreakdown:
    """Individual terms (``None`` when skipped for a zero weight) and the total."""

    l_sent: Tensor | None
    l_tok: Tensor | None
    l_attn: Tensor | None
    r_q: Tensor | None
    l_lm: Tensor | None
    total: Tensor

    def terms(self) -> dict[str, Tensor | None]:
        return {"l_sent": self.l_sent, "l_tok": self.l_tok, "l_attn": self.l_attn, "r_q": self.r_q, "l_lm": self.l_lm}

    def values(self) -> dict[str, float | None]:
        out = {k: (None if v is None else float(v.data)) for k, v in self.terms().items()}
        out["total"] = float(self.total.data)
        return out


def smoothed_targets(gold: np.ndarray, n_classes: int, epsilon: float) -> np.ndarray:
    """``(1 - eps) * onehot + eps / K``; rows with gold < 0 are all zero."""
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"smoothing epsilon must be in [0, 1), got {epsilon}")
    gold = np.asarray(gold)
    out = np.zeros(gold.shape + (n_classes,))
    valid = gold >= 0
    out[valid] = epsilon / n_classes
    np.put_along_axis(out, np.where(valid, gold, 0)[..., None], np.where(valid, 1.0 - epsilon + epsilon / n_classes, 0.0)[..., None], axis=-1)
    return out


def loss_sentence(log_probs: Tensor, gold, epsilon: float = 0.0) -> Tensor:
    """Cross-entropy of sentence log-probabilities (B, S) against smoothed gold."""
    target = smoothed_targets(np.asarray(gold), log_probs.shape[-1], epsilon)
    return T.neg(T.reduce_sum(T.mul(log_probs, target)))


def loss_token(log_probs: Tensor, gold, supervised, epsilon: float = 0.0) -> Tensor:
    """Smoothed cross-entropy summed over tokens whose supervision flag is set."""
    gold = np.asarray(gold)
    flags = np.asarray(supervised, dtype=bool) & (gold >= 0)
    if not flags.any():
        return Tensor(0.0)
    target = smoothed_targets(np.where(flags, gold, -1), log_probs.shape[-1], epsilon)
    return T.neg(T.reduce_sum(T.mul(log_probs, target)))


def loss_attention(token_probs: Tensor, mask: np.ndarray, sentence_gold, scheme: LabelScheme) -> Tensor:
    """Squared shortfall of the best token for the sentence's label and for the default label.

    Under a binary scheme a default sentence contributes the default term once,
    and a non-default sentence takes its label term over all non-default heads.
    """
    gold = np.asarray(sentence_gold)
    d = scheme.default_token
    best = T.reduce_max(T.mul(token_probs, mask[:, :, None]), axis=1)  # (B, H)
    total = T.reduce_sum(T.square(T.take(best, d, axis=1) - 1.0))
    if scheme.mode == "identical":
        onehot = np.zeros(best.shape)
        rows = np.flatnonzero(gold >= 0)
        onehot[rows, gold[rows]] = 1.0
        label_best = T.reduce_sum(T.mul(best, onehot), axis=1)
        active = (gold >= 0).astype(float)
    else:
        others = [h for h in range(scheme.H) if h != d]
        label_best = T.reduce_max(T.take(best, others, axis=1), axis=1)
        active = ((gold >= 0) & (gold != scheme.default_sentence)).astype(float)
    if not active.any():
        return total
    return total + T.reduce_sum(T.mul(T.square(label_best - 1.0), active))


def regularizer_queries(pooled: Tensor) -> Tensor:
    """Mean pairwise cosine similarity of the H label queries, summed over the batch."""
    B, H, _ = pooled.shape
    if H < 2:
        raise ValueError("query regularizer needs at least two heads")
    norms = T.maximum(T.sqrt(T.reduce_sum(T.square(pooled), axis=-1, keepdims=True)), NORM_FLOOR)
    unit = pooled / norms
    gram = T.matmul(unit, T.transpose(unit, (0, 2, 1)))
    off = 1.0 - np.eye(H)
    return T.reduce_sum(T.mul(gram, off)) / float(H * (H - 1))


def loss_lm(model: MHAL, fw: Tensor, bw: Tensor, lm_ids: np.ndarray, mask: np.ndarray) -> Tensor:
    """Next-word (forward states) and previous-word (backward states) cross-entropy."""
    B, N = mask.shape
    if N < 2 or not (mask.sum(axis=1) >= 2).any():
        return Tensor(0.0)
    p = model.params
    fw_target = np.zeros((B, N), dtype=np.int64)
    bw_target = np.zeros((B, N), dtype=np.int64)
    fw_mask = np.zeros((B, N))
    bw_mask = np.zeros((B, N))
    fw_target[:, :-1] = lm_ids[:, 1:]
    fw_mask[:, :-1] = mask[:, 1:]
    bw_target[:, 1:] = lm_ids[:, :-1]
    bw_mask[:, 1:] = mask[:, 1:]
    total = None
    for states, target, tmask, d in ((fw, fw_target, fw_mask, "fw"), (bw, bw_target, bw_mask, "bw")):
        hidden = T.tanh(T.matmul(states, p[f"lm_{d}_proj_w"]) + p[f"lm_{d}_proj_b"])
        logp = T.log_softmax(T.matmul(hidden, p[f"lm_{d}_out_w"]) + p[f"lm_{d}_out_b"], axis=-1)
        term = T.neg(T.reduce_sum(T.mul(T.pick(logp, target), tmask)))
        total = term if total is None else total + term
    return total


def total_loss(model: MHAL, out: ForwardOutputs, batch: Batch, weights: LossWeights, epsilon: float = 0.0) -> LossBreakdown:
    """Weighted sum of all objectives; zero-weighted terms are not computed."""
    scheme = model.scheme
    terms: dict[str, Tensor | None] = dict.fromkeys(("l_sent", "l_tok", "l_attn", "r_q", "l_lm"))
    if weights.sent > 0:
        terms["l_sent"] = loss_sentence(out.log_sentence_probs, batch.sentence_gold, epsilon)
    if weights.tok > 0:
        terms["l_tok"] = loss_token(out.log_token_probs, batch.token_gold, batch.supervised & (batch.mask > 0), epsilon)
    if weights.attn > 0:
        terms["l_attn"] = loss_attention(out.token_probs, out.mask, batch.sentence_gold, scheme)
    if weights.rq > 0:
        terms["r_q"] = regularizer_queries(out.pooled_queries)
    if weights.lm > 0:
        terms["l_lm"] = loss_lm(model, out.word_fw, out.word_bw, batch.lm_ids, out.mask)
    lam = {"l_sent": weights.sent, "l_tok": weights.tok, "l_attn": weights.attn, "r_q": weights.rq, "l_lm": weights.lm}
    total: Tensor | None = None
    for name, term in terms.items():
        if term is None:
            continue
        part = T.mul(term, lam[name])
        total = part if total is None else total + part
    return LossBreakdown(total=total, **terms)
