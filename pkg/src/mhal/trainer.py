"""AdaDelta training loop with patience-based early stopping."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, TextIO

import numpy as np

from . import tensor as T
from .corpus import LabelScheme, Sentence, build_vocabs
from .metrics import sentence_metrics, span_f1, token_micro
from .model import MHAL, ModelConfig, make_batch
from .objectives import LossWeights, total_loss

log = logging.getLogger(__name__)

VARIANTS: dict[str, LossWeights] = {
    "MHAL-joint": LossWeights(1.0, 1.0, 0.0, 0.0, 0.0),
    "MHAL-joint+": LossWeights(1.0, 1.0, 0.01, 0.5, 0.1),
    "MHAL-sent": LossWeights(1.0, 0.0, 0.0, 0.0, 0.0),
    "MHAL-sent+": LossWeights(1.0, 0.0, 0.01, 0.5, 0.1),
    "MHAL-joint+Rq": LossWeights(1.0, 1.0, 0.0, 0.5, 0.0),
    "BiLSTM-tok-equiv": LossWeights(0.0, 1.0, 0.0, 0.0, 0.0),
}

STOPPING_METRICS = ("sentence", "token", "mean")
_STOPPING_ALIASES = {
    "sentence": "sentence",
    "s-f1*": "sentence",
    "s-f1μ*": "sentence",
    "token": "token",
    "f1*": "token",
    "f1μ*": "token",
    "mean": "mean",
    "(s-f1μ* + f1μ*)/2": "mean",
}


def preset_variant(name: str) -> LossWeights:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; choose one of {', '.join(VARIANTS)}") from None


def canonical_stopping(name: str) -> str:
    key = name.strip().lower().replace(" ", "")
    key = {k.replace(" ", ""): v for k, v in _STOPPING_ALIASES.items()}.get(key)
    if key is None:
        raise ValueError(f"unknown stopping metric {name!r}; choose one of {', '.join(STOPPING_METRICS)}")
    return key


def default_stopping(weights: LossWeights, p: float = 1.0) -> str:
    """Token F1* when any token supervision reaches the model, else sentence S-F1*."""
    return "token" if weights.tok > 0 and p > 0 else "sentence"


@dataclass
class TrainConfig:
    max_epochs: int = 200
    patience: int = 7
    batch_size: int = 32
    learning_rate: float = 1.0
    decay: float = 0.9
    smoothing: float = 0.15
    stopping_metric: str = "token"
    lm_vocab_cap: int = 7500
    optimizer_epsilon: float = 1e-6
    beta: float = 1.0  # F-beta used for reporting token figures
    min_improvement: float = 1e-6

    def __post_init__(self):
        self.stopping_metric = canonical_stopping(self.stopping_metric)
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1 or self.lm_vocab_cap < 1:
            raise ValueError("patience, batch_size, max_epochs and lm_vocab_cap must be >= 1")
        if self.learning_rate < 0 or not 0.0 <= self.decay < 1.0 or not 0.0 <= self.smoothing < 1.0:
            raise ValueError("learning_rate >= 0, decay and smoothing in [0, 1) required")


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Running averages of squared gradients and squared updates, per parameter."""

    rho: float = 0.9
    epsilon: float = 1e-6
    learning_rate: float = 1.0
    sq_grad: dict[str, np.ndarray] = field(default_factory=dict)
    sq_update: dict[str, np.ndarray] = field(default_factory=dict)


def adadelta_step(params: dict[str, T.Tensor], grads: dict[str, np.ndarray], state: OptimizerState) -> None:
    """In-place AdaDelta update of ``params``."""
    rho, eps = state.rho, state.epsilon
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        eg = state.sq_grad.get(name)
        ed = state.sq_update.get(name)
        if eg is None:
            eg = state.sq_grad[name] = np.zeros_like(p.data)
            ed = state.sq_update[name] = np.zeros_like(p.data)
        eg *= rho
        eg += (1.0 - rho) * g * g
        delta = -np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
        ed *= rho
        ed += (1.0 - rho) * delta * delta
        p.data += state.learning_rate * delta


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def tokens_to_sentence(labels: Sequence[int], scheme: LabelScheme) -> int:
    """Binary sentence label implied by predicted token labels."""
    d = scheme.default_token
    return scheme.default_sentence if all(x == d for x in labels) else 1 - scheme.default_sentence


def evaluate(model: MHAL, sentences: Sequence[Sentence], beta: float = 1.0, sentence_from_tokens: bool = False) -> dict[str, float]:
    """Eval-mode metrics (percent) at both levels.

    Token figures appear only when every sentence carries token labels.
    ``sentence_from_tokens`` scores the sentence level from the predicted
    token labels (binary schemes), for models trained without a sentence loss.
    """
    scheme = model.scheme
    tok_pred, sent_pred = model.predict(list(sentences))
    out: dict[str, float] = {}
    if sentence_from_tokens:
        sent_pred = [tokens_to_sentence(t, scheme) for t in tok_pred]
    gold_sent = [s.label for s in sentences]
    if sentences and all(g is not None for g in gold_sent):
        out.update(sentence_metrics(sent_pred, gold_sent, scheme.default_sentence).as_dict())
    if sentences and all(s.has_token_labels for s in sentences):
        gold_tok = [s.token_labels for s in sentences]
        out.update(token_micro(tok_pred, gold_tok, scheme.default_token, beta).as_dict())
        out.update(span_f1(tok_pred, gold_tok, scheme.default_token).as_dict())
    return out


def stopping_metric_value(metrics: dict[str, float], choice: str) -> float:
    choice = canonical_stopping(choice)
    if choice in ("token", "mean") and "F1*" not in metrics:
        raise ValueError("token-level stopping metric needs token-labelled development data")
    if choice in ("sentence", "mean") and "S-F1*" not in metrics:
        raise ValueError("sentence-level stopping metric needs sentence-labelled development data")
    if choice == "sentence":
        return metrics["S-F1*"]
    if choice == "token":
        return metrics["F1*"]
    return (metrics["S-F1*"] + metrics["F1*"]) / 2.0


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: MHAL  # parameters of the best epoch
    best_epoch: int
    best_value: float
    epochs_run: int
    log: list[dict]


class Divergence(FloatingPointError):
    """Non-finite training loss."""


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffle order: a pure function of (seed, epoch)."""
    return np.random.default_rng([seed, 1, epoch]).permutation(n)


def build_model(train: Sequence[Sentence], scheme: LabelScheme, model_config: ModelConfig, config: TrainConfig, seed: int, embeddings: Callable | None = None) -> MHAL:
    """Fresh model; ``embeddings(vocab, rng)`` may return a pretrained word table."""
    vocab = build_vocabs(train, config.lm_vocab_cap)
    rng = np.random.default_rng([seed, 0])
    vectors = embeddings(vocab, rng) if embeddings is not None else None
    return MHAL(model_config, scheme, vocab, rng, vectors)


def train(
    train_set: Sequence[Sentence],
    dev_set: Sequence[Sentence],
    scheme: LabelScheme,
    model_config: ModelConfig,
    config: TrainConfig,
    weights: LossWeights,
    seed: int = 0,
    model: MHAL | None = None,
    embeddings: Callable | None = None,
    log_stream: TextIO | None = None,
) -> TrainResult:
    """Fit a model, keeping the parameters of the best development epoch.

    After each epoch the configured stopping metric is computed on
    ``dev_set``; training stops once ``patience`` epochs pass without an
    improvement larger than ``config.min_improvement``.
    """
    if not train_set:
        raise ValueError("empty training split")
    if not dev_set:
        raise ValueError("empty development split")
    if model is None:
        model = build_model(train_set, scheme, model_config, config, seed, embeddings)
    params = model.params
    names = list(params)
    state = OptimizerState(rho=config.decay, epsilon=config.optimizer_epsilon, learning_rate=config.learning_rate)
    records: list[dict] = []
    best_value, best_epoch, best_state = -math.inf, 0, model.state()
    stale = 0
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        order = epoch_order(len(train_set), seed, epoch)
        drop_rng = np.random.default_rng([seed, 2, epoch])
        sums: dict[str, float] = {}
        for start in range(0, len(order), config.batch_size):
            batch = make_batch([train_set[i] for i in order[start : start + config.batch_size]], model.vocab)
            with T.Tape() as tape:
                out = model.forward(batch, train=True, rng=drop_rng)
                losses = total_loss(model, out, batch, weights, config.smoothing)
            value = float(losses.total.data)
            if not math.isfinite(value):
                raise Divergence(f"non-finite loss at epoch {epoch}")
            grads = T.backward(losses.total, tape, [params[n] for n in names])
            adadelta_step(params, dict(zip(names, grads)), state)
            for k, v in losses.values().items():
                if v is not None:
                    sums[k] = sums.get(k, 0.0) + v
        metrics = evaluate(model, dev_set, config.beta)
        current = stopping_metric_value(metrics, config.stopping_metric)
        improved = current > best_value + config.min_improvement
        if improved:
            best_value, best_epoch, best_state = current, epoch, model.state()
            stale = 0
        else:
            stale += 1
        record = {"epoch": epoch, "loss": sums, "dev": metrics, "stopping": current, "improved": improved}
        records.append(record)
        if log_stream is not None:
            log_stream.write(json.dumps(record) + "\n")
            log_stream.flush()
        log.info("seed %d epoch %d loss %.4f dev %s %.2f", seed, epoch, sums.get("total", 0.0), config.stopping_metric, current)
        if stale >= config.patience:
            break
    model.load_state(best_state)
    return TrainResult(model, best_epoch, best_value, epoch, records)


def run_seeds(seeds: Sequence[int], *args, **kwargs) -> list[TrainResult]:
    """Independent runs, one per seed; arguments as for :func:`train`."""
    return [train(*args, seed=s, **kwargs) for s in seeds]


def mean_metrics(reports: Sequence[dict[str, float]]) -> dict[str, float]:
    keys = set.intersection(*(set(r) for r in reports)) if reports else set()
    return {k: float(np.mean([r[k] for r in reports])) for k in sorted(keys)}
