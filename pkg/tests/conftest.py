from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mhal.corpus import LabelScheme, Sentence, SyntheticSpec, Token, build_vocabs, generate_synthetic  # noqa: E402
from mhal.model import MHAL, ModelConfig  # noqa: E402

TINY = ModelConfig(
    word_emb_dim=6,
    char_emb_dim=3,
    word_rnn_dim=5,
    char_rnn_dim=4,
    word_hidden_dim=6,
    char_hidden_dim=3,
    attention_evidence_dim=4,
    sentence_hidden_dim=5,
    lm_hidden_dim=3,
    input_dropout=0.0,
    attention_dropout=0.0,
)


def sentence(words: str, labels, scheme: LabelScheme, label: str | None = None) -> Sentence:
    """Build a sentence from space-separated words and token label names."""
    toks = [Token(w, scheme.token_id(lab)) for w, lab in zip(words.split(), labels)]
    if label is None:
        from mhal.corpus import derive_sentence_label

        return Sentence(toks, derive_sentence_label(toks, scheme), "derived")
    return Sentence(toks, scheme.sentence_id(label), "annotated")


def toy_corpus(mode: str = "binary", n: int = 12, seed: int = 3, labels=("O", "A", "B")):
    spec = SyntheticSpec(token_labels=tuple(labels), mode=mode, marker_prob=0.3, min_len=1, max_len=6, n_filler=15, markers_per_label=2)
    sents = generate_synthetic(spec, n, np.random.default_rng(seed))
    return spec.scheme(), sents


def perturbed_model(scheme, sents, config: ModelConfig = TINY, seed: int = 0, scale: float = 0.3) -> MHAL:
    """Model whose parameters (biases included) are all nonzero."""
    model = MHAL(config, scheme, build_vocabs(sents, 20), np.random.default_rng(seed))
    noise = np.random.default_rng(seed + 100)
    for p in model.parameters():
        p.data += noise.normal(0.0, scale, p.shape)
    return model


@pytest.fixture
def binary_toy():
    scheme, sents = toy_corpus("binary")
    return scheme, sents, perturbed_model(scheme, sents)


@pytest.fixture
def identical_toy():
    scheme, sents = toy_corpus("identical")
    return scheme, sents, perturbed_model(scheme, sents)
