"""Corpus ingestion, vocabularies, supervision masking, statistics, synthetic data.

File format (UTF-8), one token per line::

    #label=P
    Good<TAB>P
    acts<TAB>O

A blank line ends a sentence.  The optional ``#label=`` directive before the
first token gives an annotated sentence label; without it the label is derived
from the token labels (binary schemes only).
"""

from __future__ import annotations

import io
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

UNK = "<unk>"
DIRECTIVE = "#label="


class CorpusError(ValueError):
    """Malformed corpus or embedding input."""


@dataclass(frozen=True)
class LabelScheme:
    """Token and sentence tagsets tied together by a shared default label.

    ``mode`` is ``"identical"`` when both tagsets are the same list (one head
    per sentence label) and ``"binary"`` when the sentence level only says
    whether anything non-default occurs.
    """

    token_labels: tuple[str, ...]
    sentence_labels: tuple[str, ...]
    default: str = "O"

    def __post_init__(self):
        object.__setattr__(self, "token_labels", tuple(self.token_labels))
        object.__setattr__(self, "sentence_labels", tuple(self.sentence_labels))
        if len(set(self.token_labels)) != len(self.token_labels) or len(set(self.sentence_labels)) != len(self.sentence_labels):
            raise ValueError("label lists must not contain duplicates")
        if len(self.token_labels) < 2 or len(self.sentence_labels) < 2:
            raise ValueError("need at least two token labels and two sentence labels")
        if self.default not in self.token_labels or self.default not in self.sentence_labels:
            raise ValueError(f"default label {self.default!r} must appear in both tagsets")
        if self.token_labels != self.sentence_labels and len(self.sentence_labels) != 2:
            raise ValueError(
                f"unsupported scheme: H={len(self.token_labels)}, S={len(self.sentence_labels)}; "
                "tagsets must be identical or the sentence tagset binary"
            )

    @classmethod
    def binary(cls, token_labels: Sequence[str], default: str = "O", positive: str | None = None) -> "LabelScheme":
        return cls(tuple(token_labels), (default, positive or f"NOT_{default}"), default)

    @classmethod
    def identical(cls, labels: Sequence[str], default: str = "O") -> "LabelScheme":
        return cls(tuple(labels), tuple(labels), default)

    @property
    def mode(self) -> str:
        return "identical" if self.token_labels == self.sentence_labels else "binary"

    @property
    def H(self) -> int:
        return len(self.token_labels)

    @property
    def S(self) -> int:
        return len(self.sentence_labels)

    @property
    def default_token(self) -> int:
        return self.token_labels.index(self.default)

    @property
    def default_sentence(self) -> int:
        return self.sentence_labels.index(self.default)

    def token_id(self, name: str) -> int:
        return self.token_labels.index(name)

    def sentence_id(self, name: str) -> int:
        return self.sentence_labels.index(name)

    def to_dict(self) -> dict:
        return {"token_labels": list(self.token_labels), "sentence_labels": list(self.sentence_labels), "default": self.default}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelScheme":
        return cls(tuple(d["token_labels"]), tuple(d["sentence_labels"]), d["default"])


@dataclass
class Token:
    surface: str
    label: int | None
    supervised: bool = True


@dataclass
class Sentence:
    tokens: list[Token]
    label: int | None
    provenance: str = "annotated"  # or "derived"

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def surfaces(self) -> list[str]:
        return [t.surface for t in self.tokens]

    @property
    def token_labels(self) -> list[int | None]:
        return [t.label for t in self.tokens]

    @property
    def has_token_labels(self) -> bool:
        return all(t.label is not None for t in self.tokens)


def derive_sentence_label(tokens: Sequence[Token] | Sentence, scheme: LabelScheme) -> int:
    """Default sentence label iff every token carries the default token label."""
    if scheme.mode != "binary":
        raise ValueError("sentence labels can only be derived under a binary scheme")
    toks = tokens.tokens if isinstance(tokens, Sentence) else tokens
    if not toks:
        raise ValueError("cannot derive a label for an empty sentence")
    d = scheme.default_token
    if any(t.label is None for t in toks):
        raise ValueError("cannot derive a sentence label without token labels")
    if all(t.label == d for t in toks):
        return scheme.default_sentence
    return 1 - scheme.default_sentence


def _read_blocks(lines: Iterable[str], labels_optional: bool):
    tokens: list[tuple[str, str | None, int]] = []
    directive: tuple[str, int] | None = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if not line.strip():
            if tokens:
                yield tokens, directive
            elif directive is not None:
                raise CorpusError(f"line {directive[1]}: sentence label directive without tokens")
            tokens, directive = [], None
            continue
        if not tokens and line.startswith(DIRECTIVE) and "\t" not in line:
            directive = (line[len(DIRECTIVE) :].strip(), lineno)
            continue
        fields = line.split("\t")
        if len(fields) == 2 and fields[0]:
            tokens.append((fields[0], fields[1].strip(), lineno))
        elif len(fields) == 1 and labels_optional:
            tokens.append((fields[0], None, lineno))
        else:
            raise CorpusError(f"line {lineno}: expected 'surface<TAB>label', got {line!r}")
    if tokens:
        yield tokens, directive
    elif directive is not None:
        raise CorpusError(f"line {directive[1]}: sentence label directive without tokens")


def parse_conll(source: str | Path | TextIO, scheme: LabelScheme, labels_optional: bool = False) -> list[Sentence]:
    """Read a corpus file (or open text stream) into sentences of label ids.

    With ``labels_optional`` token lines may omit the label column and
    sentences may lack any label; those fields are ``None``.
    """
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            return parse_conll(fh, scheme, labels_optional)
    out = []
    for block, directive in _read_blocks(source, labels_optional):
        tokens = []
        for surface, label, lineno in block:
            if label is None:
                tokens.append(Token(surface, None))
                continue
            if label not in scheme.token_labels:
                raise CorpusError(f"line {lineno}: unknown token label {label!r}")
            tokens.append(Token(surface, scheme.token_id(label)))
        if directive is not None:
            name, lineno = directive
            if name not in scheme.sentence_labels:
                raise CorpusError(f"line {lineno}: unknown sentence label {name!r}")
            out.append(Sentence(tokens, scheme.sentence_id(name), "annotated"))
        elif scheme.mode == "binary" and all(t.label is not None for t in tokens):
            out.append(Sentence(tokens, derive_sentence_label(tokens, scheme), "derived"))
        elif labels_optional:
            out.append(Sentence(tokens, None, "annotated"))
        else:
            raise CorpusError(f"line {block[0][2]}: sentence needs a {DIRECTIVE} directive under an identical scheme")
    return out


def write_conll(sentences: Iterable[Sentence], scheme: LabelScheme, dest: str | Path | TextIO, always_label: bool = False) -> None:
    """Inverse of :func:`parse_conll`; derived labels are left implicit."""
    if isinstance(dest, (str, Path)):
        with open(dest, "w", encoding="utf-8") as fh:
            write_conll(sentences, scheme, fh, always_label)
        return
    for sent in sentences:
        if sent.label is not None and (always_label or sent.provenance == "annotated"):
            dest.write(f"{DIRECTIVE}{scheme.sentence_labels[sent.label]}\n")
        for tok in sent.tokens:
            if tok.label is None:
                dest.write(f"{tok.surface}\n")
            else:
                dest.write(f"{tok.surface}\t{scheme.token_labels[tok.label]}\n")
        dest.write("\n")


def format_conll(sentences: Iterable[Sentence], scheme: LabelScheme, always_label: bool = False) -> str:
    buf = io.StringIO()
    write_conll(sentences, scheme, buf, always_label)
    return buf.getvalue()


def scan_labels(paths: Iterable[str | Path]) -> tuple[list[str], list[str]]:
    """Token label strings and directive label strings, in first-seen order."""
    tok: dict[str, None] = {}
    sent: dict[str, None] = {}
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            for block, directive in _read_blocks(fh, labels_optional=False):
                for _, label, _ in block:
                    tok.setdefault(label)
                if directive is not None:
                    sent.setdefault(directive[0])
    return list(tok), list(sent)


def infer_scheme(paths: Iterable[str | Path], default: str = "O") -> LabelScheme:
    """Build a scheme from the labels occurring in corpus files.

    The default label is placed first and the rest sorted.  Files without
    directives give a binary scheme; directives naming exactly the token
    tagset give an identical scheme.
    """
    tok, sent = scan_labels(paths)
    labels = [default] + sorted(set(tok) - {default})
    if not sent:
        return LabelScheme.binary(labels, default)
    if set(sent) <= set(labels) and len(set(sent)) > 2 or set(sent) == set(labels):
        return LabelScheme.identical(labels, default)
    if len(set(sent) | {default}) == 2:
        other = sorted(set(sent) - {default})
        return LabelScheme.binary(labels, default, other[0] if other else None)
    raise CorpusError(f"cannot reconcile sentence labels {sorted(set(sent))} with token labels {labels}")


# ---------------------------------------------------------------------------
# vocabularies and embeddings
# ---------------------------------------------------------------------------


@dataclass
class Vocabulary:
    """Word, character and language-model vocabularies; id 0 is always ``<unk>``."""

    words: list[str]
    chars: list[str]
    lm_words: list[str]
    _word_index: dict[str, int] = field(init=False, repr=False)
    _char_index: dict[str, int] = field(init=False, repr=False)
    _lm_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        for table in (self.words, self.chars, self.lm_words):
            if not table or table[0] != UNK:
                raise ValueError("vocabulary tables must start with the OOV entry")
        self._word_index = {w: i for i, w in enumerate(self.words)}
        self._char_index = {c: i for i, c in enumerate(self.chars)}
        self._lm_index = {w: i for i, w in enumerate(self.lm_words)}

    def word_id(self, surface: str) -> int:
        i = self._word_index.get(surface)
        if i is None:
            i = self._word_index.get(surface.lower(), 0)
        return i

    def char_ids(self, surface: str) -> list[int]:
        if not surface:
            raise ValueError("empty surface string")
        return [self._char_index.get(ch, 0) for ch in surface]

    def lm_id(self, surface: str) -> int:
        return self._lm_index.get(surface, 0)

    def to_dict(self) -> dict:
        return {"words": self.words, "chars": self.chars, "lm_words": self.lm_words}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(list(d["words"]), list(d["chars"]), list(d["lm_words"]))


def build_vocabs(train: Sequence[Sentence], lm_vocab_cap: int = 7500) -> Vocabulary:
    """Vocabularies from the training split.

    The LM vocabulary keeps the ``lm_vocab_cap`` most frequent training words,
    ties broken by first occurrence.
    """
    if not train:
        raise ValueError("cannot build vocabularies from an empty training split")
    words: dict[str, None] = {}
    chars: dict[str, None] = {}
    freq: Counter[str] = Counter()
    for sent in train:
        for tok in sent.tokens:
            words.setdefault(tok.surface)
            for ch in tok.surface:
                chars.setdefault(ch)
            freq[tok.surface] += 1
    order = {w: i for i, w in enumerate(words)}
    ranked = sorted(words, key=lambda w: (-freq[w], order[w]))[:lm_vocab_cap]
    return Vocabulary([UNK] + list(words), [UNK] + list(chars), [UNK] + ranked)


def glorot_uniform(shape: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    fan_in, fan_out = (shape[-2], shape[-1]) if len(shape) >= 2 else (1, shape[0])
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=tuple(shape))


def load_embeddings(path: str | Path, vocab: Vocabulary, dim: int, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Word-embedding table for ``vocab`` seeded from a text embedding file.

    Rows for words found in the file (exact match first, then lowercase) are
    copied; the rest keep their Glorot initialisation.  Returns the table and
    the number of vocabulary rows covered.
    """
    table = glorot_uniform((len(vocab.words), dim), rng)
    exact: dict[str, int] = {}
    lowered: dict[str, list[int]] = {}
    for i, w in enumerate(vocab.words[1:], start=1):
        exact[w] = i
        lowered.setdefault(w.lower(), []).append(i)
    filled_exact: set[int] = set()
    filled_lower: set[int] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip().split()
            if not parts:
                continue
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue
            if len(parts) != dim + 1:
                raise CorpusError(f"line {lineno}: expected {dim} values, got {len(parts) - 1}")
            word = parts[0]
            if word in exact or word in lowered:
                vec = np.array(parts[1:], dtype=np.float64)
                if word in exact:
                    table[exact[word]] = vec
                    filled_exact.add(exact[word])
                for i in lowered.get(word, ()):
                    if i not in filled_exact:
                        table[i] = vec
                        filled_lower.add(i)
    return table, len(filled_exact | filled_lower)


# ---------------------------------------------------------------------------
# supervision masking
# ---------------------------------------------------------------------------


def mask_token_supervision(sentences: Sequence[Sentence], p: float, rng: np.random.Generator) -> list[Sentence]:
    """Keep token supervision for ``ceil(p * n)`` whole sentences chosen at random.

    Selection takes a prefix of one random permutation, so for a fixed seed
    the supervised set at a larger ``p`` contains the one at a smaller ``p``.
    Sentence labels are untouched.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"supervision proportion must be in [0, 1], got {p}")
    n = len(sentences)
    k = min(n, math.ceil(p * n - 1e-9))
    order = rng.permutation(n)
    chosen = np.zeros(n, dtype=bool)
    chosen[order[:k]] = True
    out = []
    for sent, flag in zip(sentences, chosen):
        toks = [replace(t, supervised=bool(flag) and t.label is not None) for t in sent.tokens]
        out.append(replace(sent, tokens=toks))
    return out


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


def entropy_bits(counts: Iterable[int]) -> float:
    c = np.array([x for x in counts if x > 0], dtype=np.float64)
    if c.size == 0:
        return 0.0
    p = c / c.sum()
    return float(-(p * np.log2(p)).sum()) + 0.0


@dataclass
class LevelStats:
    counts: dict[str, int]
    n_labels: int
    prop_default: float
    entropy: float
    non_default_entropy: float


@dataclass
class CorpusStats:
    sentence: LevelStats
    token: LevelStats


def _level(counts: dict[str, int], default: str) -> LevelStats:
    total = sum(counts.values())
    nd = [n for k, n in counts.items() if k != default]
    return LevelStats(
        counts=dict(counts),
        n_labels=sum(1 for n in counts.values() if n > 0),
        prop_default=counts.get(default, 0) / total if total else 0.0,
        entropy=entropy_bits(counts.values()),
        non_default_entropy=entropy_bits(nd),
    )


def label_counts(sentences: Sequence[Sentence], scheme: LabelScheme) -> tuple[dict[str, int], dict[str, int]]:
    sent = {name: 0 for name in scheme.sentence_labels}
    tok = {name: 0 for name in scheme.token_labels}
    for s in sentences:
        if s.label is not None:
            sent[scheme.sentence_labels[s.label]] += 1
        for t in s.tokens:
            if t.label is not None:
                tok[scheme.token_labels[t.label]] += 1
    return sent, tok


def corpus_stats(sentences: Sequence[Sentence], scheme: LabelScheme) -> CorpusStats:
    """Label-distribution summary per level (entropies in bits)."""
    if not sentences:
        raise ValueError("no sentences")
    sent, tok = label_counts(sentences, scheme)
    return CorpusStats(_level(sent, scheme.default), _level(tok, scheme.default))


def format_stats(stats: CorpusStats, splits: dict[str, Sequence[Sentence]] | None = None, scheme: LabelScheme | None = None) -> str:
    """Key-value text with one line per figure."""
    lines = []
    for level, s in (("sent", stats.sentence), ("tok", stats.token)):
        lines.append(f"labels.{level}\t{s.n_labels}")
        lines.append(f"prop_O.{level}\t{s.prop_default:.4f}")
        lines.append(f"full_entropy.{level}\t{s.entropy:.4f}")
        lines.append(f"non_O_entropy.{level}\t{s.non_default_entropy:.4f}")
    if splits and scheme is not None:
        for name, sents in splits.items():
            sc, tc = label_counts(sents, scheme)
            for label, n in sc.items():
                lines.append(f"sentences.{name}.{label}\t{n}")
            lines.append(f"sentences.{name}.Total\t{sum(sc.values())}")
            for label, n in tc.items():
                lines.append(f"tokens.{name}.{label}\t{n}")
            lines.append(f"tokens.{name}.Total\t{sum(tc.values())}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Recipe for a corpus of filler words sprinkled with labelled markers.

    ``markers`` maps surface forms to non-default token labels; when omitted,
    ``markers_per_label`` pseudo-words are made up for every non-default label.
    """

    token_labels: tuple[str, ...] = ("O", "A", "B", "C", "D")
    mode: str = "binary"
    default: str = "O"
    n_filler: int = 200
    markers: dict[str, str] | None = None
    markers_per_label: int = 6
    marker_prob: float = 0.1
    min_len: int = 4
    max_len: int = 14

    def scheme(self) -> LabelScheme:
        if self.mode == "binary":
            return LabelScheme.binary(self.token_labels, self.default)
        if self.mode == "identical":
            return LabelScheme.identical(self.token_labels, self.default)
        raise ValueError(f"unknown mode {self.mode!r}")


def _pseudo_words(n: int, rng: np.random.Generator, taken: set[str]) -> list[str]:
    letters = np.array(list("abcdefghijklmnopqrstuvwxyz"))
    out = []
    while len(out) < n:
        w = "".join(rng.choice(letters, size=int(rng.integers(3, 8))))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def synthetic_lexicon(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[list[str], dict[str, str]]:
    taken: set[str] = set()
    if spec.markers is not None:
        for surface, label in spec.markers.items():
            if label not in spec.token_labels or label == spec.default:
                raise ValueError(f"marker {surface!r} maps to invalid label {label!r}")
        taken.update(spec.markers)
        markers = dict(spec.markers)
    else:
        markers = {}
        for label in spec.token_labels:
            if label != spec.default:
                for w in _pseudo_words(spec.markers_per_label, rng, taken):
                    markers[w] = label
    filler = _pseudo_words(spec.n_filler, rng, taken)
    return filler, markers


def generate_synthetic(spec: SyntheticSpec, n: int, rng: np.random.Generator, lexicon=None) -> list[Sentence]:
    """``n`` sentences; pass the same ``lexicon`` to draw several splits."""
    scheme = spec.scheme()
    if not 0.0 <= spec.marker_prob <= 1.0 or spec.min_len < 1 or spec.max_len < spec.min_len:
        raise ValueError("inconsistent synthetic spec")
    filler, markers = lexicon if lexicon is not None else synthetic_lexicon(spec, rng)
    if not markers and spec.marker_prob > 0:
        raise ValueError("marker probability > 0 but no markers")
    marker_words = sorted(markers)
    d = scheme.default_token
    out = []
    for _ in range(n):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        tokens = []
        for is_marker in rng.random(length) < spec.marker_prob:
            if is_marker:
                w = marker_words[int(rng.integers(len(marker_words)))]
                tokens.append(Token(w, scheme.token_id(markers[w])))
            else:
                tokens.append(Token(filler[int(rng.integers(len(filler)))], d))
        if scheme.mode == "binary":
            out.append(Sentence(tokens, derive_sentence_label(tokens, scheme), "derived"))
        else:
            found = Counter(t.label for t in tokens if t.label != d)
            if found:
                best = max(found.values())
                label = min(k for k, v in found.items() if v == best)
            else:
                label = scheme.default_sentence
            out.append(Sentence(tokens, label, "annotated"))
    return out
