"""Multi-head attention labeller: one attention head per token label.

Parameter shapes (B batch, N tokens, H heads/token labels, V* vocab sizes)::

    word_emb                 (V_word, word_emb_dim)
    char_emb                 (V_char, char_emb_dim)
    char_{fw,bw}_w_in        (char_emb_dim, 4 * char_rnn_dim)
    char_{fw,bw}_w_rec       (char_rnn_dim, 4 * char_rnn_dim)
    char_{fw,bw}_b           (4 * char_rnn_dim,)
    char_proj_w / _b         (2 * char_rnn_dim, char_hidden_dim) / (char_hidden_dim,)
    word_{fw,bw}_w_in        (word_emb_dim + char_hidden_dim, 4 * word_rnn_dim)
    word_{fw,bw}_w_rec       (word_rnn_dim, 4 * word_rnn_dim)
    word_{fw,bw}_b           (4 * word_rnn_dim,)
    z_w / z_b                (2 * word_rnn_dim, word_hidden_dim) / (word_hidden_dim,)
    {key,query,value}_w      (H, word_hidden_dim, attention_evidence_dim)
    {key,query,value}_b      (H, attention_evidence_dim)
    sent_w / sent_b          (attention_evidence_dim, sentence_hidden_dim) / (sentence_hidden_dim,)
    out_w / out_b            (sentence_hidden_dim, 1) / (1,)
    lm_{fw,bw}_proj_w / _b   (word_rnn_dim, lm_hidden_dim) / (lm_hidden_dim,)
    lm_{fw,bw}_out_w / _b    (lm_hidden_dim, V_lm) / (V_lm,)

Sentences in a batch are right-padded; every masked reduction ignores the
padding, so a batch gives the same per-sentence values as one-by-one passes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .corpus import LabelScheme, Sentence, Token, Vocabulary, glorot_uniform
from .tensor import Tensor

CHECKPOINT_MAGIC = b"MHAL-CHECKPOINT\n"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    word_emb_dim: int = 300
    char_emb_dim: int = 100
    word_rnn_dim: int = 300
    char_rnn_dim: int = 100
    word_hidden_dim: int = 50
    char_hidden_dim: int = 50
    attention_evidence_dim: int = 100
    sentence_hidden_dim: int = 200
    lm_hidden_dim: int = 50
    input_dropout: float = 0.5
    attention_dropout: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name.endswith("dropout"):
                if not 0.0 <= v < 1.0:
                    raise ValueError(f"{f.name} must be in [0, 1), got {v}")
            elif v < 1:
                raise ValueError(f"{f.name} must be >= 1, got {v}")


@dataclass
class Batch:
    word_ids: np.ndarray  # (B, N)
    char_ids: np.ndarray  # (B, N, L)
    char_mask: np.ndarray  # (B, N, L)
    mask: np.ndarray  # (B, N) 1.0 on real tokens
    lm_ids: np.ndarray  # (B, N)
    token_gold: np.ndarray  # (B, N), -1 where unknown
    supervised: np.ndarray  # (B, N) bool
    sentence_gold: np.ndarray  # (B,), -1 where unknown

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1).astype(int)

    def __len__(self) -> int:
        return self.word_ids.shape[0]


def make_batch(sentences: list[Sentence], vocab: Vocabulary) -> Batch:
    if not sentences:
        raise ValueError("empty batch")
    if any(len(s) == 0 for s in sentences):
        raise ValueError("empty sentence")
    B = len(sentences)
    N = max(len(s) for s in sentences)
    L = max(len(t.surface) for s in sentences for t in s.tokens)
    word_ids = np.zeros((B, N), dtype=np.int64)
    char_ids = np.zeros((B, N, L), dtype=np.int64)
    char_mask = np.zeros((B, N, L))
    mask = np.zeros((B, N))
    lm_ids = np.zeros((B, N), dtype=np.int64)
    token_gold = np.full((B, N), -1, dtype=np.int64)
    supervised = np.zeros((B, N), dtype=bool)
    sentence_gold = np.full(B, -1, dtype=np.int64)
    for b, sent in enumerate(sentences):
        if sent.label is not None:
            sentence_gold[b] = sent.label
        for i, tok in enumerate(sent.tokens):
            ids = vocab.char_ids(tok.surface)
            word_ids[b, i] = vocab.word_id(tok.surface)
            char_ids[b, i, : len(ids)] = ids
            char_mask[b, i, : len(ids)] = 1.0
            mask[b, i] = 1.0
            lm_ids[b, i] = vocab.lm_id(tok.surface)
            if tok.label is not None:
                token_gold[b, i] = tok.label
                supervised[b, i] = tok.supervised
    return Batch(word_ids, char_ids, char_mask, mask, lm_ids, token_gold, supervised, sentence_gold)


@dataclass
class ForwardOutputs:
    """Batched intermediate values; padded positions hold junk and must be masked."""

    mask: np.ndarray
    word_fw: Tensor  # (B, N, word_rnn_dim)
    word_bw: Tensor
    z: Tensor  # (B, N, word_hidden_dim)
    keys: Tensor  # (B, N, H, A)
    queries: Tensor
    values: Tensor
    pooled_queries: Tensor  # (B, H, A)
    scores: Tensor  # a_ih, (B, N, H)
    log_token_probs: Tensor
    token_probs: Tensor  # t~, (B, N, H)
    attention: Tensor  # alpha, (B, N, H)
    sentence_reprs: Tensor  # s_h, (B, H, A)
    head_scores: Tensor  # o_h, (B, H)
    sentence_scores: Tensor  # o~, (B, S)
    log_sentence_probs: Tensor
    sentence_probs: Tensor  # y~, (B, S)

    def token_predictions(self) -> list[list[int]]:
        pred = np.argmax(self.token_probs.data, axis=-1)
        return [pred[b, : int(n)].tolist() for b, n in enumerate(self.mask.sum(axis=1))]

    def sentence_predictions(self) -> list[int]:
        return np.argmax(self.sentence_probs.data, axis=-1).tolist()


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def project_heads(z: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``tanh(z W_h + b_h)`` for every head at once: (B, N, H, A)."""
    H, D, A = w.shape
    flat_w = T.reshape(T.transpose(w, (1, 0, 2)), (D, H * A))
    out = T.tanh(T.matmul(z, flat_w) + T.reshape(b, (H * A,)))
    return T.reshape(out, z.shape[:-1] + (H, A))


def pool_label_query(queries: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of the per-token queries over real tokens: (B, N, H, A) -> (B, H, A)."""
    m = mask[:, :, None, None]
    total = T.reduce_sum(queries * m, axis=1)
    return total / mask.sum(axis=1)[:, None, None]


def attention_scores(pooled: Tensor, keys: Tensor) -> Tensor:
    """Dot product of each head's pooled query with every key: (B, N, H)."""
    B, H, A = pooled.shape
    return T.reduce_sum(keys * T.reshape(pooled, (B, 1, H, A)), axis=-1)


def token_distributions(scores: Tensor) -> Tensor:
    """Softmax over heads, i.e. over token labels."""
    return T.softmax(scores, axis=-1)


def attention_weights(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Sigmoid scores normalised over the real tokens of each head."""
    sig = T.sigmoid(scores) * mask[:, :, None]
    return sig / T.reduce_sum(sig, axis=1, keepdims=True)


def sentence_head_score(alpha: Tensor, values: Tensor, sent_w, sent_b, out_w, out_b) -> tuple[Tensor, Tensor]:
    """Attention-weighted value sums and their scalar scores, per head."""
    B, N, H = alpha.shape
    reprs = T.reduce_sum(T.reshape(alpha, (B, N, H, 1)) * values, axis=1)
    hidden = T.tanh(T.matmul(reprs, sent_w) + sent_b)
    scores = T.matmul(hidden, out_w) + out_b
    return reprs, T.reshape(scores, (B, H))


def collect_sentence_scores(head_scores: Tensor, scheme: LabelScheme) -> Tensor:
    """Map H head scores onto the S sentence labels.

    Identical tagsets pass through; a binary sentence tagset pairs the default
    head's score with the best non-default head's score.
    """
    H = head_scores.shape[-1]
    if H != scheme.H:
        raise ValueError(f"got {H} head scores for a scheme with {scheme.H} token labels")
    if scheme.mode == "identical":
        return head_scores
    if scheme.mode != "binary" or scheme.S != 2:
        raise ValueError(f"unsupported scheme H={scheme.H}, S={scheme.S}")
    d = scheme.default_token
    default = T.take(head_scores, [d], axis=-1)
    others = [h for h in range(H) if h != d]
    best = T.reduce_max(T.take(head_scores, others, axis=-1), axis=-1, keepdims=True)
    parts = [default, best] if scheme.default_sentence == 0 else [best, default]
    return T.concat(parts, axis=-1)


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------


class MHAL:
    def __init__(self, config: ModelConfig, scheme: LabelScheme, vocab: Vocabulary, rng: np.random.Generator | None = None, word_vectors: np.ndarray | None = None):
        self.config = config
        self.scheme = scheme
        self.vocab = vocab
        self.params: dict[str, Tensor] = {}
        if rng is not None:
            self._init_params(rng, word_vectors)

    @property
    def H(self) -> int:
        return self.scheme.H

    def _init_params(self, rng: np.random.Generator, word_vectors: np.ndarray | None) -> None:
        c = self.config
        H, A = self.H, c.attention_evidence_dim
        word_in = c.word_emb_dim + c.char_hidden_dim
        shapes: dict[str, tuple[int, ...]] = {
            "word_emb": (len(self.vocab.words), c.word_emb_dim),
            "char_emb": (len(self.vocab.chars), c.char_emb_dim),
        }
        for d in ("fw", "bw"):
            shapes[f"char_{d}_w_in"] = (c.char_emb_dim, 4 * c.char_rnn_dim)
            shapes[f"char_{d}_w_rec"] = (c.char_rnn_dim, 4 * c.char_rnn_dim)
            shapes[f"char_{d}_b"] = (4 * c.char_rnn_dim,)
        shapes["char_proj_w"] = (2 * c.char_rnn_dim, c.char_hidden_dim)
        shapes["char_proj_b"] = (c.char_hidden_dim,)
        for d in ("fw", "bw"):
            shapes[f"word_{d}_w_in"] = (word_in, 4 * c.word_rnn_dim)
            shapes[f"word_{d}_w_rec"] = (c.word_rnn_dim, 4 * c.word_rnn_dim)
            shapes[f"word_{d}_b"] = (4 * c.word_rnn_dim,)
        shapes["z_w"] = (2 * c.word_rnn_dim, c.word_hidden_dim)
        shapes["z_b"] = (c.word_hidden_dim,)
        for kind in ("key", "query", "value"):
            shapes[f"{kind}_w"] = (H, c.word_hidden_dim, A)
            shapes[f"{kind}_b"] = (H, A)
        shapes["sent_w"] = (A, c.sentence_hidden_dim)
        shapes["sent_b"] = (c.sentence_hidden_dim,)
        shapes["out_w"] = (c.sentence_hidden_dim, 1)
        shapes["out_b"] = (1,)
        for d in ("fw", "bw"):
            shapes[f"lm_{d}_proj_w"] = (c.word_rnn_dim, c.lm_hidden_dim)
            shapes[f"lm_{d}_proj_b"] = (c.lm_hidden_dim,)
            shapes[f"lm_{d}_out_w"] = (c.lm_hidden_dim, len(self.vocab.lm_words))
            shapes[f"lm_{d}_out_b"] = (len(self.vocab.lm_words),)
        for name, shape in shapes.items():
            if name == "word_emb" and word_vectors is not None:
                if word_vectors.shape != shape:
                    raise ValueError(f"word vectors have shape {word_vectors.shape}, expected {shape}")
                data = np.array(word_vectors, dtype=np.float64)
            elif len(shape) == 1 or (name.endswith("_b") and len(shape) == 2):
                data = np.zeros(shape)
            else:
                data = glorot_uniform(shape, rng)
            self.params[name] = Tensor(data, requires_grad=True, name=name)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    # -- encoders -----------------------------------------------------------

    def encode_chars(self, char_ids: np.ndarray, char_mask: np.ndarray) -> Tensor:
        """(B, N, L) char ids -> (B, N, char_hidden_dim)."""
        p = self.params
        B, N, L = char_ids.shape
        emb = T.take(p["char_emb"], char_ids.reshape(B * N, L), axis=0)
        flat_mask = char_mask.reshape(B * N, L)
        fw = T.lstm(emb, p["char_fw_w_in"], p["char_fw_w_rec"], p["char_fw_b"], flat_mask)
        bw = T.lstm(emb, p["char_bw_w_in"], p["char_bw_w_rec"], p["char_bw_b"], flat_mask, reverse=True)
        last_fw = T.reshape(T.take(fw, [L - 1], axis=1), (B * N, -1))
        last_bw = T.reshape(T.take(bw, [0], axis=1), (B * N, -1))
        proj = T.tanh(T.matmul(T.concat([last_fw, last_bw], axis=-1), p["char_proj_w"]) + p["char_proj_b"])
        return T.reshape(proj, (B, N, self.config.char_hidden_dim))

    def embed(self, batch: Batch) -> Tensor:
        words = T.take(self.params["word_emb"], batch.word_ids, axis=0)
        return T.concat([words, self.encode_chars(batch.char_ids, batch.char_mask)], axis=-1)

    def embed_token(self, surface: str) -> Tensor:
        """Word row (or the OOV row) followed by the character encoding."""
        if not surface:
            raise ValueError("empty surface string")
        batch = make_batch([Sentence([Token(surface, None)], None)], self.vocab)
        return T.reshape(self.embed(batch), (-1,))

    def encode_sentence(self, x: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        """BiLSTM states and the compact token representations ``z``."""
        p = self.params
        fw = T.lstm(x, p["word_fw_w_in"], p["word_fw_w_rec"], p["word_fw_b"], mask)
        bw = T.lstm(x, p["word_bw_w_in"], p["word_bw_w_rec"], p["word_bw_b"], mask, reverse=True)
        z = T.tanh(T.matmul(T.concat([fw, bw], axis=-1), p["z_w"]) + p["z_b"])
        return fw, bw, z

    def head_projections(self, z: Tensor, h: int) -> tuple[Tensor, Tensor, Tensor]:
        """Keys, queries and values of head ``h`` for token representations ``z``."""
        if not 0 <= h < self.H:
            raise IndexError(f"head {h} out of range for {self.H} heads")
        p = self.params
        out = []
        for kind in ("key", "query", "value"):
            w = T.take(p[f"{kind}_w"], h, axis=0)
            b = T.take(p[f"{kind}_b"], h, axis=0)
            out.append(T.tanh(T.matmul(z, w) + b))
        return tuple(out)

    # -- full pass ------------------------------------------------------------

    def forward(self, batch: Batch, train: bool = False, rng: np.random.Generator | None = None) -> ForwardOutputs:
        if train and rng is None:
            raise ValueError("training-mode forward needs a random generator for dropout")
        c, p = self.config, self.params
        mask = batch.mask
        drop_rng = rng if train else None
        x = self.embed(batch)
        fw, bw, z = self.encode_sentence(x, mask)
        z = T.dropout(z, c.input_dropout, drop_rng)
        keys = project_heads(z, p["key_w"], p["key_b"])
        queries = project_heads(z, p["query_w"], p["query_b"])
        values = project_heads(z, p["value_w"], p["value_b"])
        pooled = pool_label_query(queries, mask)
        scores = attention_scores(pooled, keys)
        scores = T.dropout(scores, c.attention_dropout, drop_rng)
        log_t = T.log_softmax(scores, axis=-1)
        t = token_distributions(scores)
        alpha = attention_weights(scores, mask)
        reprs, head_scores = sentence_head_score(alpha, values, p["sent_w"], p["sent_b"], p["out_w"], p["out_b"])
        sent_scores = collect_sentence_scores(head_scores, self.scheme)
        return ForwardOutputs(
            mask=mask,
            word_fw=fw,
            word_bw=bw,
            z=z,
            keys=keys,
            queries=queries,
            values=values,
            pooled_queries=pooled,
            scores=scores,
            log_token_probs=log_t,
            token_probs=t,
            attention=alpha,
            sentence_reprs=reprs,
            head_scores=head_scores,
            sentence_scores=sent_scores,
            log_sentence_probs=T.log_softmax(sent_scores, axis=-1),
            sentence_probs=T.softmax(sent_scores, axis=-1),
        )

    def forward_sentence(self, sentence: Sentence, train: bool = False, rng: np.random.Generator | None = None) -> ForwardOutputs:
        if len(sentence) == 0:
            raise ValueError("empty sentence")
        return self.forward(make_batch([sentence], self.vocab), train, rng)

    def predict(self, sentences: list[Sentence], batch_size: int = 64) -> tuple[list[list[int]], list[int]]:
        """Eval-mode token and sentence predictions (argmax, lowest index on ties)."""
        tokens: list[list[int]] = []
        sents: list[int] = []
        with T.no_tape():
            for start in range(0, len(sentences), batch_size):
                out = self.forward(make_batch(sentences[start : start + batch_size], self.vocab))
                tokens.extend(out.token_predictions())
                sents.extend(out.sentence_predictions())
        return tokens, sents

    # -- persistence ----------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data[...] = v

    def save(self, path: str | Path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path: str | Path) -> "MHAL":
        return load_checkpoint(path)


def save_checkpoint(model: MHAL, path: str | Path) -> None:
    """Header line of JSON (config, scheme, vocab, tensor manifest), then raw little-endian float64."""
    manifest = [{"name": k, "shape": list(v.shape)} for k, v in model.params.items()]
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "scheme": model.scheme.to_dict(),
        "vocab": model.vocab.to_dict(),
        "tensors": manifest,
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, ensure_ascii=False).encode("utf-8") + b"\n")
        for v in model.params.values():
            fh.write(np.ascontiguousarray(v.data, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> MHAL:
    with open(path, "rb") as fh:
        if fh.readline() != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not an MHAL checkpoint")
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        model = MHAL(ModelConfig(**header["config"]), LabelScheme.from_dict(header["scheme"]), Vocabulary.from_dict(header["vocab"]))
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError(f"{path}: truncated tensor {entry['name']}")
            data = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
            model.params[entry["name"]] = Tensor(data, requires_grad=True, name=entry["name"])
    return model
