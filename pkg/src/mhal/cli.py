"""Command-line interface: ``mhal {train,eval,predict,inspect,stats,synth}``.

Exit codes: 0 success, 2 usage/configuration/input problems, 3 numeric
failure during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence, TextIO
from xml.sax.saxutils import escape

import numpy as np

from . import tensor as T
from .corpus import (
    CorpusError,
    LabelScheme,
    Sentence,
    SyntheticSpec,
    Token,
    corpus_stats,
    format_stats,
    generate_synthetic,
    infer_scheme,
    load_embeddings,
    mask_token_supervision,
    parse_conll,
    synthetic_lexicon,
    write_conll,
)
from .model import ModelConfig, load_checkpoint, make_batch
from .trainer import (
    Divergence,
    TrainConfig,
    canonical_stopping,
    default_stopping,
    evaluate,
    mean_metrics,
    preset_variant,
    train,
)

log = logging.getLogger("mhal")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    """Invalid run configuration."""


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Flat run configuration; keys follow the hyperparameter table names."""

    word_embedding_size: int = 300
    char_embedding_size: int = 100
    word_recurrent_size: int = 300
    char_recurrent_size: int = 100
    word_hidden_layer_size: int = 50
    char_hidden_layer_size: int = 50
    attention_evidence_size: int = 100
    hidden_layer_size: int = 200
    lm_hidden_layer_size: int = 50
    max_batch_size: int = 32
    epochs: int = 200
    stop_if_no_improvement: int = 7
    learning_rate: float = 1.0
    decay: float = 0.9
    adadelta_epsilon: float = 1e-6
    input_dropout: float = 0.5
    attention_dropout: float = 0.5
    lm_max_vocab_size: int = 7500
    smoothing_epsilon: float = 0.15
    stopping_criterion: str = "auto"
    eval_beta: float = 1.0
    default_label: str = "O"
    train: str = ""
    dev: str = ""
    test: str = ""
    embeddings: str = ""
    output_dir: str = "mhal-run"
    variant: str = "MHAL-joint"
    p: float = 1.0
    mask_seed: int = 0
    seeds: str = "0,1,2,3,4"

    PATH_KEYS = ("train", "dev", "test", "embeddings", "output_dir")

    def seed_list(self) -> list[int]:
        try:
            seeds = [int(s) for s in self.seeds.replace(" ", "").split(",") if s]
        except ValueError:
            raise ConfigError(f"seeds must be a comma-separated list of integers, got {self.seeds!r}") from None
        if not seeds:
            raise ConfigError("at least one seed is required")
        return seeds

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            word_emb_dim=self.word_embedding_size,
            char_emb_dim=self.char_embedding_size,
            word_rnn_dim=self.word_recurrent_size,
            char_rnn_dim=self.char_recurrent_size,
            word_hidden_dim=self.word_hidden_layer_size,
            char_hidden_dim=self.char_hidden_layer_size,
            attention_evidence_dim=self.attention_evidence_size,
            sentence_hidden_dim=self.hidden_layer_size,
            lm_hidden_dim=self.lm_hidden_layer_size,
            input_dropout=self.input_dropout,
            attention_dropout=self.attention_dropout,
        )

    def stopping(self) -> str:
        if self.stopping_criterion == "auto":
            return default_stopping(preset_variant(self.variant), self.p)
        return canonical_stopping(self.stopping_criterion)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            max_epochs=self.epochs,
            patience=self.stop_if_no_improvement,
            batch_size=self.max_batch_size,
            learning_rate=self.learning_rate,
            decay=self.decay,
            smoothing=self.smoothing_epsilon,
            stopping_metric=self.stopping(),
            lm_vocab_cap=self.lm_max_vocab_size,
            optimizer_epsilon=self.adadelta_epsilon,
            beta=self.eval_beta,
        )

    def validate(self) -> None:
        """Raise :class:`ConfigError` on any inconsistent value."""
        try:
            preset_variant(self.variant)
            if not 0.0 <= self.p <= 1.0:
                raise ValueError(f"p must be in [0, 1], got {self.p}")
            if self.eval_beta <= 0:
                raise ValueError("eval_beta must be positive")
            self.seed_list()
            self.model_config()
            self.train_config()
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_text(self) -> str:
        lines = ["# effective configuration"]
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in self.PATH_KEYS and value:
                value = Path(value).resolve()
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError
            return value
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {raw!r}") from None
    return raw


def parse_config_text(text: str, base: RunConfig | None = None, origin: str = "<config>", root: Path | None = None) -> RunConfig:
    """Apply ``key = value`` lines to ``base``; ``#`` starts a comment.

    Relative paths are resolved against ``root`` when given.
    """
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        if key in RunConfig.PATH_KEYS and value and root is not None and not Path(value).is_absolute():
            value = str(root / value)
        values[key] = _convert(key, value)
    return replace(base or RunConfig(), **values)


def load_config(path: str | None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        cfg = parse_config_text(text, cfg, str(p), p.parent)
    if overrides:
        body = "\n".join(f"{k} = {v}" for k, v in overrides.items())
        cfg = parse_config_text(body, cfg, "<command line>")
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _require_file(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"no {what} file configured")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} file not found: {path}")
    return p


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_train(cfg: RunConfig, out: TextIO | None = None) -> int:
    out = out or sys.stdout
    train_path = _require_file(cfg.train, "train")
    dev_path = _require_file(cfg.dev, "dev")
    test_path = _require_file(cfg.test, "test") if cfg.test else None
    emb_path = _require_file(cfg.embeddings, "embeddings") if cfg.embeddings else None
    files = [p for p in (train_path, dev_path, test_path) if p is not None]
    scheme = infer_scheme(files, cfg.default_label)
    train_set = parse_conll(train_path, scheme)
    dev_set = parse_conll(dev_path, scheme)
    test_set = parse_conll(test_path, scheme) if test_path else []
    weights = preset_variant(cfg.variant)
    train_set = mask_token_supervision(train_set, cfg.p, np.random.default_rng(cfg.mask_seed))
    tc = cfg.train_config()
    mc = cfg.model_config()
    from_tokens = weights.sent == 0 and scheme.mode == "binary"

    embeddings = None
    if emb_path is not None:

        def embeddings(vocab, rng):
            table, covered = load_embeddings(emb_path, vocab, mc.word_emb_dim, rng)
            log.info("pretrained vectors cover %d of %d words", covered, len(vocab.words))
            return table

    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective.cfg").write_text(cfg.to_text(), encoding="utf-8")

    runs = []
    for seed in cfg.seed_list():
        seed_dir = out_dir / f"seed_{seed}"
        seed_dir.mkdir(exist_ok=True)
        with open(seed_dir / "log.jsonl", "w", encoding="utf-8") as log_fh:
            result = train(train_set, dev_set, scheme, mc, tc, weights, seed=seed, embeddings=embeddings, log_stream=log_fh)
        result.model.save(seed_dir / "model.ckpt")
        record = {
            "seed": seed,
            "best_epoch": result.best_epoch,
            "epochs_run": result.epochs_run,
            "best_dev_stopping": result.best_value,
            "dev": evaluate(result.model, dev_set, tc.beta, from_tokens),
        }
        if test_set:
            record["test"] = evaluate(result.model, test_set, tc.beta, from_tokens)
        _write_json(seed_dir / "metrics.json", record)
        runs.append(record)
        out.write(f"seed {seed}: best epoch {result.best_epoch}, dev {tc.stopping_metric} {result.best_value:.2f}\n")

    summary = {
        "variant": cfg.variant,
        "weights": asdict(weights),
        "p": cfg.p,
        "supervised_sentences": sum(1 for sent in train_set if any(t.supervised for t in sent.tokens)),
        "train_sentences": len(train_set),
        "stopping": tc.stopping_metric,
        "scheme": scheme.to_dict(),
        "seeds": [r["seed"] for r in runs],
        "dev": mean_metrics([r["dev"] for r in runs]),
        "per_seed": runs,
    }
    if test_set:
        summary["test"] = mean_metrics([r["test"] for r in runs])
    _write_json(out_dir / "summary.json", summary)
    for split in ("dev", "test"):
        if split in summary:
            shown = ", ".join(f"{k} {v:.2f}" for k, v in summary[split].items() if k in ("F1*", "S-F1", "S-F1*", "span-F1", f"F{tc.beta:g}*"))
            out.write(f"mean {split}: {shown}\n")
    return EXIT_OK


def _load_model(path: str):
    _require_file(path, "checkpoint")
    try:
        return load_checkpoint(path)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from None


def _parse_for_model(path: str, scheme: LabelScheme, labels_optional: bool) -> list[Sentence]:
    _require_file(path, "data")
    try:
        return parse_conll(path, scheme, labels_optional)
    except CorpusError as exc:
        raise ConfigError(f"{path}: does not match the checkpoint's label scheme ({exc})") from None


def cmd_eval(checkpoint: str, data: str, beta: float = 1.0, sentence_from_tokens: bool = False, json_path: str | None = None, out: TextIO | None = None) -> int:
    out = out or sys.stdout
    model = _load_model(checkpoint)
    sentences = _parse_for_model(data, model.scheme, False)
    metrics = evaluate(model, sentences, beta, sentence_from_tokens)
    for key in sorted(metrics):
        out.write(f"{key}\t{metrics[key]:.4f}\n")
    if json_path:
        _write_json(Path(json_path), metrics)
    return EXIT_OK


def cmd_predict(checkpoint: str, data: str, output: str | None = None, out: TextIO | None = None) -> int:
    out = out or sys.stdout
    model = _load_model(checkpoint)
    sentences = _parse_for_model(data, model.scheme, True)
    tok_pred, sent_pred = model.predict(sentences)
    labelled = [
        Sentence([Token(t.surface, int(lab)) for t, lab in zip(s.tokens, tags)], int(sl), "annotated")
        for s, tags, sl in zip(sentences, tok_pred, sent_pred)
    ]
    if output:
        write_conll(labelled, model.scheme, output, always_label=True)
    else:
        write_conll(labelled, model.scheme, out, always_label=True)
    return EXIT_OK


def inspect_rows(model, sentences: Sequence[Sentence]) -> list[list[str]]:
    """One row per token: sentence, position, surface, gold, predicted, then t~ per head."""
    scheme = model.scheme
    rows = []
    with T.no_tape():
        for start in range(0, len(sentences), 64):
            chunk = list(sentences[start : start + 64])
            probs = model.forward(make_batch(chunk, model.vocab)).token_probs.data
            for b, sent in enumerate(chunk):
                for i, tok in enumerate(sent.tokens):
                    dist = probs[b, i]
                    gold = "" if tok.label is None else scheme.token_labels[tok.label]
                    pred = scheme.token_labels[int(np.argmax(dist))]
                    rows.append([str(start + b), str(i), tok.surface, gold, pred] + [f"{x:.6f}" for x in dist])
    return rows


def heatmap_svg(surfaces: Sequence[str], labels: Sequence[str], dist: np.ndarray, cell: int = 22) -> str:
    """Grayscale grid, token rows by head columns; darker means more mass."""
    left = 8 + 8 * max((len(s) for s in surfaces), default=1)
    top = 8 + 8 * max((len(x) for x in labels), default=1)
    width, height = left + cell * len(labels) + 4, top + cell * len(surfaces) + 4
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="12">']
    for h, name in enumerate(labels):
        x = left + h * cell + cell // 2
        parts.append(f'<text x="{x}" y="{top - 4}" text-anchor="middle">{escape(name)}</text>')
    for i, surface in enumerate(surfaces):
        y = top + i * cell
        parts.append(f'<text x="{left - 4}" y="{y + cell - 6}" text-anchor="end">{escape(surface)}</text>')
        for h in range(len(labels)):
            level = int(round(255 * (1.0 - float(dist[i, h]))))
            parts.append(f'<rect x="{left + h * cell}" y="{y}" width="{cell}" height="{cell}" fill="rgb({level},{level},{level})" stroke="#999"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_inspect(checkpoint: str, data: str, output: str | None = None, svg_dir: str | None = None, out: TextIO | None = None) -> int:
    out = out or sys.stdout
    model = _load_model(checkpoint)
    sentences = _parse_for_model(data, model.scheme, True)
    rows = inspect_rows(model, sentences)
    header = ["sentence", "position", "surface", "gold", "predicted"] + [f"p_{x}" for x in model.scheme.token_labels]
    text = "\t".join(header) + "\n" + "".join("\t".join(r) + "\n" for r in rows)
    if output:
        Path(output).write_text(text, encoding="utf-8")
    else:
        out.write(text)
    if svg_dir:
        target = Path(svg_dir)
        target.mkdir(parents=True, exist_ok=True)
        n_heads = model.scheme.H
        by_sentence: dict[int, list[list[str]]] = {}
        for r in rows:
            by_sentence.setdefault(int(r[0]), []).append(r)
        for idx, sent_rows in by_sentence.items():
            dist = np.array([[float(x) for x in r[5 : 5 + n_heads]] for r in sent_rows])
            svg = heatmap_svg([r[2] for r in sent_rows], model.scheme.token_labels, dist)
            (target / f"sentence_{idx:05d}.svg").write_text(svg, encoding="utf-8")
    return EXIT_OK


def cmd_stats(paths: Sequence[str], default: str = "O", names: Sequence[str] | None = None, out: TextIO | None = None) -> int:
    """Statistics of the first file, with per-file label counts for all of them."""
    out = out or sys.stdout
    files = [_require_file(p, "data") for p in paths]
    if names is not None and len(names) != len(files):
        raise ConfigError("--names needs one name per file")
    scheme = infer_scheme(files, default)
    corpora = [parse_conll(p, scheme) for p in files]
    stats = corpus_stats(corpora[0], scheme)
    split_names = list(names) if names is not None else (["train", "dev", "test"][: len(files)] if len(files) <= 3 else [f.stem for f in files])
    out.write(format_stats(stats, dict(zip(split_names, corpora)), scheme))
    return EXIT_OK


def cmd_synth(out_dir: str, seed: int = 0, sizes: Sequence[int] = (2000, 500, 500), spec: SyntheticSpec | None = None, out: TextIO | None = None) -> int:
    """Write train/dev/test files of a seeded synthetic marker corpus."""
    out = out or sys.stdout
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(seed)
    lexicon = synthetic_lexicon(spec, rng)
    scheme = spec.scheme()
    target = Path(out_dir)
    target.mkdir(parents=True, exist_ok=True)
    for name, n in zip(("train", "dev", "test"), sizes):
        write_conll(generate_synthetic(spec, n, rng, lexicon), scheme, target / f"{name}.tsv")
        out.write(f"wrote {target / f'{name}.tsv'} ({n} sentences)\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mhal", description="Multi-head attention labeller for joint sentence and token labelling.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model per seed")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--variant", help="loss-weight preset, e.g. MHAL-joint+")
    p.add_argument("--p", type=str, help="proportion of training sentences keeping token labels")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--stopping", help="sentence, token, mean or auto")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any configuration key")

    p = sub.add_parser("eval", help="score a checkpoint on a labelled file")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--beta", type=float, default=1.0, help="beta for the extra F-beta columns")
    p.add_argument("--sentence-from-tokens", action="store_true", help="derive sentence predictions from token predictions")
    p.add_argument("--json", help="also write the metrics to this file")

    p = sub.add_parser("predict", help="label a file")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--output", help="write here instead of stdout")

    p = sub.add_parser("inspect", help="dump normalised attention evidence per token")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--output", help="TSV destination instead of stdout")
    p.add_argument("--svg", help="directory for one SVG heatmap per sentence")

    p = sub.add_parser("stats", help="label statistics of corpus files")
    p.add_argument("files", nargs="+", help="first file is summarised; all get per-split counts")
    p.add_argument("--default", default="O", help="default label")
    p.add_argument("--names", help="comma-separated split names")

    p = sub.add_parser("synth", help="write a synthetic marker corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sizes", default="2000,500,500", help="train,dev,test sentence counts")
    p.add_argument("--marker-prob", type=float, default=0.1)
    return parser


def _train_overrides(args: argparse.Namespace) -> dict[str, str]:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    for flag, key in (("variant", "variant"), ("p", "p"), ("seeds", "seeds"), ("stopping", "stopping_criterion"), ("out", "output_dir")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    return overrides


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if args.command == "train":
            return cmd_train(load_config(args.config, _train_overrides(args)))
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.data, args.beta, args.sentence_from_tokens, args.json)
        if args.command == "predict":
            return cmd_predict(args.checkpoint, args.data, args.output)
        if args.command == "inspect":
            return cmd_inspect(args.checkpoint, args.data, args.output, args.svg)
        if args.command == "stats":
            names = args.names.split(",") if args.names else None
            return cmd_stats(args.files, args.default, names)
        if args.command == "synth":
            try:
                sizes = [int(x) for x in args.sizes.split(",")]
            except ValueError:
                raise ConfigError(f"--sizes expects integers, got {args.sizes!r}") from None
            if len(sizes) != 3 or min(sizes) < 1:
                raise ConfigError("--sizes needs three positive counts")
            return cmd_synth(args.out, args.seed, sizes, SyntheticSpec(marker_prob=args.marker_prob))
    except (ConfigError, CorpusError) as exc:
        print(f"mhal: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Divergence as exc:
        print(f"mhal: training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    parser.error(f"unknown command {args.command!r}")
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
