"""Deterministic multilingual corpora.

Two sources feed the trainer: synthetic languages (disjoint byte alphabets
over a shared sentence-structure generator, so cross-alphabet generalization
is measurable at desk scale) and ingested UTF-8 plain-text files. Every
document is labeled with a language that belongs to exactly one of the three
classes ``pretraining`` / ``adapting`` / ``other``.

Synthetic text for a language lives entirely inside its byte range
[alphabet_lo, alphabet_hi]: the last byte of the range acts as the word
separator, the rest spell words. Sentence structure (word indices, sentence
lengths) is drawn from a generator seeded independently of the language, so
two languages generated with the same seed and the same structural parameters
are word-for-word parallel — that is what the translation eval uses.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .rng import numpy_generator

LANGUAGE_CLASSES = ("pretraining", "adapting", "other")

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class SynthParams:
    """Surface + structure parameters of one synthetic language."""

    alphabet_lo: int  # first byte of the surface alphabet, inclusive
    alphabet_hi: int  # last byte, inclusive; doubles as the word separator
    n_word_types: int = 60
    mean_sentence_len: float = 8.0
    sentences_per_doc: int = 6
    zipf_alpha: float = 1.3
    seed_offset: int = 0

    def validate(self) -> list[str]:
        problems = []
        if not (0 <= self.alphabet_lo < self.alphabet_hi <= 0xFF):
            problems.append(
                f"alphabet range [{self.alphabet_lo}, {self.alphabet_hi}] must satisfy "
                "0 <= lo < hi <= 255"
            )
        if self.n_word_types < 2:
            problems.append("n_word_types must be >= 2")
        if self.mean_sentence_len < 1:
            problems.append("mean_sentence_len must be >= 1")
        if self.sentences_per_doc < 1:
            problems.append("sentences_per_doc must be >= 1")
        return problems


@dataclass(frozen=True)
class LanguageSpec:
    lang_id: str
    lang_class: str  # one of LANGUAGE_CLASSES
    synth: SynthParams | None = None
    path: str | None = None  # directory of UTF-8 text files
    n_docs: int = 32  # synthetic document count
    record_split: bool = False  # split ingested files on blank lines

    @property
    def is_synthetic(self) -> bool:
        return self.synth is not None

    def validate(self) -> list[str]:
        problems = []
        if self.lang_class not in LANGUAGE_CLASSES:
            problems.append(f"{self.lang_id}: unknown class {self.lang_class!r}")
        if (self.synth is None) == (self.path is None):
            problems.append(f"{self.lang_id}: exactly one of synth/path must be set")
        if self.synth is not None:
            problems.extend(f"{self.lang_id}: {p}" for p in self.synth.validate())
        if self.synth is not None and self.n_docs < 1:
            problems.append(f"{self.lang_id}: n_docs must be >= 1")
        return problems


@dataclass(frozen=True)
class Document:
    doc_id: str
    lang_id: str
    text: bytes
    source: str  # "synthetic" or the originating file path


@dataclass
class CorpusManifest:
    languages: list[LanguageSpec]
    split: float = 0.1
    seed: int = 0
    # filled by materialize(): lang_id -> list of Documents in stable order
    documents: dict[str, list[Document]] = field(default_factory=dict)

    def validate(self) -> None:
        problems = []
        seen = set()
        for spec in self.languages:
            if spec.lang_id in seen:
                problems.append(f"duplicate lang_id {spec.lang_id!r}")
            seen.add(spec.lang_id)
            problems.extend(spec.validate())
        if not (0.0 < self.split < 1.0):
            problems.append(f"split must be in (0, 1), got {self.split}")
        for lang_id in self.documents:
            if lang_id not in seen:
                problems.append(f"documents reference undeclared language {lang_id!r}")
        if problems:
            raise ConfigError("; ".join(problems))

    def spec_of(self, lang_id: str) -> LanguageSpec:
        for spec in self.languages:
            if spec.lang_id == lang_id:
                return spec
        raise ConfigError(f"unknown language {lang_id!r}")

    def languages_of_class(self, lang_class: str) -> list[LanguageSpec]:
        return [s for s in self.languages if s.lang_class == lang_class]

    def class_map(self) -> dict[str, str]:
        return {s.lang_id: s.lang_class for s in self.languages}


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------


def _word_inventory(params: SynthParams, seed: int) -> list[bytes]:
    """Per-language surface forms for word indices 0..n_word_types-1."""
    rng = numpy_generator(seed, "inventory", params.seed_offset)
    letters = list(range(params.alphabet_lo, params.alphabet_hi))  # hi is the separator
    words = []
    seen = set()
    while len(words) < params.n_word_types:
        length = int(rng.integers(2, 7))
        w = bytes(rng.choice(letters, size=length).tolist())
        if w not in seen:  # keep surface forms distinct
            seen.add(w)
            words.append(w)
    return words


def _zipf_probs(n: int, alpha: float) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    p = ranks**-alpha
    return p / p.sum()


def _doc_structure(params: SynthParams, seed: int, doc_index: int) -> list[np.ndarray]:
    """Word-index sentences for one document, independent of the surface alphabet."""
    rng = numpy_generator(seed, "structure", doc_index)
    probs = _zipf_probs(params.n_word_types, params.zipf_alpha)
    max_len = max(1, int(4 * params.mean_sentence_len))
    sentences = []
    for _ in range(params.sentences_per_doc):
        length = min(int(rng.geometric(1.0 / params.mean_sentence_len)), max_len)
        sentences.append(rng.choice(params.n_word_types, size=length, p=probs))
    return sentences


def _render_doc(sentences: list[np.ndarray], words: list[bytes], sep: bytes) -> bytes:
    rendered = [sep.join(words[i] for i in sent) for sent in sentences]
    return (sep + sep).join(rendered)


def generate_synthetic_corpus(spec: LanguageSpec, n_docs: int, seed: int) -> list[bytes]:
    """Draw n_docs documents for a synthetic language.

    Bit-identical for identical (spec, n_docs, seed). Languages sharing seed
    and structural parameters but differing in alphabet/seed_offset produce
    parallel documents over disjoint byte alphabets.
    """
    if spec.synth is None:
        raise ConfigError(f"{spec.lang_id}: synth_params required for synthetic generation")
    if n_docs < 1:
        raise ConfigError("n_docs must be >= 1")
    params = spec.synth
    words = _word_inventory(params, seed)
    sep = bytes([params.alphabet_hi])
    docs = []
    for i in range(n_docs):
        docs.append(_render_doc(_doc_structure(params, seed, i), words, sep))
    return docs


def make_parallel_pairs(
    src: LanguageSpec, tgt: LanguageSpec, n_pairs: int, seed: int
) -> list[tuple[bytes, bytes]]:
    """Structurally parallel single-sentence pairs for the translation eval.

    Both languages render the same word-index stream; pair i uses structure
    index offset so the pairs do not collide with training documents.
    """
    if src.synth is None or tgt.synth is None:
        raise ConfigError("parallel pairs require synthetic languages")
    if (src.synth.n_word_types, src.synth.zipf_alpha) != (
        tgt.synth.n_word_types,
        tgt.synth.zipf_alpha,
    ):
        raise ConfigError(
            f"{src.lang_id}/{tgt.lang_id}: parallel languages need matching "
            "n_word_types and zipf_alpha"
        )
    base = 1_000_000  # structure indices reserved for eval pairs
    src_words = _word_inventory(src.synth, seed)
    tgt_words = _word_inventory(tgt.synth, seed)
    src_sep = bytes([src.synth.alphabet_hi])
    tgt_sep = bytes([tgt.synth.alphabet_hi])
    pairs = []
    for i in range(n_pairs):
        rng = numpy_generator(seed, "structure", base + i)
        probs = _zipf_probs(src.synth.n_word_types, src.synth.zipf_alpha)
        length = min(int(rng.geometric(1.0 / src.synth.mean_sentence_len)), 24)
        idxs = rng.choice(src.synth.n_word_types, size=max(2, length), p=probs)
        pairs.append(
            (
                src_sep.join(src_words[j] for j in idxs),
                tgt_sep.join(tgt_words[j] for j in idxs),
            )
        )
    return pairs


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


def ingest_text_corpus(path: str | Path, lang_id: str, record_split: bool = False) -> list[Document]:
    """One Document per file under path, or per blank-line record when asked."""
    root = Path(path)
    if not root.exists():
        raise DataError(f"corpus path does not exist: {root}")
    files = sorted(p for p in root.rglob("*") if p.is_file())
    docs: list[Document] = []
    for f in files:
        raw = f.read_bytes()
        try:
            raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise DataError(f"invalid UTF-8 in {f}: {e}") from e
        rel = f.relative_to(root).as_posix()
        if record_split:
            records = [r for r in raw.replace(b"\r\n", b"\n").split(b"\n\n") if r.strip()]
            for k, rec in enumerate(records):
                docs.append(Document(f"{lang_id}:{rel}#{k}", lang_id, rec.strip(), str(f)))
        else:
            docs.append(Document(f"{lang_id}:{rel}", lang_id, raw, str(f)))
    return docs


def materialize(manifest: CorpusManifest) -> CorpusManifest:
    """Fill manifest.documents for every declared language (manifest order)."""
    manifest.validate()
    documents: dict[str, list[Document]] = {}
    for spec in manifest.languages:
        if spec.is_synthetic:
            texts = generate_synthetic_corpus(spec, spec.n_docs, manifest.seed)
            documents[spec.lang_id] = [
                Document(f"{spec.lang_id}:{i:05d}", spec.lang_id, t, "synthetic")
                for i, t in enumerate(texts)
            ]
        else:
            documents[spec.lang_id] = ingest_text_corpus(
                spec.path, spec.lang_id, spec.record_split
            )
    manifest.documents = documents
    return manifest


# ---------------------------------------------------------------------------
# Train/validation split and block packing
# ---------------------------------------------------------------------------


def _split_fraction(doc_id: str) -> float:
    digest = hashlib.sha256(doc_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


def split_documents(docs: list[Document], split: float) -> tuple[list[Document], list[Document]]:
    """Deterministic by-document split; a document's side never changes across runs."""
    train = [d for d in docs if _split_fraction(d.doc_id) >= split]
    val = [d for d in docs if _split_fraction(d.doc_id) < split]
    return train, val


@dataclass
class BlockStream:
    block_size: int
    blocks: np.ndarray  # [n_blocks, block_size] int64
    eos_id: int

    def __len__(self) -> int:
        return int(self.blocks.shape[0])

    @property
    def total_tokens(self) -> int:
        return int(self.blocks.size)


def pack_blocks(token_docs: list[list[int]] | list[np.ndarray], block_size: int, eos_id: int) -> BlockStream:
    """Concatenate tokenized documents (eos after each), chunk into full blocks.

    The trailing partial block is dropped, not padded.
    """
    if block_size < 2:
        raise ConfigError(f"block_size must be >= 2, got {block_size}")
    parts = []
    for doc in token_docs:
        parts.append(np.asarray(doc, dtype=np.int64))
        parts.append(np.asarray([eos_id], dtype=np.int64))
    flat = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
    n_blocks = len(flat) // block_size
    blocks = flat[: n_blocks * block_size].reshape(n_blocks, block_size).copy()
    return BlockStream(block_size=block_size, blocks=blocks, eos_id=eos_id)


# ---------------------------------------------------------------------------
# Manifest file format (JSON)
# ---------------------------------------------------------------------------


def save_manifest(manifest: CorpusManifest, path: str | Path) -> None:
    payload = {
        "version": MANIFEST_VERSION,
        "seed": manifest.seed,
        "split": manifest.split,
        "languages": [
            {
                "lang_id": s.lang_id,
                "class": s.lang_class,
                "n_docs": s.n_docs,
                "record_split": s.record_split,
                **({"synth": asdict(s.synth)} if s.synth else {}),
                **({"path": s.path} if s.path else {}),
            }
            for s in manifest.languages
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_manifest(path: str | Path) -> CorpusManifest:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"manifest not found: {p}")
    try:
        payload = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"manifest {p} is not valid JSON: {e}") from e
    if payload.get("version") != MANIFEST_VERSION:
        raise ConfigError(f"manifest {p}: unsupported version {payload.get('version')}")
    languages = []
    for entry in payload.get("languages", []):
        synth = SynthParams(**entry["synth"]) if "synth" in entry else None
        languages.append(
            LanguageSpec(
                lang_id=entry["lang_id"],
                lang_class=entry["class"],
                synth=synth,
                path=entry.get("path"),
                n_docs=entry.get("n_docs", 32),
                record_split=entry.get("record_split", False),
            )
        )
    manifest = CorpusManifest(
        languages=languages,
        split=payload.get("split", 0.1),
        seed=payload.get("seed", 0),
    )
    manifest.validate()
    return manifest
