"""Byte-level BPE: training, encoding, and vocabulary merging.

ID layout is fixed: the four special tokens sit at IDs 0..3, the 256 single
bytes at 4..259, learned merge tokens from 260 upward. Any byte string is
encodable, so unseen scripts never fall out of vocabulary.

Merging a base tokenizer with a newly trained one keeps every base ID stable:
tokens of the new vocabulary absent from the base are appended in the new
tokenizer's order, and only merge rules that produced an appended token are
kept (base rules run first, so base-language segmentation is unchanged).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, IntegrityError

SPECIAL_TOKENS = ("<|endoftext|>", "<|pad|>", "<|im_start|>", "<|im_end|>")
EOS_ID = 0
PAD_ID = 1
IM_START_ID = 2
IM_END_ID = 3
N_SPECIAL = len(SPECIAL_TOKENS)
BYTE_OFFSET = N_SPECIAL  # byte b lives at ID BYTE_OFFSET + b
BASE_VOCAB_SIZE = N_SPECIAL + 256

TOKENIZER_FORMAT = "resetlm-tokenizer"
TOKENIZER_MAJOR = 1
TOKENIZER_MINOR = 0


@dataclass
class Vocabulary:
    entries: list[bytes]  # index == token ID
    id_of: dict[bytes, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.id_of:
            self.id_of = {tok: i for i, tok in enumerate(self.entries)}

    @property
    def size(self) -> int:
        return len(self.entries)


@dataclass
class TokenizerModel:
    vocab: Vocabulary
    merges: list[tuple[bytes, bytes]]
    special_tokens: tuple[str, ...] = SPECIAL_TOKENS

    @property
    def size(self) -> int:
        return self.vocab.size

    @property
    def eos_id(self) -> int:
        return EOS_ID

    @property
    def pad_id(self) -> int:
        return PAD_ID


def _base_entries() -> list[bytes]:
    return [t.encode("utf-8") for t in SPECIAL_TOKENS] + [bytes([b]) for b in range(256)]


def identity_tokenizer() -> TokenizerModel:
    """Byte-level tokenizer with no learned merges."""
    return TokenizerModel(vocab=Vocabulary(_base_entries()), merges=[])


def _byte_ids(text: bytes) -> np.ndarray:
    return np.frombuffer(text, dtype=np.uint8).astype(np.int64) + BYTE_OFFSET


def _apply_merge(arr: np.ndarray, left_id: int, right_id: int, new_id: int) -> np.ndarray:
    """Replace left-to-right non-overlapping (left,right) adjacencies with new_id."""
    if len(arr) < 2:
        return arr
    hits = np.nonzero((arr[:-1] == left_id) & (arr[1:] == right_id))[0]
    if len(hits) == 0:
        return arr
    keep = []
    last = -2
    for p in hits:  # overlaps only possible when left_id == right_id
        if p > last + 1:
            keep.append(p)
            last = p
    out = arr.copy()
    keep_arr = np.asarray(keep)
    out[keep_arr] = new_id
    mask = np.ones(len(arr), dtype=bool)
    mask[keep_arr + 1] = False
    return out[mask]


def _pair_counts(docs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    packed = [d[:-1] << 32 | d[1:] for d in docs if len(d) >= 2]
    if not packed:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.unique(np.concatenate(packed), return_counts=True)


def train_bpe(documents: list[bytes], target_size: int) -> TokenizerModel:
    """Greedy BPE over raw bytes, most frequent adjacent pair first.

    Stops at target_size or when no pair occurs at least twice. Frequency
    ties break lexicographically by (left bytes, right bytes).
    """
    if target_size < BASE_VOCAB_SIZE:
        raise ConfigError(
            f"target_size must be >= {BASE_VOCAB_SIZE} (bytes + specials), got {target_size}"
        )
    docs = [_byte_ids(d) for d in documents if len(d) > 0]
    if not docs:
        raise DataError("cannot train a tokenizer on an empty corpus")

    entries = _base_entries()
    id_of = {tok: i for i, tok in enumerate(entries)}
    merges: list[tuple[bytes, bytes]] = []
    banned: set[int] = set()  # packed pairs whose merged bytes collide with existing entries

    while len(entries) < target_size:
        pairs, counts = _pair_counts(docs)
        best_pair = None
        best_count = 1
        for packed, count in zip(pairs.tolist(), counts.tolist()):
            if count < best_count or packed in banned:
                continue
            left, right = entries[packed >> 32], entries[packed & 0xFFFFFFFF]
            key = (left, right)
            if count > best_count or (best_pair is not None and key < best_pair):
                best_pair, best_count = key, count
        if best_pair is None or best_count < 2:
            break
        merged_bytes = best_pair[0] + best_pair[1]
        left_id, right_id = id_of[best_pair[0]], id_of[best_pair[1]]
        if merged_bytes in id_of:  # e.g. corpus text spelling a special-token literal
            banned.add(left_id << 32 | right_id)
            continue
        new_id = len(entries)
        entries.append(merged_bytes)
        id_of[merged_bytes] = new_id
        merges.append(best_pair)
        docs = [_apply_merge(d, left_id, right_id, new_id) for d in docs]

    return TokenizerModel(vocab=Vocabulary(entries), merges=merges)


def encode(model: TokenizerModel, text: str | bytes) -> list[int]:
    """Byte split, then the learned merges applied in order."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    arr = _byte_ids(text)
    id_of = model.vocab.id_of
    for left, right in model.merges:
        arr = _apply_merge(arr, id_of[left], id_of[right], id_of[left + right])
    return arr.tolist()


def decode(model: TokenizerModel, ids: list[int]) -> bytes:
    entries = model.vocab.entries
    out = []
    for i in ids:
        if not 0 <= i < len(entries):
            raise DataError(f"token ID {i} out of range for vocabulary of size {len(entries)}")
        out.append(entries[i])
    return b"".join(out)


def decode_text(model: TokenizerModel, ids: list[int]) -> str:
    return decode(model, ids).decode("utf-8", errors="replace")


def merge_vocabularies(
    base: TokenizerModel, new: TokenizerModel
) -> tuple[TokenizerModel, set[int]]:
    """Append new's unseen tokens to base, keeping every base ID unchanged."""
    if base.special_tokens != new.special_tokens:
        raise ConfigError(
            f"special-token mismatch: {base.special_tokens} vs {new.special_tokens}"
        )
    entries = list(base.vocab.entries)
    id_of = dict(base.vocab.id_of)
    appended: set[bytes] = set()
    new_token_ids: set[int] = set()
    for tok in new.vocab.entries:
        if tok not in id_of:
            id_of[tok] = len(entries)
            new_token_ids.add(len(entries))
            entries.append(tok)
            appended.add(tok)
    merges = list(base.merges) + [m for m in new.merges if m[0] + m[1] in appended]
    merged = TokenizerModel(vocab=Vocabulary(entries, id_of), merges=merges)
    return merged, new_token_ids


# ---------------------------------------------------------------------------
# File format: versioned structured text, bit-exact round trip
# ---------------------------------------------------------------------------


def serialize(model: TokenizerModel) -> bytes:
    lines = [f"{TOKENIZER_FORMAT} {TOKENIZER_MAJOR} {TOKENIZER_MINOR}"]
    lines.append(f"specials {len(model.special_tokens)}")
    lines.extend(f"special {t}" for t in model.special_tokens)
    lines.append(f"merges {len(model.merges)}")
    lines.extend(f"merge {l.hex()} {r.hex()}" for l, r in model.merges)
    lines.append(f"vocab {model.vocab.size}")
    lines.extend(f"entry {tok.hex()}" for tok in model.vocab.entries)
    return ("\n".join(lines) + "\n").encode("ascii")


def deserialize(data: bytes) -> TokenizerModel:
    lines = data.decode("ascii").splitlines()
    if not lines:
        raise IntegrityError("empty tokenizer file")
    head = lines[0].split()
    if len(head) != 3 or head[0] != TOKENIZER_FORMAT:
        raise IntegrityError(f"not a tokenizer file: {lines[0]!r}")
    if int(head[1]) != TOKENIZER_MAJOR:
        raise IntegrityError(
            f"unsupported tokenizer format major version {head[1]} (expected {TOKENIZER_MAJOR})"
        )
    pos = 1

    def expect(tag: str) -> list[str]:
        nonlocal pos
        if pos >= len(lines):
            raise IntegrityError(f"truncated tokenizer file: missing {tag}")
        parts = lines[pos].split()
        if parts[0] != tag:
            raise IntegrityError(f"expected {tag!r} at line {pos + 1}, found {parts[0]!r}")
        pos += 1
        return parts

    n_special = int(expect("specials")[1])
    specials = tuple(expect("special")[1] for _ in range(n_special))
    n_merges = int(expect("merges")[1])
    merges = []
    for _ in range(n_merges):
        _, l, r = expect("merge")
        merges.append((bytes.fromhex(l), bytes.fromhex(r)))
    n_vocab = int(expect("vocab")[1])
    entries = [bytes.fromhex(expect("entry")[1]) for _ in range(n_vocab)]
    return TokenizerModel(vocab=Vocabulary(entries), merges=merges, special_tokens=specials)


def save_tokenizer(model: TokenizerModel, path: str | Path) -> None:
    Path(path).write_bytes(serialize(model))


def load_tokenizer(path: str | Path) -> TokenizerModel:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"tokenizer file not found: {p}")
    return deserialize(p.read_bytes())


def tokenizer_hash(model: TokenizerModel) -> str:
    import hashlib

    return hashlib.sha256(serialize(model)).hexdigest()
