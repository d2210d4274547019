import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resetlm.errors import ConfigError, DataError, IntegrityError
from resetlm.tokenizer import (
    BASE_VOCAB_SIZE,
    SPECIAL_TOKENS,
    TokenizerModel,
    Vocabulary,
    decode,
    deserialize,
    encode,
    identity_tokenizer,
    load_tokenizer,
    merge_vocabularies,
    save_tokenizer,
    serialize,
    tokenizer_hash,
    train_bpe,
)


def brute_force_pair_counts(docs: list[bytes]) -> Counter:
    """Independent oracle: count every adjacent byte pair, overlaps included."""
    counts = Counter()
    for d in docs:
        for i in range(len(d) - 1):
            counts[(d[i : i + 1], d[i + 1 : i + 2])] += 1
    return counts


class TestTrainBPE:
    def test_first_merge_is_most_frequent_pair(self):
        corpus = [b"aaabdaaabac"]
        oracle = brute_force_pair_counts(corpus)
        assert oracle[(b"a", b"a")] == 4
        assert all(c < 4 for pair, c in oracle.items() if pair != (b"a", b"a"))
        tok = train_bpe(corpus, BASE_VOCAB_SIZE + 1)
        assert tok.merges == [(b"a", b"a")]

    def test_target_at_base_size_learns_nothing(self):
        tok = train_bpe([b"abcabc"], BASE_VOCAB_SIZE)
        assert tok.merges == []
        assert tok.size == BASE_VOCAB_SIZE

    def test_repeated_word_learns_its_pair(self):
        corpus = [b"ab ab ab"]
        oracle = brute_force_pair_counts(corpus)
        assert max(oracle.values()) == oracle[(b"a", b"b")]
        tok = train_bpe(corpus, BASE_VOCAB_SIZE + 4)
        assert (b"a", b"b") in tok.merges

    def test_stops_when_no_pair_repeats(self):
        tok = train_bpe([b"abcdefg"], BASE_VOCAB_SIZE + 50)
        assert tok.merges == []

    def test_deterministic(self, synth_docs):
        a = train_bpe(synth_docs, 300)
        b = train_bpe(synth_docs, 300)
        assert a.merges == b.merges
        assert a.vocab.entries == b.vocab.entries

    def test_tie_break_lexicographic(self):
        # "xy" and "ab" both occur exactly twice; lexicographically (a,b) < (x,y)
        tok = train_bpe([b"xy.xy,ab-ab"], BASE_VOCAB_SIZE + 1)
        assert tok.merges == [(b"a", b"b")]

    def test_empty_corpus(self):
        with pytest.raises(DataError):
            train_bpe([], 300)
        with pytest.raises(DataError):
            train_bpe([b""], 300)

    def test_target_too_small(self):
        with pytest.raises(ConfigError):
            train_bpe([b"ab"], 100)

    def test_byte_tokens_always_present(self, small_tokenizer):
        for b in range(256):
            assert bytes([b]) in small_tokenizer.vocab.id_of

    def test_ids_are_dense_and_unique(self, small_tokenizer):
        entries = small_tokenizer.vocab.entries
        assert len(set(entries)) == len(entries)
        assert small_tokenizer.vocab.id_of[entries[-1]] == len(entries) - 1


class TestEncodeDecode:
    def test_identity_encode(self):
        tok = identity_tokenizer()
        ids = encode(tok, "ab")
        assert ids == [tok.vocab.id_of[b"a"], tok.vocab.id_of[b"b"]]

    def test_encode_applies_merge(self):
        tok = train_bpe([b"abab"], BASE_VOCAB_SIZE + 1)
        assert tok.merges == [(b"a", b"b")]
        # oracle: manual merge application over the byte split
        assert encode(tok, "ab") == [tok.vocab.id_of[b"ab"]]
        assert decode(tok, encode(tok, "ab")) == b"ab"

    def test_encode_empty(self, small_tokenizer):
        assert encode(small_tokenizer, "") == []

    def test_decode_empty(self, small_tokenizer):
        assert decode(small_tokenizer, []) == b""

    def test_unicode_round_trip(self, small_tokenizer):
        s = "héllo 世界"
        assert decode(small_tokenizer, encode(small_tokenizer, s)) == s.encode("utf-8")

    def test_thousand_random_strings_round_trip(self, small_tokenizer):
        rng = random.Random(0)
        for _ in range(1000):
            n = rng.randrange(0, 40)
            s = "".join(
                chr(cp)
                for cp in (rng.randrange(1, 0x10000) for _ in range(n))
                if not 0xD800 <= cp <= 0xDFFF
            )
            assert decode(small_tokenizer, encode(small_tokenizer, s)) == s.encode("utf-8")

    @given(st.text(max_size=60))
    @settings(max_examples=80, deadline=None)
    def test_round_trip_property(self, s):
        tok = identity_tokenizer()
        assert decode(tok, encode(tok, s)) == s.encode("utf-8")

    def test_every_id_in_range(self, small_tokenizer, synth_docs):
        ids = encode(small_tokenizer, synth_docs[0])
        assert all(0 <= i < small_tokenizer.size for i in ids)

    def test_decode_out_of_range(self, small_tokenizer):
        with pytest.raises(DataError):
            decode(small_tokenizer, [small_tokenizer.size])


def make_tok(extra_entries, merges):
    base = identity_tokenizer()
    entries = list(base.vocab.entries) + extra_entries
    return TokenizerModel(vocab=Vocabulary(entries), merges=merges)


class TestMergeVocabularies:
    def test_paper_sizes(self):
        # 32000-token base + 16000 disjoint non-byte tokens -> 48000 merged
        base_extra = [b"B%05d" % i for i in range(32000 - BASE_VOCAB_SIZE)]
        new_extra = [b"N%05d" % i for i in range(16000 - BASE_VOCAB_SIZE)]
        base = make_tok(base_extra, [])
        new = make_tok(new_extra, [])
        merged, new_ids = merge_vocabularies(base, new)
        assert merged.size == 32000 + len(new_extra)
        assert len(new_ids) == len(new_extra)

    def test_idempotent(self, small_tokenizer):
        merged, new_ids = merge_vocabularies(small_tokenizer, small_tokenizer)
        assert merged.vocab.entries == small_tokenizer.vocab.entries
        assert merged.merges == small_tokenizer.merges
        assert new_ids == set()

    def test_union_with_order_bookkeeping(self):
        base = make_tok([b"ab", b"bc"], [(b"a", b"b"), (b"b", b"c")])
        new = make_tok([b"bc", b"cd"], [(b"b", b"c"), (b"c", b"d")])
        merged, new_ids = merge_vocabularies(base, new)
        assert merged.vocab.entries == base.vocab.entries + [b"cd"]
        assert new_ids == {merged.vocab.id_of[b"cd"]}
        # only the merge that produced the appended token is kept
        assert merged.merges == base.merges + [(b"c", b"d")]

    def test_base_id_stability(self, small_tokenizer, synth_docs):
        new = train_bpe([d[::-1] for d in synth_docs], 320)
        merged, _ = merge_vocabularies(small_tokenizer, new)
        for tok_bytes, tok_id in small_tokenizer.vocab.id_of.items():
            assert merged.vocab.id_of[tok_bytes] == tok_id

    def test_monotone_coverage(self, small_tokenizer, synth_docs):
        new = train_bpe(synth_docs, 340)
        merged, _ = merge_vocabularies(small_tokenizer, new)
        samples = [synth_docs[0], synth_docs[-1], b"zzz", b"", b"a" * 50]
        for s in samples:
            assert len(encode(merged, s)) <= len(encode(small_tokenizer, s))

    def test_merged_size_bound(self, small_tokenizer):
        new = train_bpe([b"qrsqrsqrs"], BASE_VOCAB_SIZE + 10)
        merged, _ = merge_vocabularies(small_tokenizer, new)
        assert merged.size <= small_tokenizer.size + new.size

    def test_special_token_mismatch(self, small_tokenizer):
        other = TokenizerModel(
            vocab=Vocabulary(list(small_tokenizer.vocab.entries)),
            merges=[],
            special_tokens=("<eos>",),
        )
        with pytest.raises(ConfigError):
            merge_vocabularies(small_tokenizer, other)


class TestFileFormat:
    def test_bit_exact_round_trip(self, small_tokenizer, tmp_path):
        p = tmp_path / "tok.txt"
        save_tokenizer(small_tokenizer, p)
        first = p.read_bytes()
        reloaded = load_tokenizer(p)
        assert serialize(reloaded) == first
        assert reloaded.vocab.entries == small_tokenizer.vocab.entries
        assert reloaded.merges == small_tokenizer.merges
        assert reloaded.special_tokens == SPECIAL_TOKENS

    def test_hash_stability(self, small_tokenizer):
        assert tokenizer_hash(small_tokenizer) == tokenizer_hash(
            deserialize(serialize(small_tokenizer))
        )

    def test_unknown_major_version_rejected(self, small_tokenizer):
        data = serialize(small_tokenizer).replace(b"resetlm-tokenizer 1", b"resetlm-tokenizer 9", 1)
        with pytest.raises(IntegrityError, match="major"):
            deserialize(data)

    def test_truncated_file_rejected(self, small_tokenizer):
        data = serialize(small_tokenizer)
        with pytest.raises(IntegrityError):
            deserialize(data[: len(data) // 2])

    def test_not_a_tokenizer(self):
        with pytest.raises(IntegrityError):
            deserialize(b"something else\n")
