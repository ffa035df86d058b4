"""Tokenization, vocabulary, and frequency-table tests."""

import numpy as np
import pytest

from freqlm import DataError
from freqlm.corpus import (
    FrequencyTable,
    TokenStream,
    Vocabulary,
    WhitespaceTokenizer,
    WordBpe,
    build_frequency_table,
    encode_documents,
    load_split,
    make_tokenizer,
    merge_pair,
    normalize,
    read_documents,
    train_bpe,
)


class TestNormalize:
    def test_collapses_whitespace(self):
        assert normalize("  a \t b\n\nc  ") == "a b c"

    def test_idempotent(self):
        s = normalize(" x   y ")
        assert normalize(s) == s

    def test_empty(self):
        assert normalize("   \n ") == ""


class TestWhitespaceTokenizer:
    def test_round_trip_on_normalized_text(self):
        tok = WhitespaceTokenizer()
        for text in ("a b c", "one", "", "x  y\t z"):
            assert tok.detokenize(tok.tokenize(text)) == normalize(text)

    def test_empty_gives_no_tokens(self):
        assert WhitespaceTokenizer().tokenize("   ") == []


class TestMergePair:
    def test_basic(self):
        assert merge_pair(("a", "b", "c"), ("a", "b")) == ("ab", "c")

    def test_non_overlapping_left_to_right(self):
        # "aaa": only the first pair merges; the leftover "a" stays
        assert merge_pair(("a", "a", "a"), ("a", "a")) == ("aa", "a")
        assert merge_pair(("a", "a", "a", "a"), ("a", "a")) == ("aa", "aa")

    def test_absent_pair_is_noop(self):
        syms = ("x", "y", "z")
        assert merge_pair(syms, ("a", "b")) == syms

    def test_single_symbol(self):
        assert merge_pair(("ab",), ("a", "b")) == ("ab",)


class TestTrainBpe:
    def test_zero_merges(self):
        assert train_bpe("some words here", 0) == []

    def test_repeated_word_first_merge(self):
        merges = train_bpe("aaab aaab", 1, mark_word_end=False)
        assert merges == [("a", "a")]

    def test_two_token_word_unmarked(self):
        # after merging ("a","b") every word is a single symbol: learning stops
        merges = train_bpe("ab ab ab", 2, mark_word_end=False)
        assert merges == [("a", "b")]

    def test_two_token_word_marked(self):
        merges = train_bpe("ab ab ab", 2, mark_word_end=True)
        assert merges == [("a", "b</w>")]

    def test_stops_when_no_pair_repeats(self):
        # every pair occurs once: nothing is frequent enough to merge
        assert train_bpe("ab cd", 5, mark_word_end=False) == []

    def test_tie_breaks_lexicographically(self):
        merges = train_bpe("cd cd ab ab", 1, mark_word_end=False)
        assert merges == [("a", "b")]

    def test_compound_word_trace(self):
        # "lowlower": (l,o) and (o,w) both occur twice; the lexicographically
        # smaller pair wins, then (lo,w) is the only repeated pair.
        merges = train_bpe("lowlower", 2, mark_word_end=False)
        assert merges == [("l", "o"), ("lo", "w")]
        tok = WordBpe(merges, mark_word_end=False)
        assert tok.tokenize("lowlower") == ["low", "low", "e", "r"]

    def test_merge_file_round_trip(self, tmp_path):
        merges = train_bpe("the cat the mat the hat", 6)
        tok = WordBpe(merges)
        path = tmp_path / "merges.txt"
        tok.save_merges(path)
        loaded = WordBpe.load_merges(path)
        assert loaded.merges == merges

    def test_empty_corpus_raises(self):
        with pytest.raises(DataError):
            train_bpe("", 3)

    def test_negative_merges_raises(self):
        with pytest.raises(ValueError):
            train_bpe("a b", -1)


class TestWordBpe:
    def test_no_merges_splits_to_characters(self):
        tok = WordBpe([], mark_word_end=False)
        assert tok.tokenize("abc de") == ["a", "b", "c", "d", "e"]

    def test_no_merges_marked(self):
        tok = WordBpe([])
        assert tok.tokenize("abc de") == ["a", "b", "c</w>", "d", "e</w>"]

    def test_merges_apply_in_learned_order(self):
        tok = WordBpe([("a", "b"), ("ab", "c")], mark_word_end=False)
        assert tok.tokenize("abc abd") == ["abc", "ab", "d"]

    def test_detokenize_round_trip_marked(self):
        text = "the quick brown fox jumps over the lazy dog"
        merges = train_bpe(text, 20)
        tok = WordBpe(merges)
        assert tok.detokenize(tok.tokenize(text)) == text

    def test_detokenize_unmarked_raises(self):
        tok = WordBpe([], mark_word_end=False)
        with pytest.raises(ValueError):
            tok.detokenize(["a", "b"])

    def test_make_tokenizer_dispatch(self, tmp_path):
        assert make_tokenizer("whitespace").mode == "whitespace"
        bpe = make_tokenizer("bpe", merges=[("a", "b")])
        assert bpe.mode == "bpe" and bpe.merges == [("a", "b")]
        from freqlm import ConfigError

        with pytest.raises(ConfigError):
            make_tokenizer("wordpiece")
        with pytest.raises(ConfigError):
            make_tokenizer("bpe")  # neither merges nor a merge file


class TestVocabulary:
    def test_reserved_ids(self):
        v = Vocabulary.build([["a", "b", "a"]])
        assert v.unk_id == 0 and v.eos_id == 1
        assert v.tokens[:2] == ["<unk>", "<eos>"]

    def test_ordering_by_count_then_token(self):
        v = Vocabulary.build([["b", "a", "b", "c", "a", "b"]])
        # b:3, a:2, c:1
        assert v.tokens[2:] == ["b", "a", "c"]

    def test_count_ties_sort_by_token_string(self):
        v = Vocabulary.build([["z", "m", "a"]])
        assert v.tokens[2:] == ["a", "m", "z"]

    def test_max_size_drops_least_frequent(self):
        v = Vocabulary.build([["b", "a", "b", "c", "a", "b"]], max_size=4)
        assert v.tokens == ["<unk>", "<eos>", "b", "a"]

    def test_max_size_too_small_raises(self):
        with pytest.raises(ValueError):
            Vocabulary.build([["a"]], max_size=2)

    def test_lookup_falls_back_to_unk(self):
        v = Vocabulary.build([["a"]])
        assert v.lookup("a") == 2
        assert v.lookup("never-seen") == v.unk_id

    def test_save_load_round_trip(self, tmp_path):
        v = Vocabulary.build([["x", "y", "x"]])
        path = tmp_path / "vocab.txt"
        v.save(path)
        w = Vocabulary.load(path)
        assert w.tokens == v.tokens and w.id_of == v.id_of

    def test_duplicate_tokens_rejected(self):
        with pytest.raises(DataError):
            Vocabulary(["<unk>", "<eos>", "a", "a"])

    def test_missing_reserved_rejected(self):
        with pytest.raises(DataError):
            Vocabulary(["a", "b"])

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            Vocabulary.load(tmp_path / "absent.txt")


class TestFrequencyTable:
    def test_counts_from_stream(self):
        vocab = Vocabulary(["<unk>", "<eos>"])
        stream = TokenStream(np.array([0, 1, 0]), "train")
        freq = build_frequency_table(stream, vocab)
        assert freq.counts.tolist() == [2, 1]
        assert freq.total == 3

    def test_order_invariance(self):
        vocab = Vocabulary.build([list("abcdef")])
        rng = np.random.default_rng(0)
        ids = rng.integers(0, len(vocab), size=500)
        base = build_frequency_table(TokenStream(ids, "train"), vocab)
        for _ in range(5):
            perm = rng.permutation(ids)
            shuffled = build_frequency_table(TokenStream(perm, "train"), vocab)
            assert np.array_equal(shuffled.counts, base.counts)

    def test_empty_stream_raises(self):
        vocab = Vocabulary(["<unk>", "<eos>"])
        with pytest.raises(DataError):
            build_frequency_table(TokenStream(np.array([], dtype=np.int64), "train"), vocab)

    def test_out_of_range_id_raises(self):
        vocab = Vocabulary(["<unk>", "<eos>"])
        with pytest.raises(DataError):
            build_frequency_table(TokenStream(np.array([0, 5]), "train"), vocab)

    def test_save_load_round_trip(self, tmp_path):
        freq = FrequencyTable(np.array([5, 3, 0, 2]), 10)
        path = tmp_path / "freq.txt"
        freq.save(path)
        loaded = FrequencyTable.load(path)
        assert np.array_equal(loaded.counts, freq.counts)
        assert loaded.total == freq.total

    def test_validation(self):
        with pytest.raises(ValueError):
            FrequencyTable(np.array([-1, 2]), 1)
        with pytest.raises(ValueError):
            FrequencyTable(np.array([1, 2]), 4)  # total mismatch
        with pytest.raises(DataError):
            FrequencyTable(np.array([0, 0]), 0)

    def test_zipf_sample_recovers_slope(self):
        # counts from a Zipf(1.0) sampler should sit near slope -1 in log-log
        ranks = np.arange(1, 101)
        probs = (1.0 / ranks) / (1.0 / ranks).sum()
        rng = np.random.default_rng(123)
        draws = rng.choice(100, size=100_000, p=probs)
        counts = np.bincount(draws, minlength=100)
        slope, _ = np.polyfit(np.log(ranks), np.log(counts), 1)
        assert abs(slope - (-1.0)) < 0.05


class TestDocuments:
    def test_blank_line_blocks(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("a b\nc d\n\n\ne f\n", encoding="utf-8")
        assert read_documents(path) == ["a b\nc d", "e f"]

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(DataError):
            read_documents(tmp_path / "absent.txt")

    def test_encode_appends_eos_per_document(self):
        vocab = Vocabulary.build([["a", "b"]])
        tok = WhitespaceTokenizer()
        stream = encode_documents(["a b", "b"], tok, vocab, "train")
        a, b, eos = vocab.lookup("a"), vocab.lookup("b"), vocab.eos_id
        assert stream.ids.tolist() == [a, b, eos, b, eos]

    def test_unknown_words_map_to_unk(self):
        vocab = Vocabulary.build([["a"]])
        stream = encode_documents(["a z"], WhitespaceTokenizer(), vocab, "test")
        assert stream.ids.tolist() == [vocab.lookup("a"), vocab.unk_id, vocab.eos_id]

    def test_load_split_matches_manual_pipeline(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("a b\n\nb a a\n", encoding="utf-8")
        vocab = Vocabulary.build([["a", "a", "a", "b", "b"]])
        tok = WhitespaceTokenizer()
        stream = load_split(path, tok, vocab, "valid")
        manual = encode_documents(read_documents(path), tok, vocab, "valid")
        assert np.array_equal(stream.ids, manual.ids)
        assert stream.split_tag == "valid"

    def test_stream_split_tag_validated(self):
        with pytest.raises(ValueError):
            TokenStream(np.array([0]), "dev")
