"""Vocabulary loading, greedy longest-match tokenization, detokenization."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ovis import vocab as V

TOY = ["[PAD]", "[UNK]", "[MASK]", "male", "mountain", "##eer", "cat", "##s", "a"]


@pytest.fixture()
def toy():
    return V.build_vocabulary(TOY)


class TestLoadVocabulary:
    def test_line_number_is_id(self, tmp_path):
        p = tmp_path / "vocab.txt"
        p.write_text("[PAD]\n[UNK]\n[MASK]\nmale\n##eer\n")
        vocab = V.load_vocabulary(p)
        assert vocab.size == 5
        assert vocab.id_of("male") == 3
        assert vocab.token_at(3) == "male"

    def test_duplicate_token(self, tmp_path):
        p = tmp_path / "vocab.txt"
        p.write_text("[PAD]\n[UNK]\n[MASK]\nmale\nmale\n")
        with pytest.raises(V.DuplicateTokenError):
            V.load_vocabulary(p)

    def test_missing_special(self, tmp_path):
        p = tmp_path / "vocab.txt"
        p.write_text("[PAD]\n[UNK]\nmale\n")
        with pytest.raises(V.MissingSpecialTokenError):
            V.load_vocabulary(p)

    def test_empty_file(self, tmp_path):
        p = tmp_path / "vocab.txt"
        p.write_text("")
        with pytest.raises(V.EmptyVocabularyError):
            V.load_vocabulary(p)

    def test_specials_alone_rejected(self):
        with pytest.raises(V.VocabularyError):
            V.build_vocabulary(["[PAD]", "[UNK]", "[MASK]"])

    def test_lookup_token_at_roundtrip(self, toy):
        for i in range(toy.size):
            assert toy.id_of(toy.token_at(i)) == i

    def test_save_load_roundtrip(self, toy, tmp_path):
        p = tmp_path / "vocab.txt"
        V.save_vocabulary(toy, p)
        assert V.load_vocabulary(p).tokens == toy.tokens


def _exhaustive_decomposable(vocab: V.Vocabulary, word: str) -> bool:
    """Independent oracle: does ANY segmentation into vocab pieces cover the
    word? (Dynamic programming over all split points, not greedy.)"""
    n = len(word)
    reachable = [False] * (n + 1)
    reachable[0] = True
    for start in range(n):
        if not reachable[start]:
            continue
        for stop in range(start + 1, n + 1):
            piece = word[start:stop]
            if start > 0:
                piece = V.CONTINUATION_PREFIX + piece
            if piece in vocab:
                reachable[stop] = True
    return reachable[n]


class TestTokenize:
    def test_paper_example(self, toy):
        seq = V.tokenize(toy, "male mountaineer")
        assert V.tokens_of(toy, seq.ids) == ["male", "mountain", "##eer"]

    def test_whole_word_hit(self, toy):
        assert V.tokens_of(toy, V.tokenize(toy, "male").ids) == ["male"]

    def test_undecomposable_word_is_unk(self, toy):
        assert not _exhaustive_decomposable(toy, "zzqq")
        seq = V.tokenize(toy, "zzqq")
        assert list(seq.ids) == [toy.unk_id]

    def test_empty_query(self, toy):
        with pytest.raises(V.EmptyQueryError):
            V.tokenize(toy, "   ")

    def test_punctuation_only_query(self, toy):
        with pytest.raises(V.EmptyQueryError):
            V.tokenize(toy, "?!...")

    def test_lowercases_and_splits_punctuation(self, toy):
        seq = V.tokenize(toy, "MALE, mountaineer!")
        assert V.tokens_of(toy, seq.ids) == ["male", "mountain", "##eer"]

    def test_overlong_word_maps_to_unk(self, toy):
        seq = V.tokenize(toy, "a" * (V.MAX_WORD_CHARS + 1))
        assert list(seq.ids) == [toy.unk_id]

    def test_no_pad_in_output(self, toy):
        seq = V.tokenize(toy, "male cats mountaineer zzqq")
        assert toy.pad_id not in seq.ids

    def test_deterministic(self, toy):
        assert V.tokenize(toy, "male cats").ids == V.tokenize(toy, "male cats").ids


class TestGreedyLongestMatch:
    @given(st.lists(st.sampled_from(["male", "mountain", "mountaineer", "cat", "cats", "a", "zz"]), min_size=1, max_size=6))
    @settings(max_examples=100, deadline=None)
    def test_no_longer_piece_matches_at_any_position(self, words):
        vocab = V.build_vocabulary(TOY)
        text = " ".join(words)
        seq = V.tokenize(vocab, text)
        # re-scan: walk each word's emitted pieces and assert greediness
        for word in V.split_words(text):
            pieces = V._decompose(vocab, word)
            if pieces is None:
                continue
            pos = 0
            for token_id in pieces:
                token = vocab.token_at(token_id)
                surface = token[len(V.CONTINUATION_PREFIX):] if pos > 0 else token
                for longer_end in range(len(word), pos + len(surface), -1):
                    candidate = word[pos:longer_end]
                    if pos > 0:
                        candidate = V.CONTINUATION_PREFIX + candidate
                    assert candidate not in vocab, (
                        f"{candidate!r} is a longer match than {token!r} at {pos} in {word!r}"
                    )
                pos += len(surface)


class TestDetokenize:
    def test_paper_roundtrip(self, toy):
        ids = V.tokenize(toy, "male mountaineer").ids
        assert V.detokenize(toy, ids) == "male mountaineer"

    def test_single_word(self, toy):
        assert V.detokenize(toy, [toy.id_of("male")]) == "male"

    def test_leading_continuation_warns(self, toy):
        with pytest.warns(V.LeadingContinuationWarning):
            text = V.detokenize(toy, [toy.id_of("##eer")])
        assert text == "eer"

    def test_id_out_of_range(self, toy):
        with pytest.raises(V.UnknownTokenIdError):
            V.detokenize(toy, [toy.size])

    @given(st.lists(st.sampled_from(["male", "mountain", "cat", "a"]), min_size=1, max_size=8))
    @settings(max_examples=100, deadline=None)
    def test_whole_word_roundtrip(self, words):
        vocab = V.build_vocabulary(TOY)
        text = " ".join(words)
        seq = V.tokenize(vocab, text)
        assert V.detokenize(vocab, seq.ids) == text
