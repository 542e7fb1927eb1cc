"""Vocabulary building, BPE learning/application, compression accounting."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from charnmt import tokenizer as tok
from charnmt.tokenizer import (BPE_KIND, CHAR_KIND, MARKER, SPECIALS, UNK,
                               MergeList, TokenizerError, Vocabulary,
                               build_char_vocab, compression_rate, detokenize,
                               learn_bpe, tokenize)


def reference_bpe(word_freqs, n_merges):
    """Brute-force merge oracle: full recount each round, same tie-break."""
    pieces = {w: tuple(w) for w in word_freqs}
    merges = []
    for _ in range(n_merges):
        counts = {}
        for w, ps in pieces.items():
            for pair in zip(ps, ps[1:]):
                counts[pair] = counts.get(pair, 0) + word_freqs[w]
        if not counts:
            break
        best = max(counts.values())
        pair = min(p for p, c in counts.items() if c == best)
        merges.append(pair)
        left, right = pair
        new_pieces = {}
        for w, ps in pieces.items():
            out, i = [], 0
            while i < len(ps):
                if i + 1 < len(ps) and ps[i] == left and ps[i + 1] == right:
                    out.append(left + right)
                    i += 2
                else:
                    out.append(ps[i])
                    i += 1
            new_pieces[w] = tuple(out)
        pieces = new_pieces
    return merges


def words_to_stream(word_freqs):
    line = " ".join(w for w, c in word_freqs.items() for _ in range(c))
    return [line]


def marked(freqs):
    return {MARKER + w: c for w, c in freqs.items()}


def test_char_vocab_frequency_order():
    v = build_char_vocab([["aab"]], cap=2)
    assert v.tokens == SPECIALS + ["a", "b"]


def test_char_vocab_cap_bounds_total_ids():
    lines = ["".join(chr(ord("a") + i % 26) for i in range(600))]
    v = build_char_vocab([lines], cap=496)
    assert len(v) <= 500


def test_char_vocab_tie_breaks_by_code_point():
    v = build_char_vocab([["ba"]], cap=2)  # both count 1
    assert v.tokens[4:] == ["a", "b"]


def test_char_vocab_empty_corpus_rejected():
    with pytest.raises(TokenizerError):
        build_char_vocab([[]], cap=5)


def test_learn_bpe_first_merge_abab():
    v, merges = learn_bpe([["abab ab"]], target_vocab_size=4)
    # base symbols: marker, a, b -> one merge to reach 4
    assert merges.pairs[0] == ("a", "b")


def test_learn_bpe_no_merges_at_char_count():
    v, merges = learn_bpe([["abab ab"]], target_vocab_size=3)
    assert len(merges) == 0


def test_learn_bpe_target_below_chars_rejected():
    with pytest.raises(TokenizerError):
        learn_bpe([["abc"]], target_vocab_size=2)


def test_learn_bpe_low_lower_newest_widest():
    freqs = {"low": 5, "lower": 2, "newest": 6, "widest": 3}
    v, merges = learn_bpe([words_to_stream(freqs)[0].split("\n")],
                          target_vocab_size=200)
    assert merges.pairs[0] == ("e", "s")
    oracle = reference_bpe(marked(freqs), len(merges))
    assert merges.pairs == oracle


@pytest.mark.parametrize("freqs", [
    {"abab": 4, "ab": 2, "ba": 1},
    {"low": 5, "lowest": 2, "newer": 6, "wider": 3},
    {"aaaa": 3, "aaab": 2, "abab": 1},
])
def test_learn_bpe_matches_reference_merge_for_merge(freqs):
    stream = words_to_stream(freqs)
    v, merges = learn_bpe([stream], target_vocab_size=100)
    oracle = reference_bpe(marked(freqs), len(merges))
    assert merges.pairs == oracle
    assert len(merges) > 0


def test_vocab_grows_by_one_per_merge():
    freqs = {"banana": 3, "bandana": 2}
    for target in range(5, 15):
        base = len({ch for w in marked(freqs) for ch in w})
        if target < base:
            continue
        v, merges = learn_bpe([words_to_stream(freqs)], target_vocab_size=target)
        assert len(v) - len(SPECIALS) == base + len(merges)


def test_tokenize_longest_match_from_left():
    v = Vocabulary(tokens=SPECIALS + [MARKER, "a", "b", "c", "ab", "bc"],
                   kind=BPE_KIND)
    ids = tokenize("abc", v)
    toks = [v.tokens[i] for i in ids]
    assert toks == [MARKER, "ab", "c"]


def test_tokenize_unknown_char_becomes_unk():
    v = Vocabulary(tokens=SPECIALS + [MARKER, "a", "b"], kind=BPE_KIND)
    ids = tokenize("aqb", v)
    toks = [v.tokens[i] if i != UNK else "<unk>" for i in ids]
    assert toks == [MARKER, "a", "<unk>", "b"]


def test_char_round_trip_with_spaces():
    v = build_char_vocab([["hello world  twice"]], cap=50)
    s = "held two  lowered"
    assert detokenize(tokenize(s, v), v) == s


def test_bpe_round_trip():
    v, _ = learn_bpe([["the cat sat on the mat", "a cat ate the hat"]],
                     target_vocab_size=40)
    s = "the cat ate a mat"
    assert detokenize(tokenize(s, v), v) == s


@settings(max_examples=80, deadline=None)
@given(st.lists(st.text(alphabet="abcde", min_size=1, max_size=8),
                min_size=1, max_size=6))
def test_bpe_round_trip_property(words):
    text = " ".join(words)
    v, _ = learn_bpe([[text]], target_vocab_size=30)
    assert detokenize(tokenize(text, v), v) == text


@settings(max_examples=80, deadline=None)
@given(st.text(alphabet="abc d", min_size=1, max_size=30))
def test_char_round_trip_property(text):
    v = build_char_vocab([[text]], cap=10)
    assert detokenize(tokenize(text, v), v) == text


def test_merge_order_application_never_beats_greedy():
    # applying merges in rank order can only yield >= as many tokens per word
    corpus = ["the their then there", "other lathe the"]
    v, merges = learn_bpe([corpus], target_vocab_size=30)
    for word in "the their then there other lathe".split():
        marked_word = MARKER + word
        pieces = list(marked_word)
        for left, right in merges:
            out, i = [], 0
            while i < len(pieces):
                if (i + 1 < len(pieces) and pieces[i] == left
                        and pieces[i + 1] == right):
                    out.append(left + right)
                    i += 2
                else:
                    out.append(pieces[i])
                    i += 1
            pieces = out
        greedy = tokenize(word, v)
        assert len(pieces) >= len(greedy)
        assert "".join(pieces) == marked_word


def test_tokenize_ids_below_vocab_size():
    v, _ = learn_bpe([["some words here"]], target_vocab_size=20)
    for idx in tokenize("more words there", v):
        assert 0 <= idx < len(v)


def test_compression_rate_basic():
    assert compression_rate([20], [4]) == pytest.approx(0.20)
    assert compression_rate([10, 10], [10, 10]) == pytest.approx(1.00)


def test_compression_rate_manual_corpus():
    sentences = ["the cat", "a hat"]
    v, _ = learn_bpe([sentences], target_vocab_size=30)
    char_lens = [len(s) for s in sentences]
    frag_lens = [len(tokenize(s, v)) for s in sentences]
    # hand count: fragments counted directly from the tokenizer output
    assert compression_rate(char_lens, frag_lens) == pytest.approx(
        sum(frag_lens) / sum(char_lens))
    assert compression_rate([5, 5], [2, 3]) == pytest.approx(0.5)


def test_compression_rate_errors():
    with pytest.raises(TokenizerError):
        compression_rate([3], [1, 1])
    with pytest.raises(TokenizerError):
        compression_rate([0], [1])


def test_vocab_and_merge_files_round_trip(tmp_path):
    v, merges = learn_bpe([["space craft", "space ship"]], target_vocab_size=25)
    vp, mp = tmp_path / "vocab.txt", tmp_path / "merges.txt"
    tok.save_vocab(v, vp)
    tok.save_merges(merges, mp)
    v2 = tok.load_vocab(vp, kind=BPE_KIND)
    m2 = tok.load_merges(mp)
    assert v2.tokens == v.tokens and v2.ids == v.ids
    assert m2.pairs == merges.pairs


def test_char_vocab_file_round_trip_with_space_token(tmp_path):
    v = build_char_vocab([["a b"]], cap=5)
    assert " " in v.ids
    p = tmp_path / "vocab.txt"
    tok.save_vocab(v, p)
    v2 = tok.load_vocab(p, kind=CHAR_KIND)
    assert v2.tokens == v.tokens
