"""Character vocabularies and byte-pair encoding.

Both tokenizations share one joint vocabulary built over source and target
text together. BPE operates within whitespace-delimited words; every word
is prefixed with a reserved boundary marker so detokenization is a pure
string operation. Application is greedy longest-match from the left,
backing off to single characters and finally to UNK.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ["<pad>", "<bos>", "<eos>", "<unk>"]

# word-boundary marker prefixed to every word before BPE (reserved symbol)
MARKER = "▁"

CHAR_KIND = "character"
BPE_KIND = "bpe"


class TokenizerError(ValueError):
    pass


@dataclass
class Vocabulary:
    tokens: list[str]
    kind: str
    ids: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.tokens[: len(SPECIALS)] != SPECIALS:
            raise TokenizerError("specials must occupy the first four ids")
        if not self.ids:
            self.ids = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise TokenizerError("duplicate tokens break the id bijection")
        if self.kind not in (CHAR_KIND, BPE_KIND):
            raise TokenizerError(f"unknown vocabulary kind: {self.kind}")

    def __len__(self):
        return len(self.tokens)

    def id_of(self, token):
        return self.ids.get(token, UNK)

    def token_of(self, idx):
        return self.tokens[idx]

    @property
    def max_token_len(self):
        return max(len(t) for t in self.tokens[len(SPECIALS):]) if len(self) > 4 else 1


@dataclass
class MergeList:
    pairs: list[tuple[str, str]] = field(default_factory=list)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)


def _char_counts(corpora):
    counts = Counter()
    n_lines = 0
    for stream in corpora:
        for line in stream:
            line = line.rstrip("\n")
            counts.update(line)
            n_lines += 1
    if n_lines == 0 or not counts:
        raise TokenizerError("cannot build a vocabulary from empty corpora")
    return counts


def build_char_vocab(corpora, cap=496):
    """Keep the ``cap`` most frequent characters over all corpora jointly.

    Frequency ties break toward the lower code point so builds are
    deterministic. Characters outside the vocabulary map to UNK at encode
    time.
    """
    if cap < 1:
        raise TokenizerError("character cap must be at least 1")
    counts = _char_counts(corpora)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [ch for ch, _ in ranked[:cap]]
    return Vocabulary(tokens=SPECIALS + kept, kind=CHAR_KIND)


def _word_frequencies(corpora):
    freqs = Counter()
    for stream in corpora:
        for line in stream:
            for word in line.split():
                freqs[MARKER + word] += 1
    if not freqs:
        raise TokenizerError("cannot learn BPE from empty corpora")
    return freqs


def _count_pairs(pieces_by_word, freqs):
    counts = Counter()
    for word, pieces in pieces_by_word.items():
        f = freqs[word]
        for a, b in zip(pieces, pieces[1:]):
            counts[(a, b)] += f
    return counts


def _merge_word(pieces, left, right):
    out = []
    i = 0
    n = len(pieces)
    while i < n:
        if i + 1 < n and pieces[i] == left and pieces[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(pieces[i])
            i += 1
    return tuple(out)


def learn_bpe(corpora, target_vocab_size):
    """Greedy pair merging from characters up to ``target_vocab_size`` tokens.

    The target counts content tokens (specials excluded). Merge candidates
    are adjacent piece pairs within words, counted per occurrence; the most
    frequent pair merges, ties breaking lexicographically on the pair.
    Stops early if every word is a single piece.
    """
    freqs = _word_frequencies(corpora)
    pieces_by_word = {w: tuple(w) for w in freqs}
    symbols = sorted({ch for w in freqs for ch in w})
    if target_vocab_size < len(symbols):
        raise TokenizerError(
            f"target vocabulary size {target_vocab_size} is below the "
            f"{len(symbols)} distinct characters in the corpus"
        )
    vocab = list(symbols)
    seen = set(vocab)
    merges = MergeList()
    while len(vocab) < target_vocab_size:
        counts = _count_pairs(pieces_by_word, freqs)
        if not counts:
            break
        best_count = max(counts.values())
        left, right = min(p for p, c in counts.items() if c == best_count)
        pieces_by_word = {
            w: _merge_word(p, left, right) if left in p or right in p else p
            for w, p in pieces_by_word.items()
        }
        merges.pairs.append((left, right))
        merged = left + right
        if merged not in seen:
            seen.add(merged)
            vocab.append(merged)
    return Vocabulary(tokens=SPECIALS + vocab, kind=BPE_KIND), merges


def _encode_word_greedy(word, vocab):
    ids = []
    i = 0
    n = len(word)
    max_len = vocab.max_token_len
    while i < n:
        match = None
        for length in range(min(max_len, n - i), 0, -1):
            cand = word[i:i + length]
            if cand in vocab.ids:
                match = cand
                break
        if match is None:
            ids.append(UNK)
            i += 1
        else:
            ids.append(vocab.ids[match])
            i += len(match)
    return ids


def tokenize(text, vocab):
    """Text to ids. Character kind maps characters one-to-one (whitespace
    included); BPE takes the longest vocabulary match from the left within
    each marker-prefixed word. Unknown characters become UNK."""
    if vocab.kind == CHAR_KIND:
        return [vocab.id_of(ch) for ch in text]
    ids = []
    for word in text.split():
        ids.extend(_encode_word_greedy(MARKER + word, vocab))
    return ids


def detokenize(ids, vocab):
    """Inverse of tokenize for in-vocabulary text (specials are dropped)."""
    toks = [vocab.tokens[i] for i in ids if i not in (PAD, BOS, EOS)]
    if vocab.kind == CHAR_KIND:
        return "".join(toks)
    joined = "".join(toks)
    words = [w for w in joined.split(MARKER) if w != ""]
    return " ".join(words)


def compression_rate(char_lengths, fragment_lengths):
    """Total fragments divided by total characters (characters score 1.00).

    Smaller means a shorter fragment sequence for the same text; the
    chars-per-fragment view is the reciprocal.
    """
    if len(char_lengths) != len(fragment_lengths):
        raise TokenizerError("per-sentence length lists must align")
    if not char_lengths:
        raise TokenizerError("need at least one sentence")
    if any(n < 1 for n in char_lengths) or any(n < 1 for n in fragment_lengths):
        raise TokenizerError("zero-length sentence in compression accounting")
    return sum(fragment_lengths) / sum(char_lengths)


def save_vocab(vocab, path):
    with open(path, "w", encoding="utf-8") as f:
        for tok in vocab.tokens:
            f.write(tok + "\n")


def load_vocab(path, kind):
    with open(path, encoding="utf-8") as f:
        content = f.read()
    lines = content.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return Vocabulary(tokens=lines, kind=kind)


def save_merges(merges, path):
    with open(path, "w", encoding="utf-8") as f:
        for left, right in merges:
            f.write(f"{left}\t{right}\n")


def load_merges(path):
    pairs = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            left, right = line.split("\t")
            pairs.append((left, right))
    return MergeList(pairs)
