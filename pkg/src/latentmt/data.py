"""Parallel-corpus ingestion, vocabularies, batching, synthetic corpora.

Text is whitespace-tokenized UTF-8, one sentence per line. Tokens seen
fewer than `min_freq` times map to the unknown token. Targets are wrapped
in BOS/EOS; sources are not. PAD is id 0 so masking logic is uniform.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1
BOS_ID = 2
EOS_ID = 3

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"

SPECIAL_TOKENS = (PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN)


class CorpusError(ValueError):
    """Malformed or inconsistent corpus input."""


@dataclass
class Vocabulary:
    """Token<->id bijection with reserved specials and frequency threshold."""

    token_to_id: dict[str, int]
    id_to_token: list[str]
    frequencies: list[int]
    min_freq: int

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens: list[str]) -> list[int]:
        get = self.token_to_id.get
        return [get(t, UNK_ID) for t in tokens]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for token, freq in zip(self.id_to_token, self.frequencies):
                f.write(f"{token}\t{freq}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens: list[str] = []
        freqs: list[int] = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise CorpusError(f"vocabulary file {path}: bad entry at line {lineno}")
                tokens.append(parts[0])
                freqs.append(int(parts[1]))
        if tokens[: len(SPECIAL_TOKENS)] != list(SPECIAL_TOKENS):
            raise CorpusError(f"vocabulary file {path}: reserved specials missing or reordered")
        return cls(
            token_to_id={t: i for i, t in enumerate(tokens)},
            id_to_token=tokens,
            frequencies=freqs,
            min_freq=1,
        )

def build_vocab(corpus, min_freq: int) -> Vocabulary:
    """Count tokens over an iterable of token sequences and build a vocabulary.

    Tokens with frequency < min_freq are excluded (they encode as UNK).
    Ordering is deterministic: specials first, then frequency descending
    with lexicographic tie-break.
    """
    if min_freq < 1:
        raise ValueError(f"min_freq must be >= 1, got {min_freq}")
    counts: Counter[str] = Counter()
    n_sentences = 0
    for tokens in corpus:
        n_sentences += 1
        counts.update(tokens)
    if n_sentences == 0 or not counts:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    kept = sorted(
        ((t, c) for t, c in counts.items() if c >= min_freq),
        key=lambda item: (-item[1], item[0]),
    )
    id_to_token = list(SPECIAL_TOKENS) + [t for t, _ in kept]
    frequencies = [0] * len(SPECIAL_TOKENS) + [c for _, c in kept]
    return Vocabulary(
        token_to_id={t: i for i, t in enumerate(id_to_token)},
        id_to_token=id_to_token,
        frequencies=frequencies,
        min_freq=min_freq,
    )


@dataclass
class SentencePair:
    """Encoded pair: bare source ids, BOS/EOS-wrapped target ids."""

    src: list[int]
    tgt: list[int]


def read_parallel_tokens(src_path, tgt_path, max_len: int = 100):
    """Read two aligned text files into token-sequence pairs.

    Pairs with either side longer than max_len tokens are dropped
    (boundary inclusive: exactly max_len survives). Empty lines on either
    side drop the pair with a logged count. Survivor order is preserved.
    """
    with open(src_path, "rb") as f:
        src_raw = f.read().splitlines()
    with open(tgt_path, "rb") as f:
        tgt_raw = f.read().splitlines()
    if len(src_raw) != len(tgt_raw):
        raise CorpusError(
            f"line-count mismatch: {src_path} has {len(src_raw)} lines, {tgt_path} has {len(tgt_raw)}"
        )
    pairs: list[tuple[list[str], list[str]]] = []
    dropped_long = 0
    dropped_empty = 0
    for lineno, (s_bytes, t_bytes) in enumerate(zip(src_raw, tgt_raw), 1):
        try:
            s_toks = s_bytes.decode("utf-8").split()
            t_toks = t_bytes.decode("utf-8").split()
        except UnicodeDecodeError as e:
            raise CorpusError(f"non-decodable text at line {lineno}: {e}") from e
        if not s_toks or not t_toks:
            dropped_empty += 1
            continue
        if len(s_toks) > max_len or len(t_toks) > max_len:
            dropped_long += 1
            continue
        pairs.append((s_toks, t_toks))
    if dropped_empty:
        log.warning("dropped %d pairs with an empty side", dropped_empty)
    if dropped_long:
        log.info("dropped %d pairs longer than %d tokens", dropped_long, max_len)
    return pairs, dropped_long, dropped_empty


def load_parallel(src_path, tgt_path, max_len: int, src_vocab: Vocabulary, tgt_vocab: Vocabulary):
    """Read, length-filter and encode a parallel corpus into SentencePairs."""
    raw, _, _ = read_parallel_tokens(src_path, tgt_path, max_len)
    return [
        SentencePair(
            src=src_vocab.encode(s),
            tgt=[BOS_ID] + tgt_vocab.encode(t) + [EOS_ID],
        )
        for s, t in raw
    ]


def encode_pairs(raw_pairs, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> list[SentencePair]:
    return [
        SentencePair(src=src_vocab.encode(s), tgt=[BOS_ID] + tgt_vocab.encode(t) + [EOS_ID])
        for s, t in raw_pairs
    ]


@dataclass
class Batch:
    """Padded id matrices with length vectors and boolean non-PAD masks."""

    src: np.ndarray       # (B, Ts) int64
    src_len: np.ndarray   # (B,) int64
    src_mask: np.ndarray  # (B, Ts) bool, true at non-PAD
    tgt: np.ndarray       # (B, Tt) int64, BOS/EOS wrapped
    tgt_len: np.ndarray   # (B,) int64
    tgt_mask: np.ndarray  # (B, Tt) bool

    @property
    def size(self) -> int:
        return self.src.shape[0]

    @property
    def target_word_count(self) -> int:
        """Predicted positions per sentence: content + EOS, not BOS."""
        return int(np.sum(self.tgt_len - 1))


def _pad_matrix(seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = len(seqs)
    width = max(len(s) for s in seqs)
    mat = np.full((n, width), PAD_ID, dtype=np.int64)
    lens = np.zeros(n, dtype=np.int64)
    for i, s in enumerate(seqs):
        mat[i, : len(s)] = s
        lens[i] = len(s)
    # mask from lengths, not from id==PAD, so a PAD id inside a real
    # sequence could never corrupt it
    mask = np.arange(width)[None, :] < lens[:, None]
    return mat, lens, mask


def make_batch(pairs: list[SentencePair]) -> Batch:
    src, src_len, src_mask = _pad_matrix([p.src for p in pairs])
    tgt, tgt_len, tgt_mask = _pad_matrix([p.tgt for p in pairs])
    return Batch(src, src_len, src_mask, tgt, tgt_len, tgt_mask)


def make_batches(
    pairs: list[SentencePair],
    batch_size: int,
    seed: int,
    bucket_batches: int = 100,
) -> list[Batch]:
    """Shuffle by seed, sort within windows by source length, cut batches.

    Windows of `bucket_batches * batch_size` pairs are sorted by source
    length (stable, so shuffle order survives among equal lengths), which
    limits padding while retaining stochasticity.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if not pairs:
        return []
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    shuffled = [pairs[i] for i in order]
    window = bucket_batches * batch_size
    bucketed: list[SentencePair] = []
    for start in range(0, len(shuffled), window):
        chunk = shuffled[start : start + window]
        chunk.sort(key=lambda p: len(p.src))
        bucketed.extend(chunk)
    return [make_batch(bucketed[i : i + batch_size]) for i in range(0, len(bucketed), batch_size)]


def make_eval_batches(pairs: list[SentencePair], batch_size: int) -> list[Batch]:
    """Order-preserving batching for validation and scoring."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    return [make_batch(pairs[i : i + batch_size]) for i in range(0, len(pairs), batch_size)]


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------


def synth_corpus(
    kind: str,
    size: int,
    vocab_size: int,
    seed: int,
    min_len: int = 4,
    max_len: int = 9,
):
    """Generate a small parallel corpus as (src_lines, tgt_lines) token lists.

    kind "copy": target equals source.
    kind "multimodal": a pool of distinct source sentences, each emitted
    several times; per occurrence a hidden coin picks the target variant,
    identity or token-order reversal, with nothing on the source side to
    tell them apart. The first two occurrences of each source are forced to
    cover both variants (in coin-flipped order) so both appear.
    """
    if vocab_size < 8:
        raise ValueError(f"vocab_size must be >= 8, got {vocab_size}")
    if kind not in ("copy", "multimodal"):
        raise ValueError(f"unknown corpus kind '{kind}'")
    rng = np.random.default_rng(seed)
    alphabet = [f"t{i:02d}" for i in range(vocab_size)]

    def sample_sentence() -> list[str]:
        n = int(rng.integers(min_len, max_len + 1))
        toks = [alphabet[int(rng.integers(0, vocab_size))] for _ in range(n)]
        while toks[-1] == toks[0]:
            toks[-1] = alphabet[int(rng.integers(0, vocab_size))]
        return toks

    if kind == "copy":
        src_lines = [sample_sentence() for _ in range(size)]
        return src_lines, [list(s) for s in src_lines]

    n_sources = max(1, size // 8)
    sources: list[list[str]] = []
    seen: set[tuple[str, ...]] = set()
    while len(sources) < n_sources:
        s = sample_sentence()
        key = tuple(s)
        if key in seen:
            continue
        seen.add(key)
        sources.append(s)

    counts = [size // n_sources] * n_sources
    for i in range(size - sum(counts)):
        counts[i] += 1
    items: list[tuple[int, bool]] = []
    for si, c in enumerate(counts):
        flips: list[bool] = []
        if c >= 2:
            first_reversed = bool(rng.integers(0, 2))
            flips = [first_reversed, not first_reversed]
            flips += [bool(rng.integers(0, 2)) for _ in range(c - 2)]
        else:
            flips = [bool(rng.integers(0, 2)) for _ in range(c)]
        items.extend((si, fl) for fl in flips)
    order = rng.permutation(len(items))
    src_lines = []
    tgt_lines = []
    for k in order:
        si, rev = items[k]
        src = sources[si]
        src_lines.append(list(src))
        tgt_lines.append(list(reversed(src)) if rev else list(src))
    return src_lines, tgt_lines


def write_corpus(lines: list[list[str]], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for toks in lines:
            f.write(" ".join(toks) + "\n")
