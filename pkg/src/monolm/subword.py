"""Unigram-LM subword vocabulary: seed, EM training, pruning, Viterbi tokenization.

Pieces that do not start a word carry a ``#`` continuation marker in their
surface form ("Mediku #aren #era" style), so "era" and "#era" are distinct
vocabulary entries with distinct probabilities.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import IO, Iterable

from .corpus import Corpus

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = [PAD, UNK, CLS, SEP, MASK]
CONT = "#"

# Score assigned to an out-of-alphabet character during tokenization; any
# in-vocabulary segmentation beats one that goes through [UNK].
UNK_LOGPROB = -20.0

VOCAB_FORMAT_VERSION = 1


class SubwordError(ValueError):
    pass


@dataclass
class SubwordVocab:
    pieces: dict[str, float]          # piece surface form -> log-probability
    alphabet: set[str]
    target_size: int = 0
    coverage: float = 1.0
    piece_to_id: dict[str, int] = field(default_factory=dict)
    id_to_piece: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.piece_to_id:
            self._assign_ids()

    def _assign_ids(self) -> None:
        # Dense, deterministic ids: specials first, then pieces by
        # descending probability, ties broken lexicographically.
        ordered = SPECIALS + sorted(
            self.pieces, key=lambda p: (-self.pieces[p], p)
        )
        self.id_to_piece = ordered
        self.piece_to_id = {p: i for i, p in enumerate(ordered)}

    def __len__(self) -> int:
        return len(self.id_to_piece)

    @property
    def pad_id(self) -> int:
        return self.piece_to_id[PAD]

    @property
    def unk_id(self) -> int:
        return self.piece_to_id[UNK]

    @property
    def cls_id(self) -> int:
        return self.piece_to_id[CLS]

    @property
    def sep_id(self) -> int:
        return self.piece_to_id[SEP]

    @property
    def mask_id(self) -> int:
        return self.piece_to_id[MASK]

    @property
    def special_ids(self) -> set[int]:
        return {self.piece_to_id[s] for s in SPECIALS}


@dataclass
class TokenizedSequence:
    piece_ids: list[int]
    word_ids: list[int]
    text: str


def save_vocab(vocab: SubwordVocab, out: IO[str]) -> None:
    out.write(
        f"#monolm-vocab\tv{VOCAB_FORMAT_VERSION}\ttarget={vocab.target_size}"
        f"\tcoverage={vocab.coverage!r}\n"
    )
    for piece in vocab.id_to_piece:
        logp = vocab.pieces.get(piece, 0.0)
        out.write(f"{piece}\t{logp!r}\n")


def load_vocab(stream: IO[str]) -> SubwordVocab:
    header = next(stream).rstrip("\n").split("\t")
    if not header or header[0] != "#monolm-vocab":
        raise SubwordError("not a vocab file: missing header")
    meta = dict(f.split("=", 1) for f in header[2:])
    pieces: dict[str, float] = {}
    order: list[str] = []
    for line in stream:
        piece, logp = line.rstrip("\n").split("\t")
        order.append(piece)
        if piece not in SPECIALS:
            pieces[piece] = float(logp)
    alphabet = {p[-1] for p in pieces if len(strip_marker(p)) == 1}
    vocab = SubwordVocab(
        pieces=pieces,
        alphabet=alphabet,
        target_size=int(meta.get("target", 0)),
        coverage=float(meta.get("coverage", 1.0)),
        piece_to_id={p: i for i, p in enumerate(order)},
        id_to_piece=order,
    )
    return vocab


def strip_marker(piece: str) -> str:
    return piece[1:] if piece.startswith(CONT) and len(piece) > 1 else piece


def char_coverage(corpus: Corpus, coverage: float = 0.9995) -> set[str]:
    """Smallest character set covering >= ``coverage`` of char occurrences.

    Characters are taken greedily by descending frequency (ties by
    codepoint for determinism).  Whitespace never enters the alphabet.
    """
    counts: Counter[str] = Counter()
    for text in corpus.iter_text():
        for word in text.split():
            counts.update(word)
    total = sum(counts.values())
    alphabet: set[str] = set()
    covered = 0
    for ch, n in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
        if covered >= coverage * total and alphabet:
            break
        alphabet.add(ch)
        covered += n
    return alphabet


def _iter_words(corpus: Corpus) -> Iterable[str]:
    for text in corpus.iter_text():
        yield from text.split()


def word_counts(corpus: Corpus) -> Counter[str]:
    return Counter(_iter_words(corpus))


def seed_vocab(
    corpus: Corpus,
    alphabet: set[str],
    seed_size: int,
    max_piece_len: int = 16,
) -> dict[str, float]:
    """Candidate pieces with initial log-probabilities.

    Candidates are all single alphabet characters (both positions) plus the
    top within-word substrings ranked by frequency * length.  Substrings
    containing out-of-alphabet characters are skipped.
    """
    if seed_size < len(alphabet):
        raise SubwordError(
            f"seed size {seed_size} smaller than alphabet ({len(alphabet)})"
        )
    scores: Counter[str] = Counter()
    for word, freq in word_counts(corpus).items():
        n = len(word)
        for i in range(n):
            for j in range(i + 1, min(n, i + max_piece_len) + 1):
                sub = word[i:j]
                if any(c not in alphabet for c in sub):
                    continue
                piece = sub if i == 0 else CONT + sub
                scores[piece] += freq * len(sub)

    required = set()
    for ch in alphabet:
        required.add(ch)
        required.add(CONT + ch)
    ranked = sorted(
        (p for p in scores if p not in required),
        key=lambda p: (-scores[p], p),
    )
    chosen = set(required)
    for piece in ranked:
        if len(chosen) >= max(seed_size, len(required)):
            break
        chosen.add(piece)

    # Initial probabilities proportional to score; unseen required pieces
    # get the minimum positive score.
    floor = 1.0
    raw = {p: float(scores.get(p, floor)) for p in chosen}
    total = sum(raw.values())
    return {p: math.log(v / total) for p, v in raw.items()}


def _word_lattice_edges(word: str, pieces: dict[str, float], max_len: int):
    """Edges (i, j, piece) of the segmentation lattice of one word."""
    n = len(word)
    edges = []
    for i in range(n):
        for j in range(i + 1, min(n, i + max_len) + 1):
            piece = word[i:j] if i == 0 else CONT + word[i:j]
            if piece in pieces:
                edges.append((i, j, piece))
    return edges


def _logsumexp(values: list[float]) -> float:
    m = max(values)
    if m == -math.inf:
        return m
    return m + math.log(sum(math.exp(v - m) for v in values))


def e_step(
    words: Counter[str], pieces: dict[str, float], max_piece_len: int = 16
) -> tuple[dict[str, float], float]:
    """Forward-backward over each word's lattice.

    Returns expected piece counts and the corpus log-likelihood
    (sum over word occurrences of the log marginal segmentation probability).
    """
    counts: dict[str, float] = dict.fromkeys(pieces, 0.0)
    loglik = 0.0
    for word, freq in words.items():
        n = len(word)
        edges = _word_lattice_edges(word, pieces, max_piece_len)
        incoming: list[list[tuple[int, str]]] = [[] for _ in range(n + 1)]
        outgoing: list[list[tuple[int, str]]] = [[] for _ in range(n + 1)]
        for i, j, piece in edges:
            incoming[j].append((i, piece))
            outgoing[i].append((j, piece))

        alpha = [-math.inf] * (n + 1)
        alpha[0] = 0.0
        for j in range(1, n + 1):
            terms = [alpha[i] + pieces[p] for i, p in incoming[j] if alpha[i] > -math.inf]
            if terms:
                alpha[j] = _logsumexp(terms)
        if alpha[n] == -math.inf:
            raise SubwordError(
                f"word {word!r} has no segmentation under the candidate set"
            )
        beta = [-math.inf] * (n + 1)
        beta[n] = 0.0
        for i in range(n - 1, -1, -1):
            terms = [pieces[p] + beta[j] for j, p in outgoing[i] if beta[j] > -math.inf]
            if terms:
                beta[i] = _logsumexp(terms)

        logz = alpha[n]
        loglik += freq * logz
        for i, j, piece in edges:
            if alpha[i] > -math.inf and beta[j] > -math.inf:
                counts[piece] += freq * math.exp(alpha[i] + pieces[piece] + beta[j] - logz)
    return counts, loglik


def m_step(counts: dict[str, float]) -> dict[str, float]:
    """Renormalize expected counts into log-probabilities.

    Pieces with zero expected count keep a tiny floor so the lattice never
    loses connectivity mid-round; they are the first to be pruned.
    """
    floor = 1e-10
    total = sum(counts.values()) + floor * sum(1 for v in counts.values() if v <= 0)
    return {
        p: math.log(max(v, floor) / total) if total > 0 else -math.inf
        for p, v in counts.items()
    }


def prune(
    pieces: dict[str, float],
    counts: dict[str, float],
    keep: int,
    alphabet: set[str],
) -> dict[str, float]:
    """Drop lowest-utility pieces down to ``keep``, never single characters.

    Utility approximates the likelihood loss of removal as
    expected count * |log-probability|.
    """
    protected = {p for p in pieces if len(strip_marker(p)) == 1}
    removable = [p for p in pieces if p not in protected]
    removable.sort(key=lambda p: (counts.get(p, 0.0) * -pieces[p], p), reverse=True)
    budget = max(keep - len(protected), 0)
    kept = set(removable[:budget]) | protected
    sub = {p: pieces[p] for p in kept}
    logz = _logsumexp(list(sub.values()))
    return {p: lp - logz for p, lp in sub.items()}


@dataclass
class UnigramTrainConfig:
    target_size: int = 8000
    coverage: float = 0.9995
    seed_multiplier: int = 10
    max_piece_len: int = 16
    shrink_factor: float = 0.75
    em_iters_per_round: int = 2


def train_unigram(
    corpus: Corpus, config: UnigramTrainConfig | None = None
) -> SubwordVocab:
    """Alternate EM and pruning until the piece inventory fits the target.

    The target counts the specials; the corpus log-likelihood is
    non-decreasing across the EM iterations inside each round.
    """
    config = config or UnigramTrainConfig()
    alphabet = char_coverage(corpus, config.coverage)
    n_specials = len(SPECIALS)
    target_pieces = config.target_size - n_specials
    if target_pieces < len(alphabet):
        raise SubwordError(
            f"target {config.target_size} cannot hold the {len(alphabet)}-char "
            f"alphabet plus {n_specials} specials"
        )
    words = word_counts(corpus)
    pieces = seed_vocab(
        corpus, alphabet, config.target_size * config.seed_multiplier,
        config.max_piece_len,
    )
    # Words may contain out-of-alphabet characters; those words cannot be
    # segmented on the training lattice, so train on their in-alphabet runs.
    lattice_words: Counter[str] = Counter()
    for word, freq in words.items():
        for run in _alphabet_runs(word, alphabet):
            lattice_words[run] += freq

    while True:
        prev_ll = -math.inf
        counts: dict[str, float] = dict.fromkeys(pieces, 0.0)
        for _ in range(config.em_iters_per_round):
            counts, ll = e_step(lattice_words, pieces, config.max_piece_len)
            if ll + 1e-9 * max(1.0, abs(ll)) < prev_ll:
                raise SubwordError("EM log-likelihood decreased")
            prev_ll = ll
            pieces = m_step(counts)
        if len(pieces) <= target_pieces:
            break
        keep = max(target_pieces, int(len(pieces) * config.shrink_factor))
        if keep >= len(pieces):
            keep = len(pieces) - 1
        pieces = prune(pieces, counts, keep, alphabet)

    return SubwordVocab(
        pieces=pieces,
        alphabet=alphabet,
        target_size=config.target_size,
        coverage=config.coverage,
    )


def _alphabet_runs(word: str, alphabet: set[str]) -> list[str]:
    runs, cur = [], []
    for ch in word:
        if ch in alphabet:
            cur.append(ch)
        elif cur:
            runs.append("".join(cur))
            cur = []
    if cur:
        runs.append("".join(cur))
    return runs


def viterbi_tokenize(vocab: SubwordVocab, word: str) -> list[str]:
    """Max log-probability segmentation of one whitespace token.

    Out-of-alphabet characters surface as [UNK].  Ties go to the
    segmentation with fewer pieces, then the lexicographically smallest
    piece sequence.
    """
    if not word:
        raise SubwordError("cannot tokenize an empty word")
    n = len(word)
    max_len = max((len(strip_marker(p)) for p in vocab.pieces), default=1)
    # best[i]: (logp, npieces, pieces) for word[:i]; maximize logp, then
    # minimize piece count, then lexicographic piece sequence.
    best: list[tuple[float, int, tuple[str, ...]] | None] = [None] * (n + 1)
    best[0] = (0.0, 0, ())
    for i in range(n):
        if best[i] is None:
            continue
        logp, cnt, seq = best[i]
        limit = min(n, i + max_len)
        for j in range(i + 1, limit + 1):
            sub = word[i:j]
            piece = sub if i == 0 else CONT + sub
            if piece in vocab.pieces:
                score = vocab.pieces[piece]
            elif j == i + 1 and sub not in vocab.alphabet:
                piece = UNK
                score = UNK_LOGPROB
            else:
                continue
            cand = (logp + score, cnt + 1, seq + (piece,))
            cur = best[j]
            if cur is None or _better(cand, cur):
                best[j] = cand
    final = best[n]
    if final is None:
        raise SubwordError(f"no segmentation for {word!r}")
    return list(final[2])


def _better(a: tuple[float, int, tuple[str, ...]], b) -> bool:
    if abs(a[0] - b[0]) > 1e-12:
        return a[0] > b[0]
    if a[1] != b[1]:
        return a[1] < b[1]
    return a[2] < b[2]


def encode(vocab: SubwordVocab, text: str) -> TokenizedSequence:
    """Whitespace pre-split + per-word Viterbi; records word alignment."""
    from .corpus import clean_paragraph

    cleaned = clean_paragraph(text)
    piece_ids: list[int] = []
    word_ids: list[int] = []
    for w_idx, word in enumerate(cleaned.split()):
        for piece in viterbi_tokenize(vocab, word):
            piece_ids.append(vocab.piece_to_id[piece])
            word_ids.append(w_idx)
    return TokenizedSequence(piece_ids=piece_ids, word_ids=word_ids, text=cleaned)


def decode(vocab: SubwordVocab, piece_ids: list[int]) -> str:
    words: list[str] = []
    for pid in piece_ids:
        piece = vocab.id_to_piece[pid]
        if piece == UNK:
            words.append(UNK)
            continue
        if piece in SPECIALS:
            continue
        if piece.startswith(CONT) and len(piece) > 1 and words:
            words[-1] += piece[1:]
        else:
            words.append(piece)
    return " ".join(words)


def fertility(vocab: SubwordVocab, corpus: Corpus) -> float:
    """Arithmetic mean number of pieces per whitespace word."""
    total_pieces = 0
    total_words = 0
    for word, freq in word_counts(corpus).items():
        total_pieces += freq * len(viterbi_tokenize(vocab, word))
        total_words += freq
    if total_words == 0:
        raise SubwordError("fertility of an empty corpus")
    return total_pieces / total_words
