"""MLM+NSP pretraining examples: pair sampling, whole-word masking, packing.

Example files come in two flavors: line-delimited JSON records and a binary
fixed-width variant for throughput (see ``write_binary``/``read_binary``).
"""

from __future__ import annotations

import io
import json
import math
import random
import struct
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from .corpus import Corpus
from .subword import SubwordVocab, TokenizedSequence, encode


class PretrainDataError(ValueError):
    pass


@dataclass
class MaskingPolicy:
    candidate_fraction: float = 0.15
    mask_prob: float = 0.8
    random_prob: float = 0.1
    keep_prob: float = 0.1
    whole_word: bool = True

    def validate(self) -> None:
        if not (0.0 <= self.candidate_fraction < 1.0):
            raise PretrainDataError("candidate fraction must be in [0, 1)")
        if abs(self.mask_prob + self.random_prob + self.keep_prob - 1.0) > 1e-9:
            raise PretrainDataError("mask/random/keep fractions must sum to 1")


@dataclass
class PackingSchedule:
    phases: list[tuple[int, float]] = field(
        default_factory=lambda: [(128, 0.9), (512, 0.1)]
    )

    def validate(self) -> None:
        if abs(sum(f for _, f in self.phases) - 1.0) > 1e-9:
            raise PretrainDataError("phase fractions must sum to 1")
        if any(n < 5 for n, _ in self.phases):
            raise PretrainDataError("max_len must fit [CLS] a [SEP] b [SEP]")


@dataclass
class PretrainExample:
    token_ids: list[int]
    segment_ids: list[int]
    masked_positions: list[int]
    masked_labels: list[int]
    is_next: bool
    # Per-position source-word index (-1 for specials); carried so the
    # whole-word property stays checkable after serialization.
    word_ids: list[int] | None = None


def make_nsp_pairs(
    corpus: Corpus, rng: random.Random, n_pairs: int
) -> Iterator[tuple[str, str, bool]]:
    """Segment pairs (A, B, is_next); B is the true next segment half the time.

    Negative B is drawn uniformly from the segments of *other* documents.
    With a single-document corpus negatives fall back to non-adjacent
    segments of the same document (with a warning).
    """
    docs = [doc.paragraphs for doc in corpus.documents]
    single_doc = len(docs) < 2
    if single_doc:
        warnings.warn("single-document corpus: NSP negatives drawn in-document")
    # Flattened (doc index, segment index) list of candidate A positions.
    a_slots = [
        (d, s) for d, paras in enumerate(docs) for s in range(len(paras))
    ]
    next_slots = [(d, s) for d, s in a_slots if s + 1 < len(docs[d])]
    if not a_slots:
        raise PretrainDataError("corpus has no segments")
    produced = 0
    while produced < n_pairs:
        if next_slots and rng.random() < 0.5:
            d, s = next_slots[rng.randrange(len(next_slots))]
            yield docs[d][s], docs[d][s + 1], True
        else:
            d, s = a_slots[rng.randrange(len(a_slots))]
            b = _random_other_segment(docs, d, s, rng)
            if b is None:
                continue
            yield docs[d][s], b, False
        produced += 1


def _random_other_segment(docs, d, s, rng) -> str | None:
    if len(docs) > 1:
        while True:
            od = rng.randrange(len(docs))
            if od != d:
                return docs[od][rng.randrange(len(docs[od]))]
    # Single document: any segment except the true next.
    choices = [p for i, p in enumerate(docs[d]) if i != s + 1]
    if not choices:
        return None
    return choices[rng.randrange(len(choices))]


def apply_masking(
    sequence: TokenizedSequence,
    vocab: SubwordVocab,
    policy: MaskingPolicy,
    rng: random.Random,
    maskable: list[int] | None = None,
) -> tuple[list[int], list[int], list[int]]:
    """Select whole words and apply the 80/10/10 replacement rule.

    ``maskable`` restricts candidate positions (defaults to every position
    with a word id).  Returns (positions, labels, replacement ids); the
    caller substitutes replacements into its copy of the token ids.
    """
    policy.validate()
    if maskable is None:
        maskable = list(range(len(sequence.piece_ids)))
    if policy.candidate_fraction == 0.0 or not maskable:
        return [], [], []

    # Group maskable positions by word id; selection is word-level.
    words: dict[int, list[int]] = {}
    for pos in maskable:
        words.setdefault(sequence.word_ids[pos], []).append(pos)
    groups = (
        list(words.values())
        if policy.whole_word
        else [[pos] for pos in maskable]
    )
    rng.shuffle(groups)

    n = len(maskable)
    target = math.ceil(policy.candidate_fraction * n)
    longest = max(len(g) for g in groups)
    cap = target + longest

    # Fill to the target, skipping words that would overshoot it; a word is
    # never split.  If nothing fits (every word longer than the target) the
    # first word within the overshoot cap is taken so short sequences still
    # get masked.
    selected: list[int] = []
    for group in groups:
        if len(selected) >= target:
            break
        if len(selected) + len(group) > target:
            continue
        selected.extend(group)
    if not selected:
        for group in groups:
            if len(group) <= cap:
                selected.extend(group)
                break
    selected.sort()

    positions, labels, replacements = [], [], []
    non_special = [
        i for i in range(len(vocab)) if i not in vocab.special_ids
    ]
    for pos in selected:
        original = sequence.piece_ids[pos]
        positions.append(pos)
        labels.append(original)
        draw = rng.random()
        if draw < policy.mask_prob:
            replacements.append(vocab.mask_id)
        elif draw < policy.mask_prob + policy.random_prob:
            replacements.append(non_special[rng.randrange(len(non_special))])
        else:
            replacements.append(original)
    return positions, labels, replacements


def build_example(
    pair: tuple[str, str, bool],
    vocab: SubwordVocab,
    max_len: int,
    policy: MaskingPolicy,
    rng: random.Random,
) -> PretrainExample | None:
    """[CLS] A [SEP] B [SEP] with truncation-longest-first and masking."""
    a_text, b_text, is_next = pair
    a = encode(vocab, a_text)
    b = encode(vocab, b_text)
    budget = max_len - 3
    a_ids, a_words = list(a.piece_ids), list(a.word_ids)
    b_ids, b_words = list(b.piece_ids), list(b.word_ids)
    while len(a_ids) + len(b_ids) > budget:
        if not a_ids and not b_ids:
            return None
        if len(a_ids) >= len(b_ids):
            a_ids.pop()
            a_words.pop()
        else:
            b_ids.pop()
            b_words.pop()
    if not a_ids or not b_ids:
        return None

    token_ids = [vocab.cls_id] + a_ids + [vocab.sep_id] + b_ids + [vocab.sep_id]
    segment_ids = [0] * (len(a_ids) + 2) + [1] * (len(b_ids) + 1)
    # Word ids unique across the two segments; specials get no word id (-1).
    shift = (max(a_words) + 1) if a_words else 0
    word_ids = (
        [-1] + a_words + [-1] + [w + shift for w in b_words] + [-1]
    )
    maskable = [i for i, w in enumerate(word_ids) if w >= 0]
    seq = TokenizedSequence(piece_ids=token_ids, word_ids=word_ids, text="")
    positions, labels, replacements = apply_masking(
        seq, vocab, policy, rng, maskable
    )
    for pos, rep in zip(positions, replacements):
        token_ids[pos] = rep
    return PretrainExample(
        token_ids=token_ids,
        segment_ids=segment_ids,
        masked_positions=positions,
        masked_labels=labels,
        is_next=is_next,
        word_ids=word_ids,
    )


def pack(
    corpus: Corpus,
    vocab: SubwordVocab,
    schedule: PackingSchedule,
    policy: MaskingPolicy,
    n_examples: int,
    seed: int = 0,
) -> tuple[dict[int, list[PretrainExample]], int]:
    """Generate examples per schedule phase; returns ({max_len: examples}, skipped)."""
    schedule.validate()
    by_phase: dict[int, list[PretrainExample]] = {}
    skipped = 0
    remaining = n_examples
    for idx, (max_len, fraction) in enumerate(schedule.phases):
        want = (
            remaining
            if idx == len(schedule.phases) - 1
            else int(round(n_examples * fraction))
        )
        want = min(want, remaining)
        remaining -= want
        rng = random.Random(seed * 7919 + idx * 31 + max_len)
        examples: list[PretrainExample] = []
        pair_rng = random.Random(seed * 1_000_003 + idx)
        pairs = make_nsp_pairs(corpus, pair_rng, n_pairs=want * 4)
        for pair in pairs:
            if len(examples) >= want:
                break
            ex = build_example(pair, vocab, max_len, policy, rng)
            if ex is None:
                skipped += 1
                continue
            examples.append(ex)
        by_phase[max_len] = examples
    return by_phase, skipped


@dataclass
class MaskingStats:
    n_examples: int
    n_tokens: int
    n_maskable: int
    n_masked: int
    candidate_fraction: float
    mask_fraction: float
    random_fraction: float
    keep_fraction: float
    wwm_violations: int


def masking_stats(
    examples: Iterable[PretrainExample], vocab: SubwordVocab
) -> MaskingStats:
    """Observed masking fractions; WWM violations must be zero upstream.

    The 80/10/10 split is measured from the example contents: a masked
    position holding [MASK] counts as masked, holding the label counts as
    kept, anything else as a random replacement.  Keep-draws that happen to
    equal [MASK] are impossible for non-special labels, so the measurement
    is exact.
    """
    n_examples = n_tokens = n_maskable = n_masked = 0
    n_mask = n_random = n_keep = 0
    violations = 0
    for ex in examples:
        n_examples += 1
        n_tokens += len(ex.token_ids)
        special = vocab.special_ids
        # Maskable = every non-special position (before masking, labels at
        # masked positions are non-special by construction).
        n_maskable += sum(
            1
            for i, t in enumerate(ex.token_ids)
            if t not in special or i in set(ex.masked_positions)
        )
        n_masked += len(ex.masked_positions)
        for pos, label in zip(ex.masked_positions, ex.masked_labels):
            tok = ex.token_ids[pos]
            if tok == vocab.mask_id:
                n_mask += 1
            elif tok == label:
                n_keep += 1
            else:
                n_random += 1
        violations += _wwm_violations(ex)
    if n_examples == 0:
        raise PretrainDataError("masking stats need at least one example")
    return MaskingStats(
        n_examples=n_examples,
        n_tokens=n_tokens,
        n_maskable=n_maskable,
        n_masked=n_masked,
        candidate_fraction=n_masked / n_maskable if n_maskable else 0.0,
        mask_fraction=n_mask / n_masked if n_masked else 0.0,
        random_fraction=n_random / n_masked if n_masked else 0.0,
        keep_fraction=n_keep / n_masked if n_masked else 0.0,
        wwm_violations=violations,
    )


def _wwm_violations(ex: PretrainExample) -> int:
    """Positions that share a word with a masked position but are unmasked."""
    if ex.word_ids is None:
        return 0
    masked = set(ex.masked_positions)
    masked_words = {ex.word_ids[p] for p in masked}
    return sum(
        1
        for pos, wid in enumerate(ex.word_ids)
        if wid >= 0 and wid in masked_words and pos not in masked
    )


# ---------------------------------------------------------------------------
# Serialization


def write_jsonl(examples: Iterable[PretrainExample], out) -> None:
    for ex in examples:
        rec = {
            "ids": ex.token_ids,
            "segments": ex.segment_ids,
            "masked_positions": ex.masked_positions,
            "masked_labels": ex.masked_labels,
            "is_next": ex.is_next,
        }
        if ex.word_ids is not None:
            rec["word_ids"] = ex.word_ids
        out.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_jsonl(stream) -> Iterator[PretrainExample]:
    for line in stream:
        if not line.strip():
            continue
        rec = json.loads(line)
        yield PretrainExample(
            token_ids=rec["ids"],
            segment_ids=rec["segments"],
            masked_positions=rec["masked_positions"],
            masked_labels=rec["masked_labels"],
            is_next=rec["is_next"],
            word_ids=rec.get("word_ids"),
        )


_BIN_MAGIC = b"MLMX"


def write_binary(
    examples: list[PretrainExample], max_len: int, max_masks: int, out: io.BufferedIOBase
) -> None:
    """Fixed-width records: header, then per example little-endian int32
    arrays ids[max_len], segments[max_len], positions[max_masks],
    labels[max_masks], plus int32 (length, n_masked, is_next).
    Unused slots are zero-padded.
    """
    out.write(_BIN_MAGIC)
    out.write(struct.pack("<iii", len(examples), max_len, max_masks))
    for ex in examples:
        if len(ex.token_ids) > max_len or len(ex.masked_positions) > max_masks:
            raise PretrainDataError("example exceeds binary record width")
        ids = ex.token_ids + [0] * (max_len - len(ex.token_ids))
        segs = ex.segment_ids + [0] * (max_len - len(ex.segment_ids))
        pos = ex.masked_positions + [0] * (max_masks - len(ex.masked_positions))
        lab = ex.masked_labels + [0] * (max_masks - len(ex.masked_labels))
        out.write(struct.pack(f"<{max_len}i", *ids))
        out.write(struct.pack(f"<{max_len}i", *segs))
        out.write(struct.pack(f"<{max_masks}i", *pos))
        out.write(struct.pack(f"<{max_masks}i", *lab))
        out.write(struct.pack("<iii", len(ex.token_ids), len(ex.masked_positions), int(ex.is_next)))


def read_binary(stream: io.BufferedIOBase) -> list[PretrainExample]:
    magic = stream.read(4)
    if magic != _BIN_MAGIC:
        raise PretrainDataError("bad binary example file magic")
    count, max_len, max_masks = struct.unpack("<iii", stream.read(12))
    examples = []
    for _ in range(count):
        ids = list(struct.unpack(f"<{max_len}i", stream.read(4 * max_len)))
        segs = list(struct.unpack(f"<{max_len}i", stream.read(4 * max_len)))
        pos = list(struct.unpack(f"<{max_masks}i", stream.read(4 * max_masks)))
        lab = list(struct.unpack(f"<{max_masks}i", stream.read(4 * max_masks)))
        length, n_masked, is_next = struct.unpack("<iii", stream.read(12))
        examples.append(
            PretrainExample(
                token_ids=ids[:length],
                segment_ids=segs[:length],
                masked_positions=pos[:n_masked],
                masked_labels=lab[:n_masked],
                is_next=bool(is_next),
            )
        )
    return examples
