"""Document/paragraph-structured corpus: ingest, cleaning, stats, splits.

File format: UTF-8 plain text, one paragraph per line, a blank line
terminates a document.  An optional ``#source:<tag>`` header line at the
top of a file sets the source tag for every document in it.
"""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass, field
from typing import IO, Iterator

_MIN_PARAGRAPH_CHARS = 2


class CorpusError(ValueError):
    """Raised for malformed or empty corpus input."""


@dataclass
class Document:
    id: str
    source: str
    paragraphs: list[str]


@dataclass
class Corpus:
    documents: list[Document] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self) -> Iterator[Document]:
        return iter(self.documents)

    def iter_text(self) -> Iterator[str]:
        for doc in self.documents:
            yield from doc.paragraphs


@dataclass
class CorpusStats:
    tokens_by_source: dict[str, int]
    total_tokens: int
    document_count: int
    paragraph_count: int


@dataclass
class SplitSpec:
    ratios: list[float]
    seed: int = 0

    def validate(self) -> None:
        if not self.ratios:
            raise CorpusError("split spec needs at least one ratio")
        for r in self.ratios:
            if not (0.0 < r <= 1.0):
                raise CorpusError(f"split ratio {r} outside (0, 1]")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise CorpusError(f"split ratios sum to {sum(self.ratios)}, not 1")


def clean_paragraph(text: str) -> str:
    """Normalize one paragraph: NFC, strip control chars, collapse whitespace."""
    text = unicodedata.normalize("NFC", text)
    # Whitespace control characters (tab etc.) count as separators, not as
    # control characters to delete.
    text = "".join(
        c
        for c in text
        if c.isspace() or not unicodedata.category(c).startswith("C")
    )
    return " ".join(text.split())


def ingest(stream: IO[str] | Iterator[str], source: str = "unknown") -> Corpus:
    """Read the corpus file format into cleaned documents.

    Paragraphs shorter than two characters after cleaning are dropped, as
    are exact-duplicate paragraphs within a document.  Documents with no
    surviving paragraph are dropped.
    """
    documents: list[Document] = []
    current: list[str] = []
    seen: set[str] = set()
    file_source = source

    def flush() -> None:
        nonlocal current, seen
        if current:
            documents.append(
                Document(id=f"{file_source}-{len(documents)}", source=file_source,
                         paragraphs=current)
            )
        current = []
        seen = set()

    try:
        for lineno, raw in enumerate(stream, start=1):
            line = raw.rstrip("\n")
            if lineno == 1 and line.startswith("#source:"):
                file_source = line[len("#source:"):].strip() or source
                continue
            if not line.strip():
                flush()
                continue
            para = clean_paragraph(line)
            if len(para) < _MIN_PARAGRAPH_CHARS or para in seen:
                continue
            seen.add(para)
            current.append(para)
    except UnicodeDecodeError as err:
        raise CorpusError(
            f"invalid UTF-8 at byte offset {err.start}: {err.reason}"
        ) from err
    flush()

    if not documents:
        raise CorpusError("no documents survived ingest")
    return Corpus(documents)


def serialize(corpus: Corpus, out: IO[str]) -> None:
    """Write a corpus back out in the corpus file format (one source per call)."""
    for i, doc in enumerate(corpus.documents):
        if i == 0:
            out.write(f"#source:{doc.source}\n")
        for para in doc.paragraphs:
            out.write(para + "\n")
        out.write("\n")


def stats(corpus: Corpus) -> CorpusStats:
    """Whitespace-token counts per source, plus document/paragraph totals."""
    if not corpus.documents:
        raise CorpusError("stats of an empty corpus")
    by_source: dict[str, int] = {}
    paragraphs = 0
    for doc in corpus.documents:
        n = sum(len(p.split()) for p in doc.paragraphs)
        by_source[doc.source] = by_source.get(doc.source, 0) + n
        paragraphs += len(doc.paragraphs)
    return CorpusStats(
        tokens_by_source=by_source,
        total_tokens=sum(by_source.values()),
        document_count=len(corpus.documents),
        paragraph_count=paragraphs,
    )


def render_stats(s: CorpusStats) -> str:
    """Aligned plain-text table in the corpus-composition shape."""
    rows = [(src, _millions(n)) for src, n in sorted(s.tokens_by_source.items())]
    rows.append(("Total", _millions(s.total_tokens)))
    width = max(len(r[0]) for r in rows) + 2
    lines = [f"{'Source':<{width}}Tokens"]
    lines += [f"{src:<{width}}{tok}" for src, tok in rows]
    lines.append(f"documents: {s.document_count}  paragraphs: {s.paragraph_count}")
    return "\n".join(lines)


def _millions(n: int) -> str:
    if n >= 1_000_000:
        return f"{n / 1e6:.1f}M"
    return str(n)


def split(corpus: Corpus, spec: SplitSpec) -> list[Corpus]:
    """Deterministic document-level partition matching the ratios +/- 1 doc."""
    import random

    spec.validate()
    docs = list(corpus.documents)
    if len(docs) < len(spec.ratios):
        raise CorpusError(
            f"cannot split {len(docs)} documents into {len(spec.ratios)} partitions"
        )
    rng = random.Random(spec.seed)
    order = list(range(len(docs)))
    rng.shuffle(order)

    # Largest-remainder apportionment so sizes match ratios within one document.
    exact = [r * len(docs) for r in spec.ratios]
    sizes = [int(e) for e in exact]
    remainders = sorted(
        range(len(sizes)), key=lambda i: exact[i] - sizes[i], reverse=True
    )
    for i in remainders[: len(docs) - sum(sizes)]:
        sizes[i] += 1
    # Every partition keeps at least one document.
    for i in range(len(sizes)):
        while sizes[i] == 0:
            j = max(range(len(sizes)), key=lambda k: sizes[k])
            sizes[j] -= 1
            sizes[i] += 1

    parts: list[Corpus] = []
    pos = 0
    for size in sizes:
        picked = sorted(order[pos: pos + size])
        parts.append(Corpus([docs[i] for i in picked]))
        pos += size
    return parts


def segments(corpus: Corpus) -> Iterator[tuple[str, int, str]]:
    """Yield (document id, segment index, text) in document order."""
    if not corpus.documents:
        raise CorpusError("segments of an empty corpus")
    for doc in corpus.documents:
        for i, para in enumerate(doc.paragraphs):
            yield doc.id, i, para
