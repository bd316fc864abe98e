import io
import random

import pytest
import torch

from monolm import corpus as corpus_mod
from monolm import subword

torch.set_num_threads(2)


def make_corpus(text: str) -> corpus_mod.Corpus:
    return corpus_mod.ingest(io.StringIO(text))


@pytest.fixture
def toy_corpus() -> corpus_mod.Corpus:
    return make_corpus(
        "Medikuarenera joan da gaur goizean\n"
        "Etxerantz abiatu ziren denak batera\n"
        "\n"
        "Mediku aren era etxera ntz hitzak dira\n"
        "Medikuarenera berriro joan behar dut\n"
    )


def synthetic_topic_corpus(
    n_docs: int = 20, sentences_per_doc: int = 10, seed: int = 0
) -> corpus_mod.Corpus:
    """Documents with strong per-document word signatures (separates NSP)."""
    rng = random.Random(seed)
    fillers = [f"la{chr(97 + i)}" for i in range(8)]
    docs = []
    for d in range(n_docs):
        sig = f"gai{chr(97 + d % 26)}{d}"
        lines = [
            f"{sig} {rng.choice(fillers)} {sig} "
            f"{rng.choice(fillers)} {rng.choice(fillers)} {sig}"
            for _ in range(sentences_per_doc)
        ]
        docs.append("\n".join(lines))
    return make_corpus("\n\n".join(docs) + "\n")


def tiny_vocab(pieces: dict[str, float], alphabet: set[str] | None = None):
    """Build a SubwordVocab directly from a piece -> log-prob table."""
    if alphabet is None:
        alphabet = {c for p in pieces for c in subword.strip_marker(p)}
    return subword.SubwordVocab(pieces=dict(pieces), alphabet=set(alphabet))
