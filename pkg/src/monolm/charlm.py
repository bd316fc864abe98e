"""Character-level language models and contextual string embeddings.

A forward LSTM reads the sentence left to right; a word's embedding is the
hidden state at its last character.  A backward LSTM reads right to left;
its contribution is the hidden state at the word's first character.  The
two are concatenated.  The pooled variant keeps every embedding seen for a
surface form in a memory and concatenates a pooled summary with the local
embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import Corpus

UNK_CHAR = "\x00"

MODEL_FORMAT_VERSION = 1


class CharLMError(ValueError):
    pass


@dataclass
class CharLMConfig:
    hidden: int = 64
    seq_len: int = 250
    batch_size: int = 100
    epochs: int = 5
    direction: Literal["forward", "backward"] = "forward"
    embedding_dim: int = 32
    learning_rate: float = 2e-3


# Reference settings used for the full-scale runs; tests use the defaults.
FULL_SCALE_CHARLM_PRESET = dict(hidden=2048, seq_len=250, batch_size=100, epochs=5)


def build_char_vocab(corpus: Corpus) -> dict[str, int]:
    chars = sorted({c for text in corpus.iter_text() for c in text})
    vocab = {UNK_CHAR: 0, " ": 1, "\n": 2}
    for c in chars:
        if c not in vocab:
            vocab[c] = len(vocab)
    return vocab


class CharLM(nn.Module):
    """Next-character LSTM; the backward direction trains on reversed text."""

    def __init__(self, char_vocab: dict[str, int], config: CharLMConfig):
        super().__init__()
        self.char_vocab = dict(char_vocab)
        self.config = config
        self.embedding = nn.Embedding(len(char_vocab), config.embedding_dim)
        self.lstm = nn.LSTM(config.embedding_dim, config.hidden, batch_first=True)
        self.decoder = nn.Linear(config.hidden, len(char_vocab))

    def char_ids(self, text: str) -> list[int]:
        unk = self.char_vocab[UNK_CHAR]
        ids = [self.char_vocab.get(c, unk) for c in text]
        if self.config.direction == "backward":
            ids = ids[::-1]
        return ids

    def forward(self, ids: torch.Tensor, state=None):
        x = self.embedding(ids)
        out, state = self.lstm(x, state)
        return self.decoder(out), out, state

    @torch.no_grad()
    def hidden_states(self, text: str) -> torch.Tensor:
        """Per-character LSTM outputs in *original* text order."""
        self.eval()
        ids = torch.tensor([self.char_ids(text)], dtype=torch.long)
        _, out, _ = self(ids)
        out = out[0]
        if self.config.direction == "backward":
            out = out.flip(0)
        return out


def _char_stream(corpus: Corpus) -> str:
    return "\n".join(corpus.iter_text()) + "\n"


def train_char_lm(
    corpus: Corpus, config: CharLMConfig, seed: int = 0
) -> tuple[CharLM, list[float]]:
    """Train by next-character cross-entropy; returns (model, per-epoch ppl)."""
    torch.manual_seed(seed)
    vocab = build_char_vocab(corpus)
    model = CharLM(vocab, config)
    stream = _char_stream(corpus)
    ids = model.char_ids(stream)
    if len(ids) < 2:
        raise CharLMError("corpus too small to train a character LM")

    chunk = max(2, min(config.seq_len, len(ids) - 1))
    inputs, targets = [], []
    for start in range(0, len(ids) - 1, chunk):
        seg = ids[start: start + chunk + 1]
        if len(seg) < 2:
            continue
        inputs.append(seg[:-1])
        targets.append(seg[1:])
    width = max(len(s) for s in inputs)
    pad = vocab[UNK_CHAR]
    x = torch.full((len(inputs), width), pad, dtype=torch.long)
    y = torch.full((len(inputs), width), -100, dtype=torch.long)
    for i, (inp, tgt) in enumerate(zip(inputs, targets)):
        x[i, : len(inp)] = torch.tensor(inp)
        y[i, : len(tgt)] = torch.tensor(tgt)

    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    perplexities: list[float] = []
    for _ in range(config.epochs):
        model.train()
        total_loss, total_chars = 0.0, 0
        for start in range(0, len(x), config.batch_size):
            bx = x[start: start + config.batch_size]
            by = y[start: start + config.batch_size]
            logits, _, _ = model(bx)
            loss = F.cross_entropy(
                logits.reshape(-1, logits.shape[-1]), by.reshape(-1),
                ignore_index=-100,
            )
            if not torch.isfinite(loss):
                raise CharLMError("non-finite loss during character LM training")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            chars = int((by != -100).sum())
            total_loss += float(loss.detach()) * chars
            total_chars += chars
        perplexities.append(math.exp(total_loss / total_chars))
    model.eval()
    return model, perplexities


def _word_spans(sentence: str) -> list[tuple[str, int, int]]:
    """(word, first char index, last char index) over the raw sentence."""
    spans = []
    i = 0
    while i < len(sentence):
        if not sentence[i].isspace():
            j = i
            while j < len(sentence) and not sentence[j].isspace():
                j += 1
            spans.append((sentence[i:j], i, j - 1))
            i = j
        else:
            i += 1
    return spans


def embed_words(
    forward_model: CharLM, backward_model: CharLM, sentence: str
) -> list[tuple[str, torch.Tensor]]:
    """Contextual embedding per word: concat(fwd@last char, bwd@first char)."""
    if forward_model.config.direction != "forward":
        raise CharLMError("first model must be the forward direction")
    if backward_model.config.direction != "backward":
        raise CharLMError("second model must be the backward direction")
    spans = _word_spans(sentence)
    if not spans:
        return []
    fwd = forward_model.hidden_states(sentence)
    bwd = backward_model.hidden_states(sentence)
    out = []
    for word, first, last in spans:
        out.append((word, torch.cat([fwd[last], bwd[first]])))
    return out


@dataclass
class EmbeddingMemory:
    pooling: Literal["mean", "min", "max"] = "mean"
    entries: dict[str, list[torch.Tensor]] = field(default_factory=dict)

    def reset(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


def pooled_embed(
    memory: EmbeddingMemory, word: str, local: torch.Tensor
) -> torch.Tensor:
    """concat(pool over all occurrences incl. this one, local); updates memory."""
    history = memory.entries.setdefault(word, [])
    history.append(local.detach().clone())
    stacked = torch.stack(history)
    if memory.pooling == "mean":
        pooled = stacked.mean(dim=0)
    elif memory.pooling == "min":
        pooled = stacked.min(dim=0).values
    elif memory.pooling == "max":
        pooled = stacked.max(dim=0).values
    else:
        raise CharLMError(f"unknown pooling op {memory.pooling!r}")
    return torch.cat([pooled, local])


def save_charlm(model: CharLM, path: str) -> None:
    torch.save(
        {
            "version": MODEL_FORMAT_VERSION,
            "char_vocab": model.char_vocab,
            "config": vars(model.config),
            "model": model.state_dict(),
        },
        path,
    )


def load_charlm(path: str) -> CharLM:
    payload = torch.load(path, weights_only=False)
    if payload.get("version") != MODEL_FORMAT_VERSION:
        raise CharLMError(f"unsupported model version in {path}")
    model = CharLM(payload["char_vocab"], CharLMConfig(**payload["config"]))
    model.load_state_dict(payload["model"])
    model.eval()
    return model
