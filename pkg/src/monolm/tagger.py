"""Downstream heads: linear-chain CRF, BiLSTM-CRF tagger, BiLSTM document
classifier, encoder fine-tuning, and a static word-embedding loader.

An *embedder* is any callable mapping a token list to an (L, D) float
tensor; char-LM embeddings, static tables and learned lookup tables all
fit that contract.
"""

from __future__ import annotations

import copy
import random
from dataclasses import dataclass
from typing import Callable, IO, Literal, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import EncoderModel
from .subword import SubwordVocab, viterbi_tokenize

Embedder = Callable[[list[str]], torch.Tensor]


class TaggerError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Static embeddings


@dataclass
class StaticEmbeddingTable:
    vectors: dict[str, torch.Tensor]
    dim: int
    unknown_policy: Literal["zero"] = "zero"

    def __call__(self, tokens: list[str]) -> torch.Tensor:
        rows = [
            self.vectors.get(tok, torch.zeros(self.dim)) for tok in tokens
        ]
        return torch.stack(rows) if rows else torch.zeros((0, self.dim))


def load_static_embeddings(stream: IO[str]) -> StaticEmbeddingTable:
    """Parse the text vector format: header "count dim", then
    "word v1 ... v_dim" lines.
    """
    header = next(stream).split()
    if len(header) != 2:
        raise TaggerError("embedding header must be 'count dim'")
    count, dim = int(header[0]), int(header[1])
    vectors: dict[str, torch.Tensor] = {}
    for lineno, line in enumerate(stream, start=2):
        parts = line.rstrip("\n").split(" ")
        if len(parts) != dim + 1:
            raise TaggerError(
                f"line {lineno}: expected {dim} values, got {len(parts) - 1}"
            )
        try:
            vectors[parts[0]] = torch.tensor([float(v) for v in parts[1:]])
        except ValueError as err:
            raise TaggerError(f"line {lineno}: {err}") from err
    if len(vectors) != count:
        raise TaggerError(
            f"header promised {count} vectors, file holds {len(vectors)}"
        )
    return StaticEmbeddingTable(vectors=vectors, dim=dim)


# ---------------------------------------------------------------------------
# Linear-chain CRF


@dataclass
class CRFParams:
    transitions: torch.Tensor   # (K, K) from-tag -> to-tag
    start: torch.Tensor         # (K,)
    stop: torch.Tensor          # (K,)

    @property
    def n_tags(self) -> int:
        return self.start.shape[0]


def sequence_score(
    emissions: torch.Tensor, crf: CRFParams, tags: Sequence[int]
) -> torch.Tensor:
    """start + sum emissions + sum transitions + stop for one tag sequence."""
    score = crf.start[tags[0]] + emissions[0, tags[0]]
    for t in range(1, len(tags)):
        score = score + crf.transitions[tags[t - 1], tags[t]] + emissions[t, tags[t]]
    return score + crf.stop[tags[-1]]


def crf_log_partition(emissions: torch.Tensor, crf: CRFParams) -> torch.Tensor:
    """log sum over all K^L tag sequences, by the forward recursion."""
    L = emissions.shape[0]
    if L < 1:
        raise TaggerError("log partition needs at least one position")
    alpha = crf.start + emissions[0]
    for t in range(1, L):
        alpha = torch.logsumexp(
            alpha[:, None] + crf.transitions, dim=0
        ) + emissions[t]
    return torch.logsumexp(alpha + crf.stop, dim=0)


def crf_viterbi(
    emissions: torch.Tensor, crf: CRFParams
) -> tuple[list[int], float]:
    """Best tag sequence and its score.

    Ties break toward the smallest tag index at the earliest differing
    position, which the backward-maximum recursion delivers when argmax
    prefers the lowest index (torch.max does).
    """
    em = emissions.detach().cpu().numpy()
    trans = crf.transitions.detach().cpu().numpy()
    start = crf.start.detach().cpu().numpy()
    stop = crf.stop.detach().cpu().numpy()
    L, K = em.shape
    if L < 1:
        raise TaggerError("viterbi needs at least one position")
    # delta[k]: best score of a suffix starting at position t with tag k.
    # Working backward and taking the first (lowest-index) argmax at each
    # step yields the lexicographically smallest optimal sequence, i.e. the
    # smallest tag at the earliest differing position.
    delta = em[L - 1] + stop
    back: list[np.ndarray] = []
    for t in range(L - 2, -1, -1):
        scores = trans + delta[None, :]    # (from, to)
        back.append(np.argmax(scores, axis=1))
        delta = em[t] + np.max(scores, axis=1)
    back.reverse()
    total = delta + start
    first = int(np.argmax(total))
    tags = [first]
    for idx in back:
        tags.append(int(idx[tags[-1]]))
    return tags, float(total[first])


# ---------------------------------------------------------------------------
# BiLSTM-CRF sequence tagger


@dataclass
class TaggerConfig:
    hidden: int = 128
    learning_rate: float = 0.1
    epochs: int = 50
    batch_size: int = 64
    patience: int = 3
    seed: int = 0


# Hyperparameters used for the full-scale downstream comparison runs.
DOWNSTREAM_TAGGER_PRESET = TaggerConfig(epochs=50, learning_rate=0.1, batch_size=64)


class BiLSTMCRFTagger(nn.Module):
    def __init__(self, embed_dim: int, n_tags: int, hidden: int = 128):
        super().__init__()
        self.lstm = nn.LSTM(
            embed_dim, hidden, batch_first=True, bidirectional=True
        )
        self.emit = nn.Linear(2 * hidden, n_tags)
        self.crf = CRFParamsModule(n_tags)

    def emissions(self, word_embeddings: torch.Tensor) -> torch.Tensor:
        out, _ = self.lstm(word_embeddings[None])
        return self.emit(out[0])

    def nll(self, word_embeddings: torch.Tensor, tags: list[int]) -> torch.Tensor:
        em = self.emissions(word_embeddings)
        crf = self.crf.params()
        return crf_log_partition(em, crf) - sequence_score(em, crf, tags)

    @torch.no_grad()
    def predict(self, word_embeddings: torch.Tensor) -> list[int]:
        em = self.emissions(word_embeddings)
        tags, _ = crf_viterbi(em, self.crf.params())
        return tags


class CRFParamsModule(nn.Module):
    def __init__(self, n_tags: int):
        super().__init__()
        self.transitions = nn.Parameter(torch.zeros(n_tags, n_tags))
        self.start = nn.Parameter(torch.zeros(n_tags))
        self.stop = nn.Parameter(torch.zeros(n_tags))

    def params(self) -> CRFParams:
        return CRFParams(self.transitions, self.start, self.stop)


@dataclass
class TaggedSentence:
    tokens: list[str]
    gold_tags: list[str]
    predicted_tags: list[str] | None = None

    def __post_init__(self):
        if len(self.tokens) != len(self.gold_tags):
            raise TaggerError("tokens and tags differ in length")


@dataclass
class TrainedTagger:
    model: BiLSTMCRFTagger
    tagset: list[str]
    embedder: Embedder

    def tag(self, tokens: list[str]) -> list[str]:
        emb = self.embedder(tokens)
        return [self.tagset[i] for i in self.model.predict(emb)]


def train_tagger(
    train_set: list[TaggedSentence],
    dev_set: list[TaggedSentence],
    embedder: Embedder,
    config: TaggerConfig | None = None,
) -> TrainedTagger:
    """Minimize CRF negative log-likelihood; return the best-dev checkpoint.

    The development set is only scored, never trained on.
    """
    config = config or TaggerConfig()
    if not train_set:
        raise TaggerError("empty training set")
    tagset = sorted(
        {t for s in train_set + dev_set for t in s.gold_tags}
    )
    tag_to_id = {t: i for i, t in enumerate(tagset)}
    torch.manual_seed(config.seed)
    embed_dim = embedder(train_set[0].tokens).shape[1]
    model = BiLSTMCRFTagger(embed_dim, len(tagset), config.hidden)
    optimizer = torch.optim.SGD(model.parameters(), lr=config.learning_rate)
    rng = random.Random(config.seed)

    cached = [(embedder(s.tokens), [tag_to_id[t] for t in s.gold_tags])
              for s in train_set]
    best_state = copy.deepcopy(model.state_dict())
    best_dev = -1.0
    for _ in range(config.epochs):
        model.train()
        order = list(range(len(cached)))
        rng.shuffle(order)
        for start in range(0, len(order), config.batch_size):
            optimizer.zero_grad()
            batch = order[start: start + config.batch_size]
            loss = sum(model.nll(cached[i][0], cached[i][1]) for i in batch)
            (loss / len(batch)).backward()
            optimizer.step()
        model.eval()
        score = _dev_word_accuracy(model, embedder, tagset, dev_set or train_set)
        if score > best_dev:
            best_dev = score
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    return TrainedTagger(model=model, tagset=tagset, embedder=embedder)


def _dev_word_accuracy(model, embedder, tagset, sentences) -> float:
    correct = total = 0
    for s in sentences:
        pred = model.predict(embedder(s.tokens))
        correct += sum(
            1 for p, g in zip(pred, s.gold_tags) if tagset[p] == g
        )
        total += len(s.gold_tags)
    return correct / total if total else 0.0


# ---------------------------------------------------------------------------
# BiLSTM document classifier


@dataclass
class ClassifierConfig:
    hidden: int = 128
    dropout: float = 0.3068
    reproject: bool = True
    learning_rate: float = 0.1
    epochs: int = 50
    batch_size: int = 64
    patience: int = 3
    seed: int = 0


@dataclass
class LabeledText:
    label: str
    tokens: list[str]


class BiLSTMClassifier(nn.Module):
    """Word embeddings -> optional reprojection -> BiLSTM -> linear scores."""

    def __init__(self, embed_dim: int, n_classes: int, config: ClassifierConfig):
        super().__init__()
        self.reproject = (
            nn.Linear(embed_dim, embed_dim) if config.reproject else None
        )
        self.dropout = nn.Dropout(config.dropout)
        self.lstm = nn.LSTM(
            embed_dim, config.hidden, batch_first=True, bidirectional=True
        )
        self.out = nn.Linear(2 * config.hidden, n_classes)

    def forward(self, word_embeddings: torch.Tensor) -> torch.Tensor:
        x = word_embeddings[None]
        if self.reproject is not None:
            x = self.reproject(x)
        x = self.dropout(x)
        _, (h, _) = self.lstm(x)
        doc = torch.cat([h[0, 0], h[1, 0]])
        return self.out(doc)


@dataclass
class TrainedClassifier:
    model: BiLSTMClassifier
    classes: list[str]
    embedder: Embedder

    def predict(self, tokens: list[str]) -> str:
        self.model.eval()
        with torch.no_grad():
            scores = self.model(self.embedder(tokens))
        return self.classes[int(torch.argmax(scores))]


def train_classifier(
    train_set: list[LabeledText],
    dev_set: list[LabeledText],
    embedder: Embedder,
    config: ClassifierConfig | None = None,
) -> TrainedClassifier:
    """Cross-entropy training with patience-based early stopping on dev."""
    config = config or ClassifierConfig()
    classes = sorted({ex.label for ex in train_set})
    if len(classes) < 2:
        raise TaggerError("classifier needs at least two classes")
    class_to_id = {c: i for i, c in enumerate(classes)}
    torch.manual_seed(config.seed)
    embed_dim = embedder(train_set[0].tokens).shape[1]
    model = BiLSTMClassifier(embed_dim, len(classes), config)
    optimizer = torch.optim.SGD(model.parameters(), lr=config.learning_rate)
    rng = random.Random(config.seed)
    cached = [
        (embedder(ex.tokens), class_to_id[ex.label]) for ex in train_set
    ]
    monitor = dev_set or train_set
    best_state = copy.deepcopy(model.state_dict())
    best_acc, stale = -1.0, 0
    for _ in range(config.epochs):
        model.train()
        order = list(range(len(cached)))
        rng.shuffle(order)
        for start in range(0, len(order), config.batch_size):
            optimizer.zero_grad()
            batch = order[start: start + config.batch_size]
            loss = sum(
                F.cross_entropy(
                    model(cached[i][0])[None],
                    torch.tensor([cached[i][1]]),
                )
                for i in batch
            )
            (loss / len(batch)).backward()
            optimizer.step()
        model.eval()
        acc = _classifier_accuracy(model, embedder, classes, monitor)
        if acc > best_acc:
            best_acc, stale = acc, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if stale > config.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return TrainedClassifier(model=model, classes=classes, embedder=embedder)


def _classifier_accuracy(model, embedder, classes, examples) -> float:
    with torch.no_grad():
        correct = sum(
            1
            for ex in examples
            if classes[int(torch.argmax(model(embedder(ex.tokens))))] == ex.label
        )
    return correct / len(examples) if examples else 0.0


# ---------------------------------------------------------------------------
# Encoder fine-tuning


@dataclass
class FinetuneConfig:
    epochs: int = 3
    learning_rate: float = 2e-5
    batch_size: int = 16
    seed: int = 0


class SequenceClassificationHead(nn.Module):
    """Classification over the [CLS] position of the encoder."""

    def __init__(self, encoder: EncoderModel, n_classes: int):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(encoder.config.hidden, n_classes)

    def forward(self, token_ids, segment_ids, pad_mask):
        hidden, _ = self.encoder.encode(token_ids, segment_ids, pad_mask)
        return self.head(hidden[:, 0])


class TokenClassificationHead(nn.Module):
    """Per-token classification; labels attach to each word's first piece."""

    def __init__(self, encoder: EncoderModel, n_tags: int):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(encoder.config.hidden, n_tags)

    def forward(self, token_ids, segment_ids, pad_mask):
        hidden, _ = self.encoder.encode(token_ids, segment_ids, pad_mask)
        return self.head(hidden)


@dataclass
class FinetunedModel:
    task: Literal["sequence-classification", "token-classification"]
    model: nn.Module
    labels: list[str]
    vocab: SubwordVocab

    def predict_label(self, tokens: list[str]) -> str:
        ids, _ = _encode_words(self.vocab, tokens)
        token_ids = torch.tensor([ids])
        segs = torch.zeros_like(token_ids)
        mask = torch.ones_like(token_ids, dtype=torch.bool)
        self.model.eval()
        with torch.no_grad():
            scores = self.model(token_ids, segs, mask)
        return self.labels[int(torch.argmax(scores[0]))]

    def predict_tags(self, tokens: list[str]) -> list[str]:
        ids, first_piece = _encode_words(self.vocab, tokens)
        token_ids = torch.tensor([ids])
        segs = torch.zeros_like(token_ids)
        mask = torch.ones_like(token_ids, dtype=torch.bool)
        self.model.eval()
        with torch.no_grad():
            logits = self.model(token_ids, segs, mask)[0]
        return [
            self.labels[int(torch.argmax(logits[pos]))] for pos in first_piece
        ]


def _encode_words(vocab: SubwordVocab, tokens: list[str]):
    """[CLS] pieces [SEP] with the index of each word's first piece."""
    ids = [vocab.cls_id]
    first_piece = []
    for word in tokens:
        pieces = viterbi_tokenize(vocab, word)
        first_piece.append(len(ids))
        ids.extend(vocab.piece_to_id[p] for p in pieces)
    ids.append(vocab.sep_id)
    return ids, first_piece


def finetune_encoder(
    task: Literal["sequence-classification", "token-classification"],
    dataset: list[LabeledText] | list[TaggedSentence],
    encoder: EncoderModel,
    vocab: SubwordVocab,
    config: FinetuneConfig | None = None,
) -> FinetunedModel:
    config = config or FinetuneConfig()
    torch.manual_seed(config.seed)
    if task == "sequence-classification":
        labels = sorted({ex.label for ex in dataset})
        model = SequenceClassificationHead(encoder, len(labels))
    elif task == "token-classification":
        labels = sorted({t for s in dataset for t in s.gold_tags})
        model = TokenClassificationHead(encoder, len(labels))
    else:
        raise TaggerError(f"unknown fine-tuning task {task!r}")
    label_to_id = {l: i for i, l in enumerate(labels)}
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.learning_rate)
    rng = random.Random(config.seed)
    model.train()
    for _ in range(config.epochs):
        order = list(range(len(dataset)))
        rng.shuffle(order)
        for start in range(0, len(order), config.batch_size):
            batch = [dataset[i] for i in order[start: start + config.batch_size]]
            optimizer.zero_grad()
            loss = _finetune_batch_loss(task, batch, model, vocab, label_to_id)
            loss.backward()
            optimizer.step()
    model.eval()
    return FinetunedModel(task=task, model=model, labels=labels, vocab=vocab)


def _finetune_batch_loss(task, batch, model, vocab, label_to_id):
    encoded = []
    for ex in batch:
        tokens = ex.tokens
        ids, first_piece = _encode_words(vocab, tokens)
        encoded.append((ids, first_piece, ex))
    width = max(len(ids) for ids, _, _ in encoded)
    token_ids = torch.full((len(encoded), width), vocab.pad_id, dtype=torch.long)
    pad_mask = torch.zeros((len(encoded), width), dtype=torch.bool)
    for i, (ids, _, _) in enumerate(encoded):
        token_ids[i, : len(ids)] = torch.tensor(ids)
        pad_mask[i, : len(ids)] = True
    segs = torch.zeros_like(token_ids)
    logits = model(token_ids, segs, pad_mask)
    if task == "sequence-classification":
        targets = torch.tensor([label_to_id[ex.label] for _, _, ex in encoded])
        return F.cross_entropy(logits, targets)
    # Token task: one loss term per word, at its first piece.
    terms = []
    for i, (_, first_piece, ex) in enumerate(encoded):
        targets = torch.tensor([label_to_id[t] for t in ex.gold_tags])
        positions = torch.tensor(first_piece)
        terms.append(F.cross_entropy(logits[i, positions], targets))
    return torch.stack(terms).mean()
