"""Transformer encoder with MLM and NSP heads, configurable up to the
BERT-BASE shape, plus the warmup/linear-decay Adam training loop and a
finite-difference gradient check.
"""

from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass, asdict
from typing import IO, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .pretrain_data import PretrainExample

CHECKPOINT_VERSION = 1


class EncoderError(ValueError):
    pass


class NumericError(RuntimeError):
    """Non-finite loss or failed gradient check."""


@dataclass
class EncoderConfig:
    layers: int = 12
    hidden: int = 768
    heads: int = 12
    ff_size: int | None = None          # defaults to 4 * hidden
    max_positions: int = 512
    vocab_size: int = 50000
    dropout: float = 0.1
    init_scale: float = 0.02

    def __post_init__(self):
        if self.ff_size is None:
            self.ff_size = 4 * self.hidden
        if self.hidden % self.heads != 0:
            raise EncoderError(
                f"hidden {self.hidden} not divisible by heads {self.heads}"
            )
        if not (0.0 <= self.dropout < 1.0):
            raise EncoderError("dropout must be in [0, 1)")


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    warmup_steps: int = 10000
    total_steps: int = 1000000
    batch_size: int = 256

    def __post_init__(self):
        if self.warmup_steps >= self.total_steps:
            raise EncoderError("warmup must be smaller than total steps")
        for name in ("learning_rate", "warmup_steps", "total_steps", "batch_size"):
            if getattr(self, name) <= 0:
                raise EncoderError(f"{name} must be positive")


def lr_at(config: OptimizerConfig, step: int) -> float:
    """Linear warmup to the base rate, then linear decay to zero."""
    if step < 0 or step > config.total_steps:
        raise EncoderError(f"step {step} outside [0, {config.total_steps}]")
    if step <= config.warmup_steps:
        return config.learning_rate * step / config.warmup_steps
    frac = (config.total_steps - step) / (config.total_steps - config.warmup_steps)
    return config.learning_rate * frac


class SelfAttention(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.heads = config.heads
        self.head_dim = config.hidden // config.heads
        self.query = nn.Linear(config.hidden, config.hidden)
        self.key = nn.Linear(config.hidden, config.hidden)
        self.value = nn.Linear(config.hidden, config.hidden)
        self.out = nn.Linear(config.hidden, config.hidden)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x, pad_mask, return_weights=False):
        b, n, h = x.shape
        def split(t):
            return t.view(b, n, self.heads, self.head_dim).transpose(1, 2)
        q, k, v = split(self.query(x)), split(self.key(x)), split(self.value(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if pad_mask is not None:
            # pad_mask: (b, n) True for real tokens.
            scores = scores.masked_fill(~pad_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        weights = self.dropout(weights)
        ctx = (weights @ v).transpose(1, 2).reshape(b, n, h)
        out = self.out(ctx)
        return (out, weights) if return_weights else (out, None)


class EncoderLayer(nn.Module):
    """Post-layer-norm transformer block with GELU feed-forward."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.attention = SelfAttention(config)
        self.attn_norm = nn.LayerNorm(config.hidden)
        self.ff_in = nn.Linear(config.hidden, config.ff_size)
        self.ff_out = nn.Linear(config.ff_size, config.hidden)
        self.ff_norm = nn.LayerNorm(config.hidden)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x, pad_mask, return_weights=False):
        attn, weights = self.attention(x, pad_mask, return_weights)
        x = self.attn_norm(x + self.dropout(attn))
        ff = self.ff_out(F.gelu(self.ff_in(x)))
        x = self.ff_norm(x + self.dropout(ff))
        return x, weights


class EncoderModel(nn.Module):
    """Token + learned position + segment embeddings, stacked encoder
    layers, MLM head over masked positions and NSP head over [CLS].
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.token_emb = nn.Embedding(config.vocab_size, config.hidden)
        self.position_emb = nn.Embedding(config.max_positions, config.hidden)
        self.segment_emb = nn.Embedding(2, config.hidden)
        self.emb_norm = nn.LayerNorm(config.hidden)
        self.emb_dropout = nn.Dropout(config.dropout)
        self.layers = nn.ModuleList(
            EncoderLayer(config) for _ in range(config.layers)
        )
        # MLM head: transform + layer norm + decoder tied to token embeddings.
        self.mlm_transform = nn.Linear(config.hidden, config.hidden)
        self.mlm_norm = nn.LayerNorm(config.hidden)
        self.mlm_bias = nn.Parameter(torch.zeros(config.vocab_size))
        # NSP head: tanh pooler on [CLS] + binary classifier.
        self.pooler = nn.Linear(config.hidden, config.hidden)
        self.nsp_head = nn.Linear(config.hidden, 2)
        self.apply(self._init_weights)

    def _init_weights(self, module):
        if isinstance(module, (nn.Linear, nn.Embedding)):
            nn.init.normal_(module.weight, mean=0.0, std=self.config.init_scale)
            if isinstance(module, nn.Linear) and module.bias is not None:
                nn.init.zeros_(module.bias)

    def encode(self, token_ids, segment_ids, pad_mask, return_weights=False):
        b, n = token_ids.shape
        if n > self.config.max_positions:
            raise EncoderError(
                f"sequence length {n} exceeds max positions "
                f"{self.config.max_positions}"
            )
        positions = torch.arange(n, device=token_ids.device).expand(b, n)
        x = (
            self.token_emb(token_ids)
            + self.position_emb(positions)
            + self.segment_emb(segment_ids)
        )
        x = self.emb_dropout(self.emb_norm(x))
        all_weights = []
        for layer in self.layers:
            x, weights = layer(x, pad_mask, return_weights)
            if return_weights:
                all_weights.append(weights)
        return x, all_weights

    def forward(self, batch: "Batch", return_weights=False):
        hidden, weights = self.encode(
            batch.token_ids, batch.segment_ids, batch.pad_mask, return_weights
        )
        gathered = hidden[batch.masked_batch_index, batch.masked_positions]
        mlm = self.mlm_norm(F.gelu(self.mlm_transform(gathered)))
        mlm_logits = mlm @ self.token_emb.weight.t() + self.mlm_bias
        pooled = torch.tanh(self.pooler(hidden[:, 0]))
        nsp_logits = self.nsp_head(pooled)
        return ForwardOutput(hidden, mlm_logits, nsp_logits, weights)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


@dataclass
class ForwardOutput:
    hidden: torch.Tensor
    mlm_logits: torch.Tensor       # (#masked positions in batch, vocab)
    nsp_logits: torch.Tensor       # (batch, 2)
    attention: list


@dataclass
class Batch:
    token_ids: torch.Tensor
    segment_ids: torch.Tensor
    pad_mask: torch.Tensor
    masked_batch_index: torch.Tensor
    masked_positions: torch.Tensor
    masked_labels: torch.Tensor
    nsp_labels: torch.Tensor


def collate(
    examples: Sequence[PretrainExample],
    pad_id: int,
    device: str = "cpu",
    dtype=torch.long,
) -> Batch:
    if not examples:
        raise EncoderError("empty batch")
    max_len = max(len(ex.token_ids) for ex in examples)
    ids = torch.full((len(examples), max_len), pad_id, dtype=dtype)
    segs = torch.zeros((len(examples), max_len), dtype=dtype)
    mask = torch.zeros((len(examples), max_len), dtype=torch.bool)
    bidx, mpos, mlab = [], [], []
    nsp = []
    for i, ex in enumerate(examples):
        n = len(ex.token_ids)
        ids[i, :n] = torch.tensor(ex.token_ids, dtype=dtype)
        segs[i, :n] = torch.tensor(ex.segment_ids, dtype=dtype)
        mask[i, :n] = True
        bidx.extend([i] * len(ex.masked_positions))
        mpos.extend(ex.masked_positions)
        mlab.extend(ex.masked_labels)
        nsp.append(int(ex.is_next))
    return Batch(
        token_ids=ids.to(device),
        segment_ids=segs.to(device),
        pad_mask=mask.to(device),
        masked_batch_index=torch.tensor(bidx, dtype=torch.long, device=device),
        masked_positions=torch.tensor(mpos, dtype=torch.long, device=device),
        masked_labels=torch.tensor(mlab, dtype=torch.long, device=device),
        nsp_labels=torch.tensor(nsp, dtype=torch.long, device=device),
    )


def loss_fn(output: ForwardOutput, batch: Batch):
    """Mean MLM cross-entropy over masked positions plus mean NSP
    cross-entropy over examples; the MLM term is 0 with no masks.
    """
    if output.mlm_logits.shape[0] > 0:
        mlm = F.cross_entropy(output.mlm_logits, batch.masked_labels)
    else:
        mlm = output.nsp_logits.new_zeros(())
    nsp = F.cross_entropy(output.nsp_logits, batch.nsp_labels)
    return mlm + nsp, mlm, nsp


def init_model(config: EncoderConfig, seed: int = 0) -> EncoderModel:
    torch.manual_seed(seed)
    return EncoderModel(config)


def optimizer_param_groups(model: nn.Module, weight_decay: float):
    """Decoupled weight decay, excluding biases and normalization gains."""
    decay, no_decay = [], []
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        if name.endswith("bias") or "norm" in name.lower():
            no_decay.append(param)
        else:
            decay.append(param)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


@dataclass
class TrainResult:
    model: EncoderModel
    curve: list[tuple[int, float, float, float]]   # (step, lr, mlm, nsp)


def train(
    phase_examples: dict[int, list[PretrainExample]],
    encoder_config: EncoderConfig,
    opt_config: OptimizerConfig,
    pad_id: int,
    seed: int = 0,
    model: EncoderModel | None = None,
    checkpoint_every: int = 0,
    checkpoint_path: str | None = None,
) -> TrainResult:
    """Run the phased training loop (short-sequence phase first).

    Steps are apportioned to phases by their example-count fractions; each
    phase cycles over its own shuffled example pool.
    """
    torch.manual_seed(seed)
    model = model or EncoderModel(encoder_config)
    model.train()
    optimizer = torch.optim.AdamW(
        optimizer_param_groups(model, opt_config.weight_decay),
        lr=opt_config.learning_rate,
        betas=(opt_config.beta1, opt_config.beta2),
    )
    total_examples = sum(len(v) for v in phase_examples.values())
    phases = sorted(phase_examples.items())   # ascending max_len
    curve: list[tuple[int, float, float, float]] = []
    rng = random.Random(seed)
    step = 0
    for max_len, pool in phases:
        if not pool:
            continue
        phase_steps = round(opt_config.total_steps * len(pool) / total_examples)
        if max_len == phases[-1][0]:
            phase_steps = opt_config.total_steps - step
        order: list[int] = []
        for _ in range(phase_steps):
            step += 1
            lr = lr_at(opt_config, step)
            for group in optimizer.param_groups:
                group["lr"] = lr
            batch_examples = []
            for _ in range(min(opt_config.batch_size, len(pool))):
                if not order:
                    order = list(range(len(pool)))
                    rng.shuffle(order)
                batch_examples.append(pool[order.pop()])
            batch = collate(batch_examples, pad_id)
            output = model(batch)
            loss, mlm, nsp = loss_fn(output, batch)
            if not torch.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at step {step} (phase max_len {max_len})"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            curve.append((step, lr, float(mlm.detach()), float(nsp.detach())))
            if (
                checkpoint_every
                and checkpoint_path
                and step % checkpoint_every == 0
            ):
                save_checkpoint(model, optimizer, step, checkpoint_path)
    if checkpoint_path:
        save_checkpoint(model, optimizer, step, checkpoint_path)
    model.eval()
    return TrainResult(model=model, curve=curve)


def write_curve(curve, out: IO[str]) -> None:
    writer = csv.writer(out)
    writer.writerow(["step", "lr", "mlm_loss", "nsp_loss"])
    for row in curve:
        writer.writerow(row)


def save_checkpoint(model: EncoderModel, optimizer, step: int, path: str) -> None:
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "config": asdict(model.config),
            "step": step,
            "model": model.state_dict(),
            "optimizer": optimizer.state_dict() if optimizer else None,
            "torch_rng": torch.get_rng_state(),
        },
        path,
    )


def load_checkpoint(path: str) -> tuple[EncoderModel, dict]:
    payload = torch.load(path, weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise EncoderError(f"unsupported checkpoint version in {path}")
    config = EncoderConfig(**payload["config"])
    model = EncoderModel(config)
    model.load_state_dict(payload["model"])
    model.eval()
    return model, payload


# ---------------------------------------------------------------------------
# Gradient check


@dataclass
class GradCheckReport:
    max_relative_error: float
    per_group: dict[str, float]
    passed: bool
    tolerance: float


def grad_check(
    config: EncoderConfig,
    tolerance: float = 1e-4,
    seed: int = 0,
    samples_per_tensor: int = 8,
    epsilon: float = 1e-5,
) -> GradCheckReport:
    """Analytic gradients vs central finite differences in double precision.

    Requires dropout 0.  Small tensors are checked exhaustively; larger ones
    on a seeded sample of coordinates.
    """
    if config.dropout != 0.0:
        raise EncoderError("gradient check requires dropout 0")
    torch.manual_seed(seed)
    model = EncoderModel(config).double()
    model.eval()

    rng = random.Random(seed)
    vocab, n = config.vocab_size, min(12, config.max_positions)
    examples = []
    for _ in range(2):
        ids = [rng.randrange(5, vocab) for _ in range(n)]
        segs = [0] * (n // 2) + [1] * (n - n // 2)
        positions = sorted(rng.sample(range(1, n - 1), 3))
        examples.append(
            PretrainExample(
                token_ids=ids,
                segment_ids=segs,
                masked_positions=positions,
                masked_labels=[rng.randrange(5, vocab) for _ in positions],
                is_next=bool(rng.getrandbits(1)),
            )
        )
    batch = collate(examples, pad_id=0, dtype=torch.long)

    def compute_loss():
        output = model(batch)
        loss, _, _ = loss_fn(output, batch)
        return loss

    loss = compute_loss()
    grads = torch.autograd.grad(loss, list(model.parameters()))

    per_group: dict[str, float] = {}
    failures = []
    with torch.no_grad():
        for (name, param), grad in zip(model.named_parameters(), grads):
            flat = param.view(-1)
            gflat = grad.reshape(-1)
            if flat.numel() <= samples_per_tensor:
                coords = range(flat.numel())
            else:
                coords = rng.sample(range(flat.numel()), samples_per_tensor)
            worst = 0.0
            for c in coords:
                orig = float(flat[c])
                flat[c] = orig + epsilon
                up = float(compute_loss())
                flat[c] = orig - epsilon
                down = float(compute_loss())
                flat[c] = orig
                fd = (up - down) / (2 * epsilon)
                a = float(gflat[c])
                err = abs(a - fd) / max(1.0, abs(a) + abs(fd))
                worst = max(worst, err)
            per_group[name] = worst
            if worst >= tolerance:
                failures.append(name)
    worst_overall = max(per_group.values())
    return GradCheckReport(
        max_relative_error=worst_overall,
        per_group=per_group,
        passed=not failures,
        tolerance=tolerance,
    )
