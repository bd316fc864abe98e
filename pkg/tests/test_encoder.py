import math
import random

import pytest
import torch

from monolm import encoder as E
from monolm.pretrain_data import PretrainExample


def tiny_config(**overrides):
    defaults = dict(
        layers=2, hidden=32, heads=2, vocab_size=100, max_positions=32,
        dropout=0.0,
    )
    defaults.update(overrides)
    return E.EncoderConfig(**defaults)


def random_examples(n, vocab=100, length=10, seed=0, n_masks=2):
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        ids = [rng.randrange(5, vocab) for _ in range(length)]
        positions = sorted(rng.sample(range(1, length - 1), n_masks))
        out.append(
            PretrainExample(
                token_ids=ids,
                segment_ids=[0] * (length // 2) + [1] * (length - length // 2),
                masked_positions=positions,
                masked_labels=[rng.randrange(5, vocab) for _ in positions],
                is_next=bool(rng.getrandbits(1)),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Config and init


def test_config_rejects_indivisible_heads():
    with pytest.raises(E.EncoderError):
        E.EncoderConfig(hidden=10, heads=3)


def test_optimizer_config_rejects_bad_warmup():
    with pytest.raises(E.EncoderError):
        E.OptimizerConfig(warmup_steps=10, total_steps=10)


def test_init_deterministic():
    a = E.init_model(tiny_config(), seed=3)
    b = E.init_model(tiny_config(), seed=3)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_bert_base_parameter_count():
    config = E.EncoderConfig(
        layers=12, hidden=768, heads=12, vocab_size=30522, dropout=0.1
    )
    count = E.init_model(config, 0).parameter_count()
    assert abs(count - 110e6) / 110e6 < 0.05


def test_toy_parameter_count_closed_form():
    config = tiny_config(layers=2, hidden=32, heads=2, vocab_size=100)
    h, v, ff, layers = 32, 100, 128, 2
    emb = v * h + config.max_positions * h + 2 * h + 2 * h
    per_layer = (
        4 * (h * h + h)            # q, k, v, out
        + 2 * h                    # attention norm
        + (h * ff + ff) + (ff * h + h)
        + 2 * h                    # ff norm
    )
    mlm = (h * h + h) + 2 * h + v  # transform + norm + tied-decoder bias
    nsp = (h * h + h) + (h * 2 + 2)
    expected = emb + layers * per_layer + mlm + nsp
    assert E.init_model(config, 0).parameter_count() == expected


# ---------------------------------------------------------------------------
# Forward


def test_attention_rows_sum_to_one():
    model = E.init_model(tiny_config(), 0)
    batch = E.collate(random_examples(3, length=8), pad_id=0)
    out = model(batch, return_weights=True)
    for weights in out.attention:
        sums = weights.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)


def test_padding_receives_zero_attention():
    model = E.init_model(tiny_config(), 0)
    examples = random_examples(1, length=6) + random_examples(1, length=12, seed=1)
    batch = E.collate(examples, pad_id=0)
    out = model(batch, return_weights=True)
    for weights in out.attention:
        # Example 0 is padded beyond position 6: no real query row may
        # put weight there.
        assert float(weights[0, :, :6, 6:].detach().abs().max()) == 0.0


def test_no_cross_example_leakage():
    model = E.init_model(tiny_config(), 0)
    model.eval()
    examples = random_examples(4, length=10)
    batch = E.collate(examples, pad_id=0)
    out = model(batch)
    perm = [2, 0, 3, 1]
    batch_p = E.collate([examples[i] for i in perm], pad_id=0)
    out_p = model(batch_p)
    assert torch.allclose(out.hidden[perm], out_p.hidden, atol=1e-6)
    assert torch.allclose(out.nsp_logits[perm], out_p.nsp_logits, atol=1e-6)


def test_output_shapes():
    model = E.init_model(tiny_config(), 0)
    examples = random_examples(3, length=10, n_masks=2)
    out = model(E.collate(examples, pad_id=0))
    assert out.nsp_logits.shape == (3, 2)
    assert out.mlm_logits.shape == (6, 100)


def test_position_overflow_raises():
    model = E.init_model(tiny_config(max_positions=8), 0)
    batch = E.collate(random_examples(1, length=16), pad_id=0)
    with pytest.raises(E.EncoderError):
        model(batch)


def test_eval_forward_is_pure():
    model = E.init_model(tiny_config(dropout=0.1), 0)
    model.eval()
    batch = E.collate(random_examples(2), pad_id=0)
    a = model(batch)
    b = model(batch)
    assert torch.equal(a.hidden, b.hidden)


# ---------------------------------------------------------------------------
# Loss


def test_uniform_mlm_logits_give_log_vocab():
    vocab = 100
    mlm_logits = torch.zeros((4, vocab), dtype=torch.float64)
    nsp_logits = torch.tensor([[10.0, -10.0]], dtype=torch.float64)
    batch = E.Batch(
        token_ids=torch.zeros((1, 4), dtype=torch.long),
        segment_ids=torch.zeros((1, 4), dtype=torch.long),
        pad_mask=torch.ones((1, 4), dtype=torch.bool),
        masked_batch_index=torch.zeros(4, dtype=torch.long),
        masked_positions=torch.arange(4),
        masked_labels=torch.tensor([1, 2, 3, 4]),
        nsp_labels=torch.tensor([0]),
    )
    out = E.ForwardOutput(None, mlm_logits, nsp_logits, [])
    total, mlm, nsp = E.loss_fn(out, batch)
    assert float(mlm) == pytest.approx(math.log(vocab), abs=1e-9)
    assert float(total) == pytest.approx(float(mlm) + float(nsp), abs=1e-9)


def test_perfect_logits_give_zero_loss():
    mlm_logits = torch.full((2, 10), -1e4)
    mlm_logits[0, 3] = 1e4
    mlm_logits[1, 7] = 1e4
    nsp_logits = torch.tensor([[1e4, -1e4]])
    batch = E.Batch(
        token_ids=torch.zeros((1, 2), dtype=torch.long),
        segment_ids=torch.zeros((1, 2), dtype=torch.long),
        pad_mask=torch.ones((1, 2), dtype=torch.bool),
        masked_batch_index=torch.zeros(2, dtype=torch.long),
        masked_positions=torch.arange(2),
        masked_labels=torch.tensor([3, 7]),
        nsp_labels=torch.tensor([0]),
    )
    out = E.ForwardOutput(None, mlm_logits, nsp_logits, [])
    total, _, _ = E.loss_fn(out, batch)
    assert float(total) == pytest.approx(0.0, abs=1e-6)


def test_loss_hand_computed_fixture():
    # 2 masked positions over a 3-token vocab plus 1 NSP label.
    mlm_logits = torch.log(torch.tensor([[0.7, 0.2, 0.1], [0.25, 0.5, 0.25]]))
    nsp_logits = torch.log(torch.tensor([[0.9, 0.1]]))
    batch = E.Batch(
        token_ids=torch.zeros((1, 2), dtype=torch.long),
        segment_ids=torch.zeros((1, 2), dtype=torch.long),
        pad_mask=torch.ones((1, 2), dtype=torch.bool),
        masked_batch_index=torch.zeros(2, dtype=torch.long),
        masked_positions=torch.arange(2),
        masked_labels=torch.tensor([0, 1]),
        nsp_labels=torch.tensor([1]),
    )
    out = E.ForwardOutput(None, mlm_logits, nsp_logits, [])
    total, mlm, nsp = E.loss_fn(out, batch)
    want_mlm = -(math.log(0.7) + math.log(0.5)) / 2
    want_nsp = -math.log(0.1)
    assert float(mlm) == pytest.approx(want_mlm, abs=1e-6)
    assert float(nsp) == pytest.approx(want_nsp, abs=1e-6)
    assert float(total) == pytest.approx(want_mlm + want_nsp, abs=1e-6)


def test_loss_no_masked_positions():
    nsp_logits = torch.zeros((2, 2))
    batch = E.Batch(
        token_ids=torch.zeros((2, 4), dtype=torch.long),
        segment_ids=torch.zeros((2, 4), dtype=torch.long),
        pad_mask=torch.ones((2, 4), dtype=torch.bool),
        masked_batch_index=torch.zeros(0, dtype=torch.long),
        masked_positions=torch.zeros(0, dtype=torch.long),
        masked_labels=torch.zeros(0, dtype=torch.long),
        nsp_labels=torch.tensor([0, 1]),
    )
    out = E.ForwardOutput(None, torch.zeros((0, 5)), nsp_logits, [])
    total, mlm, nsp = E.loss_fn(out, batch)
    assert float(mlm) == 0.0
    assert float(total) == pytest.approx(float(nsp))


# ---------------------------------------------------------------------------
# LR schedule


def test_lr_schedule_endpoints():
    cfg = E.OptimizerConfig(warmup_steps=100, total_steps=1000)
    assert E.lr_at(cfg, 0) == 0.0
    assert E.lr_at(cfg, 100) == pytest.approx(1e-4)
    assert E.lr_at(cfg, 1000) == 0.0


def test_lr_schedule_piecewise_linear():
    cfg = E.OptimizerConfig(warmup_steps=100, total_steps=1000)
    for step in range(0, 100):
        assert E.lr_at(cfg, step) == pytest.approx(1e-4 * step / 100)
    for step in range(100, 1001):
        assert E.lr_at(cfg, step) == pytest.approx(1e-4 * (1000 - step) / 900)
    peak = max(E.lr_at(cfg, s) for s in range(1001))
    assert peak == E.lr_at(cfg, 100)


def test_lr_out_of_range():
    cfg = E.OptimizerConfig(warmup_steps=100, total_steps=1000)
    with pytest.raises(E.EncoderError):
        E.lr_at(cfg, 1001)


# ---------------------------------------------------------------------------
# Training plumbing


def test_weight_decay_exclusions():
    model = E.init_model(tiny_config(), 0)
    groups = E.optimizer_param_groups(model, 0.01)
    no_decay = {id(p) for p in groups[1]["params"]}
    for name, param in model.named_parameters():
        if name.endswith("bias") or "norm" in name:
            assert id(param) in no_decay, name


def test_short_training_reduces_loss():
    examples = random_examples(64, vocab=50, length=12, seed=5)
    # Repeat the pool so the model can memorize it.
    cfg = tiny_config(vocab_size=50, dropout=0.0)
    opt = E.OptimizerConfig(
        learning_rate=1e-3, warmup_steps=10, total_steps=60, batch_size=16
    )
    result = E.train({12: examples}, cfg, opt, pad_id=0, seed=0)
    early = sum(m + n for _, _, m, n in result.curve[:10]) / 10
    late = sum(m + n for _, _, m, n in result.curve[-10:]) / 10
    assert late < early


def test_training_nonfinite_abort():
    examples = random_examples(8, vocab=50, length=8)
    cfg = tiny_config(vocab_size=50)
    opt = E.OptimizerConfig(
        learning_rate=1e6, warmup_steps=5, total_steps=40, batch_size=8
    )
    with pytest.raises(E.NumericError, match="step"):
        E.train({8: examples}, cfg, opt, pad_id=0, seed=0)


def test_checkpoint_roundtrip(tmp_path):
    examples = random_examples(8, vocab=50, length=8)
    cfg = tiny_config(vocab_size=50)
    opt = E.OptimizerConfig(
        learning_rate=1e-3, warmup_steps=2, total_steps=5, batch_size=4
    )
    path = tmp_path / "ckpt.pt"
    result = E.train(
        {8: examples}, cfg, opt, pad_id=0, seed=0, checkpoint_path=str(path)
    )
    loaded, payload = E.load_checkpoint(str(path))
    assert payload["step"] == 5
    batch = E.collate(examples, pad_id=0)
    result.model.eval()
    a = result.model(batch)
    b = loaded(batch)
    assert torch.equal(a.hidden, b.hidden)
    assert torch.equal(a.mlm_logits, b.mlm_logits)


# ---------------------------------------------------------------------------
# Gradient check


def test_grad_check_tiny_config():
    config = E.EncoderConfig(
        layers=1, hidden=8, heads=2, vocab_size=20, max_positions=16,
        dropout=0.0,
    )
    report = E.grad_check(config, tolerance=1e-4, seed=0)
    assert report.passed
    assert report.max_relative_error < 1e-4


def test_grad_check_requires_zero_dropout():
    with pytest.raises(E.EncoderError):
        E.grad_check(tiny_config(dropout=0.1))


def test_unused_embedding_rows_zero_gradient():
    # The MLM decoder is tied to the token embeddings, so the softmax
    # denominator touches every vocab row whenever MLM loss is active.
    # Locality of the input path is observable on an NSP-only batch.
    config = tiny_config(vocab_size=30)
    torch.manual_seed(0)
    model = E.EncoderModel(config).double()
    model.eval()
    examples = random_examples(2, vocab=10, length=8, seed=1, n_masks=0)
    batch = E.collate(examples, pad_id=0)
    out = model(batch)
    total, _, _ = E.loss_fn(out, batch)
    total.backward()
    grad = model.token_emb.weight.grad
    used = set()
    for ex in examples:
        used.update(ex.token_ids)
    assert torch.isfinite(grad).all()
    for row in range(10, 30):
        if row in used:
            continue
        assert float(grad[row].abs().max()) == 0.0
