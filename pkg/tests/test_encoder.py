import copy
import random

import pytest
import torch

from crisiskit.app.corpus import encode
from crisiskit.app.encoder import (
    ClassifierHead,
    DownsampleProjection,
    EncoderConfig,
    EncoderModel,
    PoolingMode,
    SequenceClassifier,
    brute_force_count,
    classify_logits,
    count_params,
    forward,
    implied_vocab_size,
    list_presets,
    load_model,
    pool,
    preset,
    project_down,
    save_model,
)
from crisiskit.app.errors import ConfigError, EmptySequenceError, MissingInputError, ShapeError

# ---------- Config / parameter counts ----------

def test_count_params_matches_allocation_for_desk_config():
    cfg = EncoderConfig(hidden_size=64, num_layers=2, num_heads=2, intermediate_size=256, vocab_size=1000, max_positions=128)
    assert count_params(cfg) == brute_force_count(EncoderModel(cfg))


def test_count_params_without_layers():
    cfg = EncoderConfig(hidden_size=8, num_layers=0, num_heads=2, intermediate_size=8, vocab_size=50, max_positions=4)
    assert count_params(cfg) == 50 * 8 + 4 * 8 + 2 * 8
    assert brute_force_count(EncoderModel(cfg)) == count_params(cfg)


def test_count_params_random_configs():
    rng = random.Random(5)
    for _ in range(20):
        A = rng.choice([1, 2, 4])
        H = A * rng.randint(1, 8)
        cfg = EncoderConfig(
            hidden_size=H,
            num_layers=rng.randint(0, 3),
            num_heads=A,
            intermediate_size=H * rng.randint(1, 4),
            vocab_size=rng.randint(10, 300),
            max_positions=rng.randint(1, 40),
        )
        assert count_params(cfg) == brute_force_count(EncoderModel(cfg))


@pytest.mark.parametrize("name,reported", [("s_m", 58e6), ("s_t", 19e6)])
def test_student_presets_match_reported_sizes(name, reported):
    assert abs(count_params(preset(name)) - reported) < 1e6


def test_implied_vocab_size_inverts_the_count():
    cfg = preset("s_s")
    V = implied_vocab_size(cfg, 35e6)
    resized = preset("s_s", vocab_size=round(V))
    assert abs(count_params(resized) - 35e6) <= cfg.hidden_size


def test_presets_and_overrides():
    assert {"s_m", "s_s", "s_t", "desk-teacher", "desk-s_t"} <= set(list_presets())
    cfg = preset("Desk-S_T", vocab_size=300)
    assert cfg.vocab_size == 300 and cfg.hidden_size == 32
    with pytest.raises(ConfigError):
        preset("gpt-7")
    with pytest.raises(ConfigError):
        preset("s_t", num_heads=3)


def test_config_rejects_bad_shapes():
    with pytest.raises(ValueError):
        EncoderConfig(hidden_size=10, num_layers=1, num_heads=3, intermediate_size=20, vocab_size=10)
    with pytest.raises(ValueError):
        EncoderConfig(hidden_size=16, num_layers=1, num_heads=2, intermediate_size=8, vocab_size=10)


# ---------- Forward / masking ----------

def test_forward_shape_and_finite(tokenizer, tiny_config):
    model = EncoderModel(tiny_config).eval()
    out = forward(model, [encode(tokenizer, "need water in Lagos", max_length=32)])
    assert out.shape == (1, 32, 16)
    assert torch.isfinite(out).all()


def test_forward_rejects_long_sequences(tiny_config):
    model = EncoderModel(tiny_config)
    with pytest.raises(ShapeError):
        model(torch.zeros(1, 33, dtype=torch.long))


def test_padded_tail_does_not_leak(tiny_config):
    model = EncoderModel(tiny_config).eval()
    ids = torch.randint(7, tiny_config.vocab_size, (2, 12))
    mask = torch.ones(2, 12, dtype=torch.long)
    mask[:, 8:] = 0
    other = ids.clone()
    other[:, 8:] = torch.randint(7, tiny_config.vocab_size, (2, 4))
    with torch.no_grad():
        a, b = model(ids, mask), model(other, mask)
    assert torch.allclose(a[:, :8], b[:, :8], atol=1e-6)


def test_attention_rows_sum_to_one(tiny_config):
    model = EncoderModel(tiny_config).eval()
    x = torch.randn(2, 6, 16)
    mask = torch.tensor([[1, 1, 1, 1, 0, 0], [1, 1, 1, 1, 1, 1]])
    attn = model.layers[0].attention
    _, probs = attn(x, EncoderModel.additive_mask(mask, x.dtype), return_probs=True)
    assert torch.allclose(probs.sum(dim=-1), torch.ones(2, 2, 6), atol=1e-5)
    assert probs[0, :, :, 4:].abs().max().item() == 0.0


def test_double_precision_forward_agrees(tiny_config):
    model = EncoderModel(tiny_config).eval()
    ids = torch.randint(0, tiny_config.vocab_size, (3, 10))
    with torch.no_grad():
        single = model(ids)
        double = copy.deepcopy(model).double()(ids)
    assert torch.allclose(single.double(), double, atol=1e-3)


def test_frozen_model_is_repeatable(tiny_config):
    model = SequenceClassifier.from_config(tiny_config).eval()
    ids = torch.randint(0, tiny_config.vocab_size, (4, 9))
    mask = torch.ones_like(ids)
    with torch.no_grad():
        assert torch.equal(model(ids, mask), model(ids, mask))


# ---------- Pooling / heads ----------

def test_mean_pool_ignores_masked_tokens():
    emb = torch.tensor([[[1.0, 2.0], [9.0, 9.0]]])
    assert torch.equal(pool(emb, torch.tensor([[1, 0]]), PoolingMode.MEAN), torch.tensor([[1.0, 2.0]]))
    assert torch.equal(pool(emb[:, :1], torch.tensor([[1]]), PoolingMode.MEAN), torch.tensor([[1.0, 2.0]]))
    two = pool(emb, torch.tensor([[1, 1]]), PoolingMode.MEAN)
    assert torch.equal(two, torch.tensor([[5.0, 5.5]]))


def test_cls_pool_is_first_position():
    emb = torch.randn(3, 5, 4)
    mask = torch.tensor([[1, 1, 0, 0, 0], [1, 1, 1, 1, 1], [1, 0, 0, 0, 0]])
    assert torch.equal(pool(emb, mask, PoolingMode.CLS), emb[:, 0, :])


def test_pool_errors():
    with pytest.raises(EmptySequenceError, match="empty sequence"):
        pool(torch.zeros(2, 3, 4), torch.tensor([[1, 0, 0], [0, 0, 0]]), PoolingMode.MEAN)
    with pytest.raises(ShapeError):
        pool(torch.zeros(2, 3, 4), torch.ones(2, 4), PoolingMode.MEAN)


@pytest.mark.parametrize("raw,mode", [("mean", PoolingMode.MEAN), ("MeanPool", PoolingMode.MEAN), ("cls_token", PoolingMode.CLS)])
def test_pooling_mode_parse(raw, mode):
    assert PoolingMode.parse(raw) is mode


def test_pooling_mode_parse_rejects_unknown():
    with pytest.raises(ConfigError):
        PoolingMode.parse("max")


def test_classifier_head_arithmetic():
    head = ClassifierHead(2, 2)
    with torch.no_grad():
        head.weight.copy_(torch.eye(2))
        head.bias.copy_(torch.tensor([0.5, 0.0]))
    assert torch.equal(classify_logits(head, torch.tensor([[1.0, 2.0]])), torch.tensor([[1.5, 2.0]]))
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()
    logits = classify_logits(head, torch.randn(3, 2))
    assert torch.equal(logits, torch.zeros(3, 2))
    with pytest.raises(ShapeError):
        classify_logits(head, torch.zeros(1, 3))


def test_downsample_projection():
    D = DownsampleProjection(4, 2)
    with torch.no_grad():
        D.weight.copy_(torch.tensor([[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]]))
        D.bias.zero_()
    out = project_down(D, torch.tensor([[1.0, 2.0, 3.0, 4.0]]))
    assert torch.equal(out, torch.tensor([[3.0, 7.0]]))
    with torch.no_grad():
        D.weight.zero_()
        D.bias.copy_(torch.tensor([0.25, -1.0]))
    assert torch.equal(project_down(D, torch.randn(3, 4)), torch.tensor([[0.25, -1.0]] * 3))
    with pytest.raises(ConfigError):
        DownsampleProjection(4, 4)
    with pytest.raises(ShapeError):
        project_down(DownsampleProjection(6, 2), torch.zeros(1, 4))


def test_classifier_rejects_wrong_class_count(tiny_config):
    with pytest.raises(ConfigError):
        SequenceClassifier.from_config(tiny_config, class_names=["a", "b"])


# ---------- Persistence ----------

def test_save_and_load_classifier(tmp_path, tokenizer, tiny_config):
    model = SequenceClassifier.from_config(
        tiny_config, pooling=PoolingMode.CLS, class_names=["request", "offer", "request_and_offer", "irrelevant"],
        tokenizer_fingerprint=tokenizer.fingerprint,
    ).eval()
    save_model(model, tmp_path / "m", tokenizer)
    back, tok = load_model(tmp_path / "m")
    assert isinstance(back, SequenceClassifier)
    assert back.pooling is PoolingMode.CLS
    assert back.class_names == model.class_names
    assert tok is not None and tok.fingerprint == tokenizer.fingerprint
    ids = torch.randint(0, tiny_config.vocab_size, (2, 7))
    mask = torch.ones_like(ids)
    with torch.no_grad():
        assert torch.equal(model(ids, mask), back.eval()(ids, mask))


def test_save_and_load_bare_encoder(tmp_path, tiny_config):
    enc = EncoderModel(tiny_config)
    save_model(enc, tmp_path / "e")
    back, tok = load_model(tmp_path / "e")
    assert isinstance(back, EncoderModel) and tok is None
    assert count_params(back.config) == brute_force_count(back)


def test_load_missing_model(tmp_path):
    with pytest.raises(MissingInputError):
        load_model(tmp_path / "nope")
