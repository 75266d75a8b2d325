import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from asymprune.cache import KVCache
from asymprune.errors import ConfigError, InputError, StateError
from asymprune.model import (
    MaskAddends,
    ModelConfig,
    embed,
    forward_decode_step,
    forward_prefill,
    init_model,
    load_model,
    save_model,
    text_hidden_states,
)
from asymprune.tokens import Modality, Phase, Token, TokenSequence

from conftest import random_sequence


def test_same_seed_same_weights():
    cfg = ModelConfig(num_layers=4, num_heads=4, hidden_dim=64, ffn_dim=256, init_seed=7)
    assert init_model(cfg).checksum() == init_model(cfg).checksum()
    assert init_model(cfg).checksum() != init_model(ModelConfig(init_seed=8)).checksum()


@pytest.mark.parametrize("kwargs", [dict(hidden_dim=63, num_heads=4), dict(num_layers=0), dict(attn_blind_dims=64)])
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs)


def test_minimal_model_runs():
    model = init_model(ModelConfig(num_layers=1, num_heads=1, hidden_dim=2, ffn_dim=2, vocab_size=3, init_seed=0))
    trace, cache = forward_prefill(model, TokenSequence.from_parts(None, [0, 1]))
    assert trace.hidden.shape == (2, 2) and len(cache) == 2


def test_save_load_roundtrip(tmp_path, small_model):
    path = tmp_path / "m.npz"
    save_model(small_model, path)
    loaded = load_model(path)
    assert loaded.checksum() == small_model.checksum()
    assert loaded.config == small_model.config


def test_blind_dims_have_no_query_key_rows():
    model = init_model(ModelConfig(attn_blind_dims=8, tie_qk=True, qk_std=0.2))
    for layer in model.layers:
        assert torch.all(layer.wq[-8:] == 0) and torch.all(layer.wk[-8:] == 0)
        assert torch.equal(layer.wq, layer.wk)


def test_embed_rules(small_model):
    d = small_model.config.hidden_dim
    seq = TokenSequence((Token(Modality.VISION, np.zeros(d), 5), Token(Modality.TEXT, 7, 9)))
    x = embed(small_model, seq)
    assert torch.equal(x[0], small_model.position_embedding[5])
    assert torch.equal(x[1], small_model.token_embedding[7] + small_model.position_embedding[9])


def test_pruned_embedding_rows_match(small_model):
    seq = random_sequence(small_model, np.random.default_rng(0), 6, 3)
    keep = [0, 2, 5, 6, 7, 8]
    assert torch.equal(embed(small_model, seq.subset(keep)), embed(small_model, seq)[keep])


@pytest.mark.parametrize("tok", [Token(Modality.TEXT, 99, 0), Token(Modality.TEXT, 1, 500), Token(Modality.VISION, np.zeros(3), 0)])
def test_embed_rejects_bad_tokens(small_model, tok):
    with pytest.raises(InputError):
        embed(small_model, TokenSequence((tok,)))


def test_zero_mask_equals_no_mask(small_model):
    seq = random_sequence(small_model, np.random.default_rng(1), 5, 3)
    a, _ = forward_prefill(small_model, seq)
    b, _ = forward_prefill(small_model, seq, MaskAddends.zeros(len(seq)))
    assert torch.equal(a.hidden, b.hidden)
    assert torch.equal(text_hidden_states(a, seq), text_hidden_states(b, seq))


def test_hard_mask_blocks_attention(small_model):
    seq = random_sequence(small_model, np.random.default_rng(2), 5, 3)
    trace, _ = forward_prefill(small_model, seq, MaskAddends.hard(seq, [1]))
    for attn in trace.attentions:
        assert float(attn[:, seq.text_indices, 1].max()) < 1e-6


def test_hard_mask_on_text_rejected(small_model):
    seq = random_sequence(small_model, np.random.default_rng(2), 2, 2)
    with pytest.raises(InputError):
        MaskAddends.hard(seq, [3])


def test_mask_length_checked(small_model):
    seq = random_sequence(small_model, np.random.default_rng(2), 2, 2)
    with pytest.raises(InputError):
        forward_prefill(small_model, seq, torch.zeros(3))


def test_single_token_attends_to_itself(small_model):
    trace, _ = forward_prefill(small_model, TokenSequence.from_parts(None, [4]))
    assert all(float(a[h, 0, 0]) == 1.0 for a in trace.attentions for h in range(a.shape[0]))


def test_single_text_token_hidden_is_last_row(small_model):
    seq = random_sequence(small_model, np.random.default_rng(3), 4, 1)
    trace, _ = forward_prefill(small_model, seq)
    assert torch.equal(text_hidden_states(trace, seq), trace.hidden[-1:])


def test_decode_attention_normalized_after_one_token_prefill(small_model):
    _, cache = forward_prefill(small_model, TokenSequence.from_parts(None, [4]))
    out = forward_decode_step(small_model, Token(Modality.TEXT, 5, 1, Phase.GENERATED), cache)
    assert out.final_attention.shape == (small_model.config.num_heads, 2)
    assert torch.allclose(out.final_attention.sum(dim=-1), torch.ones(small_model.config.num_heads))


def test_decode_matches_prefill(small_model):
    seq = random_sequence(small_model, np.random.default_rng(4), 5, 3)
    full, _ = forward_prefill(small_model, seq)
    _, cache = forward_prefill(small_model, TokenSequence(seq.tokens[:-1]))
    out = forward_decode_step(small_model, seq[-1], cache)
    assert torch.allclose(out.logits, full.logits[-1], atol=1e-6)


def test_decode_is_deterministic_on_cache_copies(small_model):
    seq = random_sequence(small_model, np.random.default_rng(5), 4, 2)
    _, cache = forward_prefill(small_model, seq)
    tok = Token(Modality.TEXT, 3, seq.next_position, Phase.GENERATED)
    a = forward_decode_step(small_model, tok, cache.copy())
    b = forward_decode_step(small_model, tok, cache.copy())
    assert torch.equal(a.logits, b.logits)


def test_decode_state_errors(small_model):
    with pytest.raises(StateError):
        forward_decode_step(small_model, Token(Modality.TEXT, 1, 0), KVCache(2, 16))
    _, cache = forward_prefill(small_model, TokenSequence.from_parts(None, [1, 2]))
    with pytest.raises(InputError):
        forward_decode_step(small_model, Token(Modality.TEXT, 1, 1), cache)


def test_prefill_accumulates_column_sums(small_model):
    seq = random_sequence(small_model, np.random.default_rng(6), 3, 2)
    trace, cache = forward_prefill(small_model, seq)
    expected = sum(a.double().sum(dim=(0, 1)) for a in trace.attentions).numpy()
    np.testing.assert_allclose(cache.accumulated, expected)
    # every query row sums to one, per head and layer
    assert np.isclose(cache.accumulated.sum(), len(seq) * small_model.config.num_heads * small_model.config.num_layers)


def test_mask_prune_equivalence_single(small_model):
    seq = random_sequence(small_model, np.random.default_rng(7), 6, 3)
    masked, _ = forward_prefill(small_model, seq, MaskAddends.hard(seq, [2]))
    pruned_seq = seq.subset([i for i in range(len(seq)) if i != 2])
    pruned, _ = forward_prefill(small_model, pruned_seq)
    torch.testing.assert_close(text_hidden_states(masked, seq), text_hidden_states(pruned, pruned_seq), rtol=1e-5, atol=1e-5)


@given(st.integers(1, 8), st.integers(1, 4), st.integers(0, 10_000))
def test_causality(n_vision, n_text, seed):
    # appending tokens never changes earlier rows
    model = init_model(ModelConfig(num_layers=1, num_heads=2, hidden_dim=8, ffn_dim=8, vocab_size=16, init_seed=1))
    seq = random_sequence(model, np.random.default_rng(seed), n_vision, n_text)
    head = TokenSequence(seq.tokens[:-1]) if len(seq) > 1 else seq
    a, _ = forward_prefill(model, head)
    b, _ = forward_prefill(model, seq)
    torch.testing.assert_close(a.hidden, b.hidden[: len(head)], rtol=1e-5, atol=1e-6)
