import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradsup.models import (
    BowEncoderConfig,
    CheckpointError,
    ModelParams,
    build_vocabulary,
    encode_bag_of_words,
    ensemble_logits,
    forward,
    init_model,
    load_checkpoint,
    save_checkpoint,
)


def linear(W, b):
    return ModelParams((np.asarray(W, float),), (np.asarray(b, float),), ("identity",))


def test_init_linear_has_zero_bias():
    m = init_model((2, 1), seed=0)
    assert m.layer_sizes == (2, 1)
    assert np.array_equal(m.biases[0], [0.0])


def test_init_large_shape_and_glorot_bound():
    m = init_model((2048, 64, 64, 64, 80), "relu", seed=0)
    assert m.layer_sizes == (2048, 64, 64, 64, 80)
    assert m.activations == ("relu", "relu", "relu", "identity")
    assert np.abs(m.weights[0]).max() <= np.sqrt(6 / (2048 + 64))


def test_init_is_deterministic():
    assert init_model((5, 7, 3), "tanh", seed=4) == init_model((5, 7, 3), "tanh", seed=4)
    assert init_model((5, 7, 3), "tanh", seed=4) != init_model((5, 7, 3), "tanh", seed=5)


def test_init_rejects_empty_spec():
    with pytest.raises(ValueError):
        init_model((3,))
    with pytest.raises(ValueError):
        init_model((3, 1), activation="swish")


def test_forward_identity_and_zero_weights():
    x = np.array([0.5, -2.0, 3.0])
    np.testing.assert_array_equal(forward(linear(np.eye(3), np.zeros(3)), x), x)
    np.testing.assert_array_equal(forward(linear(np.zeros((2, 3)), [4.0, -1.0]), x), [4.0, -1.0])


def test_forward_is_deterministic_and_checks_width():
    m = init_model((4, 8, 2), "sigmoid", seed=1)
    x = np.random.default_rng(0).normal(size=(5, 4))
    assert np.array_equal(forward(m, x), forward(m, x))
    with pytest.raises(ValueError):
        forward(m, np.ones(3))


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, 10), st.integers(0, 1000))
def test_linear_model_is_homogeneous(c, seed):
    m = init_model((3, 2), seed=seed)
    x = np.random.default_rng(seed).normal(size=3)
    np.testing.assert_allclose(forward(m, c * x), c * forward(m, x), atol=1e-12)


def test_ensemble_logits():
    x = np.zeros(2)
    a, b = linear(np.zeros((1, 2)), [1.0]), linear(np.zeros((1, 2)), [3.0])
    np.testing.assert_array_equal(ensemble_logits([a], x), forward(a, x))
    np.testing.assert_array_equal(ensemble_logits([a, b], x), [2.0])
    m = init_model((2, 4, 1), seed=3)
    x = np.array([0.3, -0.7])
    np.testing.assert_allclose(ensemble_logits([m] * 6, x), forward(m, x), rtol=1e-15)
    with pytest.raises(ValueError):
        ensemble_logits([], x)
    with pytest.raises(ValueError):
        ensemble_logits([a, init_model((2, 2))], x)


def test_ensemble_argmax_matches_agreeing_members():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 3))
    W = rng.normal(size=(4, 3))
    members = [linear(W * s, np.zeros(4)) for s in (0.5, 1.0, 2.0)]
    assert np.array_equal(ensemble_logits(members, X).argmax(1), forward(members[0], X).argmax(1))


def test_bag_of_words():
    table = np.arange(12, dtype=float).reshape(4, 3)
    cfg = BowEncoderConfig(vocab_size=4, embed_dim=3, max_tokens=32, embeddings=table)
    np.testing.assert_array_equal(encode_bag_of_words([2], cfg), table[2])
    np.testing.assert_array_equal(encode_bag_of_words([2, 2], cfg), table[2])
    np.testing.assert_array_equal(encode_bag_of_words([], cfg), np.zeros(3))
    np.testing.assert_array_equal(encode_bag_of_words([7, 9], cfg), np.zeros(3))
    np.testing.assert_array_equal(encode_bag_of_words([0, 99, 1], cfg), table[:2].mean(0))


def test_bag_of_words_truncates_to_max_tokens():
    table = np.eye(3)
    cfg = BowEncoderConfig(vocab_size=3, embed_dim=3, max_tokens=32, embeddings=table)
    tokens = [0] * 32 + [1] * 8
    np.testing.assert_array_equal(encode_bag_of_words(tokens, cfg), table[0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 9), max_size=40), st.integers(0, 100))
def test_bag_of_words_norm_bound(tokens, seed):
    table = np.random.default_rng(seed).normal(size=(10, 4))
    cfg = BowEncoderConfig(vocab_size=10, embed_dim=4, max_tokens=32, embeddings=table)
    assert np.linalg.norm(encode_bag_of_words(tokens, cfg)) <= np.linalg.norm(table, axis=1).max() + 1e-12


def test_token_model_forward_matches_encoder():
    m = init_model((4, 1), seed=2, vocab_size=6, max_tokens=3)
    cfg = BowEncoderConfig(vocab_size=6, embed_dim=4, max_tokens=3, embeddings=m.embedding)
    seq = [5, 1, 1, 4]
    np.testing.assert_allclose(forward(m, seq), m.weights[0] @ encode_bag_of_words(seq, cfg), rtol=1e-14)


def test_build_vocabulary_ties_by_first_occurrence():
    vocab = build_vocabulary([["b", "a", "c"], ["a", "c", "d"]], max_size=3)
    assert vocab == {"a": 0, "c": 1, "b": 2}


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    for m in (init_model((3, 5, 2), "tanh", seed=7), init_model((4, 1), seed=1, vocab_size=9, max_tokens=5)):
        path = tmp_path / "m.json"
        save_checkpoint(m, path)
        loaded = load_checkpoint(path)
        assert loaded == m and loaded.seed == m.seed


def test_corrupt_checkpoint_names_file(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(CheckpointError, match="broken.json"):
        load_checkpoint(path)
