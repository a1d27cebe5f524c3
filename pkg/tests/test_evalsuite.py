import math
import re

import numpy as np
import pytest

from conftest import toy_model
from sambalm.errors import ConfigError, ContractError
from sambalm.evalsuite import (
    PASSKEY_DEPTHS,
    attention_entropy,
    attention_entropy_from_rows,
    entropy_report,
    entropy_rows,
    passkey_eval,
    passkey_finetune,
    passkey_make,
    passkey_score,
    phonebook_make,
    ppl_at_lengths,
    ppl_sliding,
    selection_entropy,
    selection_entropy_from_delta,
)
from sambalm.model import ModelConfig, build
from sambalm.training import Corpus, TrainConfig, synthetic_corpus, train_loop


def byte_model(**over):
    return toy_model(vocab_size=256, **over)


# --- perplexity -----------------------------------------------------------------

def test_untrained_ppl_near_vocab_size():
    model = byte_model(d_m=32, d_e=64)
    data = synthetic_corpus(4096, seed=1)
    report = ppl_at_lengths(model, data, [128, 256])
    assert report.arch == "samba"
    for row in report.rows:
        assert abs(row.perplexity - 256) / 256 < 0.10
        assert row.token_count > 0


def test_trained_unigram_ppl_approaches_one():
    model = byte_model(d_m=16, d_e=32, n_layers=4)
    corpus = Corpus(b"a" * 4000, name="const")
    cfg = TrainConfig(peak_lr=5e-3, warmup_steps=5, total_steps=150, batch_size=2,
                      seq_len=32, checkpoint_every=0, seed=0)
    train_loop(model, corpus, cfg)
    report = ppl_at_lengths(model, b"a" * 1024, [64])
    assert report.rows[0].perplexity < 1.1


def test_ppl_is_pure_and_repeatable():
    model = byte_model()
    data = synthetic_corpus(2048, seed=2)
    r1 = ppl_at_lengths(model, data, [128])
    r2 = ppl_at_lengths(model, data, [128])
    assert r1.rows[0].perplexity == r2.rows[0].perplexity


def test_ppl_sliding_agrees_with_chunked_when_window_equals_stride():
    model = byte_model()
    data = synthetic_corpus(2048, seed=3)
    length = 256
    chunked = ppl_at_lengths(model, data, [length]).rows[0].perplexity
    sliding = ppl_sliding(model, data, eval_window=length, stride=length)
    assert sliding == chunked


def test_ppl_sliding_contract():
    model = byte_model()
    with pytest.raises(ContractError):
        ppl_sliding(model, b"x" * 512, eval_window=64, stride=128)
    with pytest.raises(ConfigError):
        ppl_at_lengths(model, b"x" * 64, [128])


# --- passkey -------------------------------------------------------------------

def test_passkey_depth_extremes(rng):
    prompt0, key0 = passkey_make(200, 0.0, rng)
    assert prompt0.startswith(b"\nThe pass key is ")
    prompt1, key1 = passkey_make(200, 1.0, rng)
    tail = f"is the pass key.\n\nWhat is the pass key? The pass key is"
    assert tail.encode() in prompt1[-len(tail) - 8 :]


def test_passkey_answer_is_five_digits(rng):
    for _ in range(20):
        _, key = passkey_make(120, float(rng.uniform(0, 1)), rng)
        assert re.fullmatch(r"[0-9]{5}", key)


def test_passkey_answer_occurs_exactly_twice(rng):
    prompt, key = passkey_make(300, 0.4, rng)
    assert prompt.count(key.encode()) == 2


def test_passkey_doc_too_short(rng):
    with pytest.raises(ConfigError):
        passkey_make(10, 0.5, rng)


def test_passkey_score_strips_whitespace():
    assert passkey_score(b"  12345. and", "12345")
    assert passkey_score(b"\n12345", "12345")
    assert not passkey_score(b"12346", "12345")
    assert not passkey_score(b"1234", "12345")


def test_passkey_eval_grid_shape():
    model = byte_model(w=16)
    grid = passkey_eval(model, [96], trials=1, max_new=6)
    assert grid.acc.shape == (1, 11)
    assert grid.depths == PASSKEY_DEPTHS
    assert ((grid.acc >= 0) & (grid.acc <= 1)).all()
    assert 0.0 <= grid.mean_at(96) <= 1.0


def test_passkey_finetune_runs_and_logs():
    model = byte_model(d_m=16, d_e=32, n_layers=4, w=16)
    cfg = TrainConfig(peak_lr=3e-4, warmup_steps=2, total_steps=1, batch_size=2,
                      seq_len=64, checkpoint_every=0, seed=1)
    losses = passkey_finetune(model, train_doc_len=80, steps=4, cfg=cfg)
    assert len(losses) == 4
    assert all(np.isfinite(l) for l in losses)


# --- phonebook -----------------------------------------------------------------

def test_phonebook_answer_listed(rng):
    prompt, answer = phonebook_make(10, rng)
    text = prompt.decode("ascii")
    assert f": {answer}\n" in text
    assert re.fullmatch(r"[0-9]{3}-[0-9]{3}-[0-9]{4}", answer)


def test_phonebook_numbers_distinct(rng):
    prompt, _ = phonebook_make(60, rng)
    numbers = re.findall(r"[0-9]{3}-[0-9]{3}-[0-9]{4}", prompt.decode("ascii"))
    book_numbers = numbers[:60]
    assert len(set(book_numbers)) == 60


def test_phonebook_prompt_grows_linearly(rng):
    sizes = {}
    for n_pairs in (20, 120, 240, 480):
        prompt, _ = phonebook_make(n_pairs, rng)
        sizes[n_pairs] = len(prompt)
    per_pair = (sizes[480] - sizes[20]) / 460
    assert 16 <= per_pair <= 26, per_pair


def test_phonebook_needs_two_pairs(rng):
    with pytest.raises(ContractError):
        phonebook_make(1, rng)


# --- entropy -------------------------------------------------------------------

def test_entropy_rows_uniform_and_onehot():
    uniform = np.full((1, 1, 4), 0.25)
    np.testing.assert_allclose(entropy_rows(uniform), math.log(4), atol=1e-12)
    onehot = np.zeros((1, 1, 4))
    onehot[0, 0, 2] = 1.0
    assert entropy_rows(onehot)[0, 0] == 0.0


def test_attention_entropy_uniform_construction_exact():
    # zeroed query projections make every visible key equally likely
    model = toy_model("llama-swa", w=16)
    for slot in model.layers:
        if slot.kind == "swa":
            slot.params.w_q_attn.data[:] = 0.0
    k = 9
    tokens = np.arange(k + 1) % model.config.vocab_size
    report = attention_entropy(model, tokens, l=1)
    # last row (index k) sees min(k+1, w) keys
    expected = math.log(min(k + 1, model.config.w))
    for entry in report.entries:
        assert abs(entry.entropy - expected) <= 1e-12


def test_attention_entropy_row_bound(rng):
    model = toy_model("samba")
    n = 24
    tokens = rng.integers(0, 61, size=n)
    report = attention_entropy(model, tokens, l=n - 1)
    w = model.config.w
    for entry in report.entries:
        bound = np.log([min(i + 1, w) for i in range(1, n)]).mean()
        assert entry.entropy <= bound + 1e-9


def test_selection_entropy_constant_delta_exact():
    n = 8
    delta = np.full((n, 5), 0.37)
    assert abs(selection_entropy_from_delta(delta) - math.log(n)) <= 1e-12


def test_selection_entropy_concentrated_is_small():
    delta = np.full((16, 3), 1e-9)
    delta[7] = 1.0
    assert selection_entropy_from_delta(delta) < 1e-6


def test_selection_entropy_max_bound(rng):
    for _ in range(5):
        n = int(rng.integers(2, 40))
        delta = rng.uniform(0.001, 0.1, size=(n, 6))
        assert selection_entropy_from_delta(delta) <= math.log(n) + 1e-12


def test_selection_entropy_on_model(rng):
    model = toy_model("samba")
    tokens = rng.integers(0, 61, size=20)
    report = selection_entropy(model, tokens)
    kinds = [s.kind for s in model.layers]
    assert len(report.entries) == kinds.count("mamba")
    for entry in report.entries:
        assert 0 <= entry.entropy <= math.log(20) + 1e-12


def test_entropy_is_pure_diagnostic(rng):
    model = toy_model("samba")
    tokens = rng.integers(0, 61, size=20)
    params_before = [p.tensor.data.copy() for p in model.parameters()]
    logits_before = model.forward(tokens).data
    entropy_report(model, tokens, l=4)
    for before, spec in zip(params_before, model.parameters()):
        np.testing.assert_array_equal(before, spec.tensor.data)
    np.testing.assert_array_equal(logits_before, model.forward(tokens).data)


def test_entropy_contract_errors(rng):
    model = toy_model("samba")
    tokens = rng.integers(0, 61, size=8)
    with pytest.raises(ContractError):
        attention_entropy(model, tokens, l=8)
    with pytest.raises(ContractError):
        entropy_report(model, tokens, l=0)


def test_entropy_report_combines_layers(rng):
    model = toy_model("samba")
    tokens = rng.integers(0, 61, size=16)
    report = entropy_report(model, tokens, l=4)
    kinds = [e.layer_kind for e in report.entries]
    assert kinds == [s.kind for s in model.layers if s.kind != "mlp"]
