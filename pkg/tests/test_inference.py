import numpy as np
import pytest

from conftest import toy_model
from sambalm.errors import ContractError
from sambalm.inference import (
    GenerateConfig,
    Session,
    bench_decode,
    bench_prefill,
    decode_step,
    full_logits,
    generate,
    prefill,
    select_token,
)

ARCHES = ("samba", "mamba-swa-mlp", "mamba-mlp", "mamba", "llama-swa")


@pytest.mark.parametrize("arch", ARCHES)
def test_streaming_matches_full_forward(arch, rng):
    model = toy_model(arch)
    prompt = rng.integers(0, model.config.vocab_size, size=40)
    session = Session(model)
    logits = prefill(session, prompt)
    tokens = list(prompt)
    worst = 0.0
    for _ in range(8):
        ref = model.forward(np.array(tokens)).data[-1]
        worst = max(worst, float(np.abs(logits - ref).max()))
        nxt = int(np.argmax(logits))
        tokens.append(nxt)
        logits = decode_step(session, nxt)
    assert worst < 1e-8, worst


def test_prefill_empty_prompt_is_error():
    with pytest.raises(ContractError):
        prefill(Session(toy_model()), np.array([], dtype=np.int64))


def test_prefill_is_deterministic(rng):
    model = toy_model()
    prompt = rng.integers(0, 61, size=23)
    sessions = [Session(model) for _ in range(2)]
    for s in sessions:
        prefill(s, prompt)
    for s1, s2 in zip(sessions[0].states, sessions[1].states):
        if s1 is None:
            continue
        if hasattr(s1, "z"):
            np.testing.assert_array_equal(s1.z, s2.z)
            np.testing.assert_array_equal(s1.conv, s2.conv)
        else:
            np.testing.assert_array_equal(s1.k, s2.k)
            np.testing.assert_array_equal(s1.v, s2.v)


def test_full_logits_chunk_size_invariance(rng):
    model = toy_model()
    tokens = rng.integers(0, 61, size=37)
    a = full_logits(Session(model, chunk=5), tokens)
    b = full_logits(Session(model, chunk=64), tokens)
    assert np.abs(a - b).max() < 1e-8


def test_state_footprint_constant(rng):
    model = toy_model()
    sizes = []
    for steps in (10, 200):
        session = Session(model)
        logits = prefill(session, [1])
        for _ in range(steps):
            logits = decode_step(session, int(np.argmax(logits)))
        sizes.append(session.state_nbytes())
    assert sizes[0] == sizes[1]
    assert sizes[0] > 0


def test_decode_step_rejects_out_of_range():
    model = toy_model()
    session = Session(model)
    prefill(session, [0])
    with pytest.raises(IndexError):
        decode_step(session, model.config.vocab_size)


def test_greedy_generation_deterministic(rng):
    model = toy_model()
    prompt = rng.integers(0, 61, size=12)
    cfg = GenerateConfig(mode="greedy", max_new_tokens=10)
    out1 = generate(Session(model), prompt, cfg)
    out2 = generate(Session(model), prompt, cfg)
    assert out1 == out2 and len(out1) == 10


def test_nucleus_seeded_reproducible(rng):
    model = toy_model()
    prompt = rng.integers(0, 61, size=12)
    cfg = GenerateConfig(mode="nucleus", temperature=1.0, top_p=0.9,
                         max_new_tokens=10, seed=3)
    assert generate(Session(model), prompt, cfg) == generate(Session(model), prompt, cfg)


def test_nucleus_low_temperature_converges_to_greedy(rng):
    logits = rng.standard_normal(32)
    greedy = select_token(logits, GenerateConfig(mode="greedy"), np.random.default_rng(0))
    cfg = GenerateConfig(mode="nucleus", temperature=1e-5, top_p=0.95, seed=1)
    for seed in range(5):
        assert select_token(logits, cfg, np.random.default_rng(seed)) == greedy


def test_nucleus_smallest_prefix_property():
    logits = np.log(np.array([0.5, 0.3, 0.2]))
    cfg = GenerateConfig(mode="nucleus", temperature=1.0, top_p=0.7)
    rng = np.random.default_rng(0)
    draws = {select_token(logits, cfg, rng) for _ in range(500)}
    assert draws == {0, 1}


def test_nucleus_top_p_one_is_plain_categorical():
    logits = np.log(np.array([0.6, 0.3, 0.1]))
    cfg = GenerateConfig(mode="nucleus", temperature=1.0, top_p=1.0)
    rng = np.random.default_rng(0)
    counts = np.zeros(3)
    trials = 4000
    for _ in range(trials):
        counts[select_token(logits, cfg, rng)] += 1
    np.testing.assert_allclose(counts / trials, [0.6, 0.3, 0.1], atol=0.03)


def test_generate_config_validation():
    with pytest.raises(ContractError):
        GenerateConfig(mode="beam").validate()
    with pytest.raises(ContractError):
        GenerateConfig(mode="nucleus", top_p=0.0).validate()
    with pytest.raises(ContractError):
        GenerateConfig(mode="nucleus", temperature=0.0).validate()


def test_bench_decode_report(rng):
    model = toy_model()
    report = bench_decode(model, [4, 8], repeats=2)
    assert len(report.rows) == 4
    assert {r.kind for r in report.rows} == {"decode"}
    assert report.latencies[4].shape == (4,)
    summary = report.summary()
    assert [length for length, _, _ in summary] == [4, 8]
    assert all(mean > 0 for _, mean, _ in summary)


def test_bench_prefill_report():
    model = toy_model()
    report = bench_prefill(model, [8, 16], repeats=2)
    assert len(report.rows) == 4
    assert all(r.tokens_per_s > 0 for r in report.rows)


def test_bench_lengths_must_ascend():
    model = toy_model()
    with pytest.raises(ContractError):
        bench_decode(model, [8, 4], repeats=1)
