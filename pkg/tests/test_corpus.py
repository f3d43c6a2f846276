from pathlib import Path

import pytest

from logits_replay.corpus import DOMAIN_A, DOMAIN_B, GrammarSpec, generate, read_corpus, split, validate, write_corpus
from logits_replay.errors import ParseError, ValidationError
from logits_replay.harness import TrainConfig, evaluate, pretrain
from logits_replay.model import TinyLMConfig, init_params
from logits_replay.optim import AdamWConfig

DATA = Path(__file__).parent / "data"


def test_empty_corpus():
    assert generate(DOMAIN_A, 0, 10) == []


def test_domain_a_golden_file():
    # produced by a separate scalar generator over the raw SplitMix64 stream
    assert generate(DOMAIN_A, 2, 24) == read_corpus(DATA / "domain_a_seed7_n2.txt")


def test_generation_is_deterministic_and_seeded():
    assert generate(DOMAIN_B, 5, 20) == generate(DOMAIN_B, 5, 20)
    assert generate(DOMAIN_B, 5, 20, seed=1) != generate(DOMAIN_B, 5, 20, seed=2)


def test_tokens_stay_in_range():
    for spec in (DOMAIN_A, DOMAIN_B):
        for seq in generate(spec, 200, 24, seed=3):
            assert all(spec.vocab_lo <= t < spec.vocab_hi for t in seq)


def test_validators_separate_domains():
    a = generate(DOMAIN_A, 1000, 24, seed=5)
    b = generate(DOMAIN_B, 1000, 24, seed=6)
    assert all(validate(DOMAIN_A, s) for s in a)
    assert all(validate(DOMAIN_B, s) for s in b)
    assert sum(validate(DOMAIN_A, s) for s in b) <= 10
    assert sum(validate(DOMAIN_B, s) for s in a) <= 10


def test_validators_reject_broken_sequences():
    spec = GrammarSpec("t", "brackets", 0, 4, max_depth=2)
    assert validate(spec, [0, 2, 1, 3])
    assert not validate(spec, [0, 3])  # wrong closer
    assert not validate(spec, [0, 0, 0])  # too deep
    assert not validate(spec, [2])  # closer on empty stack
    assert not validate(spec, [])
    assert not validate(DOMAIN_A, [40] * 5)
    assert validate(DOMAIN_A, [1, 3, 5, 7, 9])
    assert not validate(DOMAIN_A, [0, 17, 4, 29, 11, 2, 25, 8])


def test_spec_validation():
    with pytest.raises(ValidationError):
        GrammarSpec("x", "regex", 0, 4)
    with pytest.raises(ValidationError):
        GrammarSpec("x", "progression", 5, 5)
    with pytest.raises(ValidationError):
        GrammarSpec("x", "progression", 0, 4, noise=1.0)


def test_split_is_disjoint_covering_and_deterministic():
    corpus = [[i] for i in range(103)]
    parts = split(corpus, [0.8, 0.1, 0.1], seed=4)
    assert [len(p) for p in parts] == [82, 10, 11]
    flat = sorted(x[0] for p in parts for x in p)
    assert flat == list(range(103))
    assert parts == split(corpus, [0.8, 0.1, 0.1], seed=4)
    assert parts != split(corpus, [0.8, 0.1, 0.1], seed=5)
    with pytest.raises(ValidationError):
        split(corpus, [0.5, 0.6], seed=0)


def test_corpus_file_round_trip(tmp_path):
    seqs = generate(DOMAIN_B, 7, 12, seed=2)
    write_corpus(tmp_path / "b.txt", seqs)
    assert read_corpus(tmp_path / "b.txt") == seqs
    (tmp_path / "bad.txt").write_text("1 2 3\n4 x 6\n")
    with pytest.raises(ParseError) as exc:
        read_corpus(tmp_path / "bad.txt")
    assert exc.value.line == 2


def test_training_beats_untrained_model():
    cfg = TinyLMConfig(vocab_size=64, context_len=4, embed_dim=8, hidden_dim=32)
    train = generate(DOMAIN_B, 300, 16, seed=1)
    val = generate(DOMAIN_B, 100, 16, seed=2)
    base = init_params(cfg, 0)
    tuned, _ = pretrain(base, train, "adamw", AdamWConfig(alpha=5e-3), TrainConfig(epochs=3, batch_size=32))
    _, ppl_before = evaluate(base, val)
    _, ppl_after = evaluate(tuned, val)
    assert ppl_after < 0.8 * ppl_before
