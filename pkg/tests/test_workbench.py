import itertools
import json
import math

import numpy as np
import pytest

from mpt.checks import tiny_config
from mpt.decoding import (
    DecodeConfig,
    beam_decode,
    beam_search,
    greedy_decode_batch,
    greedy_search,
    model_step_fn,
    normalized_score,
)
from mpt.errors import ConfigurationError, ContractError, SchemaError
from mpt.experiment import (
    BEST_SEARCHED_PERM,
    ExperimentConfig,
    ablation_csv,
    default_variants,
    load_experiment,
    parse_experiment,
    read_ablation_csv,
    soft_weights_csv,
)
from mpt.metrics import corpus_bleu, token_and_sequence_accuracy
from mpt.model import MultiPassTransformer
from mpt.multipass import MptConfig
from mpt.tasks import BOS, EOS, PAD, ToyTask, collate, generate_batch

NEG = -math.inf


# -- tasks ------------------------------------------------------------------------

def test_task_targets():
    assert ToyTask("copy").target([5, 7, 9]) == [5, 7, 9]
    assert ToyTask("reverse").target([5, 7, 9]) == [9, 7, 5]
    assert ToyTask("sort").target([9, 5, 7]) == [5, 7, 9]
    with pytest.raises(ConfigurationError):
        ToyTask("translate")


def test_collate_layout():
    b = collate([([3, 4, 5], [5, 4, 3]), ([6], [6])])
    np.testing.assert_array_equal(b.src, [[3, 4, 5], [6, PAD, PAD]])
    np.testing.assert_array_equal(b.tgt_in, [[BOS, 5, 4, 3], [BOS, 6, PAD, PAD]])
    np.testing.assert_array_equal(b.tgt_out, [[5, 4, 3, EOS], [6, EOS, PAD, PAD]])
    assert b.n_tokens == 6


def test_batches_are_deterministic_and_bucketed():
    task = ToyTask("reverse", vocab_size=12, min_len=3, max_len=10)
    a = [generate_batch(task, np.random.default_rng(4), 64) for _ in range(3)]
    b = [generate_batch(task, np.random.default_rng(4), 64) for _ in range(3)]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.src, y.src)
    rng = np.random.default_rng(0)
    for _ in range(20):
        batch = generate_batch(task, rng, 64)
        lengths = (~batch.src_pad).sum(axis=1)
        assert lengths.max() - lengths.min() <= 1
        assert batch.src.min() >= 3 or (batch.src[batch.src < 3] == PAD).all()


def test_heldout_disjoint_from_training():
    task = ToyTask("copy", vocab_size=6, min_len=2, max_len=3, test_size=10, valid_size=5)
    test = {tuple(s) for s, _ in task.heldout("test")}
    valid = {tuple(s) for s, _ in task.heldout("valid")}
    assert len(test) == 10 and len(valid) == 5 and not test & valid
    rng = np.random.default_rng(1)
    excluded = task.excluded()
    for _ in range(50):
        batch = generate_batch(task, rng, 12, excluded)
        for row, pad in zip(batch.src, batch.src_pad):
            assert tuple(int(t) for t in row[~pad]) not in excluded


# -- metrics ----------------------------------------------------------------------

def test_bleu_examples():
    refs = [[3, 4, 5, 6, 7], [8, 9, 3, 4]]
    assert corpus_bleu(refs, refs) == pytest.approx(100.0)
    assert corpus_bleu([[3, 4, 5, 7, 6]], [[3, 4, 5, 6, 7]]) == 0.0
    with pytest.raises(ContractError):
        corpus_bleu([], [])


def test_bleu_hand_counts():
    # unigrams 4/5, bigrams 3/4, trigrams 2/3, 4-grams 1/2, equal lengths so no brevity penalty
    expect = 100.0 * (4 / 5 * 3 / 4 * 2 / 3 * 1 / 2) ** 0.25
    assert corpus_bleu([[3, 4, 5, 6, 7]], [[3, 4, 5, 6, 8]]) == pytest.approx(expect, abs=1e-6)
    # short hypothesis: brevity penalty exp(1 - 6/4)
    bp = math.exp(1 - 6 / 4)
    assert corpus_bleu([[3, 4, 5, 6]], [[3, 4, 5, 6, 7, 8]]) == pytest.approx(100.0 * bp, abs=1e-6)


def test_bleu_bounds():
    rng = np.random.default_rng(0)
    for _ in range(20):
        refs = [list(rng.integers(3, 6, size=rng.integers(4, 8))) for _ in range(5)]
        hyps = [list(rng.integers(3, 6, size=rng.integers(1, 8))) for _ in range(5)]
        assert 0.0 <= corpus_bleu(hyps, refs) <= 100.0


def test_accuracy_examples():
    assert token_and_sequence_accuracy([[3, 4]], [[3, 4]]) == (1.0, 1.0)
    assert token_and_sequence_accuracy([[3, 4, 5, 6], [3, 4, 5, 6]], [[3, 4, 5, 6], [3, 4, 9, 6]]) == (7 / 8, 0.5)
    assert token_and_sequence_accuracy([[5, 5]], [[3, 4]]) == (0.0, 0.0)


# -- decoding ---------------------------------------------------------------------

V = 6  # 0 pad, 1 bos, 2 eos, content 3..5
A, B, C = 3, 4, 5


def toy_step(prefixes):
    """Hand-set 3-step model: greedy takes A (0.5) and then meets a flat distribution,
    while B (0.4) leads into confident continuations. EOS is forced after three tokens."""
    rows = []
    for p in prefixes:
        row = np.full(V, NEG)
        gen = p[1:]
        if len(gen) == 3:
            row[EOS] = 0.0
        elif not gen:
            row[[A, B, C]] = np.log([0.5, 0.4, 0.1])
        elif gen[-1] == B:
            row[[A, B, C]] = np.log([0.05, 0.9, 0.05])
        else:
            row[[A, B, C]] = np.log([1 / 3, 1 / 3, 1 / 3])
        rows.append(row)
    return np.array(rows)


def brute_force(step_fn, alpha, max_len):
    """Score every EOS-terminated sequence up to ``max_len`` tokens; return the best (score, tokens)."""
    best = None
    for n in range(1, max_len + 1):
        for body in itertools.product(range(V), repeat=n - 1):
            seq = [BOS, *body, EOS]
            lp = 0.0
            for t in range(1, len(seq)):
                lp += float(step_fn([seq[:t]])[0][seq[t]])
                if lp == NEG:
                    break
            if lp == NEG:
                continue
            cand = (normalized_score(lp, n, alpha), [*body, EOS])
            if best is None or cand[0] > best[0] or (cand[0] == best[0] and cand[1] < best[1]):
                best = cand
    return best


def test_beam_two_matches_brute_force_where_greedy_fails():
    greedy = greedy_search(toy_step, max_len=5)
    score, tokens = brute_force(toy_step, 0.2, 4)
    beam = beam_search(toy_step, beam=2, alpha=0.2, max_len=5)
    assert tokens == [B, B, B, EOS]
    assert greedy.tokens != tokens
    assert beam.tokens == tokens and beam.finished
    assert beam.score == pytest.approx(score)


def test_alpha_zero_ranks_by_logprob():
    hyp = beam_search(toy_step, beam=3, alpha=0.0, max_len=5)
    assert hyp.score == hyp.logprob == pytest.approx(math.log(0.4 * 0.9 * 0.9))


def test_truncated_hypothesis_flagged():
    hyp = beam_search(toy_step, beam=2, alpha=0.2, max_len=2)
    assert hyp.truncated and len(hyp.tokens) == 2
    assert greedy_search(toy_step, max_len=2).truncated


def test_beam_one_equals_greedy_on_random_step_functions():
    for seed in range(20):
        table = np.random.default_rng(seed).normal(size=(7, V))

        def step(prefixes):
            rows = np.array([table[len(p) - 1] + 0.1 * p[-1] for p in prefixes])
            return rows - np.log(np.exp(rows).sum(axis=1, keepdims=True))

        g = greedy_search(step, max_len=7)
        b = beam_search(step, beam=1, alpha=0.7, max_len=7)
        assert b.tokens == g.tokens and b.logprob == pytest.approx(g.logprob, abs=0)


def test_beam_one_equals_greedy_on_model():
    cfg = tiny_config("soft", "a", max_len=10)
    m = MultiPassTransformer(cfg, seed=5)
    srcs = [[3, 4, 5], [9, 8, 7, 6, 5], [10]]
    batch_out = greedy_decode_batch(m, srcs, "final", max_len=10)
    for src, out in zip(srcs, batch_out):
        g = greedy_search(model_step_fn(m, src), max_len=10)
        b = beam_decode(m, src, DecodeConfig(beam=1, max_len=10))
        assert b.tokens == g.tokens
        assert b.output() == out


def test_decode_config_validation():
    with pytest.raises(ConfigurationError):
        DecodeConfig(beam=0)
    with pytest.raises(ConfigurationError):
        DecodeConfig(length_penalty=-0.1)


# -- configuration ----------------------------------------------------------------

def test_parse_experiment_defaults_and_roundtrip():
    exp = parse_experiment({"task": {"kind": "reverse", "vocab_size": 12}, "model": {"max_len": 16}})
    assert exp.model.vocab_size == 12
    assert parse_experiment(json.loads(json.dumps(exp.to_dict()))) == exp


@pytest.mark.parametrize("doc,field", [
    ({"model": {"bogus": 1}}, "model.bogus"),
    ({"train": {"base_lr": "fast"}}, "train.base_lr"),
    ({"extra": 1}, "extra"),
    ({"model": {"routing": "z"}}, "model.routing"),
    ({"model": {"layers": 3, "connection": {"kind": "hard", "perm": [0, 0, 1]}}}, "model"),
    ({"task": {"max_len": 40}}, "model.max_len"),
    ({"model": {"vocab_size": 20}}, "model.vocab_size"),
])
def test_schema_errors_name_field(doc, field):
    with pytest.raises(SchemaError) as err:
        parse_experiment(doc)
    assert err.value.field == field


def test_load_experiment_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.json"):
        load_experiment(tmp_path / "nope.json")


def test_default_variants_cover_table():
    base = MptConfig(layers=6, vocab_size=12)
    names = [v.name for v in default_variants(base)]
    assert names == ["baseline", "chained", "hard-identity(a)", "hard-identity(b)", "hard-identity(c)",
                     "hard-identity(d)", "hard-best", "soft"]
    best = [v for v in default_variants(base) if v.name == "hard-best"][0]
    assert best.model.connection.perm == BEST_SEARCHED_PERM
    assert "hard-best" not in [v.name for v in default_variants(MptConfig(layers=3))]


def test_ablation_csv_shape():
    exp = ExperimentConfig()
    rows = [{"variant": "x", "connection": "none", "routing": "-", "passes": 1, "params": 10, "steps": 0,
             "status": "failed: boom"}]
    text = ablation_csv(rows, exp)
    assert text.startswith("# task=copy")
    parsed = read_ablation_csv(text)
    assert parsed[0]["variant"] == "x" and parsed[0]["final_bleu"] == ""


def test_soft_weights_csv():
    text = soft_weights_csv(np.zeros((3, 3)))
    lines = text.strip().splitlines()
    assert lines[0] == "outer,inner0,inner1,inner2"
    assert len(lines) == 4
    assert all(abs(float(v) - 1 / 3) < 1e-15 for v in lines[1].split(",")[1:])
