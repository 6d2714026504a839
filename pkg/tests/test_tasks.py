import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aepolab.errors import ConfigError, ContextOverflowError
from aepolab.stages import segment
from aepolab.tasks import (
    A_TOK, END_TOK, OK_TOK, TaskSpec, Vocab, dataset_hash, generate_dataset, gold_response,
    load_jsonl, prompt_length, render_prompt, save_jsonl, solve, verify,
)


def test_spec_validation():
    with pytest.raises(ConfigError):
        TaskSpec(n_options=1).validate()
    with pytest.raises(ConfigError):
        TaskSpec(n_options=9, n_facts=9, n_keys=9, n_values=9).validate()
    with pytest.raises(ConfigError):
        TaskSpec(n_train=0).validate()


def test_dataset_is_deterministic_and_disjoint():
    spec = TaskSpec(n_train=300, n_eval=50, seed=4)
    tr, ev = generate_dataset(spec)
    tr2, ev2 = generate_dataset(spec)
    assert dataset_hash(tr + ev) == dataset_hash(tr2 + ev2)
    assert len(tr) == 300 and len(ev) == 50
    assert not {i.id for i in tr} & {i.id for i in ev}
    assert dataset_hash(tr) != dataset_hash(generate_dataset(TaskSpec(n_train=300, n_eval=50, seed=5))[0])


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(0, 1000))
def test_instances_have_exactly_one_correct_option(n_options, seed):
    spec = TaskSpec(n_facts=6, n_options=n_options, n_keys=8, n_values=8, n_train=20, n_eval=5,
                    seed=seed)
    vocab = Vocab.for_spec(spec)
    tr, _ = generate_dataset(spec)
    for inst in tr:
        assert len(render_prompt(inst)) == prompt_length(spec)
        assert 0 <= inst.label < n_options
        value = inst.facts[inst.query_key]
        assert list(inst.option_values.values()).count(value) == 1
        assert solve(inst) == inst.label
        assert verify(inst.label, inst) and not verify((inst.label + 1) % n_options, inst)
        assert all(0 <= t < vocab.size for t in render_prompt(inst))


def test_context_budget_enforced():
    with pytest.raises(ContextOverflowError):
        generate_dataset(TaskSpec(), context_len=25, max_response_len=20)


def test_gold_responses_parse_and_answer_correctly():
    spec = TaskSpec(n_train=100, n_eval=1)
    vocab = Vocab.for_spec(spec)
    tr, _ = generate_dataset(spec)
    rng = np.random.default_rng(0)
    echoes = 0
    for inst in tr:
        resp = gold_response(inst, rng, 0.75, 0.25)
        spans = segment(resp, vocab.is_option, cued=True)
        answer = resp[spans.answer[0]]
        reflection = resp[spans.reflection[0]:spans.reflection[1]]
        if OK_TOK not in reflection:
            echoes += 1
            assert answer == resp[spans.draft[0]]
        else:
            assert answer == inst.option_tokens[inst.label]
        assert resp[-1] == END_TOK and resp[-3] == A_TOK
    assert 10 < echoes < 45


def test_jsonl_roundtrip(tmp_path):
    tr, _ = generate_dataset(TaskSpec(n_train=10, n_eval=1))
    save_jsonl(tr, tmp_path / "t.jsonl")
    assert load_jsonl(tmp_path / "t.jsonl") == tr
