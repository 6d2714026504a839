"""Synthetic multiple-choice fact-lookup tasks with exact verifiers.

Each prompt embeds a small key/value fact table, asks for the value of one
key, and lists ``n_options`` candidate values each followed by its option
letter.  Solving it takes one lookup (key -> value) and one elimination
step (value -> option letter).

Prompt layout::

    <Q> k1 v1 ... kn vn <?> k <OPT> va A vb B ... <T>

The same vocabulary also carries the response-side tokens used by the
four-stage format: the control tokens and the reflection verdicts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from aepolab.errors import ConfigError, ContextOverflowError

# Control tokens (ids 0..4); the rest of the vocabulary follows.
T_TOK, D_TOK, R_TOK, A_TOK, END_TOK = 0, 1, 2, 3, 4
Q_TOK, ASK_TOK, OPT_TOK, OK_TOK, BAD_TOK = 5, 6, 7, 8, 9
CONTROL_TOKENS = (T_TOK, D_TOK, R_TOK, A_TOK, END_TOK)
N_RESERVED = 10
MAX_OPTIONS = 8

# Longest gold response: k v X <D> X <R> X vX ✗ Y vY ✓ <A> Y <END>
MAX_GOLD_RESPONSE = 15


@dataclass(frozen=True)
class TaskSpec:
    n_facts: int = 4
    n_options: int = 4
    n_keys: int = 12
    n_values: int = 12
    n_train: int = 2000
    n_eval: int = 200
    seed: int = 0

    def validate(self) -> "TaskSpec":
        if not 2 <= self.n_options <= MAX_OPTIONS:
            raise ConfigError(f"n_options must be in [2, {MAX_OPTIONS}], got {self.n_options}")
        if self.n_train < 1 or self.n_eval < 1:
            raise ConfigError("n_train and n_eval must be >= 1")
        if self.n_facts < self.n_options:
            raise ConfigError("n_facts must be >= n_options (distractors come from the table)")
        if self.n_keys < self.n_facts:
            raise ConfigError("n_keys must be >= n_facts")
        if self.n_values < self.n_facts:
            raise ConfigError("n_values must be >= n_facts (table values are distinct)")
        return self


@dataclass(frozen=True)
class Vocab:
    """Token id ranges for one task family."""

    n_options: int
    n_keys: int
    n_values: int

    @classmethod
    def for_spec(cls, spec: TaskSpec) -> "Vocab":
        return cls(spec.n_options, spec.n_keys, spec.n_values)

    @property
    def letter0(self) -> int:
        return N_RESERVED

    @property
    def key0(self) -> int:
        return N_RESERVED + MAX_OPTIONS

    @property
    def value0(self) -> int:
        return self.key0 + self.n_keys

    @property
    def size(self) -> int:
        return self.value0 + self.n_values

    def letter(self, i: int) -> int:
        return self.letter0 + i

    def option_index(self, token: int) -> int | None:
        i = token - self.letter0
        return i if 0 <= i < self.n_options else None

    def is_option(self, token: int) -> bool:
        return self.option_index(token) is not None


@dataclass(frozen=True)
class TaskInstance:
    id: str
    question_tokens: tuple[int, ...]
    option_tokens: tuple[int, ...]
    label: int

    @property
    def facts(self) -> dict[int, int]:
        body = self.question_tokens[1:self.question_tokens.index(ASK_TOK)]
        return dict(zip(body[0::2], body[1::2]))

    @property
    def query_key(self) -> int:
        return self.question_tokens[self.question_tokens.index(ASK_TOK) + 1]

    @property
    def option_values(self) -> dict[int, int]:
        """Option letter token -> candidate value token."""
        tail = self.question_tokens[self.question_tokens.index(OPT_TOK) + 1:]
        return {letter: value for value, letter in zip(tail[0::2], tail[1::2])}

    def to_json(self) -> dict:
        return {"id": self.id, "question_tokens": list(self.question_tokens),
                "option_tokens": list(self.option_tokens), "label": self.label}

    @classmethod
    def from_json(cls, obj: dict) -> "TaskInstance":
        return cls(str(obj["id"]), tuple(int(t) for t in obj["question_tokens"]),
                   tuple(int(t) for t in obj["option_tokens"]), int(obj["label"]))


def prompt_length(spec: TaskSpec) -> int:
    return 2 * spec.n_facts + 2 * spec.n_options + 5


def _make_instance(spec: TaskSpec, vocab: Vocab, rng: np.random.Generator) -> TaskInstance:
    keys = rng.choice(spec.n_keys, size=spec.n_facts, replace=False) + vocab.key0
    values = rng.choice(spec.n_values, size=spec.n_facts, replace=False) + vocab.value0
    target = int(rng.integers(spec.n_facts))
    others = [i for i in range(spec.n_facts) if i != target]
    distract = rng.choice(others, size=spec.n_options - 1, replace=False)
    label = int(rng.integers(spec.n_options))
    option_vals = [int(values[i]) for i in distract]
    option_vals.insert(label, int(values[target]))
    letters = tuple(vocab.letter(i) for i in range(spec.n_options))
    q = [Q_TOK]
    for k, v in zip(keys, values):
        q += [int(k), int(v)]
    q += [ASK_TOK, int(keys[target]), OPT_TOK]
    for v, letter in zip(option_vals, letters):
        q += [v, letter]
    digest = hashlib.sha1(",".join(map(str, q)).encode()).hexdigest()[:16]
    return TaskInstance(digest, tuple(q), letters, label)


def generate_dataset(spec: TaskSpec, context_len: int | None = None,
                     max_response_len: int = 0) -> tuple[list[TaskInstance], list[TaskInstance]]:
    """Deterministic train/eval split with disjoint question ids."""
    spec.validate()
    vocab = Vocab.for_spec(spec)
    if context_len is not None and prompt_length(spec) + max_response_len > context_len:
        raise ContextOverflowError(
            f"prompt length {prompt_length(spec)} + response budget {max_response_len} "
            f"exceeds context_len {context_len}")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x7A5C]))
    seen: set[str] = set()
    out: list[TaskInstance] = []
    want = spec.n_train + spec.n_eval
    attempts = 0
    while len(out) < want:
        attempts += 1
        if attempts > 50 * want:
            raise ConfigError("task space too small for the requested number of distinct instances")
        inst = _make_instance(spec, vocab, rng)
        if inst.id in seen:
            continue
        seen.add(inst.id)
        out.append(inst)
    return out[:spec.n_train], out[spec.n_train:]


def verify(answer_option, instance: TaskInstance) -> bool:
    try:
        return int(answer_option) == instance.label
    except (TypeError, ValueError):
        return False


def render_prompt(instance: TaskInstance) -> list[int]:
    return list(instance.question_tokens) + [T_TOK]


def solve(instance: TaskInstance) -> int:
    """Brute-force oracle: read the fact table, return the matching option index."""
    value = instance.facts[instance.query_key]
    for letter, v in instance.option_values.items():
        if v == value:
            return instance.option_tokens.index(letter)
    raise ValueError(f"instance {instance.id} has no option carrying the answer")


def gold_response(instance: TaskInstance, rng: np.random.Generator,
                  draft_accuracy: float = 0.75, echo_rate: float = 0.25) -> list[int]:
    """Sample one well-formed response for behaviour cloning.

    Thinking looks the key up and names a candidate letter, which is wrong
    with probability ``1 - draft_accuracy``.  The reflection either verifies
    the draft against the option list (and corrects it when wrong) or, with
    probability ``echo_rate``, merely repeats the thinking and keeps the
    draft.
    """
    vocab_letters = instance.option_tokens
    key = instance.query_key
    value = instance.facts[key]
    right = vocab_letters[instance.label]
    if rng.random() < draft_accuracy:
        draft = right
    else:
        draft = vocab_letters[int(rng.choice([i for i in range(len(vocab_letters))
                                              if i != instance.label]))]
    option_values = instance.option_values
    if rng.random() < echo_rate:
        reflection, answer = [key, value, draft], draft
    elif draft == right:
        reflection, answer = [draft, option_values[draft], OK_TOK], right
    else:
        reflection = [draft, option_values[draft], BAD_TOK, right, option_values[right], OK_TOK]
        answer = right
    return [key, value, draft, D_TOK, draft, R_TOK, *reflection, A_TOK, answer, END_TOK]


def dataset_hash(instances) -> str:
    h = hashlib.sha256()
    for inst in instances:
        h.update(json.dumps(inst.to_json(), sort_keys=True).encode())
        h.update(b"\n")
    return h.hexdigest()


def save_jsonl(instances, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_json(), sort_keys=True) + "\n")


def load_jsonl(path) -> list[TaskInstance]:
    with open(path, encoding="utf-8") as fh:
        return [TaskInstance.from_json(json.loads(line)) for line in fh if line.strip()]
