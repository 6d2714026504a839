"""Group sampling of responses from the frozen snapshot policy."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from aepolab import kernels
from aepolab.errors import ConfigError, ContextOverflowError, FormatError
from aepolab.policy import Decoder, PolicyParams
from aepolab.reward import RewardBreakdown
from aepolab.stages import StageSpans, segment
from aepolab.tasks import END_TOK, TaskInstance, render_prompt

# Rollouts per generation chunk.  Fixed so results do not depend on --workers.
CHUNK = 40


@dataclass(frozen=True)
class SamplingConfig:
    group_size: int = 5
    temperature: float = 1.0
    top_p: float = 0.99
    max_response_len: int = 20

    def validate(self, training: bool = True) -> "SamplingConfig":
        if self.group_size < 2:
            raise ConfigError(f"group_size must be >= 2, got {self.group_size}")
        if training and self.temperature <= 0.0:
            raise ConfigError("training-time temperature must be > 0")
        if not 0.0 < self.top_p <= 1.0:
            raise ConfigError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.max_response_len < 1:
            raise ConfigError("max_response_len must be >= 1")
        return self


@dataclass
class Rollout:
    prompt_id: str
    prompt_tokens: list[int]
    response_tokens: list[int]
    old_logprobs: np.ndarray
    token_entropies: np.ndarray
    spans: StageSpans | None = None
    format_error: str | None = None
    breakdown: RewardBreakdown | None = None
    advantage: float = 0.0
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.response_tokens)

    def to_json(self) -> dict:
        return {
            "prompt_id": self.prompt_id,
            "prompt_tokens": [int(t) for t in self.prompt_tokens],
            "tokens": [int(t) for t in self.response_tokens],
            "old_logprobs": [float(x) for x in self.old_logprobs],
            "spans": self.spans.as_dict() if self.spans is not None else None,
            "breakdown": self.breakdown.to_json() if self.breakdown is not None else None,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Rollout":
        """Inverse of :meth:`to_json`; entropies are not stored and come back empty."""
        spans = StageSpans.from_dict(obj["spans"]) if obj.get("spans") else None
        bd = RewardBreakdown(**obj["breakdown"]) if obj.get("breakdown") else None
        return cls(obj["prompt_id"], list(obj.get("prompt_tokens", [])), list(obj["tokens"]),
                   np.asarray(obj["old_logprobs"], dtype=np.float64), np.zeros(0), spans,
                   None if spans is not None else "unparsed", bd)


def rollout_rng(seed: int, step: int, prompt_id: str, sample_index: int) -> np.random.Generator:
    """Independent stream per (seed, step, prompt, sample)."""
    pid = int(prompt_id, 16) if all(c in "0123456789abcdef" for c in prompt_id) else \
        int.from_bytes(prompt_id.encode(), "little")
    return np.random.default_rng(np.random.SeedSequence([seed, step, pid, sample_index]))


def _generate_chunk(params: PolicyParams, prompts: np.ndarray, uniforms: np.ndarray,
                    temperature: float, top_p: float, max_len: int):
    n = prompts.shape[0]
    resp = np.full((n, max_len), END_TOK, dtype=np.int64)
    logps = np.zeros((n, max_len))
    ents = np.zeros((n, max_len))
    lengths = np.full(n, max_len, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    rows = np.arange(n)
    dec = Decoder(params, prompts, max_len)
    logp = dec.last_logp
    for s in range(max_len):
        probs = np.exp(logp)
        tok = kernels.nucleus_sample(probs, uniforms[:, s], temperature, top_p)
        tok = np.where(alive, tok, END_TOK)
        resp[:, s] = tok
        logps[:, s] = np.where(alive, logp[rows, tok], 0.0)
        plogp = np.where(probs > 0.0, probs * logp, 0.0)
        ents[:, s] = np.where(alive, np.maximum(-plogp.sum(axis=1), 0.0), 0.0)
        done = alive & (tok == END_TOK)
        lengths[done] = s + 1
        alive &= ~done
        if not alive.any() or s == max_len - 1:
            break
        logp = dec.step(tok)
    return resp, logps, ents, lengths


def generate(params: PolicyParams, prompts: list[list[int]], rngs: list[np.random.Generator],
             config: SamplingConfig, temperature: float | None = None,
             is_option=None, prompt_ids: list[str] | None = None, workers: int = 1) -> list[Rollout]:
    """Sample one response per prompt; each prompt uses its own generator.

    Every generator contributes ``max_response_len`` uniforms up front, so a
    rollout depends only on its own stream.
    """
    temperature = config.temperature if temperature is None else temperature
    max_len = config.max_response_len
    if not prompts:
        return []
    plen = len(prompts[0])
    if any(len(p) != plen for p in prompts):
        raise ValueError("prompts in one batch must share a length")
    if plen + max_len > params.config.context_len:
        raise ContextOverflowError(
            f"prompt {plen} + max_response_len {max_len} > context_len {params.config.context_len}")
    prompt_arr = np.asarray(prompts, dtype=np.int64)
    uniforms = np.stack([r.random(max_len) for r in rngs])
    bounds = [(i, min(i + CHUNK, len(prompts))) for i in range(0, len(prompts), CHUNK)]

    def run(b):
        lo, hi = b
        return _generate_chunk(params, prompt_arr[lo:hi], uniforms[lo:hi], temperature,
                               config.top_p, max_len)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, bounds))
    else:
        parts = [run(b) for b in bounds]

    out = []
    ids = prompt_ids or [""] * len(prompts)
    for (lo, hi), (resp, logps, ents, lengths) in zip(bounds, parts):
        for j in range(hi - lo):
            n = int(lengths[j])
            toks = [int(t) for t in resp[j, :n]]
            try:
                spans, err = segment(toks, is_option, cued=True), None
            except FormatError as exc:
                spans, err = None, str(exc)
            out.append(Rollout(ids[lo + j], list(prompts[lo + j]), toks, logps[j, :n].copy(),
                               ents[j, :n].copy(), spans, err))
    return out


def sample_batch(params_old: PolicyParams, instances: list[TaskInstance], config: SamplingConfig,
                 seed: int, step: int, is_option=None, workers: int = 1) -> list[list[Rollout]]:
    """One group of ``group_size`` rollouts per instance."""
    g = config.group_size
    prompts, rngs, ids = [], [], []
    for inst in instances:
        prompt = render_prompt(inst)
        for i in range(g):
            prompts.append(prompt)
            rngs.append(rollout_rng(seed, step, inst.id, i))
            ids.append(inst.id)
    flat = generate(params_old, prompts, rngs, config, is_option=is_option, prompt_ids=ids,
                    workers=workers)
    return [flat[k * g:(k + 1) * g] for k in range(len(instances))]


def sample_group(params_old: PolicyParams, instance: TaskInstance, config: SamplingConfig,
                 rng_state: tuple[int, int], is_option=None) -> list[Rollout]:
    """``rng_state`` is ``(seed, step)``; streams are split per sample index."""
    config.validate()
    seed, step = rng_state
    return sample_batch(params_old, [instance], config, seed, step, is_option)[0]


def greedy_decode(params: PolicyParams, instances: list[TaskInstance], max_response_len: int,
                  is_option=None, workers: int = 1) -> list[Rollout]:
    cfg = SamplingConfig(group_size=2, temperature=0.0, top_p=1.0, max_response_len=max_response_len)
    rngs = [np.random.default_rng(0) for _ in instances]
    return generate(params, [render_prompt(i) for i in instances], rngs, cfg, temperature=0.0,
                    is_option=is_option, prompt_ids=[i.id for i in instances], workers=workers)


def load_jsonl(path) -> list[Rollout]:
    with open(path, encoding="utf-8") as fh:
        return [Rollout.from_json(json.loads(line)) for line in fh if line.strip()]


def dump_jsonl(rollouts, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in rollouts:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
