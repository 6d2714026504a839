"""Shared fixtures-by-function and independent reference implementations.

The reference loss here deliberately avoids the batched code path: it scores
every token with its own forward pass through ``forward_distribution`` and
accumulates with plain Python loops and the ``statistics`` module.
"""

from __future__ import annotations

import math
import statistics

import numpy as np

from aepolab.optimizer import ClipConfig
from aepolab.policy import ModelConfig, PolicyParams, forward_distribution, init_params
from aepolab.reward import Components, RewardConfig, contribution_indicator, score_rollout
from aepolab.rollout import Rollout, SamplingConfig, sample_batch
from aepolab.stages import segment, token_entropy
from aepolab.tasks import TaskSpec, Vocab, generate_dataset, gold_response, render_prompt

TINY_SPEC = TaskSpec(n_facts=2, n_options=2, n_keys=3, n_values=3, n_train=40, n_eval=10, seed=3)


def tiny_world(seed: int = 0, hidden_dim: int = 4, arch: str = "tiny_attention"):
    """A <= 1000-parameter policy on the smallest task family."""
    vocab = Vocab.for_spec(TINY_SPEC)
    cfg = ModelConfig(vocab.size, context_len=32, hidden_dim=hidden_dim, n_layers=1, n_heads=2,
                      arch=arch)
    train, ev = generate_dataset(TINY_SPEC)
    return vocab, init_params(cfg, seed), train, ev


def perturbed(params: PolicyParams, scale: float, seed: int) -> PolicyParams:
    out = params.copy()
    out.values += scale * np.random.default_rng(seed).standard_normal(out.values.size)
    return out


def teacher_forced(params_old: PolicyParams, instance, response, is_option) -> Rollout:
    """Rollout whose logprobs/entropies are recorded under ``params_old``."""
    prompt = render_prompt(instance)
    logps, ents = [], []
    for t, tok in enumerate(response):
        dist = forward_distribution(params_old, prompt + list(response[:t]))
        logps.append(math.log(dist.probs[tok]))
        ents.append(token_entropy(dist))
    try:
        spans, err = segment(response, is_option, cued=True), None
    except Exception as exc:  # noqa: BLE001 - malformed rollouts are part of the mix
        spans, err = None, str(exc)
    return Rollout(instance.id, prompt, list(response), np.array(logps), np.array(ents), spans, err)


def mixed_group(params_old, instance, vocab, rng, size=4, sampled=1):
    """Gold traces with varied correctness plus ``sampled`` free-running samples."""
    group = []
    for i in range(size - sampled):
        resp = gold_response(instance, rng, draft_accuracy=0.5, echo_rate=0.3)
        if i % 2 == 1:  # flip the final answer to the other letter
            other = [t for t in instance.option_tokens if t != resp[-2]][0]
            resp = resp[:-2] + [other] + resp[-1:]
        group.append(teacher_forced(params_old, instance, resp, vocab.is_option))
    if sampled:
        cfg = SamplingConfig(group_size=max(sampled, 2), max_response_len=12)
        group += sample_batch(params_old, [instance], cfg, int(rng.integers(1 << 30)), 0,
                              vocab.is_option)[0][:sampled]
    return group


def scored(groups, instances, reward_cfg=RewardConfig(), components=Components(), is_option=None):
    for g, inst in zip(groups, instances):
        for r in g:
            r.breakdown = score_rollout(r, inst, reward_cfg, components, is_option)
    return groups


def random_batch(seed: int, n_groups: int = 2, size: int = 4, components=Components(),
                 reward_cfg=RewardConfig()):
    vocab, params, train, _ = tiny_world(seed)
    params_old = perturbed(params, 0.3, seed + 100)
    rng = np.random.default_rng(seed)
    insts = [train[int(i)] for i in rng.choice(len(train), n_groups, replace=False)]
    groups = [mixed_group(params_old, inst, vocab, rng, size) for inst in insts]
    return vocab, params, scored(groups, insts, reward_cfg, components, vocab.is_option), insts


def reference_loss(groups, params, clip=ClipConfig(), reward_cfg=RewardConfig(),
                   components=Components(), normalization="token", regularizer_normalized=True):
    """Per-token loop implementation of the total objective (descent form)."""
    group_losses = []
    for group in groups:
        rewards = [r.breakdown.shaped_reward for r in group]
        if max(rewards) - min(rewards) < 1e-12:
            advs = [0.0] * len(group)
        else:
            mu, sd = statistics.fmean(rewards), statistics.pstdev(rewards)
            advs = [(x - mu) / max(sd, 1e-8) for x in rewards]
        total_tokens = sum(len(r.response_tokens) for r in group)
        acc = 0.0
        for r, adv in zip(group, advs):
            surr, ents = 0.0, []
            for t, tok in enumerate(r.response_tokens):
                dist = forward_distribution(params, list(r.prompt_tokens) + r.response_tokens[:t])
                ratio = math.exp(math.log(dist.probs[tok]) - r.old_logprobs[t])
                lo, hi = 1.0 - clip.eps_low, 1.0 + clip.eps_high
                surr += min(ratio * adv, min(max(ratio, lo), hi) * adv)
                ents.append(token_entropy(dist))
            reg = 0.0
            b = r.breakdown
            if b.parse_ok:
                h_t = statistics.fmean(ents[r.spans.thinking[0]:r.spans.thinking[1]])
                h_r = statistics.fmean(ents[r.spans.reflection[0]:r.spans.reflection[1]])
                c = contribution_indicator(b.draft_correct, b.correct)
                if components.rif:
                    sign = -1.0 if reward_cfg.ib_sign == "prose" else 1.0
                    reg += sign * h_r - reward_cfg.beta * c
                if components.ae and (b.correct or not components.gae):
                    reg += abs(h_t - reward_cfg.h_star) + abs(h_r - reward_cfg.h_star)
            n_i = len(r.response_tokens)
            if normalization == "token":
                w = 1.0 / total_tokens
            else:
                w = 1.0 / (n_i * len(group))
            w_reg = w if regularizer_normalized else 1.0 / len(group)
            acc += reg * w_reg - surr * w
        group_losses.append(acc)
    return sum(group_losses) / len(group_losses)


def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. ``x``, perturbed in place."""
    flat = x.reshape(-1)
    assert np.shares_memory(flat, x)
    g = np.zeros(x.size)
    for i in range(x.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g.reshape(x.shape)


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
