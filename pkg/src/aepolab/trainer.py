"""Warm-up behaviour cloning, the RL loop, evaluation and run logging."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from aepolab import autodiff as ad
from aepolab.errors import ConfigError, NonFiniteLossError, WarmupInsufficientError
from aepolab.optimizer import (
    AdamW,
    ClipConfig,
    aepo_loss,
    clip_grad_norm,
    dapo_loss,
    grpo_loss,
    loss_and_grad,
)
from aepolab.policy import PolicyParams, forward_logits, loss_gradient, save_checkpoint, track
from aepolab.reward import NO_COMPONENTS, Components, RewardConfig, score_rollout
from aepolab.rollout import SamplingConfig, dump_jsonl, greedy_decode, sample_batch
from aepolab.tasks import TaskInstance, Vocab, dataset_hash, gold_response, render_prompt

log = logging.getLogger(__name__)

ALGORITHMS = ("aepo", "grpo", "dapo")
RUNLOG_FIELDS = ("step", "mean_reward", "h_t", "h_r", "loss_total", "loss_surrogate", "loss_reg",
                 "eval_acc")


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    seed: int
    algorithm: str = "aepo"
    prompts_per_step: int = 16  # paper: 64 prompts per batch at 7B scale
    group_size: int = 5
    lr: float = 3e-4  # paper: 1e-6 at 7B scale
    warmup_steps: int = 10
    eval_every: int = 50
    rif_on: bool = True
    ae_on: bool = True
    gae_on: bool = True
    normalization: str = "token"
    regularizer_normalized: bool = True
    max_grad_norm: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.0

    def validate(self) -> "TrainConfig":
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {', '.join(ALGORITHMS)}; got {self.algorithm!r}")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if self.prompts_per_step < 1 or self.eval_every < 1 or self.warmup_steps < 0:
            raise ConfigError("prompts_per_step and eval_every must be >= 1, warmup_steps >= 0")
        return self

    @property
    def components(self) -> Components:
        if self.algorithm != "aepo":
            return NO_COMPONENTS
        return Components(self.rif_on, self.ae_on, self.gae_on)


@dataclass(frozen=True)
class WarmupConfig:
    steps: int = 1500
    batch_size: int = 64
    lr: float = 2e-3
    draft_accuracy: float = 0.75
    echo_rate: float = 0.25
    probe_size: int = 100
    min_parse_rate: float = 0.99


@dataclass
class RunLog:
    records: list[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        if self.records and record["step"] <= self.records[-1]["step"]:
            raise ValueError("run log steps must be strictly increasing")
        self.records.append({k: record.get(k) for k in RUNLOG_FIELDS})

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def read(cls, path) -> "RunLog":
        with open(path, encoding="utf-8") as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


def learning_rate(step: int, config: TrainConfig) -> float:
    if config.warmup_steps <= 0:
        return config.lr
    return config.lr * min(1.0, (step + 1) / config.warmup_steps)


def _sft_batch(instances, rng, wcfg: WarmupConfig):
    prompts = [render_prompt(i) for i in instances]
    responses = [gold_response(i, rng, wcfg.draft_accuracy, wcfg.echo_rate) for i in instances]
    plen = len(prompts[0])
    lmax = max(len(r) for r in responses)
    tokens = np.zeros((len(instances), plen + lmax), dtype=np.int64)
    mask = np.zeros((len(instances), lmax))
    for k, (p, r) in enumerate(zip(prompts, responses)):
        tokens[k, :plen] = p
        tokens[k, plen:plen + len(r)] = r
        mask[k, :len(r)] = 1.0
    return tokens, mask, plen


def sft_loss(tracked, tokens: np.ndarray, mask: np.ndarray, plen: int) -> ad.Tensor:
    """Mean token cross-entropy of the response part."""
    lmax = mask.shape[1]
    logits = forward_logits(tracked, tokens)[:, plen - 1:plen - 1 + lmax, :]
    logp = ad.take_last(ad.log_softmax(logits), tokens[:, plen:])
    return -(logp * mask).sum() * (1.0 / mask.sum())


def parse_rate(params: PolicyParams, probes, max_response_len: int, vocab: Vocab) -> float:
    outs = greedy_decode(params, probes, max_response_len, vocab.is_option)
    return sum(r.spans is not None for r in outs) / len(outs)


def sft_warmup(params: PolicyParams, dataset: list[TaskInstance], n_steps: int, seed: int,
               vocab: Vocab, wcfg: WarmupConfig = WarmupConfig(), max_response_len: int = 20,
               probes: list[TaskInstance] | None = None, check: bool = True) -> PolicyParams:
    """Behaviour-clone sampled gold traces so the policy emits the four-stage format.

    Raises :class:`WarmupInsufficientError` when fewer than
    ``wcfg.min_parse_rate`` of greedy decodes on the probe set parse.
    """
    params = params.copy()
    if n_steps <= 0:
        return params
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5F7]))
    if probes is None:
        probe_idx = rng.choice(len(dataset), size=min(wcfg.probe_size, len(dataset)), replace=False)
        held = set(int(i) for i in probe_idx)
        probes = [dataset[i] for i in sorted(held)]
        pool = [d for i, d in enumerate(dataset) if i not in held] or dataset
    else:
        pool = dataset
    opt = AdamW(params.values.size)
    for step in range(n_steps):
        idx = rng.choice(len(pool), size=min(wcfg.batch_size, len(pool)), replace=False)
        tokens, mask, plen = _sft_batch([pool[i] for i in idx], rng, wcfg)
        tracked = track(params)
        loss = sft_loss(tracked, tokens, mask, plen)
        grad, _ = clip_grad_norm(loss_gradient(tracked, loss), 1.0)
        lr = wcfg.lr * min(1.0, (step + 1) / 50) * 0.5 * (1 + math.cos(math.pi * step / n_steps))
        opt.step(params.values, grad, lr)
        if step % 250 == 0:
            log.info("warmup step %d loss %.4f", step, loss.item())
    if check:
        rate = parse_rate(params, probes, max_response_len, vocab)
        if rate < wcfg.min_parse_rate:
            raise WarmupInsufficientError(
                f"only {rate:.2%} of greedy decodes parse after {n_steps} warm-up steps")
    return params


def evaluate(params: PolicyParams, eval_set: list[TaskInstance], max_response_len: int = 20,
             vocab: Vocab | None = None, return_rollouts: bool = False):
    """Greedy accuracy; malformed decodes count as wrong."""
    is_option = vocab.is_option if vocab is not None else None
    outs = greedy_decode(params, eval_set, max_response_len, is_option)
    hits = 0
    for r, inst in zip(outs, eval_set):
        if r.spans is not None and r.response_tokens[r.spans.answer[0]] == inst.option_tokens[inst.label]:
            hits += 1
    acc = hits / len(eval_set)
    return (acc, outs) if return_rollouts else acc


def _select_prompts(train_set, n: int, seed: int, step: int) -> list[TaskInstance]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, step, 0xB47C4]))
    idx = rng.choice(len(train_set), size=min(n, len(train_set)), replace=False)
    return [train_set[i] for i in idx]


def compute_loss(algorithm: str, groups, model, clip: ClipConfig, reward_cfg: RewardConfig,
                 config: TrainConfig):
    if algorithm == "grpo":
        return loss_and_grad(grpo_loss, groups, model, clip.eps_low)
    if algorithm == "dapo":
        return loss_and_grad(dapo_loss, groups, model, clip)
    return loss_and_grad(aepo_loss, groups, model, clip, reward_cfg, config.components,
                         config.normalization, config.regularizer_normalized)


def train(config: TrainConfig, datasets: tuple[list[TaskInstance], list[TaskInstance]],
          params: PolicyParams, vocab: Vocab, sampling: SamplingConfig = SamplingConfig(),
          reward_cfg: RewardConfig = RewardConfig(), clip: ClipConfig = ClipConfig(),
          run_dir=None, workers: int = 1, manifest_extra: dict | None = None):
    """Run ``total_steps`` of snapshot -> sample -> score -> loss -> update.

    Returns the final parameters and the :class:`RunLog`.  When ``run_dir``
    is given, writes ``runlog.jsonl``, periodic checkpoints, a manifest and
    the final greedy eval rollouts there.
    """
    config.validate()
    clip.validate()
    reward_cfg.validate(params.config.vocab_size)
    sampling = SamplingConfig(config.group_size, sampling.temperature, sampling.top_p,
                              sampling.max_response_len).validate()
    train_set, eval_set = datasets
    params = params.copy()
    opt = AdamW(params.values.size, (config.adam_beta1, config.adam_beta2),
                weight_decay=config.weight_decay)
    components = config.components
    runlog = RunLog()
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        manifest = {"config": asdict(config), "seed": config.seed,
                    "dataset_hash": dataset_hash(list(train_set) + list(eval_set))}
        manifest.update(manifest_extra or {})
        (run_dir / "checkpoints" / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    for step in range(config.total_steps):
        t0 = time.perf_counter()
        params_old = params.copy()
        instances = _select_prompts(train_set, config.prompts_per_step, config.seed, step)
        groups = sample_batch(params_old, instances, sampling, config.seed, step, vocab.is_option,
                              workers)
        for inst, group in zip(instances, groups):
            for r in group:
                r.breakdown = score_rollout(r, inst, reward_cfg, components, vocab.is_option)
        out, grad = compute_loss(config.algorithm, groups, params, clip, reward_cfg, config)
        flat = [r for g in groups for r in g]
        ok = [r.breakdown for r in flat if r.breakdown.parse_ok]
        record = {
            "step": step,
            "mean_reward": float(np.mean([r.breakdown.shaped_reward for r in flat])),
            "h_t": float(np.mean([b.h_t for b in ok])) if ok else 0.0,
            "h_r": float(np.mean([b.h_r for b in ok])) if ok else 0.0,
            "loss_total": out.total,
            "loss_surrogate": out.surrogate,
            "loss_reg": out.regularizer,
            "eval_acc": None,
        }
        if not (math.isfinite(out.total) and np.all(np.isfinite(grad))):
            if run_dir is not None:
                (run_dir / "nonfinite.json").write_text(json.dumps(record, indent=2) + "\n")
            raise NonFiniteLossError(f"non-finite loss at step {step}: {record}")
        grad, _ = clip_grad_norm(grad, config.max_grad_norm)
        opt.step(params.values, grad, learning_rate(step, config))
        last = step == config.total_steps - 1
        if (step + 1) % config.eval_every == 0 or last:
            record["eval_acc"] = evaluate(params, eval_set, sampling.max_response_len, vocab)
            if run_dir is not None:
                save_checkpoint(params, run_dir / "checkpoints" / f"step_{step + 1:06d}.ckpt")
        runlog.append(record)
        log.info("step %d reward %.3f h_t %.3f h_r %.3f loss %.5f acc %s (%.2fs)", step,
                 record["mean_reward"], record["h_t"], record["h_r"], record["loss_total"],
                 record["eval_acc"], time.perf_counter() - t0)

    if run_dir is not None:
        runlog.write(run_dir / "runlog.jsonl")
        save_checkpoint(params, run_dir / "checkpoints" / "final.ckpt")
        _, outs = evaluate(params, eval_set, sampling.max_response_len, vocab, return_rollouts=True)
        for r, inst in zip(outs, eval_set):
            r.breakdown = score_rollout(r, inst, reward_cfg, components, vocab.is_option)
        dump_jsonl(outs, run_dir / "eval_rollouts.jsonl")
    return params, runlog
