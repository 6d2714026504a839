"""Sequence-level rewards and regularizers of the AEPO objective.

The formula helpers accept either floats or :class:`aepolab.autodiff.Tensor`
entropies, so the same definitions drive both the logged breakdown and the
differentiable loss.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from aepolab import autodiff as ad
from aepolab.errors import ConfigError, FormatError
from aepolab.stages import StageSpans, segment, stage_mean_entropy
from aepolab.tasks import TaskInstance

IB_SIGNS = ("prose", "figure")

# Reflection contribution by (draft correct, answer correct).
_CONTRIBUTION = {
    (True, True): 0.4,
    (False, True): 0.6,
    (False, False): 0.0,
    (True, False): -0.3,
}


@dataclass(frozen=True)
class RewardConfig:
    beta: float = 1.0
    h_star: float = 0.67
    c_as_reward: bool = True
    ib_sign: str = "prose"
    correct_reward: float = 1.0
    format_penalty: float = 0.0

    def validate(self, vocab_size: int | None = None) -> "RewardConfig":
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.ib_sign not in IB_SIGNS:
            raise ConfigError(f"ib_sign must be one of {IB_SIGNS}, got {self.ib_sign!r}")
        upper = math.log(vocab_size) if vocab_size else math.inf
        if not 0.0 < self.h_star < upper:
            raise ConfigError(f"h_star must be in (0, ln vocab_size), got {self.h_star}")
        return self


@dataclass(frozen=True)
class Components:
    """Which regularizer pieces are active (the ablation grid)."""

    rif: bool = True
    ae: bool = True
    gae: bool = True


NO_COMPONENTS = Components(False, False, False)


@dataclass
class RewardBreakdown:
    correct: bool
    draft_correct: bool
    parse_ok: bool
    c_value: float
    h_t: float
    h_r: float
    f_ae_t: float
    f_ae_r: float
    f_gae: float
    l_ib: float
    l_seq: float
    shaped_reward: float

    def to_json(self) -> dict:
        return asdict(self)


def correctness(spans: StageSpans, response, instance: TaskInstance) -> bool:
    """Whether the single answer-stage token is the label's option token."""
    return int(response[spans.answer[0]]) == instance.option_tokens[instance.label]


def draft_correctness(spans: StageSpans, response, instance: TaskInstance) -> bool:
    return int(response[spans.draft[0]]) == instance.option_tokens[instance.label]


def contribution_indicator(draft_correct: bool, answer_correct: bool) -> float:
    return _CONTRIBUTION[(bool(draft_correct), bool(answer_correct))]


def ib_loss(h_r, c_value: float, config: RewardConfig):
    """Proxy bottleneck loss: the reflection-entropy term minus ``beta * C``."""
    compress = -h_r if config.ib_sign == "prose" else h_r
    return compress - config.beta * c_value


def adaptive_entropy(h_bar, h_star: float):
    """Negative distance of a stage-mean entropy from the target."""
    if isinstance(h_bar, ad.Tensor):
        return -ad.tabs(h_bar - h_star)
    return -abs(h_bar - h_star)


def gated_adaptive_entropy(f_ae_t, f_ae_r, correct: bool):
    return f_ae_t + f_ae_r if correct else 0.0


def sequence_objective(l_ib, f_gae):
    return l_ib - f_gae


def regularizer(h_t, h_r, c_value: float, correct: bool, config: RewardConfig,
                components: Components = Components()):
    """``L(O_i)`` with the ablation switches applied; returns (l_ib, f_gae, l_seq)."""
    l_ib = ib_loss(h_r, c_value, config) if components.rif else 0.0
    if components.ae:
        f_t = adaptive_entropy(h_t, config.h_star)
        f_r = adaptive_entropy(h_r, config.h_star)
        f_gae = gated_adaptive_entropy(f_t, f_r, correct or not components.gae)
    else:
        f_gae = 0.0
    return l_ib, f_gae, sequence_objective(l_ib, f_gae)


def shaped_reward(correct: bool, c_value: float, parse_ok: bool, config: RewardConfig) -> float:
    if not parse_ok:
        return config.format_penalty
    return config.correct_reward * float(correct) + (c_value if config.c_as_reward else 0.0)


def score_rollout(rollout, instance: TaskInstance, config: RewardConfig,
                  components: Components = Components(), is_option=None) -> RewardBreakdown:
    """Fill a :class:`RewardBreakdown` from a rollout's tokens and per-token entropies.

    Malformed responses get zero regularizers and the format penalty.
    ``C`` is folded into the reward only when the bottleneck term is active.
    """
    tokens = rollout.response_tokens
    try:
        spans = rollout.spans if rollout.spans is not None else segment(tokens, is_option, cued=True)
    except FormatError:
        spans = None
    if spans is None:
        return RewardBreakdown(False, False, False, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
                               config.format_penalty)
    ent = rollout.token_entropies
    h_t = stage_mean_entropy(ent, spans.thinking)
    h_r = stage_mean_entropy(ent, spans.reflection)
    correct = correctness(spans, tokens, instance)
    draft_ok = draft_correctness(spans, tokens, instance)
    c = contribution_indicator(draft_ok, correct)
    f_t = adaptive_entropy(h_t, config.h_star)
    f_r = adaptive_entropy(h_r, config.h_star)
    l_ib, f_gae, l_seq = regularizer(h_t, h_r, c, correct, config, components)
    reward_cfg = config if components.rif else _without_c(config)
    return RewardBreakdown(correct, draft_ok, True, c, h_t, h_r, f_t, f_r, float(f_gae),
                           float(l_ib), float(l_seq), shaped_reward(correct, c, True, reward_cfg))


def _without_c(config: RewardConfig) -> RewardConfig:
    return RewardConfig(config.beta, config.h_star, False, config.ib_sign,
                        config.correct_reward, config.format_penalty)
