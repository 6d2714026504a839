"""Group-relative clipped policy-gradient objectives and the parameter optimizer.

``aepo_loss`` is the full objective: clipped token-level surrogate plus the
per-sequence regularizer ``L(O_i)``, normalized by the summed response
length of each group.  ``grpo_loss`` and ``dapo_loss`` are the baselines,
obtained by switching pieces off.

Sign convention: gradient *descent* on ``total = regularizer - surrogate``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from aepolab import autodiff as ad
from aepolab.errors import ConfigError
from aepolab.policy import PolicyParams, Tracked, forward_logits, track
from aepolab.reward import NO_COMPONENTS, Components, RewardConfig, adaptive_entropy, ib_loss
from aepolab.stages import ENTROPY_LOG_BASE

NORMALIZATIONS = ("token", "sequence")


@dataclass(frozen=True)
class ClipConfig:
    eps_low: float = 0.2
    eps_high: float = 0.28

    def validate(self) -> "ClipConfig":
        if not 0.0 < self.eps_low < 1.0:
            raise ConfigError(f"eps_low must be in (0, 1), got {self.eps_low}")
        if self.eps_high < self.eps_low:
            raise ConfigError("eps_high must be >= eps_low")
        return self


@dataclass
class GroupAdvantages:
    values: np.ndarray
    degenerate: bool


@dataclass
class LossBreakdown:
    total: float
    surrogate: float
    regularizer: float
    h_t: float
    h_r: float
    tensor: ad.Tensor | None = None


def group_advantages(rewards) -> GroupAdvantages:
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError(f"need at least 2 rewards per group, got {r.size}")
    if r.max() - r.min() < 1e-12:
        return GroupAdvantages(np.zeros_like(r), True)
    std = max(float(r.std()), 1e-8)
    return GroupAdvantages((r - r.mean()) / std, False)


def importance_ratio(logprob_new: float, logprob_old: float) -> float:
    return math.exp(logprob_new - logprob_old)


def clipped_token_term(r: float, adv: float, clip: ClipConfig) -> float:
    clipped = min(max(r, 1.0 - clip.eps_low), 1.0 + clip.eps_high)
    return min(r * adv, clipped * adv)


@dataclass
class _Batch:
    tokens: np.ndarray      # (N, P + L) prompt + padded response
    mask: np.ndarray        # (N, L) response-token mask
    old_logp: np.ndarray    # (N, L)
    adv: np.ndarray         # (N,)
    lengths: np.ndarray     # (N,)
    group: np.ndarray       # (N,) group index
    parse_ok: np.ndarray    # (N,)
    correct: np.ndarray     # (N,)
    c_value: np.ndarray     # (N,)
    think_w: np.ndarray     # (N, L) averaging weights over the thinking span
    refl_w: np.ndarray      # (N, L) averaging weights over the reflection span
    plen: int


def _assemble(groups) -> _Batch:
    flat = [(gi, r) for gi, g in enumerate(groups) for r in g]
    if not flat:
        raise ValueError("empty batch")
    plen = len(flat[0][1].prompt_tokens)
    lmax = max(len(r.response_tokens) for _, r in flat)
    n = len(flat)
    tokens = np.zeros((n, plen + lmax), dtype=np.int64)
    mask = np.zeros((n, lmax))
    old = np.zeros((n, lmax))
    think_w = np.zeros((n, lmax))
    refl_w = np.zeros((n, lmax))
    adv = np.zeros(n)
    group = np.zeros(n, dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    parse_ok = np.zeros(n, dtype=bool)
    correct = np.zeros(n, dtype=bool)
    c_value = np.zeros(n)
    advs = [group_advantages([r.breakdown.shaped_reward for r in g]).values for g in groups]
    k = 0
    for gi, g in enumerate(groups):
        for j, r in enumerate(g):
            m = len(r.response_tokens)
            tokens[k, :plen] = r.prompt_tokens
            tokens[k, plen:plen + m] = r.response_tokens
            mask[k, :m] = 1.0
            old[k, :m] = r.old_logprobs
            adv[k] = advs[gi][j]
            r.advantage = float(adv[k])
            group[k] = gi
            lengths[k] = m
            b = r.breakdown
            if b is not None and b.parse_ok and r.spans is not None:
                parse_ok[k] = True
                correct[k] = b.correct
                c_value[k] = b.c_value
                lo, hi = r.spans.thinking
                think_w[k, lo:hi] = 1.0 / (hi - lo)
                lo, hi = r.spans.reflection
                refl_w[k, lo:hi] = 1.0 / (hi - lo)
            k += 1
    return _Batch(tokens, mask, old, adv, lengths, group, parse_ok, correct, c_value,
                  think_w, refl_w, plen)


def policy_loss(groups, model: PolicyParams | Tracked, clip: ClipConfig,
                reward_cfg: RewardConfig = RewardConfig(), components: Components = Components(),
                normalization: str = "token", regularizer_normalized: bool = True) -> LossBreakdown:
    """Shared implementation behind :func:`aepo_loss`, :func:`grpo_loss`, :func:`dapo_loss`.

    Per group ``g`` with rollouts ``i`` and response lengths ``|O_i|``:

    * ``token`` normalization: ``(sum_i L(O_i) - sum_{i,t} term_it) / sum_i |O_i|``
    * ``sequence`` normalization: ``mean_i (L(O_i) - sum_t term_it) / |O_i|``

    The batch loss is the mean over groups.
    """
    if normalization not in NORMALIZATIONS:
        raise ConfigError(f"normalization must be one of {NORMALIZATIONS}")
    b = _assemble(groups)
    n, lmax = b.mask.shape
    n_groups = int(b.group.max()) + 1
    logits = forward_logits(model, b.tokens)
    logits = logits[:, b.plen - 1:b.plen - 1 + lmax, :]
    logp = ad.log_softmax(logits)
    resp = b.tokens[:, b.plen:]
    logp_tok = ad.take_last(logp, resp)
    ratio = ad.exp(logp_tok - b.old_logp)
    adv = b.adv[:, None]
    unclipped = ratio * adv
    clipped = ad.clip(ratio, 1.0 - clip.eps_low, 1.0 + clip.eps_high) * adv
    term = ad.minimum(unclipped, clipped) * b.mask
    per_seq_surr = term.sum(axis=1)

    entropy = ad.entropy_from_logp(logp)
    if ENTROPY_LOG_BASE != math.e:
        entropy = entropy * (1.0 / math.log(ENTROPY_LOG_BASE))
    h_t = (entropy * b.think_w).sum(axis=1)
    h_r = (entropy * b.refl_w).sum(axis=1)
    ok = b.parse_ok.astype(np.float64)
    reg_terms = []
    if components.rif:
        reg_terms.append(ib_loss(h_r, b.c_value, reward_cfg) * ok)
    if components.ae:
        gate = (b.correct if components.gae else b.parse_ok).astype(np.float64)
        f_gae = (adaptive_entropy(h_t, reward_cfg.h_star)
                 + adaptive_entropy(h_r, reward_cfg.h_star)) * gate
        reg_terms.append(-f_gae)
    per_seq_reg = None
    for t in reg_terms:
        per_seq_reg = t if per_seq_reg is None else per_seq_reg + t

    # per-rollout weights implementing the normalization
    group_tokens = np.bincount(b.group, weights=b.lengths, minlength=n_groups)
    group_sizes = np.bincount(b.group, minlength=n_groups).astype(np.float64)
    if normalization == "token":
        w_surr = 1.0 / group_tokens[b.group]
    else:
        w_surr = 1.0 / (b.lengths * group_sizes[b.group])
    w_reg = w_surr if regularizer_normalized else 1.0 / group_sizes[b.group]
    w_surr = w_surr / n_groups
    w_reg = w_reg / n_groups

    surrogate = (per_seq_surr * w_surr).sum()
    if per_seq_reg is not None:
        reg = (per_seq_reg * w_reg).sum()
        total = reg - surrogate
        reg_value = reg.item()
    else:
        total = -surrogate
        reg_value = 0.0
    valid = b.parse_ok
    h_t_mean = float(h_t.value[valid].mean()) if valid.any() else 0.0
    h_r_mean = float(h_r.value[valid].mean()) if valid.any() else 0.0
    return LossBreakdown(total.item(), surrogate.item(), reg_value, h_t_mean, h_r_mean, total)


def aepo_loss(groups, model, clip: ClipConfig = ClipConfig(), reward_cfg: RewardConfig = RewardConfig(),
              components: Components = Components(), normalization: str = "token",
              regularizer_normalized: bool = True) -> LossBreakdown:
    return policy_loss(groups, model, clip, reward_cfg, components, normalization,
                       regularizer_normalized)


def grpo_loss(groups, model, eps: float = 0.2) -> LossBreakdown:
    return policy_loss(groups, model, ClipConfig(eps, eps), RewardConfig(), NO_COMPONENTS,
                       "sequence")


def dapo_loss(groups, model, clip: ClipConfig = ClipConfig()) -> LossBreakdown:
    return policy_loss(groups, model, clip, RewardConfig(), NO_COMPONENTS, "token")


def loss_and_grad(loss_fn, groups, params: PolicyParams, *args, **kwargs):
    """Evaluate a loss on tracked params and return ``(LossBreakdown, gradient)``."""
    from aepolab.policy import loss_gradient

    tracked = track(params)
    out = loss_fn(groups, tracked, *args, **kwargs)
    if not out.tensor.requires_grad:
        return out, np.zeros_like(params.values)
    return out, loss_gradient(tracked, out.tensor)


class AdamW:
    """Adaptive moment estimation with decoupled weight decay."""

    def __init__(self, size: int, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, values: np.ndarray, grad: np.ndarray, lr: float) -> None:
        """Update ``values`` in place."""
        self.t += 1
        self.m = self.b1 * self.m + (1.0 - self.b1) * grad
        self.v = self.b2 * self.v + (1.0 - self.b2) * grad * grad
        m_hat = self.m / (1.0 - self.b1 ** self.t)
        v_hat = self.v / (1.0 - self.b2 ** self.t)
        if self.weight_decay:
            values *= 1.0 - lr * self.weight_decay
        values -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_grad_norm(grad: np.ndarray, max_norm: float | None) -> tuple[np.ndarray, float]:
    norm = float(np.sqrt(np.dot(grad, grad)))
    if max_norm is not None and max_norm > 0 and norm > max_norm:
        grad = grad * (max_norm / norm)
    return grad, norm
