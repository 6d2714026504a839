"""Four-stage segmentation of responses and stage-level policy entropies."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from aepolab.errors import FormatError
from aepolab.tasks import A_TOK, CONTROL_TOKENS, D_TOK, END_TOK, R_TOK, T_TOK

# Entropy unit: natural log.  Set to math.log(2) to report bits.
ENTROPY_LOG_BASE = math.e


@dataclass(frozen=True)
class StageSpans:
    """Half-open ``(start, stop)`` index ranges into the response tokens."""

    thinking: tuple[int, int]
    draft: tuple[int, int]
    reflection: tuple[int, int]
    answer: tuple[int, int]

    def as_dict(self) -> dict[str, list[int]]:
        return {k: list(getattr(self, k)) for k in ("thinking", "draft", "reflection", "answer")}

    @classmethod
    def from_dict(cls, obj: dict) -> "StageSpans":
        return cls(*(tuple(obj[k]) for k in ("thinking", "draft", "reflection", "answer")))


@dataclass(frozen=True)
class StageEntropies:
    h_thinking: float
    h_reflection: float


def segment(response_tokens: Sequence[int], is_option: Callable[[int], bool] | None = None,
            cued: bool = False) -> StageSpans:
    """Split a response into thinking/draft/reflection/answer spans.

    With ``cued=True`` the thinking marker is taken to be the final prompt
    token, so the response starts directly with thinking content.  Raises
    :class:`FormatError` for any missing, repeated or misordered control
    token, trailing tokens after the end marker, an empty thinking or
    reflection stage, or a draft/answer that is not exactly one option token.
    """
    toks = [int(t) for t in response_tokens]
    expected = (D_TOK, R_TOK, A_TOK, END_TOK) if cued else CONTROL_TOKENS
    positions = [i for i, t in enumerate(toks) if t in CONTROL_TOKENS]
    found = tuple(toks[i] for i in positions)
    if found != expected:
        names = {T_TOK: "<T>", D_TOK: "<D>", R_TOK: "<R>", A_TOK: "<A>", END_TOK: "<END>"}
        raise FormatError(
            f"control tokens {[names[t] for t in found]} != {[names[t] for t in expected]}")
    if positions[-1] != len(toks) - 1:
        raise FormatError("tokens after <END>")
    if cued:
        t_open = -1
        d, r, a, end = positions
    else:
        t_open, d, r, a, end = positions
        if t_open != 0:
            raise FormatError("response must open with <T>")
    spans = StageSpans((t_open + 1, d), (d + 1, r), (r + 1, a), (a + 1, end))
    if spans.thinking[1] <= spans.thinking[0]:
        raise FormatError("empty thinking stage")
    if spans.reflection[1] <= spans.reflection[0]:
        raise FormatError("empty reflection stage")
    for name in ("draft", "answer"):
        lo, hi = getattr(spans, name)
        if hi - lo != 1:
            raise FormatError(f"{name} stage must hold exactly one option token, has {hi - lo}")
        if is_option is not None and not is_option(toks[lo]):
            raise FormatError(f"{name} token {toks[lo]} is not an option")
    return spans


def token_entropy(dist) -> float:
    """Shannon entropy of a next-token distribution, ``0 log 0 = 0``."""
    p = np.asarray(getattr(dist, "probs", dist), dtype=np.float64)
    nz = p[p > 0.0]
    h = float(-(nz * np.log(nz)).sum()) / math.log(ENTROPY_LOG_BASE)
    return max(h, 0.0)


def stage_mean_entropy(per_token_entropies: Sequence[float], span: tuple[int, int]) -> float:
    lo, hi = span
    if hi <= lo:
        raise ValueError(f"empty span {span}")
    if lo < 0 or hi > len(per_token_entropies):
        raise ValueError(f"span {span} outside sequence of length {len(per_token_entropies)}")
    return float(np.mean(np.asarray(per_token_entropies[lo:hi], dtype=np.float64)))


def stage_entropies(per_token_entropies: Sequence[float], spans: StageSpans) -> StageEntropies:
    return StageEntropies(stage_mean_entropy(per_token_entropies, spans.thinking),
                          stage_mean_entropy(per_token_entropies, spans.reflection))
