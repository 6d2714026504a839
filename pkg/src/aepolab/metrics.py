"""Reflection novelty scores, training-curve export and comparison reports.

The novelty score is an n-gram containment proxy: a reflection that only
restates the question or the thinking stage scores overlap 1 (pure echo), a
reflection made of n-grams found nowhere in that reference scores 0.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from aepolab.trainer import RunLog

H_STAR = 0.67


@dataclass(frozen=True)
class EchoScore:
    overlap: float
    novelty: float
    n: int = 3


def _ngrams(tokens: Sequence[int], n: int) -> list[tuple[int, ...]]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def echo_overlap(reflection: Sequence[int], reference: Sequence[int], n: int = 3) -> EchoScore:
    """Fraction of reflection n-gram positions whose n-gram occurs in ``reference``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    reflection = [int(t) for t in reflection]
    if len(reflection) < n:
        raise ValueError(f"reflection has {len(reflection)} tokens, need at least n={n}")
    grams = _ngrams(reflection, n)
    known = set(_ngrams([int(t) for t in reference], n))
    overlap = sum(g in known for g in grams) / len(grams)
    return EchoScore(overlap=overlap, novelty=1.0 - overlap, n=n)


def rollout_echo(rollout, n: int = 3) -> EchoScore | None:
    """Echo score of one parsed rollout against its prompt plus thinking stage.

    Returns ``None`` when the rollout did not parse or its reflection is
    shorter than ``n``.
    """
    spans = rollout.spans
    if spans is None:
        return None
    toks = list(rollout.response_tokens)
    reflection = toks[spans.reflection[0]:spans.reflection[1]]
    if len(reflection) < n:
        return None
    reference = list(rollout.prompt_tokens) + toks[spans.thinking[0]:spans.thinking[1]]
    return echo_overlap(reflection, reference, n)


def echo_samples(rollouts: Iterable, n: int = 3, correct_only: bool = True) -> list[EchoScore]:
    """Echo scores over the (by default only correct) rollouts that have one."""
    out = []
    for r in rollouts:
        if correct_only and (r.breakdown is None or not r.breakdown.correct):
            continue
        score = rollout_echo(r, n)
        if score is not None:
            out.append(score)
    return out


def _labelled(runlogs) -> list[tuple[str, RunLog]]:
    if isinstance(runlogs, Mapping):
        items = list(runlogs.items())
    else:
        items = [(f"run{i}", log) for i, log in enumerate(runlogs)]
    if not items:
        raise ValueError("need at least one run log")
    for name, log in items:
        if not log.records:
            raise ValueError(f"run log {name!r} is empty")
    return items


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def curves_csv(runlogs) -> str:
    """CSV text with one row per step and reward/H_R columns per run."""
    items = _labelled(runlogs)
    steps = sorted({rec["step"] for _, log in items for rec in log.records})
    by_step = [{rec["step"]: rec for rec in log.records} for _, log in items]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["step"]
    for name, _ in items:
        header += [f"{name}_reward", f"{name}_h_r"]
    w.writerow(header)
    for s in steps:
        row = [str(s)]
        for recs in by_step:
            rec = recs.get(s, {})
            row += [_fmt(rec.get("mean_reward")), _fmt(rec.get("h_r"))]
        w.writerow(row)
    return buf.getvalue()


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _panel(items, key: str, title: str, x0: float, y0: float, w: float, h: float) -> list[str]:
    pts = [(rec["step"], rec[key]) for _, log in items for rec in log.records
           if rec.get(key) is not None and math.isfinite(rec[key])]
    out = [f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#333"/>',
           f'<text x="{x0 + w / 2}" y="{y0 - 8}" text-anchor="middle" font-size="13">{title}</text>']
    if not pts:
        return out
    xs, ys = np.array([p[0] for p in pts], float), np.array([p[1] for p in pts], float)
    xlo, xhi = xs.min(), max(xs.max(), xs.min() + 1)
    ylo, yhi = ys.min(), ys.max()
    if yhi - ylo < 1e-12:
        ylo, yhi = ylo - 0.5, yhi + 0.5
    out.append(f'<text x="{x0 - 4}" y="{y0 + 10}" text-anchor="end" font-size="10">{yhi:.3g}</text>')
    out.append(f'<text x="{x0 - 4}" y="{y0 + h}" text-anchor="end" font-size="10">{ylo:.3g}</text>')
    out.append(f'<text x="{x0 + w}" y="{y0 + h + 14}" text-anchor="end" font-size="10">step {xhi:g}</text>')
    for k, (name, log) in enumerate(items):
        line = [(rec["step"], rec[key]) for rec in log.records
                if rec.get(key) is not None and math.isfinite(rec[key])]
        coords = " ".join(f"{x0 + (sx - xlo) / (xhi - xlo) * w:.2f},"
                          f"{y0 + h - (sy - ylo) / (yhi - ylo) * h:.2f}" for sx, sy in line)
        out.append(f'<polyline fill="none" stroke="{_COLORS[k % len(_COLORS)]}" '
                   f'stroke-width="1.5" points="{coords}"/>')
    return out


def curves_svg(runlogs) -> str:
    """Static two-panel line chart: mean reward and reflection entropy."""
    items = _labelled(runlogs)
    width, height = 760, 330
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             '<rect width="100%" height="100%" fill="white"/>']
    parts += _panel(items, "mean_reward", "mean reward", 60, 30, 300, 230)
    parts += _panel(items, "h_r", "reflection entropy (nats)", 440, 30, 300, 230)
    for k, (name, _) in enumerate(items):
        x = 60 + 120 * k
        parts.append(f'<line x1="{x}" y1="300" x2="{x + 20}" y2="300" '
                     f'stroke="{_COLORS[k % len(_COLORS)]}" stroke-width="2"/>')
        parts.append(f'<text x="{x + 25}" y="304" font-size="12">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def export_curves(runlogs, out_path) -> tuple[Path, Path]:
    """Write ``<out_path>.csv`` and ``<out_path>.svg``; returns both paths.

    ``runlogs`` is a mapping from algorithm name to :class:`RunLog` or a
    plain sequence (labelled ``run0``, ``run1``, ...).
    """
    base = Path(out_path)
    if base.suffix in (".csv", ".svg"):
        base = base.with_suffix("")
    csv_path, svg_path = base.with_suffix(".csv"), base.with_suffix(".svg")
    csv_text, svg_text = curves_csv(runlogs), curves_svg(runlogs)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(csv_text)
    with open(svg_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(svg_text)
    return csv_path, svg_path


def final_accuracy(log: RunLog) -> float | None:
    accs = [rec["eval_acc"] for rec in log.records if rec.get("eval_acc") is not None]
    return accs[-1] if accs else None


def entropy_gap(log: RunLog, h_star: float = H_STAR, tail: float = 0.1) -> float | None:
    """Mean ``|H_R - h_star|`` over the last ``tail`` fraction of records."""
    k = max(1, math.ceil(tail * len(log.records)))
    vals = [abs(rec["h_r"] - h_star) for rec in log.records[-k:] if rec.get("h_r") is not None]
    return float(np.mean(vals)) if vals else None


def compare_report(runlogs: Mapping[str, RunLog], echo: Mapping[str, Sequence] | None = None,
                   out_path=None, h_star: float = H_STAR) -> dict:
    """Per-algorithm ``{final_acc, entropy_gap, mean_novelty}``.

    ``echo`` maps algorithm names to :class:`EchoScore` lists (or raw novelty
    values); missing entries give ``mean_novelty = None``.
    """
    echo = echo or {}
    report = {}
    for name, log in _labelled(runlogs):
        scores = echo.get(name, [])
        nov = [s.novelty if isinstance(s, EchoScore) else float(s) for s in scores]
        report[name] = {
            "final_acc": final_accuracy(log),
            "entropy_gap": entropy_gap(log, h_star),
            "mean_novelty": float(np.mean(nov)) if nov else None,
        }
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return report
