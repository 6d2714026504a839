"""Command-line entry point.

Subcommands: ``gen-tasks``, ``warmup``, ``train``, ``eval``, ``compare`` and
``export-curves``.  Configuration is one JSON object with the sections
``task``, ``model``, ``sampling``, ``reward``, ``clip``, ``train`` and
``warmup`` plus a top-level ``seed``; every flag is a pure override of a
config key.  Exit codes: 0 success, 1 usage or configuration error, 2
runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import sys
import typing
from pathlib import Path

from aepolab.errors import AepoError, ConfigError
from aepolab.metrics import compare_report, echo_samples, export_curves
from aepolab.optimizer import ClipConfig
from aepolab.policy import ModelConfig, init_params, load_checkpoint, save_checkpoint
from aepolab.reward import RewardConfig
from aepolab.rollout import SamplingConfig, load_jsonl as load_rollouts
from aepolab.tasks import TaskSpec, Vocab, generate_dataset, save_jsonl
from aepolab.trainer import ALGORITHMS, RunLog, TrainConfig, WarmupConfig, evaluate, sft_warmup, train

log = logging.getLogger("aepolab")

# section -> (dataclass, keys filled from elsewhere and therefore not configurable)
SECTIONS = {
    "task": (TaskSpec, {"seed"}),
    "model": (ModelConfig, {"vocab_size"}),
    "sampling": (SamplingConfig, {"group_size"}),
    "reward": (RewardConfig, set()),
    "clip": (ClipConfig, set()),
    "train": (TrainConfig, {"seed"}),
    "warmup": (WarmupConfig, set()),
}
REQUIRED = ("seed", "train.total_steps")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fields(section: str):
    cls, hidden = SECTIONS[section]
    hints = typing.get_type_hints(cls)
    return {f.name: (hints[f.name], f.default) for f in dataclasses.fields(cls) if f.name not in hidden}


def default_config() -> dict:
    """Every configurable key with its default; required keys are ``None``."""
    cfg: dict = {"seed": None}
    for section in SECTIONS:
        cfg[section] = {k: (None if d is dataclasses.MISSING else d)
                        for k, (_, d) in _fields(section).items()}
    return cfg


def _coerce(path: str, typ, value):
    if value is None:
        return None
    if typ is bool:
        if isinstance(value, bool):
            return value
    elif typ is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif typ is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif typ is str:
        if isinstance(value, str):
            return value
    raise ConfigError(f"{path}: expected {typ.__name__}, got {value!r}")


def merge(base: dict, overrides: dict) -> dict:
    """Overlay a (possibly partial) nested config onto ``base``, rejecting unknown keys."""
    out = copy.deepcopy(base)
    if not isinstance(overrides, dict):
        raise ConfigError("config must be a JSON object")
    for key, value in overrides.items():
        if key == "seed":
            out["seed"] = _coerce("seed", int, value)
            continue
        if key not in SECTIONS:
            raise ConfigError(f"{key}: unknown config key (sections: seed, {', '.join(SECTIONS)})")
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: section must be a JSON object")
        fields = _fields(key)
        for sub, v in value.items():
            if sub not in fields:
                raise ConfigError(f"{key}.{sub}: unknown config key")
            out[key][sub] = _coerce(f"{key}.{sub}", fields[sub][0], v)
    return out


def dotted(path: str, value) -> dict:
    """``("train.lr", 1e-3)`` -> ``{"train": {"lr": 1e-3}}``."""
    parts = path.split(".")
    if parts == ["seed"]:
        return {"seed": value}
    if len(parts) != 2:
        raise ConfigError(f"{path}: override keys look like section.key")
    return {parts[0]: {parts[1]: value}}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve(config_path=None, sets=(), **flags) -> dict:
    """Defaults <- config file <- ``--set`` overrides <- named flags."""
    cfg = default_config()
    if config_path is not None:
        try:
            with open(config_path, encoding="utf-8") as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config_path}: malformed JSON ({exc})") from exc
        cfg = merge(cfg, data)
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, text = item.split("=", 1)
        cfg = merge(cfg, dotted(key.strip(), _parse_value(text)))
    for key, value in flags.items():
        if value is not None:
            cfg = merge(cfg, dotted(key, value))
    algo = cfg["train"]["algorithm"]
    if algo not in ALGORITHMS:
        raise ConfigError(f"train.algorithm: must be one of {', '.join(ALGORITHMS)}; got {algo!r}")
    return cfg


def require(cfg: dict, keys=REQUIRED) -> None:
    for key in keys:
        parts = key.split(".")
        val = cfg[parts[0]] if len(parts) == 1 else cfg[parts[0]][parts[1]]
        if val is None:
            raise ConfigError(f"{key}: required (no default); set it in the config or with a flag")


def canonical(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


class Built(typing.NamedTuple):
    task: TaskSpec
    vocab: Vocab
    model: ModelConfig
    sampling: SamplingConfig
    reward: RewardConfig
    clip: ClipConfig
    train: TrainConfig | None
    warmup: WarmupConfig


def build(cfg: dict) -> Built:
    """Instantiate and validate the typed configs; one seed feeds every stream."""
    seed = cfg["seed"]
    task = TaskSpec(**cfg["task"], seed=seed).validate()
    vocab = Vocab.for_spec(task)
    model = ModelConfig(vocab_size=vocab.size, **cfg["model"]).validate()
    group_size = cfg["train"]["group_size"]
    sampling = SamplingConfig(group_size=group_size, **cfg["sampling"]).validate()
    reward = RewardConfig(**cfg["reward"]).validate(vocab.size)
    clip = ClipConfig(**cfg["clip"]).validate()
    tcfg = None
    if cfg["train"]["total_steps"] is not None:
        tcfg = TrainConfig(seed=seed, **cfg["train"]).validate()
    return Built(task, vocab, model, sampling, reward, clip, tcfg, WarmupConfig(**cfg["warmup"]))


def datasets(b: Built):
    return generate_dataset(b.task, b.model.context_len, b.sampling.max_response_len)


def warm_params(b: Built, seed: int, train_set, init=None):
    if init is not None:
        params = load_checkpoint(init)
        if params.config != b.model:
            raise ConfigError(f"checkpoint {init} has model config {params.config}, expected {b.model}")
        return params
    params = init_params(b.model, seed)
    log.info("warm-up: %d steps", b.warmup.steps)
    return sft_warmup(params, train_set, b.warmup.steps, seed, b.vocab, b.warmup,
                      b.sampling.max_response_len)


# ---------------------------------------------------------------- subcommands

def cmd_gen_tasks(args, cfg):
    b = build(cfg)
    train_set, eval_set = datasets(b)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_jsonl(train_set, out / "train.jsonl")
    save_jsonl(eval_set, out / "eval.jsonl")
    print(json.dumps({"train": len(train_set), "eval": len(eval_set), "dir": str(out)}))


def cmd_warmup(args, cfg):
    b = build(cfg)
    train_set, eval_set = datasets(b)
    params = warm_params(b, cfg["seed"], train_set)
    save_checkpoint(params, args.out)
    acc = evaluate(params, eval_set, b.sampling.max_response_len, b.vocab)
    print(json.dumps({"checkpoint": str(args.out), "eval_acc": acc}))


def run_report(run_dir: Path, name: str | None = None) -> dict:
    cfg = json.loads((run_dir / "config.json").read_text())
    name = name or cfg["train"]["algorithm"]
    runlog = RunLog.read(run_dir / "runlog.jsonl")
    rollouts = load_rollouts(run_dir / "eval_rollouts.jsonl")
    return compare_report({name: runlog}, {name: echo_samples(rollouts)})


def cmd_train(args, cfg):
    require(cfg)
    b = build(cfg)
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(canonical(cfg))
    train_set, eval_set = datasets(b)
    params = warm_params(b, cfg["seed"], train_set, args.init)
    train(b.train, (train_set, eval_set), params, b.vocab, b.sampling, b.reward, b.clip,
          run_dir=run_dir, workers=args.workers)
    report = run_report(run_dir)
    (run_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, sort_keys=True))


def cmd_eval(args, cfg):
    b = build(cfg)
    _, eval_set = datasets(b)
    params = load_checkpoint(args.checkpoint)
    acc = evaluate(params, eval_set, b.sampling.max_response_len, b.vocab)
    print(json.dumps({"checkpoint": str(args.checkpoint), "eval_acc": acc, "n": len(eval_set)}))


def _named_runs(dirs) -> dict[str, Path]:
    runs: dict[str, Path] = {}
    for d in dirs:
        d = Path(d)
        name = json.loads((d / "config.json").read_text())["train"]["algorithm"]
        if name in runs:
            name = d.name
        runs[name] = d
    return runs


def cmd_compare(args, cfg):
    runs = _named_runs(args.runs)
    logs = {n: RunLog.read(d / "runlog.jsonl") for n, d in runs.items()}
    echo = {n: echo_samples(load_rollouts(d / "eval_rollouts.jsonl")) for n, d in runs.items()}
    report = compare_report(logs, echo, args.out)
    print(json.dumps(report, sort_keys=True))


def cmd_export_curves(args, cfg):
    runs = _named_runs(args.runs)
    logs = {n: RunLog.read(d / "runlog.jsonl") for n, d in runs.items()}
    csv_path, svg_path = export_curves(logs, args.out)
    print(json.dumps({"csv": str(csv_path), "svg": str(svg_path)}))


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aepolab", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def with_config(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override seed")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config key (value parsed as JSON)")
        p.add_argument("--print-config", action="store_true",
                       help="print the resolved config as canonical JSON and exit")
        return p

    p = with_config(sub.add_parser("gen-tasks", help="generate train/eval task files"))
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_tasks)

    p = with_config(sub.add_parser("warmup", help="supervised format warm-up"))
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_warmup)

    p = with_config(sub.add_parser("train", help="warm-up (or --init) then RL training"))
    p.add_argument("--algorithm", help=f"one of {', '.join(ALGORITHMS)}")
    p.add_argument("--steps", type=int, help="override train.total_steps")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--init", help="start from this checkpoint instead of running warm-up")
    p.add_argument("--workers", type=int, default=1, help="threads for rollout generation")
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("eval", help="greedy accuracy of a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="metrics report over run directories")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("export-curves", help="CSV + SVG training curves")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True, help="output path stem")
    p.set_defaults(func=cmd_export_curves)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s", stream=sys.stderr)
        cfg = None
        if hasattr(args, "config"):
            flags = {"seed": args.seed}
            if args.command == "train":
                flags.update({"train.algorithm": args.algorithm, "train.total_steps": args.steps})
                if args.workers < 1:
                    raise UsageError("--workers must be >= 1")
            cfg = resolve(args.config, args.set, **flags)
            if args.print_config:
                sys.stdout.write(canonical(cfg))
                return 0
            require(cfg, ("seed",))
        args.func(args, cfg)
        return 0
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (AepoError, OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
