"""Command-line entry points: cotrain, rewrite, simplify, evaluate, synth, adapt.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

Run configuration is a flat YAML mapping with ``cotrain.*``, ``model.*`` and
``data.*`` keys; unknown keys are rejected. Any key can be overridden from
the environment: ``cotrain.s_s`` via ``COTRAIN_S_S``, ``model.dim`` via
``COTRAIN_MODEL_DIM``, ``data.run_dir`` via ``COTRAIN_DATA_RUN_DIR``.
"""
from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

import yaml

from . import cotrain as ct
from . import plots
from .dataio import DataFormatError, adapt, load_sessions, read_jsonl, save_sessions, to_labeled, write_jsonl
from .genmodel import CheckpointError, ModelConfig, generate_batch, load_checkpoint
from .metrics import evaluate_corpus
from .weaklabel import SyntheticWorld, synth_generate

log = logging.getLogger("corewrite")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class DataConfig:
    labeled: Optional[str] = None
    us: Optional[str] = None
    ur: Optional[str] = None
    test: Optional[str] = None
    lexicon: Optional[str] = None
    run_dir: str = "runs/default"
    synth_sessions: Optional[int] = None
    synth_turns: int = 3
    synth_seed: int = 1
    synth_labeled: int = 32
    synth_test_sessions: int = 150


@dataclass(frozen=True)
class RunConfig:
    cotrain: ct.CoTrainConfig
    data: DataConfig

    def flat(self) -> dict:
        out = {}
        for f in fields(ct.CoTrainConfig):
            if f.name != "model":
                v = getattr(self.cotrain, f.name)
                out[f"cotrain.{f.name}"] = v.value if isinstance(v, ct.Mode) else v
        for f in fields(ModelConfig):
            if f.name != "seed":
                out[f"model.{f.name}"] = getattr(self.cotrain.model, f.name)
        for f in fields(DataConfig):
            out[f"data.{f.name}"] = getattr(self.data, f.name)
        return out


_SECTIONS = {
    "cotrain": {f.name: f for f in fields(ct.CoTrainConfig) if f.name != "model"},
    "model": {f.name: f for f in fields(ModelConfig) if f.name != "seed"},
    "data": {f.name: f for f in fields(DataConfig)},
}


def env_name(key: str) -> str:
    section, name = key.split(".", 1)
    prefix = "COTRAIN_" if section == "cotrain" else f"COTRAIN_{section.upper()}_"
    return prefix + name.upper()


def _coerce(key: str, f: dataclasses.Field, value):
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if value is None:
        if "Optional" in kind:
            return None
        raise ct.ConfigError(f"{key} may not be null")
    try:
        if "float" in kind:
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if "int" in kind:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if "bool" in kind:
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError
                return value.lower() in ("true", "1", "yes")
            return bool(value)
        return str(value)
    except (TypeError, ValueError):
        raise ct.ConfigError(f"{key}: cannot interpret {value!r} as {kind}") from None


def resolve_config(raw: dict, env=None, base_dir: Path = Path(".")) -> RunConfig:
    env = os.environ if env is None else env
    values: dict[str, dict] = {s: {} for s in _SECTIONS}
    merged = dict(raw or {})
    for key in [f"{s}.{n}" for s, names in _SECTIONS.items() for n in names]:
        if env_name(key) in env:
            merged[key] = yaml.safe_load(env[env_name(key)])
    for key, value in merged.items():
        section, _, name = str(key).partition(".")
        if section not in _SECTIONS or name not in _SECTIONS[section]:
            raise ct.ConfigError(f"unknown config key {key!r}")
        values[section][name] = _coerce(key, _SECTIONS[section][name], value)
    for name in ("labeled", "us", "ur", "test", "lexicon", "run_dir"):
        v = values["data"].get(name)
        if v is not None and not Path(v).is_absolute():
            values["data"][name] = str((base_dir / v).resolve())
    try:
        model = ModelConfig(**values["model"])
        cfg = ct.CoTrainConfig(**values["cotrain"], model=model)
    except ValueError as e:
        if isinstance(e, ct.ConfigError):
            raise
        raise ct.ConfigError(str(e)) from None
    data = DataConfig(**values["data"])
    if cfg.mode is ct.Mode.ZERO_SHOT and data.labeled is not None:
        raise ct.ConfigError("data.labeled is set but cotrain.mode is zero_shot (gold data is not allowed)")
    if data.synth_sessions is None:
        missing = [k for k in ("us", "ur") if getattr(data, k) is None]
        if cfg.mode is ct.Mode.FEW_SHOT and data.labeled is None:
            missing.insert(0, "labeled")
        if missing:
            raise ct.ConfigError("missing data paths: " + ", ".join(f"data.{k}" for k in missing))
    elif data.synth_sessions < 1:
        raise ct.ConfigError("data.synth_sessions must be >= 1")
    return RunConfig(cfg, data)


def load_run_config(path, env=None) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise ct.ConfigError(f"{path}: not valid YAML ({e})") from None
    if not isinstance(raw, dict):
        raise ct.ConfigError(f"{path}: expected a mapping of config keys")
    return resolve_config(raw, env, base_dir=path.parent)


def dump_config(rc: RunConfig) -> str:
    flat = rc.flat()
    for k, v in flat.items():
        if isinstance(v, float) and math.isinf(v):
            flat[k] = ".inf" if v > 0 else "-.inf"
    lines = []
    for k, v in flat.items():
        if isinstance(v, str) and v in (".inf", "-.inf"):
            lines.append(f"{k}: {v}")
        else:
            lines.append(yaml.safe_dump({k: v}, default_flow_style=False, allow_unicode=True).strip())
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ cotrain

def _load_data(rc: RunConfig):
    d, cfg = rc.data, rc.cotrain
    lexicon = None
    if d.lexicon:
        lexicon = json.loads(Path(d.lexicon).read_text(encoding="utf-8"))
    if d.synth_sessions is not None:
        split = synth_generate(d.synth_sessions, d.synth_turns, d.synth_seed,
                               n_labeled=d.synth_labeled, n_test_sessions=d.synth_test_sessions)
        us, ur, test = split.us, split.ur, split.test
        labeled = split.D
        lexicon = lexicon or SyntheticWorld.default().lexicon()
    else:
        from .core import DataPool

        us, ur = DataPool(load_sessions(d.us)), DataPool(load_sessions(d.ur))
        labeled = to_labeled(load_sessions(d.labeled)) if d.labeled else []
        test = to_labeled(load_sessions(d.test)) if d.test else []
    if cfg.mode is ct.Mode.ZERO_SHOT:
        D = ct.zero_shot_warmup_set(us, lexicon)
    else:
        D = labeled
    return D, us, ur, test


def execute_run(rc: RunConfig) -> ct.RunResult:
    run_dir = Path(rc.data.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.snapshot").write_text(dump_config(rc), encoding="utf-8")
    D, us, ur, test = _load_data(rc)
    res = ct.run(rc.cotrain, D, us, ur, test=test, run_dir=run_dir)
    (run_dir / "warmup.json").write_text(json.dumps(res.warmup, indent=2) + "\n", encoding="utf-8")
    rows = plots.iteration_rows(res.warmup, res.reports)
    if rows:
        plots.write_csv(rows, run_dir / "iterations.csv")
        plots.plot_iterations(rows, run_dir / "iterations.png")
    last = res.reports[-1] if res.reports else None
    final = {
        "iterations": len(res.reports),
        "dev": last.dev if last else res.warmup.get("dev"),
        "test": last.test if last else res.warmup.get("test"),
    }
    (run_dir / "final.json").write_text(json.dumps(final, indent=2) + "\n", encoding="utf-8")
    return res


def _parse_sweep(specs) -> list[tuple[str, list]]:
    axes = []
    for spec in specs or []:
        key, sep, vals = spec.partition("=")
        if not sep or not vals:
            raise UsageError(f"bad --sweep {spec!r}; expected KEY=v1,v2,...")
        key = key.strip()
        if "." not in key:
            key = f"cotrain.{key}"
        axes.append((key, [yaml.safe_load(v) for v in vals.split(",")]))
    return axes


def cmd_cotrain(args) -> int:
    rc = load_run_config(args.config)
    axes = _parse_sweep(args.sweep)
    if not axes:
        execute_run(rc)
        return EXIT_OK
    base = rc.flat()
    root = Path(rc.data.run_dir)
    rows = []
    for combo in itertools.product(*(vals for _, vals in axes)):
        overrides = dict(zip((k for k, _ in axes), combo))
        label = "_".join(f"{k.split('.', 1)[1]}={v}" for k, v in overrides.items())
        flat = {**base, **overrides, "data.run_dir": str(root / "sweep" / label)}
        point = resolve_config(flat, env={})
        res = execute_run(point)
        last = res.reports[-1].test if res.reports and res.reports[-1].test else res.warmup.get("test") or {}
        rows.append({**{k.split(".", 1)[1]: v for k, v in overrides.items()},
                     "kept_total": sum(r.p_s + r.p_r for r in res.reports),
                     "iterations": len(res.reports),
                     **{m: last.get(m, "") for m in ("bleu2", "rougeL", "em")}})
    plots.write_csv(rows, root / "sweep.csv")
    plots.plot_sweep(rows, [k.split(".", 1)[1] for k, _ in axes], root / "sweep.png")
    return EXIT_OK


# ---------------------------------------------------------- rewrite / simplify

def cmd_generate(args) -> int:
    try:
        model = load_checkpoint(args.checkpoint)
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    sessions = load_sessions(args.input)
    keys, items = [], []
    for s in sessions:
        queries = s.queries
        for m, q in enumerate(queries):
            keys.append((s.id, m))
            items.append((queries[:m], q))
    gens = generate_batch(model, items, args.max_len) if items else []
    write_jsonl(
        ({"session_id": sid, "turn": m, "generated": g.text, "confidence": g.confidence}
         for (sid, m), g in zip(keys, gens)),
        args.output,
    )
    return EXIT_OK


# ------------------------------------------------------------------ evaluate

def cmd_evaluate(args) -> int:
    preds = {}
    for row in read_jsonl(args.predictions):
        preds[(str(row["session_id"]), int(row["turn"]))] = row["generated"]
    gold, known = {}, set()
    for s in load_sessions(args.gold):
        for m, t in enumerate(s.turns):
            known.add((s.id, m))
            if t.rewrite is not None:
                gold[(s.id, m)] = t.rewrite
    missing = sorted(k for k in gold if k not in preds)
    stray = sorted(k for k in preds if k not in known)
    if missing or stray:
        for k in missing:
            print(f"unmatched gold record: session={k[0]} turn={k[1]}", file=sys.stderr)
        for k in stray:
            print(f"unmatched prediction: session={k[0]} turn={k[1]}", file=sys.stderr)
        return EXIT_USAGE
    if not gold:
        print("error: gold file has no rewrites to score", file=sys.stderr)
        return EXIT_USAGE
    keys = list(gold)
    report = evaluate_corpus([(preds[k], gold[k]) for k in keys])
    print(report.to_json())
    if args.out:
        out = Path(args.out)
        rows = [{"session_id": k[0], "turn": k[1], **row} for k, row in zip(keys, report.per_example)]
        plots.write_csv(rows, out / "per_example.csv")
        plots.write_csv([report.to_dict()], out / "metrics.csv")
        plots.plot_metrics(report.scores(), out / "metrics.png", title=f"n={report.n}")
    return EXIT_OK


# --------------------------------------------------------------- synth/adapt

def cmd_synth(args) -> int:
    if args.sessions < 1 or args.turns < 1:
        print("error: --sessions and --turns must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    split = synth_generate(args.sessions, args.turns, args.seed,
                           n_labeled=args.labeled, n_test_sessions=args.test_sessions)
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        save_sessions(split.d_sessions, out / "D.jsonl")
        save_sessions(split.us.sessions, out / "us.jsonl")
        save_sessions(split.ur.sessions, out / "ur.jsonl")
        save_sessions(split.test_sessions, out / "test.jsonl")
        (out / "lexicon.json").write_text(
            json.dumps(SyntheticWorld.default().lexicon(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        print(f"error: cannot write to {out}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_adapt(args) -> int:
    adapt(args.format, args.input, args.output)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="corewrite", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("cotrain", help="run co-training from a config file")
    c.add_argument("config")
    c.add_argument("--sweep", action="append", metavar="KEY=V1,V2",
                   help="grid axis; repeat for a cartesian grid, one run directory per point")
    c.set_defaults(func=cmd_cotrain)

    for name in ("rewrite", "simplify"):
        g = sub.add_parser(name, help=f"{name} every query of a canonical session file")
        g.add_argument("checkpoint")
        g.add_argument("input")
        g.add_argument("output")
        g.add_argument("--max-len", type=int, default=None)
        g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="score predictions against gold rewrites")
    e.add_argument("predictions")
    e.add_argument("gold")
    e.add_argument("--out", help="directory for per-example CSV and a metrics figure")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("synth", help="write a synthetic D / U_S / U_R / test split")
    s.add_argument("out_dir")
    s.add_argument("--sessions", type=int, default=500)
    s.add_argument("--turns", type=int, default=3)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--labeled", type=int, default=32)
    s.add_argument("--test-sessions", type=int, default=150)
    s.set_defaults(func=cmd_synth)

    a = sub.add_parser("adapt", help="convert a source dataset to canonical JSONL")
    a.add_argument("--format", required=True, choices=["canard", "trec_cast", "quac", "marco_sessions"])
    a.add_argument("input")
    a.add_argument("output")
    a.set_defaults(func=cmd_adapt)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ct.ConfigError, UsageError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # runtime failure of any kind maps to exit 1
        log.exception("command failed")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
