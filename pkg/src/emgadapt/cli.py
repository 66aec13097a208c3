"""Command line entry point: ``python -m emgadapt <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

from . import adaptation as ad
from . import datagen, harness
from .metrics import evaluate_testsuite
from .model import CheckpointError, ConfigError, ModelConfig, load_checkpoint, save_checkpoint

log = logging.getLogger("emgadapt")

CONFIG_SECTIONS = ("model", "adaptation", "data", "metrics", "grid", "budget", "pretrain")

# Defaults used when the config file does not override them.
DEFAULT_CONFIG = {
    "model": {},
    "pretrain": {"learning_rate": 2e-3, "epochs": 6, "stride": 100, "batch_size": 64},
    "adaptation": {"learning_rate": 2e-3, "epochs": 30, "stride": 50, "batch_size": 64},
    "data": {"n_healthy": 40, "n_retention": 2, "sets_per_healthy": 4},
    "metrics": {"buffer_s": 1.0, "hop": 10},
    "grid": dict(harness.DEFAULT_GRID),
    "budget": {"budgets": [0, 1, 4, 8, "all"], "repeats": 12},
}


class UsageError(Exception):
    """Configuration problem; exit code 2."""


class DataProblem(Exception):
    """Missing or malformed data; exit code 3."""


def load_config(path):
    cfg = {k: dict(v) for k, v in DEFAULT_CONFIG.items()}
    if not path:
        return cfg
    try:
        with open(path) as f:
            user = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    if not isinstance(user, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(user) - set(CONFIG_SECTIONS)
    if unknown:
        raise UsageError(f"unknown config sections {sorted(unknown)}; expected {list(CONFIG_SECTIONS)}")
    for k, v in user.items():
        if k == "grid":
            cfg[k] = dict(v)
        else:
            cfg[k].update(v)
    return cfg


def _model_config(cfg):
    try:
        return ModelConfig.from_dict(cfg["model"]) if cfg["model"] else ModelConfig()
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad model config: {e}") from e


def _eval_kw(cfg):
    return {"buffer_s": float(cfg["metrics"].get("buffer_s", 1.0)), "hop": cfg["metrics"].get("hop")}


class Run:
    """Results directory: records.jsonl, reports/*.json, checkpoints/*.emgm."""

    def __init__(self, out, seed):
        if out is None:
            out = os.path.join("runs", f"{time.strftime('%Y%m%d-%H%M%S')}-{seed}")
        self.root = out
        for sub in ("reports", "checkpoints"):
            os.makedirs(os.path.join(out, sub), exist_ok=True)

    def report(self, name, payload):
        path = os.path.join(self.root, "reports", f"{name}.json")
        with open(path, "w") as f:
            json.dump(payload, f, indent=1, sort_keys=True)
        return path

    def checkpoint(self, name):
        return os.path.join(self.root, "checkpoints", f"{name}.emgm")

    def record(self, rec, wall):
        rec.wall_time_s = wall
        with open(os.path.join(self.root, "records.jsonl"), "a") as f:
            f.write(json.dumps(rec.to_dict(timing=True), sort_keys=True) + "\n")


def _load_bench(path):
    if not path:
        raise UsageError("--data <benchmark dir> is required")
    if not os.path.exists(os.path.join(path, "manifest.json")):
        raise DataProblem(f"{path} is not a benchmark directory (no manifest.json)")
    return datagen.read_benchmark(path)


def _subject(bench, sid):
    if sid not in bench.stroke:
        raise DataProblem(f"unknown subject {sid!r}; available: {sorted(bench.stroke)}")
    return bench.stroke[sid]


def _healthy(args, required):
    path = getattr(args, "init_checkpoint", None)
    if not path:
        if required:
            raise UsageError(f"variant {args.variant} needs --init-checkpoint <healthy checkpoint>")
        return None
    return load_checkpoint(path)


def _variant(name):
    v = name.replace("-", "_")
    if v not in ad.VARIANTS:
        raise UsageError(f"unknown variant {name!r}; expected one of {', '.join(ad.VARIANTS)}")
    return v


def _hp(cfg, args):
    hp = dict(cfg["adaptation"])
    if getattr(args, "hp", None):
        try:
            with open(args.hp) as f:
                chosen = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read hyperparameters {args.hp}: {e}") from e
        hp.update(chosen.get("best", chosen))
    return hp


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args, cfg):
    d = cfg["data"]
    sev = tuple(d.get("severities", datagen.STROKE_SEVERITIES))
    bench = datagen.build_benchmark(args.seed, int(d["n_healthy"]), int(d["n_retention"]),
                                    int(d["sets_per_healthy"]), sev)
    datagen.write_benchmark(bench, args.out)
    print(datagen.tree_checksum(args.out))


def cmd_pretrain(args, cfg, run):
    bench = _load_bench(args.data)
    hyper, _ = harness.hyper_from(cfg["pretrain"], {"seed": args.seed})
    model, result = harness.pretrain(bench.healthy_recordings(), _model_config(cfg), hyper, args.seed)
    path = run.checkpoint("healthy")
    crc = save_checkpoint(model, path)
    payload = {"loss_trace": result.loss_trace, "epoch_loss": result.epoch_loss, "checkpoint_crc": crc,
               "hyperparameters": cfg["pretrain"]}
    if bench.retention:
        payload["retention"] = evaluate_testsuite(model, bench.retention_recordings(), **_eval_kw(cfg)).to_dict()
    run.report("pretrain", payload)
    return harness.ExperimentRecord("pretrain", "pretrain", cfg["pretrain"], args.seed,
                                    checkpoints=[path], summary={"final_loss": result.loss_trace[-1]})


def cmd_finetune(args, cfg, run):
    variant = _variant(args.variant)
    if variant == "zero_shot":
        raise UsageError("zero-shot is evaluated frozen; use `eval --variant zero-shot`")
    bench = _load_bench(args.data)
    sub = _subject(bench, args.subject)
    healthy = _healthy(args, variant != "scratch")
    hp = _hp(cfg, args)
    model, result = harness.adapt(variant, hp, harness.as_segments(sub.train), healthy, args.seed,
                                  config=_model_config(cfg) if healthy is None else None)
    name = f"{variant}-{args.subject}"
    path = run.checkpoint(name)
    paths = [path]
    if model.lora:
        crc = save_checkpoint(ad.merge_lora(model), path)
        side = os.path.join(run.root, "checkpoints", f"{name}.emga")
        ad.save_adapters(model, side, crc)
        paths.append(side)
    else:
        save_checkpoint(model, path)
    run.report(f"finetune-{name}", {"loss_trace": result.loss_trace, "hyperparameters": hp,
                                    "variant": variant, "subject": args.subject})
    return harness.ExperimentRecord("finetune", variant, hp, args.seed, args.subject, checkpoints=paths)


def cmd_eval(args, cfg, run):
    variant = _variant(args.variant) if args.variant else None
    if variant == "zero_shot" or (variant and not args.checkpoint):
        model = _healthy(args, True)
    elif args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        raise UsageError("eval needs --checkpoint, or --variant zero-shot with --init-checkpoint")
    bench = _load_bench(args.data)
    subjects = [args.subject] if args.subject else sorted(bench.stroke)
    summary = {}
    for sid in subjects:
        suite = evaluate_testsuite(model, _subject(bench, sid).test, **_eval_kw(cfg))
        run.report(f"eval-{variant or 'checkpoint'}-{sid}", suite.to_dict())
        summary[sid] = {"raw": suite.mean_raw, "transition": suite.mean_transition}
        print(f"{sid}: raw {suite.mean_raw:.3f} transition {suite.mean_transition:.3f}")
    return harness.ExperimentRecord("eval", variant or "checkpoint", {}, args.seed, ",".join(subjects),
                                    summary=summary)


def cmd_cv_search(args, cfg, run):
    variant = _variant(args.variant)
    if variant == "zero_shot":
        raise UsageError("zero-shot has no hyperparameters to search")
    bench = _load_bench(args.data)
    sub = _subject(bench, args.subject)
    healthy = _healthy(args, variant != "scratch")
    grid = dict(cfg["grid"])
    if variant == "lora" and "lora_rank" not in grid:
        grid["lora_rank"] = [2, 4, 8]
    try:
        grid = harness.GridSpec(grid)
    except ValueError as e:
        raise UsageError(str(e)) from e
    base = {k: v for k, v in cfg["adaptation"].items() if k not in grid.params}
    base = harness.hyper_from(base)[0].__dict__
    res = harness.cv_select(variant, grid, sub.train, args.seed, healthy, base, _eval_kw(cfg),
                            config=_model_config(cfg) if healthy is None else None)
    run.report(f"cv-{variant}-{args.subject}", {"best": res.best, "best_index": res.best_index,
                                                "table": res.table})
    print(json.dumps(res.best, sort_keys=True))
    return harness.ExperimentRecord("cv-search", variant, res.best, args.seed, args.subject,
                                    summary={"mean_raw": res.table[res.best_index]["mean_raw"]})


def cmd_budget_sweep(args, cfg, run):
    variant = _variant(args.variant)
    bench = _load_bench(args.data)
    sub = _subject(bench, args.subject)
    healthy = _healthy(args, True)
    b = cfg["budget"]
    try:
        plan = harness.BudgetPlan(tuple(b["budgets"]), int(b["repeats"]))
    except ValueError as e:
        raise UsageError(str(e)) from e
    res = harness.budget_sweep(variant, _hp(cfg, args), sub.train, sub.test, plan, args.seed, healthy,
                               eval_kw=_eval_kw(cfg))
    run.report(f"budget-{variant}-{args.subject}", res.to_dict())
    return harness.ExperimentRecord("budget-sweep", variant, _hp(cfg, args), args.seed, args.subject,
                                    summary={str(k): v for k, v in res.means.items()})


def cmd_convergence(args, cfg, run):
    bench = _load_bench(args.data)
    sub = _subject(bench, args.subject)
    healthy = _healthy(args, True)
    if not bench.retention:
        raise DataProblem("benchmark has no healthy retention subjects")
    variants = [_variant(v) for v in args.variants.split(",")]
    res = harness.convergence_run(variants, _hp(cfg, args), sub.train, sub.test, bench.retention_recordings(),
                                  healthy, args.seed, epochs=args.epochs, every=args.every,
                                  eval_kw=_eval_kw(cfg), checkpoint_dir=os.path.join(run.root, "checkpoints"))
    run.report(f"convergence-{args.subject}", res.to_dict())
    return harness.ExperimentRecord("convergence", ",".join(variants), _hp(cfg, args), args.seed, args.subject,
                                    checkpoints=[p for ps in res.checkpoints.values() for p in ps])


def cmd_stream(args, cfg, run):
    from . import stream

    if not args.checkpoint:
        raise UsageError("stream needs --checkpoint")
    model = load_checkpoint(args.checkpoint)
    scfg = stream.StreamConfig(window_len=model.config.window_len, hop=int(cfg["metrics"].get("hop") or 10),
                               realtime_factor=args.realtime, smoothing=args.smoothing)
    if args.input.startswith("tcp:"):
        source = stream.socket_source(int(args.input[4:]), model.config.channels)
        print(f"listening on port {source.port}", flush=True)
    else:
        if not os.path.exists(args.input):
            raise DataProblem(f"no such recording {args.input}")
        source = stream.replay_source(datagen.read_recording(args.input), args.realtime)
    rep = stream.run_stream(model, scfg, source)
    report = args.report or os.path.join(run.root, "reports", "stream.json")
    commands = os.path.splitext(report)[0] + "-commands.npy"
    stream.write_report(rep, report, commands)
    print(f"p50 {rep.latency_p50_us:.0f} us, p99 {rep.latency_p99_us:.0f} us, drops {rep.drops}")
    return harness.ExperimentRecord("stream", "stream", {"realtime": args.realtime}, args.seed,
                                    summary=rep.to_dict(commands))


COMMANDS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "eval": cmd_eval,
    "cv-search": cmd_cv_search, "budget-sweep": cmd_budget_sweep, "convergence": cmd_convergence,
    "stream": cmd_stream,
}


def build_parser():
    p = argparse.ArgumentParser(prog="emgadapt", description="Healthy-to-stroke EMG intent adaptation")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--seed", type=int, default=42)
        sp.add_argument("--config", help="JSON config with sections " + ", ".join(CONFIG_SECTIONS))
        sp.add_argument("--out", help="output directory")
        return sp

    add("gen-data", "write the synthetic benchmark tree")
    sp = add("pretrain", "pretrain the healthy model")
    sp.add_argument("--data")
    for name, help_text in (("finetune", "adapt to one stroke subject"),
                            ("cv-search", "4-fold grid search for one variant"),
                            ("budget-sweep", "data-budget sweep"),
                            ("eval", "score a checkpoint on stroke test sets")):
        sp = add(name, help_text)
        sp.add_argument("--data")
        sp.add_argument("--subject", default=None if name == "eval" else "S2")
        sp.add_argument("--variant", default=None if name == "eval" else "full")
        sp.add_argument("--init-checkpoint")
        if name == "eval":
            sp.add_argument("--checkpoint")
        else:
            sp.add_argument("--hp", help="JSON file with chosen hyperparameters (a cv-search report works)")
    sp = add("convergence", "long training with periodic checkpoints")
    sp.add_argument("--data")
    sp.add_argument("--subject", default="S2")
    sp.add_argument("--variants", default="scratch,head_only,lora,full")
    sp.add_argument("--init-checkpoint")
    sp.add_argument("--hp")
    sp.add_argument("--epochs", type=int, default=100)
    sp.add_argument("--every", type=int, default=5)
    sp = add("stream", "run streaming inference")
    sp.add_argument("--checkpoint")
    sp.add_argument("--input", required=True, help="recording file or tcp:PORT")
    sp.add_argument("--realtime", type=float, default=1.0)
    sp.add_argument("--smoothing", type=int, default=3,
                    help="majority over the last m commands; 1 disables smoothing")
    sp.add_argument("--report")
    return p


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "gen-data":
            if not args.out:
                raise UsageError("gen-data needs --out <dir>")
            cmd_gen_data(args, cfg)
            return 0
        run = Run(args.out, args.seed)
        t0 = time.perf_counter()
        rec = COMMANDS[args.command](args, cfg, run)
        run.record(rec, time.perf_counter() - t0)
        return 0
    except (UsageError, ConfigError, ad.UnsupportedOperation) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DataProblem, harness.DataError, datagen.FormatError, CheckpointError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def run_cli(argv=None):
    try:
        return main(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
