"""Experiment procedures: healthy pretraining, cross-validated grid search,
final retrain and test evaluation, data-budget sweeps and long convergence
runs with healthy-retention tracking.

Every procedure is a pure function of its inputs and seed. Independent jobs
(grid configurations, folds, budget repeats) may run on a thread pool capped
by ``EMGADAPT_THREADS``; results are merged in enumeration order so the
output does not depend on scheduling.
"""
from __future__ import annotations

import itertools
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import adaptation as ad
from .datagen import CUE_CLASS, _seed
from .metrics import evaluate_testsuite, summarize
from .model import Model, ModelConfig, NormStats, init_params, save_checkpoint

log = logging.getLogger(__name__)

# grid key -> TrainHyper / AdaptationSpec field
GRID_KEYS = {
    "learning_rate": "lr",
    "weight_decay": "weight_decay",
    "epochs": "epochs",
    "lambda_recon": "lambda_recon",
    "lora_rank": "lora_rank",
    "batch_size": "batch_size",
    "stride": "stride",
}

DEFAULT_GRID = {
    "learning_rate": [3e-4, 1e-3, 3e-3],
    "weight_decay": [0.0, 1e-4],
    "epochs": [10, 30],
}


class DataError(ValueError):
    pass


def n_jobs():
    try:
        return max(1, int(os.environ.get("EMGADAPT_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn, items):
    items = list(items)
    workers = min(n_jobs(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- grids and budgets

@dataclass
class GridSpec:
    params: dict

    def __post_init__(self):
        if not self.params or any(len(v) == 0 for v in self.params.values()):
            raise ValueError("grid must name at least one hyperparameter and every list must be nonempty")
        unknown = set(self.params) - set(GRID_KEYS)
        if unknown:
            raise ValueError(f"unknown grid keys {sorted(unknown)}; known: {sorted(GRID_KEYS)}")

    def configs(self):
        """Every configuration, last key varying fastest."""
        keys = list(self.params)
        return [dict(zip(keys, vals)) for vals in itertools.product(*(self.params[k] for k in keys))]

    @classmethod
    def default(cls, variant):
        grid = dict(DEFAULT_GRID)
        if variant == "lora":
            grid["lora_rank"] = [2, 4, 8]
        return cls(grid)


ALL = "all"


@dataclass
class BudgetPlan:
    budgets: tuple = (0, 1, 4, 8, ALL)
    repeats: int = 12
    pool_size: int = 12

    def __post_init__(self):
        for n in self.budgets:
            if n != ALL and not 0 <= int(n) <= self.pool_size:
                raise ValueError(f"budget {n} outside [0, {self.pool_size}]")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")

    def draws(self, n, seed):
        """Pair indices for each repeat at budget ``n``.

        Repeats walk a seeded permutation of the pool in consecutive blocks,
        reshuffling when it runs out, so no index repeats within a draw and
        at ``n = 1`` the first ``pool_size`` repeats use every pair once.
        """
        if n == ALL:
            return [list(range(self.pool_size))]
        n = int(n)
        if n == 0:
            return [[]]
        rng = np.random.default_rng(_seed(seed, "budget", n))
        out, perm, pos = [], rng.permutation(self.pool_size), 0
        for _ in range(self.repeats):
            if pos + n > self.pool_size:
                perm, pos = rng.permutation(self.pool_size), 0
            out.append(sorted(int(i) for i in perm[pos:pos + n]))
            pos += n
        return out


def hyper_from(hp, base=None):
    """Split a flat hyperparameter dict into ``(TrainHyper, lora_rank or None)``."""
    fields = dict(base or {})
    rank = None
    for k, v in hp.items():
        key = GRID_KEYS.get(k, k)
        if key == "lora_rank":
            rank = int(v)
        else:
            fields[key] = v
    return ad.TrainHyper.from_dict(fields), rank


# ---------------------------------------------------------------- records

@dataclass
class ExperimentRecord:
    kind: str
    variant: str
    hyperparameters: dict
    seed: int
    subject: str = ""
    identifiers: dict = field(default_factory=dict)
    reports: list = field(default_factory=list)       # MetricsReport dicts
    summary: dict = field(default_factory=dict)
    checkpoints: list = field(default_factory=list)
    wall_time_s: float = 0.0

    def to_dict(self, timing=False):
        d = asdict(self)
        if not timing:
            d.pop("wall_time_s")
        return d


# ---------------------------------------------------------------- data shaping

def as_segments(recordings):
    return [(r.samples, r.labels) for r in recordings]


def make_pairs(recording):
    """Split one standard set into 3 (open attempt, close attempt) pairs.

    Each attempt keeps half of the relax segment before and after it, so a
    pair is two ``(samples, labels)`` chunks.
    """
    labels = recording.labels
    change = np.nonzero(np.diff(labels))[0] + 1
    bounds = np.concatenate([[0], change, [len(labels)]])
    segs = [(int(labels[a]), int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
    chunks = {CUE_CLASS["O"]: [], CUE_CLASS["C"]: []}
    for i, (k, a, b) in enumerate(segs):
        if k == 0:
            continue
        if i == 0 or i == len(segs) - 1 or segs[i - 1][0] != 0 or segs[i + 1][0] != 0:
            raise DataError("every attempt must be bracketed by relax segments")
        pa, pb = segs[i - 1][1:], segs[i + 1][1:]
        lo = a - (pa[1] - pa[0]) // 2
        hi = b + (pb[1] - pb[0]) // 2
        chunks[k].append((recording.samples[lo:hi], labels[lo:hi]))
    opens, closes = chunks[CUE_CLASS["O"]], chunks[CUE_CLASS["C"]]
    if len(opens) != len(closes):
        raise DataError(f"{len(opens)} open attempts but {len(closes)} close attempts")
    return [(o, c) for o, c in zip(opens, closes)]


def pair_pool(train_sets):
    return [p for rec in train_sets for p in make_pairs(rec)]


# ---------------------------------------------------------------- procedures

def pretrain(recordings, config=None, hyper=None, seed=0, on_epoch=None):
    """Masked-modeling pretraining of a fresh model on healthy recordings."""
    config = config or ModelConfig()
    hyper = hyper or ad.TrainHyper(lr=2e-3, epochs=3, stride=100, seed=seed)
    norm = NormStats.fit([r.samples for r in recordings])
    model = Model(init_params(config, seed), config, norm)
    mask = {n: True for n in model.params}
    windows = ad.segment_windows(as_segments(recordings), norm, config.window_len, hyper.stride)
    log.info("pretraining on %d windows", len(windows[0]))
    result = ad.train(model, mask, windows, hyper, on_epoch=on_epoch)
    return model, result


def adapt(variant, hp, segments, healthy=None, seed=0, base=None, on_epoch=None, config=None):
    """Build ``variant`` from ``healthy`` and fine-tune it on ``segments``."""
    hyper, rank = hyper_from(hp, dict(base or {}, seed=seed))
    spec = ad.AdaptationSpec(variant, lora_rank=rank or 4, seed=seed)
    model, mask = ad.build_variant(spec, healthy, config=config)
    result = None
    if spec.variant != "zero_shot" and segments:
        result = ad.finetune(model, mask, segments, hyper, variant=spec.variant, on_epoch=on_epoch)
    return model, result


@dataclass
class CVResult:
    best: dict
    best_index: int
    table: list     # one row per configuration: {config, folds: [{fold, raw, transition}], mean_raw}


def cv_select(variant, grid, train_sets, seed=0, healthy=None, base=None, eval_kw=None, config=None):
    """4-fold cross-validated grid search; selects by mean validation raw accuracy."""
    if len(train_sets) != 4:
        raise DataError(f"cross-validation needs exactly 4 training sets, got {len(train_sets)}")
    if not isinstance(grid, GridSpec):
        grid = GridSpec(grid)
    configs = grid.configs()
    jobs = [(ci, k) for ci in range(len(configs)) for k in range(4)]

    def run(job):
        ci, k = job
        fit = [r for j, r in enumerate(train_sets) if j != k]
        model, _ = adapt(variant, configs[ci], as_segments(fit), healthy, seed, base, config=config)
        s = evaluate_testsuite(model, [train_sets[k]], **(eval_kw or {}))
        return {"fold": k, "raw": s.mean_raw, "transition": s.mean_transition}

    results = _map(run, jobs)
    table = []
    for ci, cfg in enumerate(configs):
        folds = results[4 * ci:4 * ci + 4]
        table.append({"config": cfg, "folds": folds, "mean_raw": float(np.mean([f["raw"] for f in folds]))})
    scores = [row["mean_raw"] for row in table]
    best = int(np.argmax(scores))     # first maximum wins ties
    return CVResult(dict(configs[best]), best, table)


@dataclass
class FinalResult:
    variant: str
    hyperparameters: dict
    reports: list          # MetricsReport per test set
    mean_raw: float
    mean_transition: float
    model: Model = None

    def summary_row(self):
        row = {"variant": self.variant, "raw": self.mean_raw, "transition": self.mean_transition}
        for r in self.reports:
            row[r.set_kind] = {"raw": r.raw_accuracy, "transition": r.transition_accuracy}
        return row


def final_train_eval(variant, hp, train_sets, test_sets, seed=0, healthy=None, base=None, eval_kw=None,
                     config=None):
    """Retrain once on every training set and score the held-out test sets."""
    if not test_sets:
        raise DataError("no test sets supplied")
    segments = as_segments(train_sets) if variant.replace("-", "_") != "zero_shot" else []
    model, _ = adapt(variant, hp, segments, healthy, seed, base, config=config)
    s = evaluate_testsuite(model, test_sets, **(eval_kw or {}))
    return FinalResult(variant.replace("-", "_"), dict(hp), s.reports, s.mean_raw, s.mean_transition, model)


def summary_table(results):
    """Rows of subject -> variant -> (raw, transition) plus the across-subject average."""
    variants = []
    for per in results.values():
        for v in per:
            if v not in variants:
                variants.append(v)
    table = {sid: {v: {"raw": r.mean_raw, "transition": r.mean_transition} for v, r in per.items()}
             for sid, per in results.items()}
    table["average"] = {
        v: {k: float(np.mean([results[s][v].__getattribute__("mean_" + k) for s in results if v in results[s]]))
            for k in ("raw", "transition")}
        for v in variants
    }
    return table


@dataclass
class BudgetResult:
    budgets: list
    rows: dict          # budget -> list of {pairs, raw, transition}
    means: dict         # budget -> mean transition accuracy

    def to_dict(self):
        return {"budgets": [str(b) for b in self.budgets],
                "rows": {str(b): v for b, v in self.rows.items()},
                "mean_transition": {str(b): v for b, v in self.means.items()}}


def budget_sweep(variant, hp, train_sets, test_sets, plan=None, seed=0, healthy=None, base=None,
                 eval_kw=None, config=None):
    """Fine-tune on N sampled pairs for each budget N and repeat."""
    plan = plan or BudgetPlan()
    pool = pair_pool(train_sets)
    if len(pool) != plan.pool_size:
        raise DataError(f"training data gives {len(pool)} pairs, plan expects {plan.pool_size}")
    jobs = [(b, draw) for b in plan.budgets for draw in plan.draws(b, seed)]

    def run(job):
        b, draw = job
        if b == ALL:
            model, _ = adapt(variant, hp, as_segments(train_sets), healthy, seed, base, config=config)
        else:
            segs = [chunk for i in draw for chunk in pool[i]]
            model, _ = adapt(variant if segs else "zero_shot", hp, segs, healthy, seed, base, config=config)
        s = evaluate_testsuite(model, test_sets, **(eval_kw or {}))
        return {"pairs": list(draw), "raw": s.mean_raw, "transition": s.mean_transition}

    results = _map(run, jobs)
    rows = {}
    for (b, _), res in zip(jobs, results):
        rows.setdefault(b, []).append(res)
    means = {b: float(np.mean([r["transition"] for r in rows[b]])) for b in plan.budgets}
    return BudgetResult(list(plan.budgets), rows, means)


@dataclass
class ConvergenceResult:
    every: int
    curves: dict            # variant -> [{epoch, stroke_raw, stroke_transition, retention_transition, ...}]
    stroke_zero_shot: float
    healthy_zero_shot: float
    checkpoints: dict = field(default_factory=dict)

    def to_dict(self):
        return {"every": self.every, "curves": self.curves,
                "reference": {"stroke_zero_shot": self.stroke_zero_shot,
                              "healthy_zero_shot": self.healthy_zero_shot},
                "checkpoints": self.checkpoints}


def convergence_run(variants, hp, train_sets, stroke_tests, retention_sets, healthy, seed=0, epochs=100,
                    every=5, base=None, eval_kw=None, checkpoint_dir=None, config=None):
    """Long training with a checkpoint every ``every`` epochs, each scored on
    the stroke tests and the healthy retention sets.

    ``hp`` maps variant -> hyperparameters (or is one dict for all); the
    epoch count is overridden by ``epochs``.
    """
    if not retention_sets:
        raise DataError("convergence tracking needs healthy retention sets")
    zs_stroke = evaluate_testsuite(healthy, stroke_tests, **(eval_kw or {})).mean_transition
    zs_healthy = evaluate_testsuite(healthy, retention_sets, **(eval_kw or {})).mean_transition
    curves, ckpts = {}, {}
    per_variant = bool(hp) and all(k in ad.VARIANTS for k in hp)

    def run(variant):
        v_hp = dict(hp.get(variant, {}) if per_variant else hp, epochs=epochs)
        rows, paths = [], []

        def on_epoch(epoch, model):
            if epoch % every:
                return
            s = evaluate_testsuite(model, stroke_tests, **(eval_kw or {}))
            r = evaluate_testsuite(model, retention_sets, **(eval_kw or {}))
            rows.append({"epoch": epoch, "stroke_raw": s.mean_raw, "stroke_transition": s.mean_transition,
                         "retention_raw": r.mean_raw, "retention_transition": r.mean_transition})
            if checkpoint_dir:
                path = os.path.join(checkpoint_dir, f"{variant}-e{epoch:03d}.emgm")
                save_checkpoint(ad.merge_lora(model) if model.lora else model, path)
                paths.append(path)

        adapt(variant, v_hp, as_segments(train_sets), healthy, seed, base, on_epoch=on_epoch, config=config)
        return rows, paths

    for variant, (rows, paths) in zip(variants, _map(run, variants)):
        curves[variant] = rows
        ckpts[variant] = paths
    return ConvergenceResult(every, curves, zs_stroke, zs_healthy, ckpts)


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0


def suite_dict(reports):
    return summarize(reports).to_dict()
