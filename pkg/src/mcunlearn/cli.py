"""Command-line driver: gen, train, unlearn, retrain, eval, bench.

Every command reads the run config, works inside one directory (the config's
``paths.workdir`` or ``--out``) and writes its outputs atomically::

    train.csv, test.csv          datasets (test.csv for classifiers only)
    original_{m}.mcus            posterior samples on the full training set
    processed_{m}.mcus           after influence unlearning
    importance_{m}.mcus          after the importance-sampling baseline
    retrained_{m}.mcus           retrained on the remaining data
    timing_{strategy}.txt        wall-clock seconds per seed pair
    report.txt, report.csv       evaluation reports
    bench.csv                    per-request timing table

``m`` runs over the ``eval.pairs`` seed pairs; pair ``m`` uses chain seed
``seed + m`` for both its original and retrained chains.

Exit codes: 0 ok, 2 config error, 3 file error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ConfigError, RunConfig
from .datasets import (
    FormatError,
    _atomic_write,
    gen_classification,
    gen_clusters,
    load_dataset,
    load_samples,
    save_dataset,
    save_samples,
    select_from_class,
    train_test_split,
)
from .evaluation import (
    EvalReport,
    classification_error,
    knowledge_removal_estimator,
    mia_accuracy,
    mia_threshold,
    prediction_difference,
    reports_to_csv,
    timed,
)
from .models import GaussianMeanModel, GmmModel, MlpClassifier
from .samplers import continue_chain, derive_seed, run_chain
from .unlearn import UnlearnPlan, importance_unlearn_batches, unlearn_batches

log = logging.getLogger("mcunlearn")

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 2, 3, 4
_U64 = 2**64
_IMPORTANCE_STREAM = 7


class Run:
    """A config bound to its working directory."""

    def __init__(self, config: RunConfig, workdir=None):
        self.config = config
        self.dir = Path(workdir if workdir is not None else config.paths.workdir)

    def path(self, name) -> Path:
        return self.dir / name

    def samples_path(self, kind, m) -> Path:
        return self.path(f"{kind}_{m}.mcus")

    def pair_seed(self, m) -> int:
        return (self.config.seed + m) % _U64

    @property
    def pairs(self):
        return range(self.config.eval.pairs)

    def train_data(self):
        return load_dataset(self.path("train.csv"))

    def test_data(self):
        return load_dataset(self.path("test.csv"))

    def model(self, data=None):
        m = self.config.model
        if m.kind == "gaussian":
            return GaussianMeanModel(m.dim, m.prior_std, m.lik_std)
        if m.kind == "gmm":
            return GmmModel(m.components, m.dim, m.prior_std)
        return MlpClassifier((m.dim, *m.hidden, m.classes), m.prior_std)

    def removal_ids(self, data):
        u = self.config.unlearn
        if data.labels is None:
            raise ConfigError("removal by label needs a labeled dataset")
        seed = self.config.seed if u.shuffle_seed is None else u.shuffle_seed
        picks = [select_from_class(data, lab, u.remove_per_label, seed) for lab in u.remove_labels]
        return np.concatenate(picks) if picks else np.zeros(0, dtype=np.int64)

    def plan(self, data):
        u = self.config.unlearn
        return UnlearnPlan(self.removal_ids(data), u.batch_size, self.config.influence_config())

    def sampler(self, data):
        return self.config.sampler_config(data.n_remaining)

    def load(self, kind, m, model):
        samples = load_samples(self.samples_path(kind, m), model.model_id)
        # the file keeps only seed and payload; restore the schedule position
        return dataclasses.replace(samples, iters_run=self.config.sampler.total_iters)

    def write_timing(self, strategy, seconds):
        text = "".join(f"{m} {s:.6f}\n" for m, s in zip(self.pairs, seconds))
        _atomic_write(self.path(f"timing_{strategy}.txt"), text.encode())

    def read_timing(self, strategy):
        path = self.path(f"timing_{strategy}.txt")
        if not path.exists():
            return None
        values = [float(line.split()[1]) for line in path.read_text().splitlines() if line.strip()]
        return float(np.mean(values)) if values else None


def cmd_gen(run: Run):
    c = run.config
    run.dir.mkdir(parents=True, exist_ok=True)
    if c.model.kind == "mlp":
        full = gen_classification(c.model.classes, c.data.n, c.model.dim, c.data.separation, c.seed)
        train, test = train_test_split(full, c.data.test_fraction, c.seed)
        save_dataset(run.path("train.csv"), train)
        save_dataset(run.path("test.csv"), test)
        return
    K = 1 if c.model.kind == "gaussian" else c.model.components
    data, _ = gen_clusters(K, c.data.n, c.model.dim, c.data.cluster_std, c.seed)
    save_dataset(run.path("train.csv"), data)


def cmd_train(run: Run):
    data = run.train_data()
    model, cfg = run.model(), run.sampler(data)
    for m in run.pairs:
        save_samples(run.samples_path("original", m), run_chain(model, data, cfg, run.pair_seed(m)))


def cmd_retrain(run: Run):
    data = run.train_data()
    model = run.model()
    remaining = data.mark_removed(run.removal_ids(data))
    cfg = run.sampler(data)
    seconds = []
    for m in run.pairs:
        samples, t = timed(run_chain, model, remaining, cfg, run.pair_seed(m))
        save_samples(run.samples_path("retrained", m), samples)
        seconds.append(t)
    run.write_timing("retrain", seconds)


def cmd_unlearn(run: Run, strategy=None):
    strategy = strategy or run.config.unlearn.strategy
    if strategy == "retrain":
        return cmd_retrain(run)
    data = run.train_data()
    model, plan = run.model(), run.plan(data)
    cfg = run.sampler(data)
    seconds = []
    for m in run.pairs:
        original = run.load("original", m, model)
        if strategy == "influence":
            (samples, _), t = timed(unlearn_batches, model, original, data, plan)
            name = "processed"
        else:
            seed = derive_seed(run.pair_seed(m), _IMPORTANCE_STREAM)
            (samples, _), t = timed(
                importance_unlearn_batches, model, original, data, plan, cfg,
                run.config.unlearn.extra_iters, seed,
            )
            name = "importance"
        save_samples(run.samples_path(name, m), samples)
        seconds.append(t)
    run.write_timing(strategy, seconds)


def _method_report(run, model, method, sets, retrained, data, removed_ids, test, timing):
    c = run.config
    report = EvalReport(method)
    if method != "retrained":
        report.eps_hat = knowledge_removal_estimator(sets, retrained, c.eval.k)
        report.unlearn_seconds = timing
    report.retrain_seconds = run.read_timing("retrain")
    if not getattr(model, "is_classifier", False):
        return report
    remaining = data.mark_removed(removed_ids).arrays()
    removed = data.arrays(removed_ids)
    test_xy = test.arrays()
    report.err_remaining = float(np.mean([classification_error(model, s, *remaining) for s in sets]))
    report.err_removed = float(np.mean([classification_error(model, s, *removed) for s in sets]))
    report.err_test = float(np.mean([classification_error(model, s, *test_xy) for s in sets]))
    report.mia_acc = float(np.mean([
        mia_accuracy(model, s, mia_threshold(model, s, remaining, test_xy), removed) for s in sets
    ]))
    for field, (x, _) in (("pred_diff_remaining", remaining), ("pred_diff_removed", removed),
                          ("pred_diff_test", test_xy)):
        gaps = [prediction_difference(model, s, r, x) for s, r in zip(sets, retrained)]
        setattr(report, field, float(np.mean(gaps)))
    return report


def cmd_eval(run: Run):
    data = run.train_data()
    model = run.model()
    test = run.test_data() if model.is_classifier else None
    removed_ids = run.removal_ids(data)
    retrained = [run.load("retrained", m, model) for m in run.pairs]
    reports = []
    for method, kind, strategy in (("original", "original", None),
                                   ("processed", "processed", "influence"),
                                   ("importance", "importance", "importance"),
                                   ("retrained", "retrained", None)):
        if not run.samples_path(kind, 0).exists():
            continue
        sets = retrained if kind == "retrained" else [run.load(kind, m, model) for m in run.pairs]
        timing = run.read_timing(strategy) if strategy else None
        reports.append(_method_report(run, model, method, sets, retrained, data, removed_ids,
                                      test, timing))
    _atomic_write(run.path("report.txt"), "\n".join(r.to_text() for r in reports).encode())
    _atomic_write(run.path("report.csv"), reports_to_csv(reports).encode())
    return reports


def _bench_pair(run: Run, m):
    data = run.train_data()
    model, plan = run.model(), run.plan(data)
    cfg = run.sampler(data)
    requests = plan.batches()[: run.config.eval.bench_requests]
    processed = importance = run.load("original", m, model)
    current = data
    rows = []
    for r, batch in enumerate(requests):
        single = dataclasses.replace(plan, removal_ids=batch)
        (processed, after), t_unlearn = timed(unlearn_batches, model, processed, current, single)
        seed = derive_seed(derive_seed(run.pair_seed(m), _IMPORTANCE_STREAM), r)
        importance, t_importance = timed(
            continue_chain, model, after, cfg, importance, run.config.unlearn.extra_iters, seed
        )
        _, t_retrain = timed(run_chain, model, after, cfg, run.pair_seed(m))
        rows += [(m, r, "influence", t_unlearn), (m, r, "importance", t_importance),
                 (m, r, "retrain", t_retrain)]
        current = after
    return rows


def cmd_bench(run: Run):
    threads = max(1, int(os.environ.get("MCU_THREADS", "1")))
    with ThreadPoolExecutor(max_workers=min(threads, len(run.pairs))) as pool:
        per_pair = list(pool.map(lambda m: _bench_pair(run, m), run.pairs))
    rows = [row for pair_rows in per_pair for row in pair_rows]
    lines = ["pair,request,method,seconds"] + [f"{m},{r},{k},{t:.6f}" for m, r, k, t in rows]
    _atomic_write(run.path("bench.csv"), ("\n".join(lines) + "\n").encode())
    means = {k: float(np.mean([t for _, _, kk, t in rows if kk == k])) for k in
             ("influence", "importance", "retrain")}
    return means


def _build_parser():
    p = argparse.ArgumentParser(prog="mcunlearn", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=["gen", "train", "unlearn", "retrain", "eval", "bench"])
    p.add_argument("--config", help="config file (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="working directory, overrides paths.workdir")
    p.add_argument("--strategy", choices=["influence", "importance", "retrain"])
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load_run(args) -> Run:
    config = cfgmod.load(args.config) if args.config else RunConfig().validate()
    if args.seed is not None:
        if not 0 <= args.seed < _U64:
            raise ConfigError("--seed must be a u64")
        config = dataclasses.replace(config, seed=args.seed)
    if args.strategy is not None:
        config = dataclasses.replace(
            config, unlearn=dataclasses.replace(config.unlearn, strategy=args.strategy)
        )
    return Run(config, args.out)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        run = load_run(args)
        if args.command == "unlearn":
            cmd_unlearn(run)
        elif args.command == "eval":
            for r in cmd_eval(run):
                print(r.to_csv_row())
        elif args.command == "bench":
            means = cmd_bench(run)
            for k, v in means.items():
                print(f"{k} {v:.6f}")
            print(f"influence/retrain {means['influence'] / means['retrain']:.6f}")
        else:
            globals()[f"cmd_{args.command}"](run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
