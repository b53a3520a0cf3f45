"""Experiment drivers, metrics persistence, and report generation.

Each driver runs a seeded protocol (leave-one-out, forgetting, multi-target,
batch-size sweep, input/layer ablations, layer-distance, timing) over the
synthetic rotated-glyph domains and returns an ExperimentReport whose
aggregates are pure functions of the persisted per-record rows. Plots are
best-effort: a plotting failure never fails the experiment.
"""

from __future__ import annotations

import csv
import json
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .backbone import ParamSet
from .io import config_hash
from .metatrain import TrainConfig, TrainResult, train
from .paramgen import GeneratorSpec
from .synthdata import DomainDataset, make_category_shift_split, make_rotated_domains, stream
from .ttg import STRATEGY_NAMES, RunMetrics, make_strategy, run_stream

DEFAULT_ANGLES = (0.0, 30.0, 60.0, 90.0)
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
DEFAULT_BATCH = 20
DEFAULT_N_PER_DOMAIN = 150
DEFAULT_N_ITER = 400

INPUT_VARIANTS = {
    "feat+grad": {"use_param_tokens": False},
    "grad+param": {"use_feature_token": False},
    "feat+param": {"use_grad_tokens": False},
    "all": {},
}

LAYER_VARIANTS = {
    "bn_only": {"gen_classifier": False},
    "classifier_only": {"gen_bn": False},
    "both": {},
}


# ---------------------------------------------------------------------------
# report plumbing


@dataclass
class ExperimentReport:
    name: str
    config_hash: str
    seeds: list[int]
    records: list[dict]
    summary: dict[str, float]
    artifacts: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "config_hash": self.config_hash,
            "seeds": list(self.seeds),
            "summary": dict(self.summary),
            "artifacts": list(self.artifacts),
        }

    def save(self, out_dir: str | Path) -> list[str]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jsonl = out / "metrics.jsonl"
        write_jsonl(jsonl, self.records)
        summary_csv = out / "summary.csv"
        with open(summary_csv, "w", newline="") as f:
            writer = csv.writer(f)
            keys = sorted(self.summary)
            writer.writerow(keys)
            writer.writerow([self.summary[k] for k in keys])
        manifest = out / "manifest.json"
        manifest.write_text(json.dumps(self.to_dict(), indent=2))
        self.artifacts.extend(str(p) for p in (jsonl, summary_csv, manifest))
        return self.artifacts


def write_jsonl(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def mean_std(values: list[float]) -> tuple[float, float]:
    if not values:
        return 0.0, 0.0
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, std


def summarize(records: list[dict], group_keys: list[str], value_key: str = "accuracy") -> dict[str, float]:
    """Mean/std of value_key per combination of group_keys; recomputable from records."""
    groups: dict[str, list[float]] = {}
    for r in records:
        if value_key not in r:
            continue
        label = "/".join(str(r[k]) for k in group_keys)
        groups.setdefault(label, []).append(float(r[value_key]))
    out: dict[str, float] = {}
    for label, vals in groups.items():
        mean, std = mean_std(vals)
        out[f"{label}/mean_{value_key}"] = mean
        out[f"{label}/std_{value_key}"] = std
    return out


def max_workers() -> int:
    """Worker-process cap from TTG_THREADS; defaults to sequential execution."""
    raw = os.environ.get("TTG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"TTG_THREADS must be an integer, got {raw!r}") from None
    return max(n, 1)


def _run_cells(fn, arg_tuples: list[tuple]) -> list[list[dict]]:
    """Run independent experiment cells, in parallel processes when allowed.

    Each cell is internally sequential and fully seeded, so execution order
    never changes the results.
    """
    workers = max_workers()
    if workers == 1 or len(arg_tuples) <= 1:
        return [fn(*args) for args in arg_tuples]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *args) for args in arg_tuples]
        return [f.result() for f in futures]


def _plot(out_dir: str | Path | None, filename: str, draw) -> str | None:
    """Emit one SVG via `draw(ax)`; plotting failures never fail a run."""
    if out_dir is None:
        return None
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        report_dir = Path(out_dir) / "report"
        report_dir.mkdir(parents=True, exist_ok=True)
        fig, ax = plt.subplots(figsize=(6, 4))
        draw(ax)
        fig.tight_layout()
        path = report_dir / filename
        fig.savefig(path)
        plt.close(fig)
        return str(path)
    except Exception:
        return None


def _bar_by_group(records: list[dict], group_key: str, value_key: str = "accuracy"):
    groups: dict[str, list[float]] = {}
    for r in records:
        if value_key in r:
            groups.setdefault(str(r[group_key]), []).append(float(r[value_key]))

    def draw(ax):
        labels = sorted(groups)
        means = [statistics.fmean(groups[l]) for l in labels]
        ax.bar(labels, means)
        ax.set_ylabel(f"mean {value_key}")
        ax.tick_params(axis="x", rotation=30)

    return draw


def _sweep_lines(records: list[dict]):
    def draw(ax):
        strategies = sorted({r["strategy"] for r in records})
        for strat in strategies:
            pts: dict[int, list[float]] = {}
            for r in records:
                if r["strategy"] == strat:
                    pts.setdefault(r["batch_size"], []).append(r["accuracy"])
            xs = sorted(pts)
            ax.plot(xs, [statistics.fmean(pts[x]) for x in xs], marker="o", label=strat)
        ax.set_xlabel("batch size")
        ax.set_ylabel("mean accuracy")
        ax.legend()

    return draw


def _plots_for(name: str, records: list[dict]) -> list[tuple[str, object]]:
    """Plot specs per experiment, derivable from the persisted records alone."""
    if name == "batch_sweep":
        return [("batch_sweep.svg", _sweep_lines(records))]
    if name == "multi_target":
        return [("multi_target.svg", _bar_by_group(records, "mode"))]
    if name in ("input_ablation", "layer_ablation"):
        return [(f"{name}.svg", _bar_by_group(records, "variant"))]
    if name == "layer_distance":
        return [("layer_distance.svg", _bar_by_group(records, "slot", "distance"))]
    if name == "timing":
        return [("timing.svg", _bar_by_group(records, "strategy", "adapt_ms"))]
    return [(f"{name}.svg", _bar_by_group(records, "strategy"))]


def regenerate_report(out_dir: str | Path) -> list[str]:
    """Rebuild report/*.svg from the stored metrics.jsonl, without re-running."""
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    records = read_jsonl(out / "metrics.jsonl")
    paths = []
    for filename, draw in _plots_for(manifest["name"], records):
        path = _plot(out, filename, draw)
        if path:
            paths.append(path)
    return paths


def _finish(
    name: str,
    cfg: dict,
    seeds,
    records: list[dict],
    summary: dict[str, float],
    out_dir: str | Path | None,
) -> ExperimentReport:
    report = ExperimentReport(
        name=name,
        config_hash=config_hash(cfg),
        seeds=list(seeds),
        records=records,
        summary=summary,
    )
    if out_dir is not None:
        report.save(out_dir)
        for filename, draw in _plots_for(name, records):
            path = _plot(out_dir, filename, draw)
            if path:
                report.artifacts.append(path)
    return report


# ---------------------------------------------------------------------------
# shared evaluation helpers


def _train_config(seed: int, n_iter: int, grad_loss: str, gen_overrides: dict | None = None) -> TrainConfig:
    spec = GeneratorSpec(**(gen_overrides or {}))
    return TrainConfig(n_iter=n_iter, seed=seed, grad_loss=grad_loss, generator=spec)


def _strategy_accuracy(
    name: str,
    result: TrainResult,
    datasets: list[DomainDataset],
    batch_size: int,
    seed: int,
    order_policy: str = "single_domain",
) -> RunMetrics:
    st = stream(datasets, batch_size, order_policy, seed)
    strategy = make_strategy(name, result.backbone, result.generator, grad_loss=result.config.grad_loss) \
        if name == "generalizeformer" else make_strategy(name, result.backbone, result.generator)
    return run_stream(st, strategy)


def _dataset_accuracy(predict, ds: DomainDataset, batch_size: int = 64) -> float:
    correct = 0
    for start in range(0, len(ds), batch_size):
        x = ds.inputs[start : start + batch_size]
        y = ds.labels[start : start + batch_size]
        correct += int((predict(x).argmax(dim=-1) == y).sum())
    return correct / len(ds)


# ---------------------------------------------------------------------------
# leave-one-out


def _loo_cell(seed, angles, holdout, n_per_domain, n_iter, grad_loss, strategies, batch_size):
    domains = make_rotated_domains(seed, list(angles), n_per_domain)
    target = domains[holdout]
    sources = [d for i, d in enumerate(domains) if i != holdout]
    result = train(_train_config(seed, n_iter, grad_loss), sources)
    rows = []
    for strat in strategies:
        metrics = _strategy_accuracy(strat, result, [target], batch_size, seed)
        rows.append(
            {
                "experiment": "leave_one_out",
                "seed": seed,
                "target_angle": angles[holdout],
                "strategy": strat,
                "accuracy": metrics.accuracy,
            }
        )
    return rows


def eval_leave_one_out(
    seeds=DEFAULT_SEEDS,
    angles=DEFAULT_ANGLES,
    n_per_domain: int = DEFAULT_N_PER_DOMAIN,
    n_iter: int = DEFAULT_N_ITER,
    grad_loss: str = "entropy",
    strategies=STRATEGY_NAMES,
    batch_size: int = DEFAULT_BATCH,
    out_dir: str | Path | None = None,
) -> ExperimentReport:
    """Hold out each rotation angle in turn; meta-train on the rest and run
    every strategy on the held-out stream."""
    if len(angles) < 3:
        raise ValueError("leave-one-out needs at least 3 domains")
    cells = [
        (seed, tuple(angles), holdout, n_per_domain, n_iter, grad_loss, tuple(strategies), batch_size)
        for seed in seeds
        for holdout in range(len(angles))
    ]
    records = [row for rows in _run_cells(_loo_cell, cells) for row in rows]
    summary = summarize(records, ["strategy"])
    summary.update(summarize(records, ["strategy", "target_angle"]))
    cfg = {"experiment": "leave_one_out", "angles": list(angles), "n_per_domain": n_per_domain,
           "n_iter": n_iter, "grad_loss": grad_loss, "batch_size": batch_size}
    return _finish("leave_one_out", cfg, seeds, records, summary, out_dir)


# ---------------------------------------------------------------------------
# forgetting


def _forgetting_cell(seed, angles, n_per_domain, n_iter, grad_loss, strategies, batch_size):
    domains = make_rotated_domains(seed, list(angles), n_per_domain)
    target = domains[-1]
    sources = domains[:-1]
    result = train(_train_config(seed, n_iter, grad_loss), sources)
    rows = []
    for strat in strategies:
        strategy = make_strategy(strat, result.backbone, result.generator)
        for phase in ("before", "after"):
            if phase == "after":
                run_stream(stream([target], batch_size, "single_domain", seed), strategy)
            for src in sources:
                rows.append(
                    {
                        "experiment": "forgetting",
                        "seed": seed,
                        "strategy": strat,
                        "source_angle": src.meta["angle"],
                        "phase": phase,
                        "accuracy": _dataset_accuracy(strategy.predict, src),
                    }
                )
    return rows


def eval_forgetting(
    seeds=DEFAULT_SEEDS,
    angles=DEFAULT_ANGLES,
    n_per_domain: int = DEFAULT_N_PER_DOMAIN,
    n_iter: int = DEFAULT_N_ITER,
    grad_loss: str = "entropy",
    strategies=STRATEGY_NAMES,
    batch_size: int = DEFAULT_BATCH,
    out_dir: str | Path | None = None,
) -> ExperimentReport:
    """Source accuracy before vs after adapting on the held-out target stream.

    The parameter-generation strategy never mutates stored weights, so its
    delta is exactly zero; online baselines may drift.
    """
    cells = [
        (seed, tuple(angles), n_per_domain, n_iter, grad_loss, tuple(strategies), batch_size)
        for seed in seeds
    ]
    records = [row for rows in _run_cells(_forgetting_cell, cells) for row in rows]
    summary = summarize(records, ["strategy", "phase"])
    # per-strategy mean delta (after - before), recomputable from the rows
    for strat in strategies:
        deltas = []
        for seed in seeds:
            for r_after in records:
                if r_after["strategy"] != strat or r_after["seed"] != seed or r_after["phase"] != "after":
                    continue
                before = next(
                    r for r in records
                    if r["strategy"] == strat and r["seed"] == seed
                    and r["phase"] == "before" and r["source_angle"] == r_after["source_angle"]
                )
                deltas.append(r_after["accuracy"] - before["accuracy"])
        mean, std = mean_std(deltas)
        summary[f"{strat}/mean_delta"] = mean
        summary[f"{strat}/std_delta"] = std
    cfg = {"experiment": "forgetting", "angles": list(angles), "n_per_domain": n_per_domain,
           "n_iter": n_iter, "grad_loss": grad_loss, "batch_size": batch_size}
    return _finish("forgetting", cfg, seeds, records, summary, out_dir)


# ---------------------------------------------------------------------------
# multi-target


def _multitarget_cell(seed, source_angles, target_angles, n_per_domain, n_iter, grad_loss,
                      strategies, batch_size):
    all_angles = list(source_angles) + list(target_angles)
    domains = make_rotated_domains(seed, all_angles, n_per_domain)
    sources = domains[: len(source_angles)]
    targets = domains[len(source_angles):]
    result = train(_train_config(seed, n_iter, grad_loss), sources)
    rows = []
    for strat in strategies:
        # single-target: a fresh strategy per target stream, accuracies averaged
        single = [
            _strategy_accuracy(strat, result, [t], batch_size, seed).accuracy for t in targets
        ]
        rows.append({"experiment": "multi_target", "seed": seed, "strategy": strat,
                     "mode": "single", "accuracy": statistics.fmean(single)})
        # multiple-target: one interleaved stream, domain identity hidden
        multi = _strategy_accuracy(strat, result, targets, batch_size, seed, "interleaved_random")
        rows.append({"experiment": "multi_target", "seed": seed, "strategy": strat,
                     "mode": "multi", "accuracy": multi.accuracy})
    return rows


def eval_multi_target(
    seeds=DEFAULT_SEEDS,
    source_angles=(0.0, 15.0, 75.0, 90.0),
    target_angles=(30.0, 45.0, 60.0),
    n_per_domain: int = DEFAULT_N_PER_DOMAIN,
    n_iter: int = DEFAULT_N_ITER,
    grad_loss: str = "entropy",
    strategies=STRATEGY_NAMES,
    batch_size: int = DEFAULT_BATCH,
    out_dir: str | Path | None = None,
) -> ExperimentReport:
    """Per-target streams (single mode) vs one interleaved stream with hidden
    domain ids (multi mode), per strategy."""
    cells = [
        (seed, tuple(source_angles), tuple(target_angles), n_per_domain, n_iter, grad_loss,
         tuple(strategies), batch_size)
        for seed in seeds
    ]
    records = [row for rows in _run_cells(_multitarget_cell, cells) for row in rows]
    summary = summarize(records, ["strategy", "mode"])
    cfg = {"experiment": "multi_target", "source_angles": list(source_angles),
           "target_angles": list(target_angles), "n_per_domain": n_per_domain,
           "n_iter": n_iter, "grad_loss": grad_loss, "batch_size": batch_size}
    return _finish("multi_target", cfg, seeds, records, summary, out_dir)


# ---------------------------------------------------------------------------
# batch-size sweep


def _batchsweep_cell(seed, angles, sizes, n_per_domain, n_iter, grad_loss, strategies):
    domains = make_rotated_domains(seed, list(angles), n_per_domain)
    target = domains[-1]
    result = train(_train_config(seed, n_iter, grad_loss), domains[:-1])
    rows = []
    for strat in strategies:
        for size in sizes:
            st = stream([target], size, "single_domain", seed)
            strategy = make_strategy(strat, result.backbone, result.generator)
            metrics = run_stream(st, strategy)
            row = {"experiment": "batch_sweep", "seed": seed, "strategy": strat,
                   "batch_size": size, "accuracy": metrics.accuracy}
            if strat == "tent":
                row["degenerate_batches"] = strategy.degenerate_batches
            rows.append(row)
    return rows


def sweep_batch_size(
    sizes=(1, 16, 20, 64, 128),
    seeds=DEFAULT_SEEDS,
    angles=DEFAULT_ANGLES,
    n_per_domain: int = DEFAULT_N_PER_DOMAIN,
    n_iter: int = DEFAULT_N_ITER,
    grad_loss: str = "entropy",
    strategies=("erm", "generalizeformer", "tent"),
    out_dir: str | Path | None = None,
) -> ExperimentReport:
    """Target-stream accuracy as the deployment batch size varies."""
    cells = [
        (seed, tuple(angles), tuple(sizes), n_per_domain, n_iter, grad_loss, tuple(strategies))
        for seed in seeds
    ]
    records = [row for rows in _run_cells(_batchsweep_cell, cells) for row in rows]
    summary = summarize(records, ["strategy", "batch_size"])
    cfg = {"experiment": "batch_sweep", "sizes": list(sizes), "angles": list(angles),
           "n_per_domain": n_per_domain, "n_iter": n_iter, "grad_loss": grad_loss}
    return _finish("batch_sweep", cfg, seeds, records, summary, out_dir)


# ---------------------------------------------------------------------------
# ablations


def _variant_cell(experiment, seed, angles, variants_items, n_per_domain, n_iter, grad_loss, batch_size):
    domains = make_rotated_domains(seed, list(angles), n_per_domain)
    target = domains[-1]
    sources = domains[:-1]
    rows = []
    for variant, overrides in variants_items:
        config = _train_config(seed, n_iter, grad_loss, dict(overrides))
        result = train(config, sources)
        metrics = _strategy_accuracy("generalizeformer", result, [target], batch_size, seed)
        rows.append(
            {
                "experiment": experiment,
                "seed": seed,
                "variant": variant,
                "config_hash": config_hash(config.to_dict()),
                "target_angle": target.meta["angle"],
                "accuracy": metrics.accuracy,
            }
        )
    return rows


def _run_variants(experiment, variants, seeds, angles, n_per_domain, n_iter, grad_loss,
                  batch_size, out_dir):
    cells = [
        (experiment, seed, tuple(angles), tuple(variants.items()), n_per_domain, n_iter,
         grad_loss, batch_size)
        for seed in seeds
    ]
    records = [row for rows in _run_cells(_variant_cell, cells) for row in rows]
    summary = summarize(records, ["variant"])
    cfg = {"experiment": experiment, "variants": sorted(variants), "angles": list(angles),
           "n_per_domain": n_per_domain, "n_iter": n_iter, "grad_loss": grad_loss,
           "batch_size": batch_size}
    return _finish(experiment, cfg, seeds, records, summary, out_dir)


def ablate_inputs(
    seeds=DEFAULT_SEEDS,
    angles=DEFAULT_ANGLES,
    n_per_domain: int = DEFAULT_N_PER_DOMAIN,
    n_iter: int = DEFAULT_N_ITER,
    grad_loss: str = "entropy",
    batch_size: int = DEFAULT_BATCH,
    out_dir: str | Path | None = None,
) -> ExperimentReport:
    """Retrain the generator with token subsets; masked inputs become the
    learned null token."""
    return _run_variants("input_ablation", INPUT_VARIANTS, seeds, angles, n_per_domain,
                         n_iter, grad_loss, batch_size, out_dir)


def ablate_generated_layers(
    seeds=DEFAULT_SEEDS,
    angles=DEFAULT_ANGLES,
    n_per_domain: int = DEFAULT_N_PER_DOMAIN,
    n_iter: int = DEFAULT_N_ITER,
    grad_loss: str = "entropy",
    batch_size: int = DEFAULT_BATCH,
    out_dir: str | Path | None = None,
) -> ExperimentReport:
    """Generate BN affine only, classifier only, or both; slots outside the
    generated set stay at their source values."""
    return _run_variants("layer_ablation", LAYER_VARIANTS, seeds, angles, n_per_domain,
                         n_iter, grad_loss, batch_size, out_dir)


# ---------------------------------------------------------------------------
# layer distance


def layer_distance(source: ParamSet, generated: list[ParamSet]) -> dict[str, float]:
    """Per-slot mean relative L2 distance ||θ_t − θ_s|| / ||θ_s|| over batches."""
    if not generated:
        raise ValueError("need at least one generated parameter set")
    out: dict[str, float] = {}
    for sid, src in source.items():
        denom = float(src.norm())
        dists = [float((g[sid] - src).norm()) / max(denom, 1e-12) for g in generated]
        out[sid] = statistics.fmean(dists)
    return out


def _distance_cell(seed, n_per_domain, n_iter, grad_loss, batch_size):
    rows = []
    # input-level shift: balanced labels, rotated inputs
    rotated = make_rotated_domains(seed, [0.0, 30.0, 60.0, 90.0], n_per_domain)
    benchmarks = {"input_shift": (rotated[:-1], rotated[-1])}
    # output-level shift: mild input variation, disjoint class subsets per source
    mild = make_rotated_domains(seed, [0.0, 4.0, 8.0, 2.0], n_per_domain * 2)
    shifted = make_category_shift_split(mild, {0: {0, 1}, 1: {2, 3}, 2: {4}})
    benchmarks["output_shift"] = (shifted[:-1], shifted[-1])
    for bench, (sources, target) in benchmarks.items():
        result = train(_train_config(seed, n_iter, grad_loss), sources)
        strategy = make_strategy("generalizeformer", result.backbone, result.generator)
        run_stream(stream([target], batch_size, "single_domain", seed), strategy)
        distances = layer_distance(result.backbone.extract(), strategy.generated_history)
        for sid, dist in distances.items():
            rows.append({"experiment": "layer_distance", "seed": seed, "benchmark": bench,
                         "slot": sid, "distance": dist})
    return rows


def layer_distance_report(
    seeds=DEFAULT_SEEDS,
    n_per_domain: int = DEFAULT_N_PER_DOMAIN,
    n_iter: int = DEFAULT_N_ITER,
    grad_loss: str = "entropy",
    batch_size: int = DEFAULT_BATCH,
    out_dir: str | Path | None = None,
) -> ExperimentReport:
    """How far generated parameters move from the source per slot, on an
    input-level-shift benchmark vs an output-level (label-space) one."""
    cells = [(seed, n_per_domain, n_iter, grad_loss, batch_size) for seed in seeds]
    records = [row for rows in _run_cells(_distance_cell, cells) for row in rows]
    summary = summarize(records, ["benchmark", "slot"], value_key="distance")
    cfg = {"experiment": "layer_distance", "n_per_domain": n_per_domain, "n_iter": n_iter,
           "grad_loss": grad_loss, "batch_size": batch_size}
    return _finish("layer_distance", cfg, seeds, records, summary, out_dir)


# ---------------------------------------------------------------------------
# timing


def timing_report(
    strategies: dict[str, object],
    st,
    out_dir: str | Path | None = None,
) -> ExperimentReport:
    """Median and 95th-percentile adapt-step wallclock per strategy on one stream."""
    records = []
    for name, strategy in strategies.items():
        metrics = run_stream(st, strategy)
        for r in metrics.records:
            records.append({"experiment": "timing", "strategy": name,
                            "batch_idx": r["batch_idx"], "adapt_ms": r["adapt_ms"]})
    summary: dict[str, float] = {}
    for name in strategies:
        times = sorted(r["adapt_ms"] for r in records if r["strategy"] == name)
        summary[f"{name}/median_ms"] = times[len(times) // 2]
        summary[f"{name}/p95_ms"] = times[min(len(times) - 1, int(0.95 * len(times)))]
    cfg = {"experiment": "timing", "strategies": sorted(strategies)}
    return _finish("timing", cfg, [], records, summary, out_dir)
