"""Experiment harness: direct generalisation, refinement comparison and
correlation CDFs on the built-in scenes, plus CSV/text/PNG reporting.

Every random choice derives from the spec seed and the replicate number,
so a pinned spec reproduces byte-identical CSV files.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import plots
from .adaptation import (RefinementPolicy, max_normalized_correlation, pretrain_on_twin, refine,
                         score_reconstruction, select_indices)
from .channel import SystemConfig, sum_rate
from .codec import (CodecParams, TrainConfig, init_params, load_checkpoint, per_sample_nmse,
                    reconstruct, save_checkpoint, to_db, train)
from .pipeline import (SCENARIOS, CsiDataset, DatasetError, config_hash, from_delay_angular,
                       generate_dataset, load_dataset, pad_delay_rows, save_dataset, split)
from .scene import builtin_scene

log = logging.getLogger(__name__)

SPEC_FORMAT_VERSION = 1
SCENE_NAMES = {"target": "target", "twin": "target-twin", "baseline": "baseline"}


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    output_dir: str = "results"
    datasets: dict = field(default_factory=dict)     # scenario -> .csid path (optional)
    dataset_seed: int = 7
    pool_count: int = 4000
    split_fraction: float = 0.8
    split_seed: int = 11
    train_sizes: tuple = (160, 640, 1280, 2560)
    refine_sizes: tuple = (10, 20, 40, 80)
    latent_dim: int = 32
    learning_rate: float = 1e-3
    batch_size: int = 64
    steps_per_cell: int = 600
    max_epochs: int = 200
    pretrain_epochs: int = 40
    naive_epochs: int = 100
    naive_lr: float = 1e-4
    rehearsal_epochs: int = 6
    rehearsal_lr: float = 1e-3
    cdf_samples: int = 100
    cdf_points: int = 101
    eval_count: int | None = None      # cap on target-test samples (None: all)
    sum_rate_count: int = 200
    seed: int = 0
    replicates: int = 1
    acceptance_size: int = 2560
    acceptance_refine_size: int = 40

    def __post_init__(self):
        for name in ("train_sizes", "refine_sizes"):
            sizes = tuple(int(s) for s in getattr(self, name))
            if not sizes or any(s < 1 for s in sizes) or list(sizes) != sorted(set(sizes)):
                raise SpecError(f"{name} must be positive and strictly ascending")
            object.__setattr__(self, name, sizes)
        if not 0 < self.split_fraction < 1:
            raise SpecError("split_fraction must lie in (0, 1)")
        if self.replicates < 1:
            raise SpecError("replicates must be >= 1")
        for k, p in self.datasets.items():
            if k not in SCENARIOS:
                raise SpecError(f"unknown dataset scenario {k!r}")
            if not Path(p).exists():
                raise SpecError(f"dataset file for {k} not found: {p}")

    def train_config(self, size: int, seed: int) -> TrainConfig:
        """Fixed optimiser-step budget per cell, so small sets get more epochs."""
        batches = math.ceil(size / self.batch_size)
        epochs = min(self.max_epochs, max(1, math.ceil(self.steps_per_cell / batches)))
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                           epochs=epochs, seed=seed)

    def policies(self, k: int, seed: int) -> list[RefinementPolicy]:
        naive = dict(refine_epochs=self.naive_epochs, refine_lr=self.naive_lr, seed=seed)
        return [
            RefinementPolicy("none", "top_k_nmse", k=k, seed=seed),
            RefinementPolicy("naive_finetune", "random", k=k, **naive),
            RefinementPolicy("naive_finetune", "top_k_nmse", k=k, **naive),
            RefinementPolicy("rehearsal", "top_k_nmse", k=k, refine_epochs=self.rehearsal_epochs,
                             refine_lr=self.rehearsal_lr, seed=seed),
        ]


def load_spec(path) -> ExperimentSpec:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SpecError(f"cannot read spec {path}: {exc}") from exc
    version = data.pop("spec_format_version", SPEC_FORMAT_VERSION)
    if version != SPEC_FORMAT_VERSION:
        raise SpecError(f"unsupported spec version {version}")
    known = {f.name for f in dataclasses.fields(ExperimentSpec)}
    unknown = set(data) - known
    if unknown:
        raise SpecError(f"unknown spec keys: {sorted(unknown)}")
    base = path.parent
    if "datasets" in data:
        data["datasets"] = {k: str(base / v) for k, v in data["datasets"].items()}
    if "output_dir" in data:
        data["output_dir"] = str(base / data["output_dir"])
    return ExperimentSpec(**data)


def spec_to_dict(spec: ExperimentSpec) -> dict:
    d = dataclasses.asdict(spec)
    d["train_sizes"] = list(spec.train_sizes)
    d["refine_sizes"] = list(spec.refine_sizes)
    return {"spec_format_version": SPEC_FORMAT_VERSION, **d}


def max_workers() -> int:
    env = os.environ.get("CSITWIN_THREADS")
    n = os.cpu_count() or 1
    if env:
        try:
            n = min(n, max(1, int(env)))
        except ValueError:
            log.warning("ignoring CSITWIN_THREADS=%r", env)
    return n


def _map(fn, items):
    """Ordered map, in worker processes when CSITWIN_THREADS allows."""
    items = list(items)
    workers = min(max_workers(), len(items))
    if workers <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(fn, *zip(*items)))


# ---------------------------------------------------------------- data

@dataclass
class Splits:
    train: dict
    test: dict


def load_or_generate(spec: ExperimentSpec) -> Splits:
    """Train/test splits per scenario. Generated sets are cached in output_dir/data."""
    cfg = SystemConfig()
    data_dir = Path(spec.output_dir) / "data"
    train, test = {}, {}
    for scen in SCENARIOS:
        if scen in spec.datasets:
            ds = load_dataset(spec.datasets[scen])
        else:
            path = data_dir / f"{scen}.csid"
            ds = None
            if path.exists():
                ds = load_dataset(path)
                same = (ds.meta.get("seed") == spec.dataset_seed and len(ds) == spec.pool_count
                        and ds.meta.get("cfg_hash") == config_hash(cfg))
                ds = ds if same else None
            if ds is None:
                data_dir.mkdir(parents=True, exist_ok=True)
                ds = generate_dataset(builtin_scene(SCENE_NAMES[scen]), cfg, spec.dataset_seed,
                                      spec.pool_count)
                save_dataset(ds, path)
                ds = load_dataset(path)
        if ds.scenario != scen:
            raise DatasetError(f"dataset given for {scen} holds {ds.scenario} samples")
        train[scen], test[scen] = split(ds, spec.split_fraction, spec.split_seed)
    need = max(spec.train_sizes)
    for scen, ds in train.items():
        if len(ds) < need:
            raise DatasetError(f"{scen} train split has {len(ds)} samples, need {need}")
    return Splits(train, test)


def _eval_set(spec, splits) -> CsiDataset:
    te = splits.test["target"]
    return te if spec.eval_count is None else te.head(spec.eval_count)


def sum_rate_ratio(params: CodecParams, samples, cfg: SystemConfig = SystemConfig()) -> float:
    """Average rate with codec CSI over average rate with true CSI."""
    samples = np.asarray(samples)
    if len(samples) == 0:
        return float("nan")
    rec = reconstruct(params, samples)
    num = den = 0.0
    for G, Gh in zip(samples, rec):
        H = from_delay_angular(pad_delay_rows(G, cfg.num_subcarriers))
        Hh = from_delay_angular(pad_delay_rows(Gh, cfg.num_subcarriers))
        num += sum_rate(H, Hh, cfg)
        den += sum_rate(H, H, cfg)
    return num / den


def evaluate(params: CodecParams, test: CsiDataset, sum_rate_count: int) -> tuple[float, float]:
    nmse = per_sample_nmse(params, test.samples)
    return float(to_db(np.mean(nmse))), sum_rate_ratio(params, test.samples[:sum_rate_count])


def _subset_order(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 1]).permutation(n)


# ---------------------------------------------------------------- direct generalisation

ROW_FIELDS = ["experiment", "replicate", "train_source", "train_size", "policy", "refine_size",
              "nmse_db", "sum_rate_ratio"]


def _direct_cell(spec, source_train, test, source, size, rep, ckpt_dir):
    seed = spec.seed + rep
    order = _subset_order(len(source_train), seed)
    tr = source_train.subset(np.sort(order[:size]))
    init_seed = int(np.random.default_rng([seed, size]).integers(2 ** 31))
    p0 = init_params(*tr.shape, spec.latent_dim, seed=init_seed)
    params, _ = train(p0, tr, spec.train_config(size, init_seed))
    if ckpt_dir is not None:
        save_checkpoint(params, Path(ckpt_dir) / f"direct_{source}_{size}_r{rep}.csim",
                        {"train_source": source, "train_size": size, "replicate": rep,
                         "init_seed": init_seed})
    nmse_db, ratio = evaluate(params, test, spec.sum_rate_count)
    return {"experiment": "direct", "replicate": rep, "train_source": source, "train_size": size,
            "policy": "none", "refine_size": 0, "nmse_db": nmse_db, "sum_rate_ratio": ratio}


def run_direct_generalization(spec: ExperimentSpec, splits: Splits | None = None,
                              replicates: int | None = None) -> list[dict]:
    splits = splits or load_or_generate(spec)
    test = _eval_set(spec, splits)
    ckpt = Path(spec.output_dir) / "checkpoints"
    ckpt.mkdir(parents=True, exist_ok=True)
    cells = [(spec, splits.train[src], test, src, size, rep, ckpt)
             for rep in range(replicates or spec.replicates)
             for size in spec.train_sizes for src in ("target", "twin", "baseline")]
    return _map(_direct_cell, cells)


# ---------------------------------------------------------------- refinement

def pretrained_model(spec: ExperimentSpec, splits: Splits, rep: int) -> CodecParams:
    """Twin-pretrained codec for a replicate, cached as a checkpoint."""
    seed = spec.seed + rep
    size = max(spec.train_sizes)
    path = Path(spec.output_dir) / "checkpoints" / f"pretrained_r{rep}.csim"
    prov = {"train_source": "twin", "train_size": size, "replicate": rep, "seed": seed,
            "epochs": spec.pretrain_epochs, "learning_rate": spec.learning_rate,
            "batch_size": spec.batch_size, "latent_dim": spec.latent_dim,
            "data": splits.train["twin"].meta.get("cfg_hash", ""),
            "dataset_seed": splits.train["twin"].meta.get("seed")}
    side = path.with_name(path.name + ".json")
    if path.exists() and side.exists():
        stored = json.loads(side.read_text(encoding="utf-8"))
        if all(stored.get(k) == v for k, v in prov.items()):
            return load_checkpoint(path)
    twin = _pretrain_set(spec, splits, rep)
    cfg = TrainConfig(learning_rate=spec.learning_rate, batch_size=spec.batch_size,
                      epochs=spec.pretrain_epochs, seed=seed)
    params = pretrain_on_twin(twin, cfg, spec.latent_dim)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, path, prov)
    return load_checkpoint(path)


def _pretrain_set(spec, splits, rep):
    twin = splits.train["twin"]
    order = _subset_order(len(twin), spec.seed + rep)
    return twin.subset(np.sort(order[:max(spec.train_sizes)]))


def _refine_rep(spec, splits, rep):
    params = pretrained_model(spec, splits, rep)
    twin = _pretrain_set(spec, splits, rep)
    pool = splits.train["target"]
    test = _eval_set(spec, splits)
    scores = score_reconstruction(params, pool)
    base = evaluate(params, test, spec.sum_rate_count)
    rows = []
    for k in spec.refine_sizes:
        for pol in spec.policies(k, spec.seed + rep):
            if pol.strategy == "none":
                nmse_db, ratio = base
            else:
                idx = select_indices(scores, pol)
                refined = refine(params, pool.samples[idx], twin, pol,
                                 TrainConfig(batch_size=spec.batch_size))
                nmse_db, ratio = evaluate(refined, test, spec.sum_rate_count)
            rows.append({"experiment": "refine", "replicate": rep, "train_source": "twin",
                         "train_size": len(twin), "policy": pol.label, "refine_size": k,
                         "nmse_db": nmse_db, "sum_rate_ratio": ratio})
    return rows


def run_refinement_comparison(spec: ExperimentSpec, splits: Splits | None = None,
                              replicates: int | None = None) -> list[dict]:
    splits = splits or load_or_generate(spec)
    reps = range(replicates or spec.replicates)
    out = _map(_refine_rep, [(spec, splits, r) for r in reps])
    return [row for rows in out for row in rows]


# ---------------------------------------------------------------- correlation CDF

CDF_FIELDS = ["replicate", "correlation", "cdf_high_nmse", "cdf_random"]


def empirical_cdf(values, grid) -> np.ndarray:
    v = np.sort(np.asarray(values))
    return np.searchsorted(v, grid, side="right") / len(v)


def run_correlation_cdf(spec: ExperimentSpec, splits: Splits | None = None,
                        replicates: int | None = None) -> list[dict]:
    splits = splits or load_or_generate(spec)
    pool = splits.train["target"]
    n = spec.cdf_samples
    if len(pool) < n:
        log.warning("target pool has %d samples, fewer than %d; using all", len(pool), n)
        n = len(pool)
    grid = np.linspace(0.0, 1.0, spec.cdf_points)
    rows = []
    for rep in range(replicates or spec.replicates):
        params = pretrained_model(spec, splits, rep)
        twin = _pretrain_set(spec, splits, rep)
        scores = score_reconstruction(params, pool)
        top = select_indices(scores, RefinementPolicy("none", "top_k_nmse", k=n))
        rnd = select_indices(scores, RefinementPolicy("none", "random", k=n, seed=spec.seed + rep))
        c_top = empirical_cdf(max_normalized_correlation(pool.samples[top], twin.samples), grid)
        c_rnd = empirical_cdf(max_normalized_correlation(pool.samples[rnd], twin.samples), grid)
        for g, a, b in zip(grid, c_top, c_rnd):
            rows.append({"replicate": rep, "correlation": float(g), "cdf_high_nmse": float(a),
                         "cdf_random": float(b)})
    return rows


def correlation_means(cdf_rows) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Replicate-averaged CDFs on the shared grid."""
    grid = np.unique([r["correlation"] for r in cdf_rows])
    top = np.array([np.mean([r["cdf_high_nmse"] for r in cdf_rows if r["correlation"] == g]) for g in grid])
    rnd = np.array([np.mean([r["cdf_random"] for r in cdf_rows if r["correlation"] == g]) for g in grid])
    return grid, top, rnd


def mean_from_cdf(grid, cdf) -> float:
    """Mean of a [0, 1]-supported variable from its CDF on a grid (right Riemann sum)."""
    return float(np.sum((1.0 - cdf[:-1]) * np.diff(grid)))


# ---------------------------------------------------------------- acceptance checks

@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def _mean(rows, **match):
    vals = [r["nmse_db"] for r in rows if all(r[k] == v for k, v in match.items())]
    return float(np.mean(vals)) if vals else float("nan")


def check_direct(rows, spec: ExperimentSpec) -> list[Check]:
    if not rows:
        return []
    big = spec.acceptance_size if spec.acceptance_size in spec.train_sizes else max(spec.train_sizes)
    small = min(spec.train_sizes)
    t, w, b = (_mean(rows, train_source=s, train_size=big) for s in ("target", "twin", "baseline"))
    b_small = _mean(rows, train_source="baseline", train_size=small)
    return [
        Check("direct: target <= twin", t <= w, f"target {t:.2f} dB, twin {w:.2f} dB at {big}"),
        Check("direct: twin within 6 dB of target", w - t <= 6.0, f"gap {w - t:.2f} dB"),
        Check("direct: twin beats baseline by >= 5 dB", b - w >= 5.0, f"margin {b - w:.2f} dB"),
        Check("direct: baseline flat (< 1 dB gain)", b_small - b < 1.0,
              f"baseline {b_small:.2f} dB at {small}, {b:.2f} dB at {big}"),
    ]


def check_refine(rows, spec: ExperimentSpec) -> list[Check]:
    if not rows:
        return []
    k = spec.acceptance_refine_size
    if k not in spec.refine_sizes:
        k = min(spec.refine_sizes)
    base = _mean(rows, policy="none", refine_size=k)
    reh = _mean(rows, policy="rehearsal+high_nmse", refine_size=k)
    nh = _mean(rows, policy="naive_finetune+high_nmse", refine_size=k)
    nr = _mean(rows, policy="naive_finetune+random", refine_size=k)
    return [
        Check("refine: rehearsal+high_nmse >= 1 dB better", base - reh >= 1.0,
              f"pretrained {base:.2f} dB, rehearsal {reh:.2f} dB at {k}"),
        Check("refine: naive+high_nmse >= 1 dB worse", nh - base >= 1.0, f"naive {nh:.2f} dB"),
        Check("refine: naive+random within 1 dB", abs(nr - base) <= 1.0, f"naive random {nr:.2f} dB"),
    ]


def check_cdf(cdf_rows) -> list[Check]:
    if not cdf_rows:
        return []
    grid, top, rnd = correlation_means(cdf_rows)
    gap = mean_from_cdf(grid, rnd) - mean_from_cdf(grid, top)
    worst = float(np.min(top - rnd))
    return [
        Check("cdf: high-NMSE CDF at or left of random", worst >= -1e-12,
              f"min(F_high - F_random) = {worst:.3f}"),
        Check("cdf: mean correlation gap >= 0.02", gap >= 0.02, f"gap {gap:.3f}"),
    ]


# ---------------------------------------------------------------- report

def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_csv(rows, fields, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r[f]) for f in fields])
    return path


def emit_report(tables: dict, out_dir, spec: ExperimentSpec | None = None,
                timings: dict | None = None) -> tuple[list[Check], list[Path]]:
    """Write CSVs, figures and summary.txt; return the acceptance checks and files."""
    spec = spec or ExperimentSpec()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    checks: list[Check] = []
    if "direct" in tables:
        rows = tables["direct"]
        files.append(write_csv(rows, ROW_FIELDS, out / "direct_generalization.csv"))
        if rows:
            files.append(plots.plot_direct_generalization(
                plots.mean_by(rows, ["train_source", "train_size"]), out / "direct_generalization.png"))
        checks += check_direct(rows, spec)
    if "refine" in tables:
        rows = tables["refine"]
        files.append(write_csv(rows, ROW_FIELDS, out / "refinement.csv"))
        if rows:
            files.append(plots.plot_refinement(plots.mean_by(rows, ["policy", "refine_size"]),
                                               out / "refinement.png"))
        checks += check_refine(rows, spec)
    if "cdf" in tables:
        rows = tables["cdf"]
        files.append(write_csv(rows, CDF_FIELDS, out / "correlation_cdf.csv"))
        if rows:
            grid, top, rnd = correlation_means(rows)
            files.append(plots.plot_correlation_cdf(
                grid, {"top NMSE": top, "random": rnd}, out / "correlation_cdf.png"))
        checks += check_cdf(rows)
    lines = ["csitwin experiment summary", ""]
    for c in checks:
        lines.append(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}")
    if not checks:
        lines.append("no acceptance checks evaluated")
    failed = [c.name for c in checks if not c.passed]
    lines += ["", f"{len(checks) - len(failed)}/{len(checks)} checks passed"]
    if failed:
        lines.append("failing: " + "; ".join(failed))
    for name, secs in (timings or {}).items():
        lines.append(f"runtime {name}: {secs:.1f} s")
    summary = out / "summary.txt"
    summary.write_text("\n".join(lines) + "\n", encoding="utf-8")
    files.append(summary)
    return checks, files


def run(spec: ExperimentSpec, which=("direct", "refine", "cdf"),
        replicates: int | None = None) -> tuple[dict, list[Check], list[Path]]:
    splits = load_or_generate(spec)
    runners = {"direct": run_direct_generalization, "refine": run_refinement_comparison,
               "cdf": run_correlation_cdf}
    tables, timings = {}, {}
    for name in which:
        t0 = time.perf_counter()
        tables[name] = runners[name](spec, splits, replicates)
        timings[name] = time.perf_counter() - t0
        log.info("%s done in %.1f s", name, timings[name])
    checks, files = emit_report(tables, spec.output_dir, spec, timings)
    return tables, checks, files


def audit(spec: ExperimentSpec, tol_db: float = 1e-6) -> list[str]:
    """Re-derive direct-generalisation NMSE from saved checkpoints; return mismatches."""
    out = Path(spec.output_dir)
    splits = load_or_generate(spec)
    test = _eval_set(spec, splits)
    with open(out / "direct_generalization.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    problems = []
    for r in rows:
        ck = out / "checkpoints" / f"direct_{r['train_source']}_{r['train_size']}_r{r['replicate']}.csim"
        if not ck.exists():
            problems.append(f"missing checkpoint {ck.name}")
            continue
        got = float(to_db(np.mean(per_sample_nmse(load_checkpoint(ck), test.samples))))
        # CSV holds 6 decimals, so compare within the rounding plus tolerance
        if abs(got - float(r["nmse_db"])) > 5e-7 + tol_db:
            problems.append(f"{ck.name}: csv {r['nmse_db']} vs recomputed {got:.6f}")
    return problems
