"""Digital-twin training workflow: pretrain, select, refine.

The three system phases are run as a script: pretrain offline on twin
data, score target CSI collected online, then refine the codec either on
the selected target data alone (naive) or on its union with the twin
training set (rehearsal).
"""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import CodecError, CodecParams, TrainConfig, init_params, per_sample_nmse, train
from .pipeline import CsiDataset, DatasetError

log = logging.getLogger(__name__)

STRATEGIES = ("none", "naive_finetune", "rehearsal")
SELECTIONS = ("random", "nmse_threshold", "top_k_nmse")
DEFAULT_REFINE_LR = 1e-4
DEFAULT_ETA_PERCENTILE = 90.0


@dataclass(frozen=True)
class RefinementPolicy:
    """How refinement data is chosen and how the codec is updated with it.

    ``eta=None`` with ``nmse_threshold`` means "derive from the twin test
    split" (see :func:`default_eta`).
    """
    strategy: str = "rehearsal"
    selection: str = "top_k_nmse"
    k: int | None = 40
    eta: float | None = None
    refine_epochs: int = 20
    refine_lr: float = DEFAULT_REFINE_LR
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.selection not in SELECTIONS:
            raise ValueError(f"unknown selection {self.selection!r}")
        if self.selection == "nmse_threshold" and self.eta is not None and not self.eta > 0:
            raise ValueError("eta must be > 0")
        if self.selection in ("top_k_nmse", "random") and (self.k is None or self.k < 1):
            raise ValueError("k must be >= 1")
        if self.refine_epochs < 0:
            raise ValueError("refine_epochs must be >= 0")
        if self.refine_lr < 0:
            raise ValueError("refine_lr must be >= 0")

    @property
    def label(self) -> str:
        if self.strategy == "none":
            return "none"
        sel = {"random": "random", "nmse_threshold": "nmse_gt_eta", "top_k_nmse": "high_nmse"}
        return f"{self.strategy}+{sel[self.selection]}"


@dataclass
class SelectionReport:
    indices: np.ndarray     # positions in the target pool, ascending
    nmse: np.ndarray        # reconstruction NMSE of each selected sample
    max_corr: np.ndarray    # max normalised correlation to the twin training set

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.nmse = np.asarray(self.nmse, dtype=float)
        self.max_corr = np.asarray(self.max_corr, dtype=float)
        if len(np.unique(self.indices)) != len(self.indices):
            raise ValueError("selected indices must be unique")
        if not (len(self.indices) == len(self.nmse) == len(self.max_corr)):
            raise ValueError("report columns differ in length")

    def __len__(self) -> int:
        return len(self.indices)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "nmse", "nmse_db", "max_corr"])
            for i, e, c in zip(self.indices, self.nmse, self.max_corr):
                db = 10 * np.log10(e) if e > 0 else float("-inf")
                w.writerow([int(i), f"{e:.9e}", f"{db:.6f}", f"{c:.9f}"])

    @classmethod
    def from_csv(cls, path) -> "SelectionReport":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return cls([int(r["index"]) for r in rows], [float(r["nmse"]) for r in rows],
                   [float(r["max_corr"]) for r in rows])


def _require_twin(ds: CsiDataset, what: str) -> None:
    if ds.scenario != "twin":
        raise DatasetError(f"{what} must be twin data, got {ds.scenario!r} samples")


def pretrain_on_twin(twin_train: CsiDataset, cfg: TrainConfig, latent_dim: int = 32,
                     init_seed: int | None = None) -> CodecParams:
    """Train a fresh codec on twin-tagged data only."""
    _require_twin(twin_train, "pretraining set")
    if len(twin_train) == 0:
        raise DatasetError("twin training set is empty")
    rows, cols = twin_train.shape
    seed = cfg.seed if init_seed is None else init_seed
    params, _ = train(init_params(rows, cols, latent_dim, seed=seed), twin_train, cfg)
    return params


def score_reconstruction(params: CodecParams, dataset) -> np.ndarray:
    """Per-sample NMSE through the codec, in dataset order."""
    samples = getattr(dataset, "samples", dataset)
    if len(samples) == 0:
        return np.zeros(0)
    return per_sample_nmse(params, samples)


def max_normalized_correlation(queries, pool, chunk: int = 512) -> np.ndarray:
    """max_i |u^H v_i| / (||u|| ||v_i||) of each query against the pool."""
    q = np.asarray(queries).reshape(len(queries), -1)
    p = np.asarray(pool).reshape(len(pool), -1)
    if len(p) == 0:
        raise DatasetError("correlation pool is empty")
    qn = np.linalg.norm(q, axis=1)
    pn = np.linalg.norm(p, axis=1)
    if np.any(qn == 0) or np.any(pn == 0):
        raise DatasetError("correlation undefined for all-zero samples")
    q = q / qn[:, None]
    p = p / pn[:, None]
    out = np.zeros(len(q))
    for s in range(0, len(p), chunk):
        c = np.abs(q.conj() @ p[s:s + chunk].T)
        out = np.maximum(out, c.max(axis=1))
    return np.minimum(out, 1.0)


def default_eta(params: CodecParams, twin_test, percentile: float = DEFAULT_ETA_PERCENTILE) -> float:
    """Threshold anchored on the pretrained codec's twin-test NMSE."""
    scores = score_reconstruction(params, twin_test)
    if len(scores) == 0:
        raise DatasetError("twin test set is empty")
    return float(np.percentile(scores, percentile))


def select_indices(scores: np.ndarray, policy: RefinementPolicy, eta: float | None = None) -> np.ndarray:
    """Pool positions chosen by the policy, ascending."""
    n = len(scores)
    if policy.selection == "nmse_threshold":
        eta = policy.eta if eta is None else eta
        if eta is None:
            raise ValueError("nmse_threshold selection needs eta")
        idx = np.flatnonzero(scores > eta)
    elif policy.selection == "top_k_nmse":
        # stable sort on -score keeps the lower index first among ties
        idx = np.sort(np.argsort(-scores, kind="stable")[:policy.k])
    else:
        k = min(policy.k, n)
        idx = np.sort(np.random.default_rng(policy.seed).choice(n, size=k, replace=False))
    if policy.selection != "nmse_threshold" and policy.k > n:
        log.warning("pool has %d samples, fewer than k=%d", n, policy.k)
    return idx


def select_refinement_data(params: CodecParams, target_pool: CsiDataset, policy: RefinementPolicy,
                           twin_train: CsiDataset, eta: float | None = None,
                           scores: np.ndarray | None = None) -> SelectionReport:
    if len(target_pool) == 0:
        raise DatasetError("target pool is empty")
    if scores is None:
        scores = score_reconstruction(params, target_pool)
    idx = select_indices(scores, policy, eta)
    if len(idx) == 0:
        return SelectionReport(idx, np.zeros(0), np.zeros(0))
    corr = max_normalized_correlation(target_pool.samples[idx], twin_train.samples)
    return SelectionReport(idx, scores[idx], corr)


def _refine_cfg(base: TrainConfig, policy: RefinementPolicy) -> TrainConfig:
    return dataclasses.replace(base, learning_rate=policy.refine_lr, epochs=policy.refine_epochs,
                               seed=policy.seed, patience=None)


def refine_naive(params: CodecParams, refine_set, policy: RefinementPolicy,
                 base: TrainConfig = TrainConfig()) -> CodecParams:
    """Continue training on the refinement data alone (fresh Adam state)."""
    samples = getattr(refine_set, "samples", refine_set)
    if len(samples) == 0:
        raise CodecError("refinement set is empty")
    out, _ = train(params, samples, _refine_cfg(base, policy))
    return out


def refine_rehearsal(params: CodecParams, refine_set, twin_train: CsiDataset, policy: RefinementPolicy,
                     base: TrainConfig = TrainConfig()) -> CodecParams:
    """Continue training on twin_train plus the refinement data, uniformly mixed."""
    _require_twin(twin_train, "rehearsal set")
    if len(twin_train) == 0:
        raise CodecError("twin training set is empty")
    samples = getattr(refine_set, "samples", refine_set)
    union = np.concatenate([twin_train.samples, np.asarray(samples).reshape(-1, *twin_train.shape)])
    out, _ = train(params, union, _refine_cfg(base, policy))
    return out


def refine(params: CodecParams, refine_set, twin_train: CsiDataset, policy: RefinementPolicy,
           base: TrainConfig = TrainConfig()) -> CodecParams:
    if policy.strategy == "none":
        return params.copy()
    if policy.strategy == "naive_finetune":
        return refine_naive(params, refine_set, policy, base)
    return refine_rehearsal(params, refine_set, twin_train, policy, base)


def write_report(report: SelectionReport, path) -> Path:
    path = Path(path)
    report.to_csv(path)
    return path
