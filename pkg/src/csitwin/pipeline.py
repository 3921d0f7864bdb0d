"""CSI preprocessing and datasets.

Frequency-antenna channels are moved to the delay-angular domain with
unitary DFTs, truncated to the first 32 delay rows and scaled to unit
Frobenius norm. Datasets hold those normalised matrices for one scenario
and persist to a small little-endian binary format (magic ``CSID``) with
a JSON sidecar for provenance.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import SystemConfig, delay_domain_channel, frequency_channel, synchronize
from .raytrace import trace_batch
from .scene import Scene

TRUNCATED_ROWS = 32
DATASET_MAGIC = b"CSID"
DATASET_FORMAT_VERSION = 1
SCENARIOS = ("target", "twin", "baseline")

_HEADER = struct.Struct("<4sIIIII")


class DatasetError(ValueError):
    pass


class ZeroChannelError(DatasetError):
    """Raised when normalising an all-zero (fully blocked) channel."""


@dataclass
class AngularDelayCSI:
    entries: np.ndarray
    source: str = ""

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)


def to_delay_angular(H) -> np.ndarray:
    """G = F_d H F_a^H with unitary DFT matrices."""
    H = np.asarray(H)
    return np.fft.ifft(np.fft.fft(H, axis=0, norm="ortho"), axis=1, norm="ortho")


def from_delay_angular(G) -> np.ndarray:
    """Inverse of :func:`to_delay_angular`: H = F_d^H G F_a."""
    G = np.asarray(G)
    return np.fft.ifft(np.fft.fft(G, axis=1, norm="ortho"), axis=0, norm="ortho")


def truncate(G, rows: int = TRUNCATED_ROWS) -> np.ndarray:
    G = np.asarray(G)
    if G.shape[0] < rows:
        raise DatasetError(f"cannot keep {rows} delay rows from a {G.shape[0]}-row matrix")
    return G[:rows].copy()


def pad_delay_rows(G_trunc, num_subcarriers: int) -> np.ndarray:
    """Zero-fill a truncated delay-angular matrix back to K rows."""
    G_trunc = np.asarray(G_trunc)
    out = np.zeros((num_subcarriers, G_trunc.shape[1]), dtype=complex)
    out[:G_trunc.shape[0]] = G_trunc
    return out


def normalize(G_trunc, source: str = "") -> AngularDelayCSI:
    G = np.asarray(G_trunc)
    norm = np.linalg.norm(G)
    if norm == 0:
        raise ZeroChannelError("zero channel cannot be normalised (fully blocked UE)")
    return AngularDelayCSI(G / norm, source)


def retained_energy(H, rows: int = TRUNCATED_ROWS) -> float:
    """Fraction of ||H||_F^2 kept by truncating the delay-angular matrix."""
    G = to_delay_angular(H)
    total = np.vdot(G, G).real
    return float(np.vdot(G[:rows], G[:rows]).real / total) if total > 0 else 1.0


def scenario_of(scene: Scene) -> str:
    if scene.name.endswith("-twin") or scene.name == "twin":
        return "twin"
    if "baseline" in scene.name:
        return "baseline"
    return "target"


def config_hash(cfg: SystemConfig) -> str:
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class CsiDataset:
    """Normalised delay-angular samples of one scenario, ordered by grid index."""
    samples: np.ndarray                 # (n, rows, N_t) complex
    grid_indices: np.ndarray            # (n,) int
    scenario: str
    split_seed: int = 0
    sys: SystemConfig | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        self.grid_indices = np.asarray(self.grid_indices, dtype=np.int64)
        if self.scenario not in SCENARIOS:
            raise DatasetError(f"unknown scenario {self.scenario!r}")
        if self.samples.ndim != 3:
            raise DatasetError("samples must have shape (n, rows, cols)")
        if len(self.samples) != len(self.grid_indices):
            raise DatasetError("one grid index per sample required")
        if not np.all(np.isfinite(self.samples)):
            raise DatasetError("non-finite sample entries")

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i) -> AngularDelayCSI:
        return AngularDelayCSI(self.samples[i], self.scenario)

    @property
    def shape(self) -> tuple[int, int]:
        return self.samples.shape[1:]

    def subset(self, idx) -> "CsiDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return dataclasses.replace(self, samples=self.samples[idx],
                                   grid_indices=self.grid_indices[idx], meta=dict(self.meta))

    def head(self, n: int) -> "CsiDataset":
        return self.subset(np.arange(min(n, len(self))))


def empty_dataset(scenario: str, rows: int, cols: int, cfg: SystemConfig | None = None) -> CsiDataset:
    return CsiDataset(np.zeros((0, rows, cols), dtype=complex), np.zeros(0, dtype=np.int64),
                      scenario, sys=cfg)


def channels_for_positions(scene: Scene, cfg: SystemConfig, positions, scenario: str = "",
                           grid_indices=None) -> list:
    """Trace and synthesise the frequency-domain channel for each UE position."""
    if grid_indices is None:
        grid_indices = [-1] * len(positions)
    paths = trace_batch(scene, positions, carrier_freq=cfg.carrier_freq)
    out = []
    for p, gi in zip(paths, grid_indices):
        h = delay_domain_channel(synchronize(p), cfg)
        out.append(frequency_channel(h, cfg, scenario, int(gi)))
    return out


def generate_dataset(scene: Scene, cfg: SystemConfig, seed: int, count: int,
                     rows: int = TRUNCATED_ROWS, scenario: str | None = None,
                     chunk: int = 2048) -> CsiDataset:
    """Sample ``count`` served UE positions from the scene grid.

    Grid positions are visited in a seeded random order; fully blocked
    positions are skipped. The result is sorted by grid index. With the
    same seed, scenes sharing geometry (target and twin) yield the same
    grid indices.
    """
    scenario = scenario or scenario_of(scene)
    if cfg.num_antennas != scene.bs.num_antennas:
        raise DatasetError("config antenna count differs from scene BS")
    grid = scene.service_grid
    if count > grid.size:
        raise DatasetError(f"count {count} exceeds grid size {grid.size}")
    if count == 0:
        ds = empty_dataset(scenario, rows, cfg.num_antennas, cfg)
        ds.meta = {"scene": scene.name, "seed": seed}
        return ds

    order = np.random.default_rng(seed).permutation(grid.size)
    kept_idx: list[int] = []
    kept: list[np.ndarray] = []
    pos = 0
    while len(kept) < count and pos < grid.size:
        batch = order[pos:pos + chunk]
        pos += len(batch)
        chans = channels_for_positions(scene, cfg, grid.positions(batch), scenario, batch)
        for gi, H in zip(batch, chans):
            G = truncate(to_delay_angular(H), rows)
            try:
                x = normalize(G, scenario)
            except ZeroChannelError:
                continue
            kept_idx.append(int(gi))
            kept.append(x.entries)
            if len(kept) == count:
                break
    if len(kept) < count:
        raise DatasetError(f"scene {scene.name!r}: only {len(kept)} served positions, "
                           f"short by {count - len(kept)}")
    perm = np.argsort(kept_idx, kind="stable")
    return CsiDataset(np.stack(kept)[perm], np.asarray(kept_idx)[perm], scenario,
                      sys=cfg, meta={"scene": scene.name, "seed": seed,
                                     "cfg_hash": config_hash(cfg)})


def split(dataset: CsiDataset, train_fraction: float = 0.8, seed: int = 0):
    """Seeded disjoint train/test split; train gets floor(fraction * n) samples."""
    n = len(dataset)
    if n == 0:
        raise DatasetError("cannot split an empty dataset")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(train_fraction * n + 1e-9))
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    train, test = dataset.subset(train_idx), dataset.subset(test_idx)
    train.split_seed = test.split_seed = seed
    return train, test


# ---------------------------------------------------------------- binary I/O

def save_dataset(ds: CsiDataset, path, extra_meta: dict | None = None) -> None:
    """Write the CSID binary file plus a ``.json`` sidecar."""
    n, rows, cols = ds.samples.shape
    header = _HEADER.pack(DATASET_MAGIC, DATASET_FORMAT_VERSION,
                          SCENARIOS.index(ds.scenario), n, rows, cols)
    body = np.empty((n, rows, cols, 2), dtype="<f4")
    body[..., 0] = ds.samples.real
    body[..., 1] = ds.samples.imag
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body.tobytes())
        fh.write(ds.grid_indices.astype("<u4").tobytes())
    meta = {"scenario": ds.scenario, "split_seed": ds.split_seed, **ds.meta}
    if ds.sys is not None:
        meta["cfg_hash"] = config_hash(ds.sys)
        meta["system_config"] = dataclasses.asdict(ds.sys)
    if extra_meta:
        meta.update(extra_meta)
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                  encoding="utf-8")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_dataset(path) -> CsiDataset:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetError(f"{path}: truncated header")
    magic, version, tag, n, rows, cols = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    if version != DATASET_FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported format version {version}")
    if tag >= len(SCENARIOS):
        raise DatasetError(f"{path}: bad scenario tag {tag}")
    body_len = n * rows * cols * 2 * 4
    expected = _HEADER.size + body_len + 4 * n
    if len(raw) != expected:
        raise DatasetError(f"{path}: size {len(raw)} != expected {expected}")
    body = np.frombuffer(raw, dtype="<f4", count=n * rows * cols * 2, offset=_HEADER.size)
    body = body.reshape(n, rows, cols, 2).astype(np.float64)
    samples = body[..., 0] + 1j * body[..., 1]
    # float32 storage loses the exact unit norm; restore it in double precision
    if n:
        norms = np.linalg.norm(samples.reshape(n, -1), axis=1)
        samples = samples / norms[:, None, None]
    grid = np.frombuffer(raw, dtype="<u4", count=n, offset=_HEADER.size + body_len)
    meta = {}
    sc = sidecar_path(path)
    if sc.exists():
        meta = json.loads(sc.read_text(encoding="utf-8"))
    sys_cfg = None
    if "system_config" in meta:
        sys_cfg = SystemConfig(**meta["system_config"])
    return CsiDataset(samples, grid.astype(np.int64), SCENARIOS[tag],
                      split_seed=int(meta.get("split_seed", 0)), sys=sys_cfg,
                      meta={k: v for k, v in meta.items()
                            if k not in ("scenario", "split_seed", "system_config")})
