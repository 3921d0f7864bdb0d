"""Neural CSI codec written directly in numpy.

Architecture (input: a unit-norm complex ``rows x N_t`` delay-angular
matrix viewed as a 2-channel real image):

    encoder   flatten -> dense(2*rows*N_t -> M)                (no activation)
    decoder   dense(M -> 2*rows*N_t) -> tanh                    initial estimate
              2 x refinement block:
                  conv3x3(2->8) -> lrelu(0.3)
                  conv3x3(8->16) -> lrelu(0.3)
                  conv3x3(16->2)
                  tanh(input + conv output)
              divide by the Frobenius norm

Gradients are hand-written reverse mode. Feature maps are laid out as
(channels, batch, rows, cols); a 3x3 convolution is nine shifted copies of
whichever side has fewer channels plus one matrix product.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.3
BLOCK_WIDTHS = (2, 8, 16, 2)
NUM_BLOCKS = 2
KERNEL = 3

CHECKPOINT_MAGIC = b"CSIM"
CHECKPOINT_FORMAT_VERSION = 1


class CodecError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- parameters

def param_shapes(rows: int, cols: int, latent_dim: int) -> dict[str, tuple[int, ...]]:
    """Canonical (ordered) parameter names and shapes."""
    n = 2 * rows * cols
    shapes = {
        "enc_w": (latent_dim, n),
        "enc_b": (latent_dim,),
        "dec_w": (n, latent_dim),
        "dec_b": (n,),
    }
    for b in range(NUM_BLOCKS):
        for i, (cin, cout) in enumerate(zip(BLOCK_WIDTHS[:-1], BLOCK_WIDTHS[1:])):
            shapes[f"block{b}_conv{i}_w"] = (cout, cin, KERNEL, KERNEL)
            shapes[f"block{b}_conv{i}_b"] = (cout,)
    return shapes


@dataclass
class CodecParams:
    rows: int
    cols: int
    latent_dim: int
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = param_shapes(self.rows, self.cols, self.latent_dim)
        if list(self.tensors) != list(expected):
            self.tensors = {k: self.tensors[k] for k in expected}
        for k, shp in expected.items():
            if self.tensors[k].shape != shp:
                raise CodecError(f"{k}: shape {self.tensors[k].shape}, expected {shp}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def dtype(self):
        return self.tensors["enc_w"].dtype

    @property
    def input_dim(self) -> int:
        return 2 * self.rows * self.cols

    @property
    def compression_ratio(self) -> float:
        return self.input_dim / self.latent_dim

    def copy(self) -> "CodecParams":
        return dataclasses.replace(self, tensors={k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "CodecParams":
        return dataclasses.replace(self, tensors={k: v.astype(dtype) for k, v in self.tensors.items()})

    def zeros_like(self) -> "CodecParams":
        return dataclasses.replace(self, tensors={k: np.zeros_like(v) for k, v in self.tensors.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors.values()])

    def num_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def allclose(self, other: "CodecParams", **kw) -> bool:
        return all(np.allclose(v, other.tensors[k], **kw) for k, v in self.tensors.items())

    def array_equal(self, other: "CodecParams") -> bool:
        return all(np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items())


def init_params(rows: int = 32, cols: int = 32, latent_dim: int = 32, seed: int = 0,
                dtype=np.float32) -> CodecParams:
    """Uniform fan-in initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = np.random.default_rng(seed)
    tensors = {}
    shapes = param_shapes(rows, cols, latent_dim)
    for name, shp in shapes.items():
        wname = name[:-1] + "w"
        wshape = shapes[wname]
        fan_in = int(np.prod(wshape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shp).astype(dtype)
    return CodecParams(rows, cols, latent_dim, tensors)


# ---------------------------------------------------------------- layout

def complex_to_real(x: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(B, R, C) complex -> (B, 2R C) real, real plane first then imaginary."""
    x = np.asarray(x)
    out = np.stack([x.real, x.imag], axis=1).astype(dtype, copy=False)
    return out.reshape(len(x), 2 * int(np.prod(x.shape[1:])))


def real_to_complex(v: np.ndarray, rows: int, cols: int) -> np.ndarray:
    v = v.reshape(len(v), 2, rows, cols)
    return v[:, 0] + 1j * v[:, 1]


# Feature maps inside the refinement blocks use a (channels, batch, H, W)
# layout: every 3x3 shift then copies whole image rows and each conv layer
# is one matrix product over channels.

def _planes_to_maps(v, rows, cols):
    return v.reshape(len(v), 2, rows, cols).transpose(1, 0, 2, 3)


def _maps_to_planes(y):
    return y.transpose(1, 0, 2, 3).reshape(y.shape[1], -1)


# ---------------------------------------------------------------- conv
#
# Cross-correlation with same padding:
#     out[p] = sum_k W_k x[p + s_k] + b,  k = 3 i + j,  s_k = (i - 1, j - 1)
# Layers with cin <= cout shift the input ("gather"); layers with
# cin > cout shift the product W_k x instead ("scatter"), so the shifted
# copies always carry min(cin, cout) channels.

def _shifted(x, sign):
    """(C, B, H, W) -> (9, C, B, H, W) with [k] = x[p + sign * s_k], zero padded."""
    C, B, H, W = x.shape
    xp = np.zeros((C, B, H + 2, W + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    out = np.empty((KERNEL * KERNEL, C, B, H, W), dtype=x.dtype)
    for i in range(KERNEL):
        for j in range(KERNEL):
            r = 1 + sign * (i - 1)
            c = 1 + sign * (j - 1)
            out[KERNEL * i + j] = xp[:, :, r:r + H, c:c + W]
    return out


def _shift_sum(y, sign):
    """(9, C, B, H, W) -> (C, B, H, W) with out[p] = sum_k y_k[p + sign * s_k]."""
    _, C, B, H, W = y.shape
    yp = np.zeros((KERNEL * KERNEL, C, B, H + 2, W + 2), dtype=y.dtype)
    yp[:, :, :, 1:-1, 1:-1] = y
    out = np.zeros((C, B, H, W), dtype=y.dtype)
    for i in range(KERNEL):
        for j in range(KERNEL):
            r = 1 + sign * (i - 1)
            c = 1 + sign * (j - 1)
            out += yp[KERNEL * i + j, :, :, r:r + H, c:c + W]
    return out


def conv_forward(x, w, b):
    """x: (cin, B, H, W), w: (cout, cin, 3, 3) -> (cout, B, H, W), cache."""
    cout, cin = w.shape[:2]
    _, B, H, W = x.shape
    n = B * H * W
    if cin <= cout:
        cols = _shifted(x, +1).reshape(9 * cin, n)
        wm = w.transpose(0, 2, 3, 1).reshape(cout, 9 * cin)
        out = (wm @ cols).reshape(cout, B, H, W)
        cache = ("gather", cols, x.shape)
    else:
        ws = w.transpose(2, 3, 0, 1).reshape(9 * cout, cin)
        y = (ws @ x.reshape(cin, n)).reshape(9, cout, B, H, W)
        out = _shift_sum(y, +1)
        cache = ("scatter", x, x.shape)
    out += b[:, None, None, None]
    return out, cache


def conv_backward(dout, cache, w):
    mode, saved, x_shape = cache
    cout, cin = w.shape[:2]
    _, B, H, W = x_shape
    n = B * H * W
    db = dout.sum(axis=(1, 2, 3))
    if mode == "gather":
        wm = w.transpose(0, 2, 3, 1).reshape(cout, 9 * cin)
        d2 = dout.reshape(cout, n)
        dw = (d2 @ saved.T).reshape(cout, KERNEL, KERNEL, cin).transpose(0, 3, 1, 2)
        dx = _shift_sum((wm.T @ d2).reshape(9, cin, B, H, W), -1)
    else:
        ws = w.transpose(2, 3, 0, 1).reshape(9 * cout, cin)
        d = _shifted(dout, -1).reshape(9 * cout, n)
        dx = (ws.T @ d).reshape(cin, B, H, W)
        dw = (d @ saved.reshape(cin, n).T).reshape(KERNEL, KERNEL, cout, cin).transpose(2, 3, 0, 1)
    return dx, np.ascontiguousarray(dw), db


def _lrelu(a):
    return np.where(a > 0, a, LEAKY_SLOPE * a)


def _lrelu_grad(a, g):
    return np.where(a > 0, g, LEAKY_SLOPE * g)


# ---------------------------------------------------------------- forward/backward

def _as_batch(x):
    x = np.asarray(x)
    single = x.ndim == 2 if np.iscomplexobj(x) else x.ndim == 1
    return (x[None] if single else x), single


def encode(params: CodecParams, x) -> np.ndarray:
    """Latent code(s) of shape (M,) or (B, M) for complex input(s)."""
    xb, single = _as_batch(x)
    if xb.shape[1:] != (params.rows, params.cols):
        raise CodecError(f"input shape {xb.shape[1:]} != ({params.rows}, {params.cols})")
    v = complex_to_real(xb, params.dtype)
    z = v @ params["enc_w"].T + params["enc_b"]
    return z[0] if single else z


def _decode_forward(params: CodecParams, z):
    R, C = params.rows, params.cols
    cache = {"z": z}
    u = z @ params["dec_w"].T + params["dec_b"]
    y = np.tanh(u)
    cache["y0"] = y
    y = _planes_to_maps(y, R, C)
    blocks = []
    for b in range(NUM_BLOCKS):
        bc = {}
        h = y
        for i in range(3):
            a, bc[f"conv{i}"] = conv_forward(h, params[f"block{b}_conv{i}_w"],
                                             params[f"block{b}_conv{i}_b"])
            if i < 2:
                bc[f"pre{i}"] = a
                h = _lrelu(a)
            else:
                h = a
        y = np.tanh(y + h)
        bc["out"] = y
        blocks.append(bc)
    cache["blocks"] = blocks
    flat = _maps_to_planes(y)
    norm = np.linalg.norm(flat, axis=1, keepdims=True)
    if np.any(norm == 0):
        raise CodecError("degenerate decoder output")
    out = flat / norm
    cache["norm"] = norm
    cache["out"] = out
    return out, cache


def decode(params: CodecParams, code) -> np.ndarray:
    """Unit-norm complex reconstruction(s) from latent code(s)."""
    z = np.asarray(code, dtype=params.dtype)
    single = z.ndim == 1
    zb = z[None] if single else z
    out, _ = _decode_forward(params, zb)
    xhat = real_to_complex(out, params.rows, params.cols)
    return xhat[0] if single else xhat


def reconstruct(params: CodecParams, x) -> np.ndarray:
    return decode(params, encode(params, x))


def forward(params: CodecParams, v: np.ndarray):
    """Real-layout forward pass (B, 2RC) -> (B, 2RC) with cache for backward."""
    z = v @ params["enc_w"].T + params["enc_b"]
    out, cache = _decode_forward(params, z)
    cache["v"] = v
    return out, cache


def backward(params: CodecParams, cache, dout) -> dict[str, np.ndarray]:
    R, C = params.rows, params.cols
    grads = {}
    out, norm = cache["out"], cache["norm"]
    # through y / ||y||
    dflat = (dout - out * np.sum(out * dout, axis=1, keepdims=True)) / norm
    dy = _planes_to_maps(dflat, R, C)
    for b in reversed(range(NUM_BLOCKS)):
        bc = cache["blocks"][b]
        ds = dy * (1.0 - bc["out"] ** 2)
        dh = ds
        for i in reversed(range(3)):
            if i < 2:
                dh = _lrelu_grad(bc[f"pre{i}"], dh)
            dh, grads[f"block{b}_conv{i}_w"], grads[f"block{b}_conv{i}_b"] = \
                conv_backward(dh, bc[f"conv{i}"], params[f"block{b}_conv{i}_w"])
        dy = ds + dh  # skip connection
    du = _maps_to_planes(dy) * (1.0 - cache["y0"] ** 2)
    grads["dec_w"] = du.T @ cache["z"]
    grads["dec_b"] = du.sum(axis=0)
    dz = du @ params["dec_w"]
    grads["enc_w"] = dz.T @ cache["v"]
    grads["enc_b"] = dz.sum(axis=0)
    return grads


# ---------------------------------------------------------------- loss

def nmse(H, H_hat) -> float:
    """||H - H_hat||_F^2 / ||H||_F^2."""
    H = np.asarray(H)
    H_hat = np.asarray(H_hat)
    den = np.vdot(H, H).real
    if den == 0:
        raise CodecError("NMSE undefined for an all-zero reference")
    d = H - H_hat
    return float(np.vdot(d, d).real / den)


def nmse_db(H, H_hat) -> float:
    return 10.0 * np.log10(nmse(H, H_hat))


def to_db(x):
    return 10.0 * np.log10(x)


def _batch_real(params, batch):
    batch = np.asarray(batch)
    if np.iscomplexobj(batch):
        if batch.ndim == 2:
            batch = batch[None]
        return complex_to_real(batch, params.dtype)
    return batch.astype(params.dtype, copy=False)


def per_sample_nmse(params: CodecParams, batch, chunk: int = 256) -> np.ndarray:
    v = _batch_real(params, batch)
    out = np.empty(len(v))
    for s in range(0, len(v), chunk):
        vb = v[s:s + chunk]
        rec, _ = forward(params, vb)
        out[s:s + chunk] = (np.sum((vb.astype(np.float64) - rec) ** 2, axis=1)
                            / np.sum(vb.astype(np.float64) ** 2, axis=1))
    return out


def loss(params: CodecParams, batch) -> float:
    """Mean NMSE of encode -> decode over the batch."""
    v = _batch_real(params, batch)
    if len(v) == 0:
        raise CodecError("empty batch")
    return float(np.mean(per_sample_nmse(params, v)))


def loss_and_gradients(params: CodecParams, batch):
    v = _batch_real(params, batch)
    if len(v) == 0:
        raise CodecError("empty batch")
    out, cache = forward(params, v)
    diff = out - v
    den = np.sum(v * v, axis=1, keepdims=True)
    per = np.sum(diff * diff, axis=1, keepdims=True) / den
    dout = 2.0 * diff / den / len(v)
    grads = backward(params, cache, dout)
    return float(np.mean(per)), CodecParams(params.rows, params.cols, params.latent_dim, grads)


def gradients(params: CodecParams, batch) -> CodecParams:
    return loss_and_gradients(params, batch)[1]


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 500
    seed: int = 0
    patience: int | None = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


class Adam:
    def __init__(self, params: CodecParams, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.t = 0

    def step(self, params: CodecParams, grads: CodecParams) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in params.tensors.items():
            g = grads.tensors[k]
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def train(params: CodecParams, dataset, cfg: TrainConfig, validation=None):
    """Adam on seeded shuffled mini-batches.

    ``dataset`` is anything array-like of complex samples (or a CsiDataset).
    Returns ``(params, history)`` where history holds per-epoch mean train
    loss (and validation loss when ``validation`` is given). The input
    params are not modified.
    """
    samples = getattr(dataset, "samples", dataset)
    v = _batch_real(params, samples)
    if len(v) == 0:
        raise CodecError("cannot train on an empty dataset")
    params = params.copy()
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    history = {"train_loss": [], "val_loss": []}
    best, best_epoch = np.inf, 0
    val = None if validation is None else getattr(validation, "samples", validation)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(v))
        total = 0.0
        for s in range(0, len(v), cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            batch_loss, grads = loss_and_gradients(params, v[idx])
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {s // cfg.batch_size}")
            total += batch_loss * len(idx)
            opt.step(params, grads)
        history["train_loss"].append(total / len(v))
        monitored = history["train_loss"][-1]
        if val is not None:
            history["val_loss"].append(loss(params, val))
            monitored = history["val_loss"][-1]
        if cfg.patience is not None:
            if monitored < best:
                best, best_epoch = monitored, epoch
            elif epoch - best_epoch >= cfg.patience:
                log.info("early stop at epoch %d", epoch)
                break
    return params, history


# ---------------------------------------------------------------- checkpoints

_CKPT_HEADER = struct.Struct("<4sIIIIII")


def save_checkpoint(params: CodecParams, path, provenance: dict | None = None) -> None:
    """CSIM file: header, architecture descriptor, float32 LE parameters."""
    header = _CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_FORMAT_VERSION, params.rows,
                               params.cols, params.latent_dim, NUM_BLOCKS, KERNEL)
    widths = struct.pack("<I" + "I" * len(BLOCK_WIDTHS), len(BLOCK_WIDTHS), *BLOCK_WIDTHS)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(widths)
        for v in params.tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    meta = {"rows": params.rows, "cols": params.cols, "latent_dim": params.latent_dim,
            "parameter_order": list(params.tensors), **(provenance or {})}
    path.with_name(path.name + ".json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path) -> CodecParams:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size + 4:
        raise CodecError(f"{path}: file too short")
    magic, version, rows, cols, latent, nblocks, kernel = _CKPT_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CodecError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CodecError(f"{path}: unsupported checkpoint version {version}")
    off = _CKPT_HEADER.size
    (nw,) = struct.unpack_from("<I", raw, off)
    widths = struct.unpack_from("<" + "I" * nw, raw, off + 4)
    off += 4 + 4 * nw
    if (nblocks, kernel, tuple(widths)) != (NUM_BLOCKS, KERNEL, BLOCK_WIDTHS):
        raise CodecError(f"{path}: unsupported architecture {nblocks} blocks, widths {widths}")
    shapes = param_shapes(rows, cols, latent)
    expected = off + 4 * sum(int(np.prod(s)) for s in shapes.values())
    if len(raw) != expected:
        raise CodecError(f"{path}: size {len(raw)} bytes, expected {expected}")
    tensors = {}
    for name, shp in shapes.items():
        n = int(np.prod(shp))
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shp).astype(np.float32)
        off += 4 * n
    return CodecParams(rows, cols, latent, tensors)
