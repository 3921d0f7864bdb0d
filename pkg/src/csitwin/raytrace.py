"""Image-method ray tracer for box-world scenes.

Only specular reflections off the vertical facades of buildings are
traced (no diffraction, no scattering, no ground bounce). Foliage does
not block, it attenuates each traversed segment by a fixed dB/m figure.

The tracer is vectorised over UE positions: every candidate facade
sequence is evaluated for all UEs at once, then paths are gathered per
UE and the strongest ``max_paths`` are kept.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .scene import Scene

SPEED_OF_LIGHT = 299_792_458.0
DEFAULT_CARRIER_FREQ = 3.5e9
DEFAULT_MAX_PATHS = 25

# overlap below this (metres) counts as touching, not entering
_BLOCK_TOL = 1e-6


@dataclass(frozen=True)
class PathParams:
    gain: complex
    delay: float
    azimuth: float
    elevation: float
    order: int = 0

    @property
    def power(self) -> float:
        return abs(self.gain) ** 2


@dataclass(frozen=True)
class _Facade:
    building: int
    axis: int          # 0: plane x = coord, 1: plane y = coord
    coord: float
    normal: float      # +1 / -1, direction of the outer side along `axis`
    lo: np.ndarray     # rectangle bounds, full 3-vectors (axis entry ignored)
    hi: np.ndarray
    loss_db: float


def _facades(scene: Scene) -> list[_Facade]:
    out = []
    for i, b in enumerate(scene.buildings):
        lo = np.asarray(b.min_corner)
        hi = np.asarray(b.max_corner)
        for axis in (0, 1):
            out.append(_Facade(i, axis, lo[axis], -1.0, lo, hi, b.reflection_loss_db))
            out.append(_Facade(i, axis, hi[axis], +1.0, lo, hi, b.reflection_loss_db))
    return out


def segment_box_overlap(p, q, lo, hi, strict: bool = False) -> np.ndarray:
    """Length (m) of each segment p->q lying inside the box [lo, hi].

    ``p`` and ``q`` are (n, 3) arrays (or 3-vectors). With ``strict`` the
    open box is used, so a segment running along a face counts as outside.
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    d = q - p
    length = np.linalg.norm(d, axis=1)
    t0 = np.zeros(len(p))
    t1 = np.ones(len(p))
    for a in range(3):
        da = d[:, a]
        pa = p[:, a]
        moving = np.abs(da) > 1e-12
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            ta = (lo[a] - pa) / da
            tb = (hi[a] - pa) / da
        tmin = np.where(moving, np.minimum(ta, tb), -np.inf)
        tmax = np.where(moving, np.maximum(ta, tb), np.inf)
        # midpoint keeps the test independent of segment direction
        mid = 0.5 * (pa + q[:, a])
        if strict:
            inside = (mid > lo[a]) & (mid < hi[a])
        else:
            inside = (mid >= lo[a]) & (mid <= hi[a])
        # a segment parallel to this slab is either always in or never in
        tmax = np.where(~moving & ~inside, -np.inf, tmax)
        t0 = np.maximum(t0, tmin)
        t1 = np.minimum(t1, tmax)
    return np.clip(t1 - t0, 0.0, None) * length


def segment_blocked(p, q, boxes) -> np.ndarray:
    """True where the segment p->q enters the interior of any box."""
    p = np.atleast_2d(np.asarray(p, dtype=float))
    blocked = np.zeros(len(p), dtype=bool)
    for b in boxes:
        lo = np.asarray(b.min_corner)
        hi = np.asarray(b.max_corner)
        blocked |= segment_box_overlap(p, q, lo, hi, strict=True) > _BLOCK_TOL
    return blocked


def _foliage_loss_db(p, q, foliage) -> np.ndarray:
    loss = np.zeros(len(np.atleast_2d(p)))
    for f in foliage:
        lo = np.asarray(f.min_corner)
        hi = np.asarray(f.max_corner)
        loss += f.attenuation_db_per_m * segment_box_overlap(p, q, lo, hi)
    return loss


def _mirror(point: np.ndarray, f: _Facade) -> np.ndarray:
    m = point.copy()
    m[..., f.axis] = 2.0 * f.coord - m[..., f.axis]
    return m


def _facade_sequences(n_facades: int, order: int):
    yield ()
    if order >= 1:
        for i in range(n_facades):
            yield (i,)
    if order >= 2:
        for i, j in itertools.product(range(n_facades), repeat=2):
            if i != j:
                yield (i, j)


def _trace_sequence(scene, bs, ue, seq, facades):
    """Evaluate one facade sequence for all UEs.

    Returns (valid mask, total length, extra loss dB, first departure point).
    """
    n = len(ue)
    images = [bs]
    for k in seq:
        images.append(_mirror(images[-1], facades[k]))

    # walk backwards from the UE, intersecting each facade plane
    points = [ue]
    valid = np.ones(n, dtype=bool)
    q = ue
    for level in range(len(seq), 0, -1):
        f = facades[seq[level - 1]]
        img = images[level]
        a = f.axis
        denom = q[:, a] - img[a]
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            t = (f.coord - img[a]) / denom
        valid &= np.isfinite(t) & (t > 0.0) & (t < 1.0)
        t = np.where(valid, t, 0.5)
        pt = img + t[:, None] * (q - img)
        pt[:, a] = f.coord
        for c in range(3):
            if c == a:
                continue
            valid &= (pt[:, c] >= f.lo[c]) & (pt[:, c] <= f.hi[c])
        # receiving end must sit on the outer side of the facade
        valid &= f.normal * (q[:, a] - f.coord) > 0.0
        points.append(pt)
        q = pt
    points.append(np.broadcast_to(bs, ue.shape))
    points = points[::-1]  # bs, p1, ..., ue

    if len(seq) >= 1:
        # the BS (or previous point) must also face the first facade
        f = facades[seq[0]]
        valid &= f.normal * (bs[f.axis] - f.coord) > 0.0

    length = np.zeros(n)
    extra_db = np.zeros(n)
    for s, e in zip(points[:-1], points[1:]):
        if not valid.any():
            break
        length += np.linalg.norm(e - s, axis=1)
        valid &= ~segment_blocked(s, e, scene.buildings)
        extra_db += _foliage_loss_db(s, e, scene.foliage)
    for k in seq:
        extra_db += facades[k].loss_db
    return valid, length, extra_db, points[1]


def trace_batch(scene: Scene, ue_positions, carrier_freq: float = DEFAULT_CARRIER_FREQ,
                max_paths: int = DEFAULT_MAX_PATHS) -> list[list[PathParams]]:
    """Trace paths from the scene BS to every UE in ``ue_positions`` (n, 3)."""
    ue = np.atleast_2d(np.asarray(ue_positions, dtype=float))
    bs = np.asarray(scene.bs.position, dtype=float)
    wavelength = SPEED_OF_LIGHT / carrier_freq
    facades = _facades(scene)

    per_ue: list[list[tuple]] = [[] for _ in range(len(ue))]
    for seq in _facade_sequences(len(facades), scene.max_reflection_order):
        valid, length, extra_db, first = _trace_sequence(scene, bs, ue, seq, facades)
        if not valid.any():
            continue
        amp = wavelength / (4.0 * np.pi * length) * 10.0 ** (-extra_db / 20.0)
        gain = amp * np.exp(-2j * np.pi * length / wavelength)
        v = first - bs
        az = np.arctan2(v[:, 1], v[:, 0])
        el = np.arctan2(v[:, 2], np.hypot(v[:, 0], v[:, 1]))
        for u in np.flatnonzero(valid):
            per_ue[u].append((amp[u], complex(gain[u]), length[u] / SPEED_OF_LIGHT,
                              float(az[u]), float(el[u]), len(seq)))

    out = []
    for paths in per_ue:
        # stable sort keeps candidate order among equal amplitudes
        paths.sort(key=lambda p: -p[0])
        out.append([PathParams(g, float(t), a, e, o) for _, g, t, a, e, o in paths[:max_paths]])
    return out


def trace_paths(scene: Scene, ue_position, carrier_freq: float = DEFAULT_CARRIER_FREQ,
                max_paths: int = DEFAULT_MAX_PATHS) -> list[PathParams]:
    """All LOS and specular-reflection paths from the BS to one UE.

    Returns an empty list when every candidate path is blocked.
    """
    return trace_batch(scene, [ue_position], carrier_freq, max_paths)[0]
