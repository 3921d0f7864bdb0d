"""Wideband geometric MIMO-OFDM channel from path parameters.

Delay-domain taps are built from the path list with a pulse-shaping
filter, then mapped to per-subcarrier channels. ``sum_rate`` evaluates the
downlink rate of matched-filter precoding built from a (possibly
imperfect) channel estimate.

Internally subcarriers are indexed 0..K-1. Shifting to 1..K multiplies
every row by a fixed per-tap phase, which changes neither NMSE nor rates.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .raytrace import PathParams


@dataclass(frozen=True)
class SystemConfig:
    num_subcarriers: int = 256
    num_antennas: int = 32
    carrier_freq: float = 3.5e9
    bandwidth: float = 30.72e6
    max_delay_taps: int = 64
    transmit_power: float = 1.0
    noise_variance: float = 1e-7
    pulse_shape: str = "sinc"
    rolloff: float = 0.35
    array_axis: tuple[float, float, float] = (1.0, 0.0, 0.0)

    def __post_init__(self):
        if not (self.num_subcarriers >= self.max_delay_taps >= 1):
            raise ValueError("need num_subcarriers >= max_delay_taps >= 1")
        if self.num_antennas < 1:
            raise ValueError("num_antennas must be >= 1")
        if self.bandwidth <= 0 or self.transmit_power <= 0 or self.noise_variance <= 0:
            raise ValueError("bandwidth, transmit_power and noise_variance must be > 0")
        if self.pulse_shape not in ("sinc", "raised-cosine"):
            raise ValueError(f"unknown pulse shape {self.pulse_shape!r}")
        object.__setattr__(self, "array_axis", tuple(float(a) for a in self.array_axis))

    @property
    def sample_period(self) -> float:
        return 1.0 / self.bandwidth


@dataclass
class ChannelMatrix:
    """K x N_t downlink CSI; row k is h_k^H."""
    entries: np.ndarray
    scenario: str = ""
    grid_index: int = -1

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)

    @property
    def shape(self):
        return self.entries.shape


def pulse(t, cfg: SystemConfig) -> np.ndarray:
    """Pulse-shaping filter p(t), t in seconds."""
    x = np.asarray(t, dtype=float) / cfg.sample_period
    if cfg.pulse_shape == "sinc":
        return np.sinc(x)
    beta = cfg.rolloff
    if beta == 0:
        return np.sinc(x)
    denom = 1.0 - (2.0 * beta * x) ** 2
    singular = np.abs(denom) < 1e-10
    safe = np.where(singular, 1.0, denom)
    val = np.sinc(x) * np.cos(np.pi * beta * x) / safe
    return np.where(singular, np.pi / 4.0 * np.sinc(1.0 / (2.0 * beta)), val)


def array_response(azimuth, elevation, num_antennas: int,
                   axis: Sequence[float] = (1.0, 0.0, 0.0)) -> np.ndarray:
    """Half-wavelength ULA steering vector along ``axis``.

    Vectorises over angle arrays: the result has shape ``(*angles, N_t)``.
    """
    if num_antennas < 1:
        raise ValueError("num_antennas must be >= 1")
    az = np.asarray(azimuth, dtype=float)
    el = np.asarray(elevation, dtype=float)
    ax = np.asarray(axis, dtype=float)
    proj = (np.cos(el) * np.cos(az) * ax[0]
            + np.cos(el) * np.sin(az) * ax[1]
            + np.sin(el) * ax[2])
    n = np.arange(num_antennas)
    return np.exp(1j * np.pi * np.multiply.outer(proj, n))


def delay_domain_channel(paths: Sequence[PathParams], cfg: SystemConfig) -> np.ndarray:
    """D x N_t matrix whose row d is h_d^T = sum_l alpha_l p(d T_S - tau_l) a_l^T."""
    D, N = cfg.max_delay_taps, cfg.num_antennas
    if not paths:
        return np.zeros((D, N), dtype=complex)
    alpha = np.array([p.gain for p in paths], dtype=complex)
    tau = np.array([p.delay for p in paths], dtype=float)
    steer = array_response([p.azimuth for p in paths], [p.elevation for p in paths],
                           N, cfg.array_axis)
    taps = pulse(np.arange(D)[:, None] * cfg.sample_period - tau[None, :], cfg)
    return taps @ (alpha[:, None] * steer)


def frequency_channel(h_delay, cfg: SystemConfig, scenario: str = "",
                      grid_index: int = -1) -> ChannelMatrix:
    """Stack h_k^H, h_k = sum_d h_d exp(-j 2 pi k d / K), into a K x N_t matrix."""
    h_delay = np.asarray(h_delay)
    K = cfg.num_subcarriers
    if h_delay.shape[0] > K:
        raise ValueError("more delay taps than subcarriers")
    hk = np.fft.fft(h_delay, n=K, axis=0)
    return ChannelMatrix(np.conj(hk), scenario, grid_index)


def synchronize(paths: Sequence[PathParams]) -> list[PathParams]:
    """Shift delays so the earliest path arrives at t = 0 (receiver timing sync)."""
    if not paths:
        return []
    t0 = min(p.delay for p in paths)
    return [PathParams(p.gain, p.delay - t0, p.azimuth, p.elevation, p.order) for p in paths]


def sum_rate(H_true, H_hat, cfg: SystemConfig) -> float:
    """Downlink sum rate (bits/s/Hz) with per-subcarrier matched-filter precoders from H_hat."""
    H = np.asarray(H_true)
    Hh = np.asarray(H_hat)
    if H.shape != Hh.shape:
        raise ValueError(f"shape mismatch {H.shape} vs {Hh.shape}")
    K, N = cfg.num_subcarriers, cfg.num_antennas
    if H.shape != (K, N):
        raise ValueError(f"channel shape {H.shape} does not match config ({K}, {N})")
    norms = np.linalg.norm(Hh, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    # rows are h^H, so h_k^H f_k = sum_n H[k, n] * conj(Hh[k, n]) / ||Hh_k||
    gain = np.abs(np.sum(H * np.conj(Hh), axis=1)) ** 2 / safe ** 2
    gain = np.where(norms > 0, gain, 0.0)
    snr = cfg.transmit_power / (K * N * cfg.noise_variance)
    return float(np.sum(np.log2(1.0 + snr * gain)))
