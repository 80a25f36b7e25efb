"""Uplink model: Rayleigh block fading, Shannon rate, upload time and energy."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ZeroRateError(ValueError):
    """Raised when an upload is attempted over a link with zero capacity."""


@dataclass(frozen=True)
class ChannelDraw:
    small_scale: float   # g, |CN(0,1)|^2
    large_scale: float   # alpha
    gain: float          # h = alpha * g


def large_scale_fading(path_gain: float, shadowing: float, distance: float, exponent: float) -> float:
    """alpha = G * beta * d^-phi."""
    if distance <= 0:
        raise ValueError(f"distance must be > 0, got {distance}")
    if path_gain < 0 or shadowing < 0:
        raise ValueError("path gain and shadowing must be non-negative")
    if exponent < 0:
        raise ValueError(f"path-loss exponent must be >= 0, got {exponent}")
    return path_gain * shadowing * distance ** (-exponent)


def sample_small_scale(rng: np.random.Generator) -> float:
    # unit-variance circular complex Gaussian: each quadrature ~ N(0, 1/2)
    re, im = rng.standard_normal(2)
    return float((re * re + im * im) / 2.0)


def sample_channel(profile, rng: np.random.Generator) -> ChannelDraw:
    alpha = large_scale_fading(profile.path_gain, profile.shadowing, profile.distance_m,
                               profile.pathloss_exponent)
    g = sample_small_scale(rng)
    return ChannelDraw(small_scale=g, large_scale=alpha, gain=alpha * g)


def transmission_rate(bandwidth: float, power: float, gain: float, noise_power: float) -> float:
    """Shannon rate B*log2(1 + P*h/sigma^2) in bit/s."""
    if noise_power <= 0:
        raise ValueError(f"noise power must be > 0, got {noise_power}")
    if bandwidth < 0 or power < 0 or gain < 0:
        raise ValueError("bandwidth, power and gain must be non-negative")
    return bandwidth * math.log2(1.0 + power * gain / noise_power)


def comm_time(payload_bits: float, rate: float) -> float:
    if payload_bits < 0:
        raise ValueError("payload must be non-negative")
    if rate <= 0:
        raise ZeroRateError("zero rate")
    return payload_bits / rate


def comm_energy(duration: float, power: float) -> float:
    if duration < 0 or power < 0:
        raise ValueError("duration and power must be non-negative")
    return duration * power
