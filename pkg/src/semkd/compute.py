"""On-device latency and energy for image capture plus semantic extraction."""

from __future__ import annotations

from dataclasses import dataclass

from .nn import MicroNet, layer_shapes

EXTRACTION_MODES = ("inference", "payload_bits")


@dataclass(frozen=True)
class ComputeCost:
    t_cap: float
    t_ext: float
    t_cmp: float
    e_cmp: float
    flops: int


def capture_time(pixels: float, readout_rate: float, efficiency: float) -> float:
    """Sensor readout time L / (R_read * E_eff)."""
    if not 0 < efficiency <= 1:
        raise ValueError(f"pipeline efficiency must lie in (0, 1], got {efficiency}")
    if pixels <= 0 or readout_rate <= 0:
        raise ValueError("pixel count and readout rate must be > 0")
    return pixels / (readout_rate * efficiency)


def architecture_flops(input_dim: int, width: int, n_blocks: int, classes: int) -> int:
    """FLOPs per inference: 2*fan_in*fan_out + fan_out per dense layer, plus one add per unit per skip."""
    dense = sum(2 * fi * fo + fo for _, fi, fo in layer_shapes(input_dim, width, n_blocks, classes))
    return dense + n_blocks * width


def model_complexity(net: MicroNet) -> int:
    return architecture_flops(net.input_dim, net.width, net.n_blocks, net.classes)


def extraction_time(flops: float, compute_speed: float, passes: float = 1.0) -> float:
    if compute_speed <= 0:
        raise ValueError(f"compute speed must be > 0, got {compute_speed}")
    return flops * passes / compute_speed


def compute_cost(profile, net: MicroNet, mode: str = "inference") -> ComputeCost:
    """Capture + extraction time and energy for one slot.

    ``mode="inference"`` runs the extractor once per slot. ``mode="payload_bits"``
    multiplies the FLOP count by the payload size in bits instead.
    """
    if mode not in EXTRACTION_MODES:
        raise ValueError(f"unknown extraction mode {mode!r}")
    flops = model_complexity(net)
    passes = 1.0 if mode == "inference" else profile.payload_bits
    t_cap = capture_time(profile.sensor_pixels, profile.readout_rate, profile.pipeline_efficiency)
    t_ext = extraction_time(flops, profile.compute_flops, passes)
    return ComputeCost(
        t_cap=t_cap,
        t_ext=t_ext,
        t_cmp=t_cap + t_ext,
        e_cmp=profile.capture_power_w * t_cap + profile.extraction_power_w * t_ext,
        flops=flops,
    )
