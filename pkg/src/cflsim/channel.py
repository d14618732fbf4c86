"""Wireless link and energy primitives.

Deterministic log-distance path loss feeds SNR and a Shannon-capacity
rate; packet loss follows a waterfall curve in SNR; energy uses the
standard P*t transmit and kappa*f^2*cycles compute models.  Randomness
enters the simulation only through packet-error draws, never here.

Units are fixed: meters, seconds, Hz, watts, joules. No unit inference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class ChannelParams:
    """Shared wireless parameters of the scenario.

    waterfall_m shapes the packet-error curve; 0 disables channel errors.
    """

    bandwidth_hz: float
    noise_density_w_per_hz: float
    pathloss_exponent: float
    ref_gain: float  # dimensionless gain at 1 m
    waterfall_m: float = 0.0

    def __post_init__(self) -> None:
        if not self.bandwidth_hz > 0:
            raise ValueError("bandwidth must be positive")
        if not self.noise_density_w_per_hz > 0:
            raise ValueError("noise density must be positive")
        if self.pathloss_exponent < 1:
            raise ValueError("pathloss exponent must be >= 1")
        if not self.ref_gain > 0:
            raise ValueError("reference gain must be positive")
        if self.waterfall_m < 0:
            raise ValueError("waterfall parameter must be nonnegative")


@dataclass(frozen=True)
class DeviceRadio:
    """Per-device transmit and compute knobs."""

    tx_power_w: float
    cpu_cycles_per_sample: float
    cpu_freq_hz: float
    eff_capacitance: float  # J*s^2 per cycle (kappa)

    def __post_init__(self) -> None:
        for name in ("tx_power_w", "cpu_cycles_per_sample", "cpu_freq_hz",
                     "eff_capacitance"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class LinkStats:
    """Resolved single-link figures for a given payload."""

    snr: float
    rate_bps: float
    delay_s: float
    per: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.per <= 1.0:
            raise ValueError("per must be a probability")
        if self.rate_bps < 0 or self.delay_s < 0:
            raise ValueError("rate and delay must be nonnegative")


def path_gain(distance_m: float, cp: ChannelParams) -> float:
    """Log-distance gain: ref_gain * d^-alpha."""
    if not distance_m > 0:
        raise ValueError("distance must be positive")
    return cp.ref_gain * distance_m ** (-cp.pathloss_exponent)


def snr(tx_power_w: float, gain: float, cp: ChannelParams) -> float:
    if not tx_power_w > 0:
        raise ValueError("tx power must be positive")
    if not gain > 0:
        raise ValueError("gain must be positive")
    return tx_power_w * gain / (cp.noise_density_w_per_hz * cp.bandwidth_hz)


def rate(snr_value: float, cp: ChannelParams) -> float:
    """Shannon rate B * log2(1 + SNR) in bit/s."""
    if snr_value < 0:
        raise ValueError("snr must be nonnegative")
    return cp.bandwidth_hz * math.log2(1.0 + snr_value)


def tx_delay(payload_bits: float, rate_bps: float) -> float:
    """Transmission delay payload/rate; an unusable (zero-rate) link
    yields an infinite-delay sentinel rather than an error."""
    if payload_bits < 0:
        raise ValueError("payload must be nonnegative")
    if payload_bits == 0:
        return 0.0
    if rate_bps <= 0:
        return math.inf
    return payload_bits / rate_bps


def per(snr_value: float, cp: ChannelParams) -> float:
    """Waterfall packet-error probability 1 - exp(-m / SNR).

    Strictly decreasing in SNR; identically 0 in error-free mode (m = 0).
    """
    if cp.waterfall_m == 0.0:
        return 0.0
    if not snr_value > 0:
        raise ValueError("snr must be positive")
    return 1.0 - math.exp(-cp.waterfall_m / snr_value)


def link_stats(distance_m: float, payload_bits: float, tx_power_w: float,
               cp: ChannelParams) -> LinkStats:
    """Resolve the full gain -> SNR -> rate -> delay/PER chain for one link."""
    g = path_gain(distance_m, cp)
    s = snr(tx_power_w, g, cp)
    r = rate(s, cp)
    return LinkStats(snr=s, rate_bps=r, delay_s=tx_delay(payload_bits, r),
                     per=per(s, cp))


def tx_energy(tx_power_w: float, delay_s: float) -> float:
    """Transmit energy P * t."""
    if tx_power_w < 0 or delay_s < 0:
        raise ValueError("inputs must be nonnegative")
    return tx_power_w * delay_s


def comp_time(samples: int, steps: int, r: DeviceRadio) -> float:
    """Local-training time cycles*samples*steps / f."""
    if samples < 0 or steps < 0:
        raise ValueError("inputs must be nonnegative")
    return r.cpu_cycles_per_sample * samples * steps / r.cpu_freq_hz


def comp_energy(samples: int, steps: int, r: DeviceRadio) -> float:
    """Local-training energy kappa * f^2 * cycles*samples*steps."""
    if samples < 0 or steps < 0:
        raise ValueError("inputs must be nonnegative")
    return (r.eff_capacitance * r.cpu_freq_hz ** 2
            * r.cpu_cycles_per_sample * samples * steps)
