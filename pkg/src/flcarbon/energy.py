"""Per-round energy of FA devices, the parameter server and CFA devices, plus carbon ledgers.

Energies are in Joule, link efficiencies in bit/Joule, carbon intensities in
kgCO2-eq/kWh and emissions in kgCO2-eq. The Joule to kWh conversion (/3.6e6)
happens inside the ledger.
"""

from __future__ import annotations

import bisect
import csv
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

from .compression import CompressionPolicy, model_bits, payload_bits

log = logging.getLogger(__name__)

JOULE_PER_KWH = 3.6e6
SERVER_ID = 0


@dataclass(frozen=True)
class DeviceEnergy:
    """Per-device compute costs for one round, in Joule.

    ``e_q_min_j``/``e_q_max_j`` bound the compression cost over delta in [0.1, 1];
    ``e_global_j`` is the cost of one neighbor averaging step (CFA only).
    """

    e_comp_j: float = 3.51
    e_q_min_j: float = 0.04
    e_q_max_j: float = 0.14
    e_sleep_j: float = 0.12
    e_global_j: float = 0.06

    def __post_init__(self) -> None:
        for name in ("e_comp_j", "e_q_min_j", "e_q_max_j", "e_sleep_j", "e_global_j"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.e_q_min_j > self.e_q_max_j:
            raise ValueError("e_q_min_j must not exceed e_q_max_j")


@dataclass(frozen=True)
class ServerEnergy:
    """Parameter-server costs: one aggregation step per device, sleep per round (Joule)."""

    e_global_j: float = 0.24
    e_sleep_j: float = 0.70

    def __post_init__(self) -> None:
        if self.e_global_j < 0 or self.e_sleep_j < 0:
            raise ValueError("server energies must be non-negative")


@dataclass(frozen=True)
class LinkEfficiencies:
    ee_downlink_bit_per_j: float = 10_000.0
    ee_uplink_bit_per_j: float = 10_000.0
    ee_sidelink_bit_per_j: float = 10_000.0

    def __post_init__(self) -> None:
        for name in ("ee_downlink_bit_per_j", "ee_uplink_bit_per_j", "ee_sidelink_bit_per_j"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")

    @classmethod
    def uniform(cls, ee_bit_per_j: float) -> LinkEfficiencies:
        return cls(ee_bit_per_j, ee_bit_per_j, ee_bit_per_j)


def quantization_energy(profile: DeviceEnergy, delta: float) -> float:
    """Affine in delta between (0.1, e_q_min) and (1.0, e_q_max), clamped at both ends."""
    frac = min(max((delta - 0.1) / 0.9, 0.0), 1.0)
    return profile.e_q_min_j + frac * (profile.e_q_max_j - profile.e_q_min_j)


def fa_device_energy(
    profile: DeviceEnergy, links: LinkEfficiencies, policy: CompressionPolicy, n_params: int
) -> float:
    b_w = model_bits(policy, n_params)
    return (
        profile.e_comp_j
        + b_w / links.ee_downlink_bit_per_j
        + payload_bits(policy, n_params) / links.ee_uplink_bit_per_j
        + quantization_energy(profile, policy.delta)
        + profile.e_sleep_j
    )


def ps_energy(
    profile: ServerEnergy,
    links: LinkEfficiencies,
    policies: Sequence[CompressionPolicy],
    n_params: int,
    n_bits_clear: int = 32,
) -> float:
    """Server energy for one round with one policy per participating device.

    Publication of the global model is charged at the uplink efficiency and
    collection at the downlink efficiency, following the server-side labeling.
    """
    if not policies:
        log.warning("parameter-server energy evaluated with zero participating devices")
    b_w = n_params * n_bits_clear
    collected = sum(payload_bits(p, n_params) for p in policies)
    return (
        len(policies) * profile.e_global_j
        + b_w / links.ee_uplink_bit_per_j
        + collected / links.ee_downlink_bit_per_j
        + profile.e_sleep_j
    )


def cfa_device_energy(
    profile: DeviceEnergy,
    links: LinkEfficiencies,
    own_policy: CompressionPolicy,
    neighbor_policies: Sequence[CompressionPolicy],
    n_params: int,
) -> float:
    n_neighbors = len(neighbor_policies)
    if n_neighbors < 1:
        raise ValueError("a CFA device needs at least one neighbor")
    received = sum(payload_bits(p, n_params) for p in neighbor_policies)
    return (
        profile.e_comp_j
        + n_neighbors * profile.e_global_j
        + received / links.ee_sidelink_bit_per_j
        + payload_bits(own_policy, n_params) / links.ee_sidelink_bit_per_j
        + quantization_energy(profile, own_policy.delta)
        + profile.e_sleep_j
    )


# ---------------------------------------------------------------------------
# Carbon intensity and ledgers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CarbonIntensitySchedule:
    """Stepwise carbon intensity for one entity (0 is the parameter server).

    Round ``i`` happens at ``start_time_s + i * round_duration_s`` and uses the last
    step whose start time is not after it (the first step also covers earlier times).
    """

    entity: int
    steps: tuple[tuple[float, float], ...]
    round_duration_s: float = 60.0
    start_time_s: float = 0.0

    def __post_init__(self) -> None:
        steps = tuple((float(t), float(ci)) for t, ci in self.steps)
        object.__setattr__(self, "steps", steps)
        if not steps:
            raise ValueError(f"entity {self.entity}: empty intensity schedule")
        starts = [t for t, _ in steps]
        if starts != sorted(starts):
            raise ValueError(f"entity {self.entity}: steps must be sorted by start time")
        if any(ci <= 0 for _, ci in steps):
            raise ValueError(f"entity {self.entity}: intensities must be positive")
        if self.round_duration_s <= 0:
            raise ValueError("round_duration_s must be positive")

    @classmethod
    def constant(cls, entity: int, intensity: float, round_duration_s: float = 60.0) -> CarbonIntensitySchedule:
        return cls(entity, ((0.0, intensity),), round_duration_s)

    def intensity_at(self, round_index: int) -> float:
        t = self.start_time_s + round_index * self.round_duration_s
        starts = [s for s, _ in self.steps]
        pos = max(bisect.bisect_right(starts, t) - 1, 0)
        return self.steps[pos][1]


def load_ci_schedules(
    path: str | Path, round_duration_s: float = 60.0, start_time_s: float = 0.0
) -> dict[int, CarbonIntensitySchedule]:
    """CSV with columns entity_id, start_time_s, intensity_kg_per_kwh."""
    per_entity: dict[int, list[tuple[float, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"entity_id", "start_time_s", "intensity_kg_per_kwh"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            per_entity.setdefault(int(row["entity_id"]), []).append(
                (float(row["start_time_s"]), float(row["intensity_kg_per_kwh"]))
            )
    return {
        k: CarbonIntensitySchedule(k, tuple(sorted(steps)), round_duration_s, start_time_s)
        for k, steps in per_entity.items()
    }


@dataclass(frozen=True)
class LedgerEntry:
    round: int
    energy_j: float
    intensity: float
    delta_c_kg: float


@dataclass
class CarbonLedger:
    """Cumulative emissions per entity, updated once per round."""

    cumulative: dict[int, float] = field(default_factory=dict)
    per_round: dict[int, list[LedgerEntry]] = field(default_factory=dict)

    def record(self, entity: int, round_index: int, energy_j: float, intensity: float) -> float:
        history = self.per_round.setdefault(entity, [])
        if history and round_index <= history[-1].round:
            raise ValueError(
                f"entity {entity}: round {round_index} after round {history[-1].round}"
            )
        if energy_j < 0 or intensity < 0:
            raise ValueError("energy and intensity must be non-negative")
        delta_c = energy_j * intensity / JOULE_PER_KWH
        history.append(LedgerEntry(round_index, energy_j, intensity, delta_c))
        self.cumulative[entity] = self.cumulative.get(entity, 0.0) + delta_c
        return delta_c

    def entities(self) -> list[int]:
        return sorted(self.per_round)


def ledger_update(
    ledger: CarbonLedger,
    entity: int,
    round_index: int,
    energy_j: float,
    schedule: CarbonIntensitySchedule,
) -> CarbonLedger:
    ledger.record(entity, round_index, energy_j, schedule.intensity_at(round_index))
    return ledger


def total_carbon(ledger: CarbonLedger, protocol: str) -> float:
    """Total emissions: devices plus the server for FA, devices only for CFA."""
    protocol = protocol.lower()
    if protocol not in ("fa", "cfa"):
        raise ValueError(f"unknown protocol {protocol!r}")
    include_server = protocol == "fa"
    return math.fsum(
        entry.delta_c_kg
        for entity, history in ledger.per_round.items()
        if entity != SERVER_ID or include_server
        for entry in history
    )
