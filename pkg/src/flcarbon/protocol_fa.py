"""Parameter-server federated averaging with compressed uplink and uncompressed downlink."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .compression import CompressedUpdate, CompressionPolicy, compress, decompress, model_bits
from .model import DatasetPartition, MlpArchitecture, OptimizerConfig, local_optimize


@dataclass
class FaDevice:
    device_id: int
    W: np.ndarray
    partition: DatasetPartition


@dataclass
class FaServer:
    W_global: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"aggregation weights must be >= 0 and sum to 1, got {self.weights}")


def size_weights(partitions: Sequence[DatasetPartition]) -> np.ndarray:
    sizes = np.array([len(p) for p in partitions], dtype=np.float64)
    return sizes / sizes.sum()


def fa_device_round(
    device: FaDevice,
    arch: MlpArchitecture,
    policy: CompressionPolicy,
    optimizer: OptimizerConfig,
    opt_rng: np.random.Generator,
    comp_rng: np.random.Generator,
) -> tuple[CompressedUpdate, np.ndarray]:
    """Run the local optimizer and compress ``W_half - W``. The device state is untouched."""
    w_half = local_optimize(device.W, arch, device.partition, optimizer, opt_rng)
    return compress(w_half - device.W, policy, comp_rng), w_half


def fa_server_aggregate(server: FaServer, updates: Sequence[CompressedUpdate]) -> np.ndarray:
    """``W + sum_k sigma_k * decompress(update_k)``; returns the new global model."""
    if len(updates) != server.weights.size:
        raise ValueError(f"got {len(updates)} updates for {server.weights.size} devices")
    n_params = server.W_global.size
    for u in updates:
        if u.n_params != n_params:
            raise ValueError(f"update has {u.n_params} parameters, global model has {n_params}")
    step = np.zeros(n_params)
    for sigma, u in zip(server.weights, updates):
        step += sigma * decompress(u)
    return server.W_global + step


def fa_broadcast(server: FaServer, devices: Sequence[FaDevice], policy: CompressionPolicy) -> int:
    """Copy the global model into every device; returns downlink bits charged per device."""
    for d in devices:
        d.W = server.W_global.copy()
    return model_bits(policy, server.W_global.size)


@dataclass
class FaRound:
    updates: list[CompressedUpdate]
    w_halves: list[np.ndarray]


def fa_round(
    server: FaServer,
    devices: Sequence[FaDevice],
    arch: MlpArchitecture,
    policy: CompressionPolicy,
    optimizer: OptimizerConfig,
    rngs: Sequence[tuple[np.random.Generator, np.random.Generator]],
) -> FaRound:
    """One lockstep round: all devices train and upload, the server aggregates and broadcasts."""
    updates, halves = [], []
    for device, (opt_rng, comp_rng) in zip(devices, rngs):
        update, w_half = fa_device_round(device, arch, policy, optimizer, opt_rng, comp_rng)
        updates.append(update)
        halves.append(w_half)
    server.W_global = fa_server_aggregate(server, updates)
    fa_broadcast(server, devices, policy)
    return FaRound(updates, halves)
