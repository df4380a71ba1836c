"""Consensus federated averaging over a device graph using CHOCO-SGD style compressed gossip.

Each device keeps its model ``W`` plus two trackers: ``X`` (the compressed image of
its own model that neighbors know about) and ``S`` (the mixing-weighted sum of its
closed neighborhood's ``X``). The consensus correction is ``gamma * (S - X)``.
"""

from __future__ import annotations

from collections import deque
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .compression import CompressedUpdate, CompressionPolicy, compress, decompress
from .model import DatasetPartition, MlpArchitecture, OptimizerConfig, local_optimize


@dataclass(frozen=True)
class Topology:
    """Undirected graph over devices indexed 0..K-1 (device id = index + 1)."""

    neighbors: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        nbrs = tuple(tuple(sorted(set(n))) for n in self.neighbors)
        object.__setattr__(self, "neighbors", nbrs)
        k = len(nbrs)
        if k < 1:
            raise ValueError("topology needs at least one device")
        for i, ns in enumerate(nbrs):
            for j in ns:
                if not 0 <= j < k:
                    raise ValueError(f"device {i} lists unknown neighbor {j}")
                if j == i:
                    raise ValueError(f"device {i} lists itself as a neighbor")
                if i not in nbrs[j]:
                    raise ValueError(f"edge {i}-{j} is not symmetric")

    @property
    def n_devices(self) -> int:
        return len(self.neighbors)

    def degree(self, k: int) -> int:
        return len(self.neighbors[k])

    def is_connected(self) -> bool:
        seen = {0}
        queue = deque([0])
        while queue:
            for j in self.neighbors[queue.popleft()]:
                if j not in seen:
                    seen.add(j)
                    queue.append(j)
        return len(seen) == self.n_devices

    @classmethod
    def fully_connected(cls, n_devices: int) -> Topology:
        return cls(tuple(tuple(j for j in range(n_devices) if j != i) for i in range(n_devices)))

    @classmethod
    def ring(cls, n_devices: int) -> Topology:
        if n_devices < 3:
            return cls.fully_connected(n_devices)
        return cls(tuple(((i - 1) % n_devices, (i + 1) % n_devices) for i in range(n_devices)))

    @classmethod
    def random_regular(cls, n_devices: int, degree: int, seed: int | Sequence[int], max_tries: int = 1000) -> Topology:
        """Connected random ``degree``-regular graph via the configuration model with rejection."""
        if degree >= n_devices or (degree * n_devices) % 2 or degree < 1:
            raise ValueError(f"no {degree}-regular graph on {n_devices} nodes")
        rng = np.random.default_rng(seed)
        for _ in range(max_tries):
            stubs = rng.permutation(np.repeat(np.arange(n_devices), degree))
            pairs = stubs.reshape(-1, 2)
            if np.any(pairs[:, 0] == pairs[:, 1]):
                continue
            edges = {tuple(sorted(p)) for p in pairs.tolist()}
            if len(edges) != len(pairs):
                continue
            adj: list[list[int]] = [[] for _ in range(n_devices)]
            for a, b in edges:
                adj[a].append(b)
                adj[b].append(a)
            topo = cls(tuple(tuple(a) for a in adj))
            if topo.is_connected():
                return topo
        raise RuntimeError(f"failed to sample a connected {degree}-regular graph")


def make_topology(kind: str, n_devices: int, degree: int | None = None, seed: int | Sequence[int] = 0) -> Topology:
    if kind == "fully_connected":
        return Topology.fully_connected(n_devices)
    if kind == "ring":
        return Topology.ring(n_devices)
    if kind == "random_regular":
        if degree is None:
            raise ValueError("random_regular topology needs a degree")
        return Topology.random_regular(n_devices, degree, seed)
    raise ValueError(f"unknown topology kind {kind!r}")


def build_mixing_matrix(topology: Topology) -> np.ndarray:
    """Metropolis-Hastings weights: symmetric, doubly stochastic, supported on the graph."""
    if not topology.is_connected():
        raise ValueError("topology is disconnected")
    k = topology.n_devices
    omega = np.zeros((k, k))
    for i in range(k):
        for j in topology.neighbors[i]:
            omega[i, j] = 1.0 / (1.0 + max(topology.degree(i), topology.degree(j)))
    # diagonal = 1 - off-diagonal row sum; rows then sum to 1 up to rounding
    omega[np.diag_indices(k)] = 1.0 - omega.sum(axis=1)
    return omega


@dataclass
class CfaDevice:
    device_id: int
    W: np.ndarray
    X: np.ndarray
    S: np.ndarray
    partition: DatasetPartition
    gamma: float = 0.01

    def __post_init__(self) -> None:
        if not self.W.shape == self.X.shape == self.S.shape:
            raise ValueError("W, X and S must have the same length")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")

    @classmethod
    def start(cls, device_id: int, W: np.ndarray, partition: DatasetPartition, gamma: float) -> CfaDevice:
        return cls(device_id, W.copy(), np.zeros_like(W), np.zeros_like(W), partition, gamma)


def cfa_local_step(
    device: CfaDevice,
    arch: MlpArchitecture,
    policy: CompressionPolicy,
    optimizer: OptimizerConfig,
    opt_rng: np.random.Generator,
    comp_rng: np.random.Generator,
) -> tuple[CompressedUpdate, np.ndarray]:
    w_half = local_optimize(device.W, arch, device.partition, optimizer, opt_rng)
    return compress(w_half - device.X, policy, comp_rng), w_half


def cfa_apply_round(
    devices: Sequence[CfaDevice],
    payloads: Sequence[CompressedUpdate],
    w_halves: Sequence[np.ndarray],
    omega: np.ndarray,
) -> list[CfaDevice]:
    """Advance every device by one gossip round; returns new device states.

    The self term ``omega[k, k] * payload_k`` is folded into ``S_k`` using the
    locally held payload.
    """
    k = len(devices)
    if len(payloads) != k or len(w_halves) != k or omega.shape != (k, k):
        raise ValueError("need one payload and one W_half per device and a KxK mixing matrix")
    n_params = devices[0].W.size
    if any(p.n_params != n_params for p in payloads):
        raise ValueError("payload length does not match the model length")
    dense = np.stack([decompress(p) for p in payloads])
    mixed = omega @ dense
    advanced = []
    for i, dev in enumerate(devices):
        x_next = dev.X + dense[i]
        s_next = dev.S + mixed[i]
        w_next = w_halves[i] + dev.gamma * (s_next - x_next)
        advanced.append(CfaDevice(dev.device_id, w_next, x_next, s_next, dev.partition, dev.gamma))
    return advanced


@dataclass
class CfaRound:
    devices: list[CfaDevice]
    payloads: list[CompressedUpdate]
    w_halves: list[np.ndarray]


def cfa_round(
    devices: Sequence[CfaDevice],
    omega: np.ndarray,
    arch: MlpArchitecture,
    policy: CompressionPolicy,
    optimizer: OptimizerConfig,
    rngs: Sequence[tuple[np.random.Generator, np.random.Generator]],
) -> CfaRound:
    payloads, halves = [], []
    for device, (opt_rng, comp_rng) in zip(devices, rngs):
        payload, w_half = cfa_local_step(device, arch, policy, optimizer, opt_rng, comp_rng)
        payloads.append(payload)
        halves.append(w_half)
    return CfaRound(cfa_apply_round(devices, payloads, halves, omega), payloads, halves)
