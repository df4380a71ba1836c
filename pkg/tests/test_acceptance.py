"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run just this suite with ``pytest tests/test_acceptance.py -v``; the verdict
lines appear in the terminal even when output capture is on.
"""

import math
import time

import numpy as np
import pytest

from flcarbon.compression import CompressionPolicy, model_bits, monte_carlo_mean, payload_bits, sparsify_top_t
from flcarbon.config import ArchitectureSpec, DatasetSpec, RunConfig, StoppingSpec
from flcarbon.energy import (
    CarbonLedger,
    DeviceEnergy,
    LinkEfficiencies,
    ServerEnergy,
    cfa_device_energy,
    fa_device_energy,
    ps_energy,
)
from flcarbon.harness import run
from flcarbon.model import MlpArchitecture, OptimizerConfig, generate_synthetic_dataset, init_params, local_optimize, loss_and_grad, partition_iid
from flcarbon.protocol_cfa import CfaDevice, Topology, build_mixing_matrix, cfa_round
from flcarbon.protocol_fa import FaDevice, FaServer, fa_round, size_weights
from oracles import central_difference_grad


@pytest.fixture
def report(capsys):
    def _report(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
        assert ok, detail

    return _report


# -- 1 ----------------------------------------------------------------------


def test_c01_bit_accounting(report):
    b_w = model_bits(CompressionPolicy(1.0, 32, 32), 59500)
    q = payload_bits(CompressionPolicy(0.1, 8, 32), 59500)
    ok = b_w == 1_904_000 and q == 47_600 and round(b_w / 8 / 1e6, 2) == 0.24
    report(1, ok, f"b_W={b_w} bits ({b_w / 8e6:.3f} MB), delta=0.1/N_b=8 payload={q} bits")


# -- 2 ----------------------------------------------------------------------


def test_c02_energy_oracles(report):
    links, full = LinkEfficiencies.uniform(10_000.0), CompressionPolicy(1.0, 32)
    # hand arithmetic with b_W = 1,904,000 bits at 10 kbit/J -> 190.4 J per model transfer
    expected = {
        "fa_device": 3.51 + 190.4 + 190.4 + 0.14 + 0.12,      # 384.57
        "ps": 10 * 0.24 + 190.4 + 10 * 190.4 + 0.70,          # 2097.5
        "cfa_device": 3.51 + 9 * 0.06 + 9 * 190.4 + 190.4 + 0.14 + 0.12,  # 1908.31
    }
    got = {
        "fa_device": fa_device_energy(DeviceEnergy(), links, full, 59500),
        "ps": ps_energy(ServerEnergy(), links, [full] * 10, 59500),
        "cfa_device": cfa_device_energy(DeviceEnergy(), links, full, [full] * 9, 59500),
    }
    literal = {"fa_device": 384.57, "ps": 2097.5, "cfa_device": 1908.31}
    rel = {k: abs(got[k] - expected[k]) / expected[k] for k in got}
    ok = all(r <= 1e-9 for r in rel.values()) and all(abs(expected[k] - literal[k]) < 1e-9 for k in literal)
    report(2, ok, ", ".join(f"{k}={got[k]:.6f} J (rel err {rel[k]:.1e})" for k in got))


# -- 3 ----------------------------------------------------------------------


def test_c03_quantizer_unbiasedness(report):
    # delta = 0.1 is the most aggressive sparsity of the reference experiments
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    vectors = rng.normal(size=(200, 256))
    worst = {}
    for n_bits in (1, 2, 4, 8):
        policy = CompressionPolicy(0.1, n_bits)
        errs = []
        for w in vectors:
            target = sparsify_top_t(w, policy.n_kept(w.size))
            mean = monte_carlo_mean(w, policy, rng, 20_000)
            errs.append(np.linalg.norm(mean - target) / np.linalg.norm(target))
        worst[n_bits] = max(errs)
    elapsed = time.perf_counter() - start
    ok = all(e < 0.01 for e in worst.values()) and elapsed < 60
    detail = ", ".join(f"N_b={b}: max rel L2 {e:.4f}" for b, e in worst.items()) + f"; {elapsed:.1f}s"
    report(3, ok, detail)


# -- 4 and 5 ----------------------------------------------------------------

ARCH = MlpArchitecture(4, (6,), 3)


def _ring_devices(k, gamma, seed):
    train, _ = generate_synthetic_dataset(3, 4, 40, 2.0, 1.0, seed=seed)
    parts = partition_iid(train, k, seed=seed)
    rng = np.random.default_rng(seed)
    return [CfaDevice.start(p.owner, rng.normal(size=ARCH.n_params), p, gamma) for p in parts]


def _round_rngs(k, i, seed):
    return [(np.random.default_rng([seed, 3, d, i]), np.random.default_rng([seed, 4, d, i])) for d in range(k)]


def test_c04_choco_mean_preservation(report):
    omega = build_mixing_matrix(Topology.ring(10))
    zero_lr = OptimizerConfig(0.0)
    worst = 0.0
    for delta in (0.1, 0.5, 1.0):
        for n_bits in (8, 16, 32):
            policy = CompressionPolicy(delta, n_bits)
            devices = _ring_devices(10, 0.3, seed=4)
            total0 = np.sum([d.W for d in devices], axis=0)
            for i in range(200):
                devices = cfa_round(devices, omega, ARCH, policy, zero_lr, _round_rngs(10, i, 4)).devices
                drift = np.abs(np.sum([d.W for d in devices], axis=0) - total0).max()
                worst = max(worst, drift)
    report(4, worst < 1e-9, f"max |sum_k W_k,i - sum_k W_k,0|_inf over 9 policies x 200 rounds = {worst:.2e}")


def test_c05_consensus_contraction(report):
    omega = build_mixing_matrix(Topology.ring(10))
    devices = _ring_devices(10, 1.0, seed=5)

    def spread(devs):
        ws = np.array([d.W for d in devs])
        return np.linalg.norm(ws - ws.mean(axis=0), axis=1).max()

    initial = spread(devices)
    reached = None
    for i in range(500):
        devices = cfa_round(devices, omega, ARCH, CompressionPolicy.uncompressed(), OptimizerConfig(0.0), _round_rngs(10, i, 5)).devices
        if spread(devices) < 1e-6 * initial:
            reached = i + 1
            break
    report(5, reached is not None, f"spread below 1e-6 of initial after {reached} rounds (limit 500)")


# -- 6 ----------------------------------------------------------------------


def test_c06_fedavg_oracle(report):
    train, _ = generate_synthetic_dataset(3, 4, 37, 2.0, 1.0, seed=6)
    parts = partition_iid(train, 5, seed=6)
    arch = MlpArchitecture(4, (8,), 3)
    w = init_params(arch, np.random.default_rng(6))
    sigma = np.array([len(p) for p in parts]) / len(train)
    server = FaServer(w.copy(), size_weights(parts))
    devices = [FaDevice(p.owner, w.copy(), p) for p in parts]
    opt = OptimizerConfig(0.05, 0.9, 8, 2)
    worst = 0.0
    for i in range(10):
        prev = server.W_global.copy()
        halves = [local_optimize(prev, arch, p, opt, np.random.default_rng([6, 3, d, i])) for d, p in enumerate(parts)]
        direct = np.sum([s * h for s, h in zip(sigma, halves)], axis=0)
        fa_round(server, devices, arch, CompressionPolicy.uncompressed(), opt, _round_rngs(5, i, 6))
        worst = max(worst, np.abs(server.W_global - direct).max())
    report(6, worst <= 1e-12, f"max |W_PS - sum sigma_k W_k,i+1/2| over 10 rounds = {worst:.2e}")


# -- 7 ----------------------------------------------------------------------


def test_c07_ledger_closed_form(report):
    worst, monotone = 0.0, True
    for seed in range(20):
        rng = np.random.default_rng(seed)
        energy = rng.exponential(500.0, 1000)
        intensity = rng.uniform(0.05, 1.0, 1000)
        ledger = CarbonLedger()
        prev = 0.0
        for i, (e, ci) in enumerate(zip(energy, intensity)):
            ledger.record(1, i, float(e), float(ci))
            monotone &= ledger.cumulative[1] >= prev
            prev = ledger.cumulative[1]
        closed = math.fsum(energy * intensity / 3.6e6)
        worst = max(worst, abs(ledger.cumulative[1] - closed) / closed)
    report(7, worst <= 1e-12 and monotone, f"20 traces x 1000 rounds: max rel err {worst:.1e}, nondecreasing={monotone}")


# -- 8 and 9: synthetic task ------------------------------------------------

TASK = dict(
    n_devices=10,
    gamma=0.01,
    accounting_n_params=59500,
    dataset=DatasetSpec(n_classes=10, input_dim=200, samples_per_class=375, class_separation=1.0, noise_sigma=4.0),
    architecture=ArchitectureSpec((64,)),
    optimizer=OptimizerConfig(0.01, 0.9, 64, 1),
)
SEEDS = range(5)


def _fa_round_carbon(policy, ee):
    links = LinkEfficiencies.uniform(ee)
    joules = 10 * fa_device_energy(DeviceEnergy(), links, policy, 59500) + ps_energy(ServerEnergy(), links, [policy] * 10, 59500)
    return joules * 0.449 / 3.6e6


def test_c08_efficiency_crossover(report):
    fa_policy, cfa_policy = CompressionPolicy(0.1, 16), CompressionPolicy(0.1, 8)
    budget = 30 * _fa_round_carbon(fa_policy, 50_000.0)  # FA completes 30 rounds at 50 kbit/J
    acc = {}
    for ee in (5_000.0, 100_000.0):
        for protocol, policy in (("fa", fa_policy), ("cfa", cfa_policy)):
            accs = [
                run(RunConfig(protocol=protocol, seed=s, compression=policy, links=LinkEfficiencies.uniform(ee),
                              stopping=StoppingSpec(max_rounds=None, carbon_budget_kg=budget), **TASK)).summary["final_accuracy"]
                for s in SEEDS
            ]
            acc[protocol, ee] = float(np.mean(accs))
    ok = acc["cfa", 5_000.0] >= acc["fa", 5_000.0] and acc["fa", 100_000.0] >= acc["cfa", 100_000.0]
    detail = (f"budget {budget * 1e3:.3f} g; EE=5k: CFA {acc['cfa', 5_000.0]:.3f} vs FA {acc['fa', 5_000.0]:.3f}; "
              f"EE=100k: FA {acc['fa', 100_000.0]:.3f} vs CFA {acc['cfa', 100_000.0]:.3f}")
    report(8, ok, detail)


def _carbon_to_target(protocol, policy, seed):
    cfg = RunConfig(protocol=protocol, seed=seed, compression=policy, links=LinkEfficiencies.uniform(10_000.0),
                    stopping=StoppingSpec(max_rounds=400, target_accuracy=0.6), **TASK)
    summary = run(cfg).summary
    return summary["c_tot_kg"] if summary["stop_reason"] == "target_accuracy" else math.inf


def test_c09_compression_savings(report):
    lines, ok = [], True
    for protocol, compressed in (("fa", CompressionPolicy(0.1, 16)), ("cfa", CompressionPolicy(0.5, 24))):
        full = CompressionPolicy(1.0, 32)
        for seed in SEEDS:
            c_comp, c_full = _carbon_to_target(protocol, compressed, seed), _carbon_to_target(protocol, full, seed)
            ok &= c_comp < c_full
            lines.append(f"{protocol} seed {seed}: {c_comp * 1e3:.2f} g < {c_full * 1e3:.2f} g")
    report(9, ok, "carbon to 60% accuracy; " + "; ".join(lines))


# -- 10 ---------------------------------------------------------------------


def test_c10_gradient_check(report):
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(20):
        hidden = tuple(int(h) for h in rng.integers(2, 7, size=rng.integers(0, 3)))
        arch = MlpArchitecture(int(rng.integers(2, 6)), hidden, int(rng.integers(2, 5)))
        w = rng.normal(size=arch.n_params)
        x = rng.normal(size=(int(rng.integers(1, 8)), arch.input_dim))
        y = rng.integers(0, arch.n_classes, size=len(x))
        _, grad = loss_and_grad(w, arch, x, y)
        fd = central_difference_grad(lambda v: loss_and_grad(v, arch, x, y)[0], w)
        worst = max(worst, np.linalg.norm(grad - fd) / max(np.linalg.norm(grad), np.linalg.norm(fd)))
    report(10, worst < 1e-5, f"max relative gradient error over 20 instances = {worst:.2e}")
