"""Run orchestration: lockstep rounds, per-round energy/carbon logging, stopping rules, sweeps."""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .compression import model_bits, payload_bits
from .config import RunConfig, SweepSpec, apply_axes, to_dict
from .energy import (
    SERVER_ID,
    CarbonIntensitySchedule,
    CarbonLedger,
    cfa_device_energy,
    fa_device_energy,
    load_ci_schedules,
    ps_energy,
    total_carbon,
)
from .model import (
    Dataset,
    DivergenceError,
    MlpArchitecture,
    evaluate,
    generate_synthetic_dataset,
    init_params,
    load_csv_dataset,
    partition_iid,
    split_dataset,
)
from .protocol_cfa import CfaDevice, build_mixing_matrix, cfa_round, make_topology
from .protocol_fa import FaDevice, FaServer, fa_round, size_weights

log = logging.getLogger(__name__)

ROUND_COLUMNS = (
    "round", "entity", "loss", "accuracy", "bits_tx", "bits_rx", "energy_j", "delta_c_kg", "c_tot_kg",
)

# independent random streams derived from the run seed
_STREAM_DATA, _STREAM_PARTITION, _STREAM_INIT, _STREAM_OPT, _STREAM_COMP, _STREAM_TOPOLOGY = range(6)


class BudgetDecision(enum.Enum):
    CONTINUE = "continue"
    STOP = "stop"


def check_budget(c_tot_kg: float, budget_kg: float) -> BudgetDecision:
    """Stop once cumulative emissions reach the budget (the overshooting round counts)."""
    if budget_kg <= 0:
        raise ValueError(f"carbon budget must be positive, got {budget_kg}")
    return BudgetDecision.STOP if c_tot_kg >= budget_kg else BudgetDecision.CONTINUE


@dataclass
class EntityRecord:
    entity: int
    loss: float
    accuracy: float
    bits_tx: int
    bits_rx: int
    energy_j: float
    delta_c_kg: float


@dataclass
class RoundLog:
    round: int
    entities: list[EntityRecord]
    c_tot_kg: float

    def _device_acc(self) -> list[float]:
        return [e.accuracy for e in self.entities if e.entity != SERVER_ID]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self._device_acc()))

    @property
    def min_accuracy(self) -> float:
        return min(self._device_acc())

    @property
    def max_accuracy(self) -> float:
        return max(self._device_acc())

    @property
    def mean_loss(self) -> float:
        return float(np.mean([e.loss for e in self.entities if e.entity != SERVER_ID]))

    @property
    def bits_tx(self) -> int:
        return sum(e.bits_tx for e in self.entities)


@dataclass
class RunResult:
    rounds: list[RoundLog]
    summary: dict[str, Any]
    ledger: CarbonLedger = field(repr=False)


class RunDivergedError(DivergenceError):
    def __init__(self, message: str, partial: RunResult) -> None:
        super().__init__(message)
        self.partial = partial


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def build_data(config: RunConfig) -> tuple[Dataset, Dataset]:
    spec = config.dataset
    if spec.csv_path:
        full = load_csv_dataset(spec.csv_path, spec.n_classes)
        return split_dataset(full, spec.val_fraction, config.seed)
    return generate_synthetic_dataset(
        spec.n_classes,
        spec.input_dim,
        spec.samples_per_class,
        spec.class_separation,
        spec.noise_sigma,
        seed=[config.seed, _STREAM_DATA],
        val_fraction=spec.val_fraction,
    )


def _schedules(config: RunConfig) -> dict[int, CarbonIntensitySchedule]:
    c = config.carbon
    out = {SERVER_ID: CarbonIntensitySchedule.constant(SERVER_ID, c.server_intensity_kg_per_kwh, c.round_duration_s)}
    for k in range(1, config.n_devices + 1):
        out[k] = CarbonIntensitySchedule.constant(k, c.device_intensity_kg_per_kwh, c.round_duration_s)
    if c.schedule_csv:
        out.update(load_ci_schedules(c.schedule_csv, c.round_duration_s, c.start_time_s))
    return out


class Simulation:
    """Mutable state of one run; ``step()`` executes a single lockstep round."""

    def __init__(self, config: RunConfig) -> None:
        self.config = config
        train, self.validation = build_data(config)
        self.arch = MlpArchitecture(train.input_dim, config.architecture.hidden_dims, train.n_classes)
        partitions = partition_iid(train, config.n_devices, [config.seed, _STREAM_PARTITION])
        w0 = init_params(self.arch, _rng(config.seed, _STREAM_INIT))
        self.n_params = self.arch.n_params
        self.accounting_n_params = config.accounting_n_params or self.n_params
        self.schedules = _schedules(config)
        self.ledger = CarbonLedger()
        self.round_index = 0
        if config.protocol == "fa":
            self.server = FaServer(w0.copy(), size_weights(partitions))
            self.fa_devices = [FaDevice(p.owner, w0.copy(), p) for p in partitions]
        else:
            self.topology = make_topology(
                config.topology.kind, config.n_devices, config.topology.degree,
                seed=[config.seed, _STREAM_TOPOLOGY],
            )
            self.omega = build_mixing_matrix(self.topology)
            self.cfa_devices = [CfaDevice.start(p.owner, w0, p, config.gamma) for p in partitions]

    # -- evaluation -------------------------------------------------------

    def device_models(self) -> list[np.ndarray]:
        if self.config.protocol == "fa":
            return [d.W for d in self.fa_devices]
        return [d.W for d in self.cfa_devices]

    def evaluate_devices(self) -> list[tuple[float, float]]:
        if self.config.protocol == "fa":
            # all devices hold the global model after broadcast
            result = evaluate(self.server.W_global, self.arch, self.validation)
            return [result] * len(self.fa_devices)
        return [evaluate(w, self.arch, self.validation) for w in self.device_models()]

    # -- one round --------------------------------------------------------

    def _round_rngs(self) -> list[tuple[np.random.Generator, np.random.Generator]]:
        seed, i = self.config.seed, self.round_index
        return [
            (_rng(seed, _STREAM_OPT, k, i), _rng(seed, _STREAM_COMP, k, i))
            for k in range(1, self.config.n_devices + 1)
        ]

    def step(self) -> RoundLog:
        cfg = self.config
        i = self.round_index
        policy = cfg.compression
        n_acc = self.accounting_n_params
        q_bits = payload_bits(policy, n_acc)
        b_w = model_bits(policy, n_acc)
        records: list[EntityRecord] = []

        if cfg.protocol == "fa":
            fa_round(self.server, self.fa_devices, self.arch, policy, cfg.optimizer, self._round_rngs())
            evals = self.evaluate_devices()
            e_dev = fa_device_energy(cfg.device_energy, cfg.links, policy, n_acc)
            for d, (loss, acc) in zip(self.fa_devices, evals):
                records.append(self._charge(d.device_id, loss, acc, q_bits, b_w, e_dev))
            e_ps = ps_energy(cfg.server_energy, cfg.links, [policy] * cfg.n_devices, n_acc, policy.n_bits_clear)
            loss, acc = evals[0]
            records.append(self._charge(SERVER_ID, loss, acc, b_w, q_bits * cfg.n_devices, e_ps))
        else:
            outcome = cfa_round(self.cfa_devices, self.omega, self.arch, policy, cfg.optimizer, self._round_rngs())
            self.cfa_devices = outcome.devices
            evals = self.evaluate_devices()
            for idx, (d, (loss, acc)) in enumerate(zip(self.cfa_devices, evals)):
                n_nbrs = self.topology.degree(idx)
                e_dev = cfa_device_energy(cfg.device_energy, cfg.links, policy, [policy] * n_nbrs, n_acc)
                records.append(self._charge(d.device_id, loss, acc, q_bits, q_bits * n_nbrs, e_dev))

        self.round_index += 1
        return RoundLog(i, records, total_carbon(self.ledger, cfg.protocol))

    def _charge(self, entity: int, loss: float, acc: float, tx: int, rx: int, energy_j: float) -> EntityRecord:
        intensity = self.schedules[entity].intensity_at(self.round_index)
        delta_c = self.ledger.record(entity, self.round_index, energy_j, intensity)
        return EntityRecord(entity, loss, acc, tx, rx, energy_j, delta_c)

    def metadata(self) -> dict[str, Any]:
        cfg = self.config
        return {
            "n_params": self.n_params,
            "accounting_n_params": self.accounting_n_params,
            "model_bits": model_bits(cfg.compression, self.accounting_n_params),
            "payload_bits": payload_bits(cfg.compression, self.accounting_n_params),
            "device_energy": to_dict(cfg.device_energy),
            "server_energy": to_dict(cfg.server_energy),
            "links": to_dict(cfg.links),
            "carbon": to_dict(cfg.carbon),
        }


def run(config: RunConfig) -> RunResult:
    """Execute rounds until carbon budget, target accuracy or max rounds (checked in that order)."""
    sim = Simulation(config)
    stop = config.stopping
    rounds: list[RoundLog] = []
    init_evals = sim.evaluate_devices()
    init_acc = float(np.mean([a for _, a in init_evals]))
    init_loss = float(np.mean([l for l, _ in init_evals]))
    reason = None
    if stop.carbon_budget_kg is not None and stop.carbon_budget_kg <= 0:
        reason = "carbon_budget"
    elif stop.max_rounds == 0:
        reason = "max_rounds"

    while reason is None:
        try:
            entry = sim.step()
        except DivergenceError as exc:
            partial = RunResult(rounds, _summary(config, sim, rounds, "diverged", init_acc, init_loss), sim.ledger)
            raise RunDivergedError(str(exc), partial) from exc
        rounds.append(entry)
        log.debug("round %d acc=%.4f c_tot=%.6g kg", entry.round, entry.mean_accuracy, entry.c_tot_kg)
        if stop.carbon_budget_kg is not None and check_budget(entry.c_tot_kg, stop.carbon_budget_kg) is BudgetDecision.STOP:
            reason = "carbon_budget"
        elif stop.target_accuracy is not None and entry.mean_accuracy >= stop.target_accuracy:
            reason = "target_accuracy"
        elif stop.max_rounds is not None and len(rounds) >= stop.max_rounds:
            reason = "max_rounds"

    return RunResult(rounds, _summary(config, sim, rounds, reason, init_acc, init_loss), sim.ledger)


def _summary(
    config: RunConfig, sim: Simulation, rounds: list[RoundLog], reason: str, init_acc: float, init_loss: float
) -> dict[str, Any]:
    c_tot = total_carbon(sim.ledger, config.protocol)
    if rounds:
        last = rounds[-1]
        acc = (last.mean_accuracy, last.min_accuracy, last.max_accuracy)
        loss = last.mean_loss
    else:
        acc = (init_acc,) * 3
        loss = init_loss
    budget = config.stopping.carbon_budget_kg
    return {
        "protocol": config.protocol,
        "seed": config.seed,
        "stop_reason": reason,
        "rounds_executed": len(rounds),
        "initial_accuracy": init_acc,
        "final_accuracy": acc[0],
        "final_accuracy_min": acc[1],
        "final_accuracy_max": acc[2],
        "final_loss": loss,
        "c_tot_kg": c_tot,
        "budget_overshoot_kg": (c_tot - budget) if (budget and reason == "carbon_budget") else 0.0,
        "bits_total": sum(r.bits_tx for r in rounds),
        "energy_total_j": math.fsum(e.energy_j for r in rounds for e in r.entities),
        "metadata": sim.metadata(),
    }


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def rounds_csv(rounds: list[RoundLog]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ROUND_COLUMNS)
    for r in rounds:
        for e in r.entities:
            writer.writerow(
                [r.round, e.entity, _fmt(e.loss), _fmt(e.accuracy), e.bits_tx, e.bits_rx,
                 _fmt(e.energy_j), _fmt(e.delta_c_kg), _fmt(r.c_tot_kg)]
            )
    return buf.getvalue()


def write_run(result: RunResult, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "rounds.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(rounds_csv(result.rounds))
    with open(out / "summary.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(result.summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, index: int) -> int:
    """SplitMix64 finalizer applied to ``seed + (index + 1) * golden_gamma``; fits in 63 bits."""
    z = (seed + (index + 1) * 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) >> 1


@dataclass
class SweepCell:
    index: int
    point: dict[str, Any]
    repetition: int
    config: RunConfig


def sweep_cells(spec: SweepSpec) -> list[SweepCell]:
    cells = []
    for g, point in enumerate(spec.grid()):
        for r in range(spec.repetitions):
            index = g * spec.repetitions + r
            cfg = apply_axes(spec.base, point).replace(seed=derive_seed(spec.base.seed, index))
            cells.append(SweepCell(index, point, r, cfg))
    return cells


_SUMMARY_COLUMNS = (
    "seed", "stop_reason", "rounds_executed", "initial_accuracy", "final_accuracy",
    "final_accuracy_min", "final_accuracy_max", "final_loss", "c_tot_kg",
    "budget_overshoot_kg", "bits_total", "energy_total_j",
)


def _run_cell(cell: SweepCell) -> RunResult:
    try:
        return run(cell.config)
    except RunDivergedError as exc:
        return exc.partial


def sweep(spec: SweepSpec, jobs: int = 1, out_dir: str | Path | None = None) -> list[dict[str, Any]]:
    """One run per grid point and repetition; rows come back in grid order regardless of ``jobs``."""
    cells = sweep_cells(spec)
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]
    rows = []
    for cell, result in zip(cells, results):
        if out_dir is not None:
            write_run(result, Path(out_dir) / f"cell_{cell.index:05d}")
        row: dict[str, Any] = {"cell": cell.index, **cell.point, "repetition": cell.repetition}
        row.update({k: result.summary[k] for k in _SUMMARY_COLUMNS})
        rows.append(row)
    return rows


def sweep_csv(spec: SweepSpec, rows: list[dict[str, Any]]) -> str:
    columns = ["cell", *spec.axes, "repetition", *_SUMMARY_COLUMNS]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()
