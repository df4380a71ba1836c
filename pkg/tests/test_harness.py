import csv
import io
import math

import numpy as np
import pytest

from flcarbon.compression import CompressionPolicy
from flcarbon.config import ArchitectureSpec, CarbonSpec, DatasetSpec, RunConfig, StoppingSpec, SweepSpec, TopologySpec
from flcarbon.energy import LinkEfficiencies
from flcarbon.harness import (
    ROUND_COLUMNS,
    BudgetDecision,
    Simulation,
    check_budget,
    derive_seed,
    rounds_csv,
    run,
    sweep,
    sweep_csv,
)
from flcarbon.model import OptimizerConfig

TINY = DatasetSpec(n_classes=3, input_dim=5, samples_per_class=20, class_separation=2.0, noise_sigma=1.0)


def tiny(protocol="fa", **kw):
    base = dict(
        protocol=protocol, seed=1, n_devices=3, dataset=TINY, architecture=ArchitectureSpec((4,)),
        optimizer=OptimizerConfig(0.05, 0.9, 8, 1), compression=CompressionPolicy(0.5, 8),
        stopping=StoppingSpec(max_rounds=4),
    )
    base.update(kw)
    return RunConfig(**base)


def test_zero_budget_runs_no_rounds():
    result = run(tiny(stopping=StoppingSpec(max_rounds=None, carbon_budget_kg=0.0)))
    assert result.rounds == []
    assert result.summary["rounds_executed"] == 0
    assert result.summary["final_accuracy"] == result.summary["initial_accuracy"]
    assert result.summary["c_tot_kg"] == 0.0


@pytest.mark.parametrize("protocol", ["fa", "cfa"])
def test_max_rounds_only(protocol):
    result = run(tiny(protocol, stopping=StoppingSpec(max_rounds=3)))
    assert [r.round for r in result.rounds] == [0, 1, 2]
    assert result.summary["stop_reason"] == "max_rounds"


def test_fa_and_cfa_agree_for_two_devices_exact_averaging():
    cfg = dict(n_devices=2, gamma=1.0, compression=CompressionPolicy.uncompressed(),
               topology=TopologySpec("fully_connected"))
    fa, cfa = Simulation(tiny("fa", **cfg)), Simulation(tiny("cfa", **cfg))
    fa.step()
    cfa.step()
    # equal shard sizes, so sigma = (1/2, 1/2)
    assert np.allclose(fa.server.weights, 0.5)
    cfa_mean = np.mean(cfa.device_models(), axis=0)
    np.testing.assert_allclose(cfa_mean, fa.server.W_global, rtol=0, atol=1e-12)
    for w in cfa.device_models():
        np.testing.assert_allclose(w, fa.server.W_global, rtol=0, atol=1e-12)


def test_check_budget_boundaries():
    assert check_budget(0.01, 0.01) is BudgetDecision.STOP
    assert check_budget(0.01 - 1e-12, 0.01) is BudgetDecision.CONTINUE
    assert check_budget(0.02, 0.01) is BudgetDecision.STOP
    with pytest.raises(ValueError):
        check_budget(0.0, 0.0)


@pytest.mark.parametrize("protocol", ["fa", "cfa"])
def test_constant_round_carbon_gives_ceil_rounds(protocol):
    probe = run(tiny(protocol, stopping=StoppingSpec(max_rounds=1)))
    per_round = probe.rounds[0].c_tot_kg
    budget = 7.3 * per_round
    result = run(tiny(protocol, stopping=StoppingSpec(max_rounds=None, carbon_budget_kg=budget)))
    assert result.summary["rounds_executed"] == math.ceil(budget / per_round) == 8
    assert result.summary["stop_reason"] == "carbon_budget"
    assert result.summary["budget_overshoot_kg"] == pytest.approx(8 * per_round - budget)
    # nothing ran after the budget was reached
    assert all(r.c_tot_kg < budget for r in result.rounds[:-1])


@pytest.mark.parametrize("protocol", ["fa", "cfa"])
def test_summary_total_matches_logs_and_recomputation(protocol):
    result = run(tiny(protocol, stopping=StoppingSpec(max_rounds=5)))
    assert result.summary["c_tot_kg"] == result.rounds[-1].c_tot_kg
    for r_index, entry in enumerate(result.rounds):
        recomputed = math.fsum(
            e.energy_j * 0.449 / 3.6e6
            for r in result.rounds[: r_index + 1]
            for e in r.entities
        )
        assert entry.c_tot_kg == pytest.approx(recomputed, rel=1e-12)
    assert result.summary["bits_total"] == sum(r.bits_tx for r in result.rounds)


def test_fa_log_includes_server_entry_and_cfa_does_not():
    fa = run(tiny("fa", stopping=StoppingSpec(max_rounds=1))).rounds[0]
    cfa = run(tiny("cfa", stopping=StoppingSpec(max_rounds=1))).rounds[0]
    assert sorted(e.entity for e in fa.entities) == [0, 1, 2, 3]
    assert sorted(e.entity for e in cfa.entities) == [1, 2, 3]
    server = next(e for e in fa.entities if e.entity == 0)
    device = next(e for e in fa.entities if e.entity == 1)
    assert server.bits_rx == 3 * device.bits_tx
    assert server.bits_tx == device.bits_rx


@pytest.mark.parametrize("protocol", ["fa", "cfa"])
def test_runs_are_deterministic(protocol):
    a, b = run(tiny(protocol)), run(tiny(protocol))
    assert rounds_csv(a.rounds) == rounds_csv(b.rounds)
    assert a.summary == b.summary


def test_target_accuracy_stops_early():
    result = run(tiny(stopping=StoppingSpec(max_rounds=50, target_accuracy=0.0)))
    assert result.summary["rounds_executed"] == 1
    assert result.summary["stop_reason"] == "target_accuracy"


def test_stepwise_carbon_schedule_is_applied(tmp_path):
    path = tmp_path / "ci.csv"
    path.write_text("entity_id,start_time_s,intensity_kg_per_kwh\n1,0,0.1\n1,120,0.9\n", encoding="utf-8")
    result = run(tiny(carbon=CarbonSpec(schedule_csv=str(path), round_duration_s=60.0)))
    dev1 = [next(e for e in r.entities if e.entity == 1) for r in result.rounds]
    intensities = [e.delta_c_kg * 3.6e6 / e.energy_j for e in dev1]
    assert intensities == pytest.approx([0.1, 0.1, 0.9, 0.9], rel=1e-12)


def test_rounds_csv_format():
    text = rounds_csv(run(tiny()).rounds)
    assert "\r" not in text
    rows = list(csv.reader(io.StringIO(text)))
    assert tuple(rows[0]) == ROUND_COLUMNS
    assert len(rows) == 1 + 4 * 4


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def test_derive_seed_is_stable_and_distinct():
    seeds = [derive_seed(0, i) for i in range(1000)]
    assert len(set(seeds)) == 1000
    assert all(0 <= s < 2**63 for s in seeds)
    assert derive_seed(0, 0) == derive_seed(0, 0)
    assert derive_seed(1, 0) != derive_seed(0, 0)


def test_single_point_sweep_equals_run():
    base = tiny()
    rows = sweep(SweepSpec(base, {}))
    direct = run(base.replace(seed=derive_seed(base.seed, 0))).summary
    assert len(rows) == 1
    for key in ("c_tot_kg", "final_accuracy", "rounds_executed", "bits_total", "energy_total_j"):
        assert rows[0][key] == direct[key]


@pytest.mark.parametrize("protocol", ["fa", "cfa"])
def test_sweep_energy_strictly_decreasing_in_efficiency(protocol):
    spec = SweepSpec(tiny(protocol, stopping=StoppingSpec(max_rounds=2)), {"ee_com": [5e3, 1e4, 2.5e4, 5e4]})
    energies = [r["energy_total_j"] for r in sweep(spec)]
    assert all(a > b for a, b in zip(energies, energies[1:]))


def test_sweep_bits_strictly_increasing_in_delta():
    spec = SweepSpec(tiny(stopping=StoppingSpec(max_rounds=2)), {"delta": [0.1, 0.5, 1.0]})
    bits = [r["bits_total"] for r in sweep(spec)]
    assert all(a < b for a, b in zip(bits, bits[1:]))


def test_sweep_rows_keyed_by_axes_and_repetitions():
    spec = SweepSpec(tiny(stopping=StoppingSpec(max_rounds=1)), {"protocol": ["fa", "cfa"], "i_k": [0.2, 0.9]}, repetitions=2)
    rows = sweep(spec)
    assert [(r["protocol"], r["i_k"], r["repetition"]) for r in rows] == [
        (p, i, rep) for p in ("fa", "cfa") for i in (0.2, 0.9) for rep in (0, 1)
    ]
    assert [r["cell"] for r in rows] == list(range(8))
    assert len({r["seed"] for r in rows}) == 8
    header = sweep_csv(spec, rows).splitlines()[0].split(",")
    assert header[:4] == ["cell", "protocol", "i_k", "repetition"]


def test_sweep_cap_enforced():
    with pytest.raises(ValueError, match="cap"):
        SweepSpec(tiny(), {"delta": [0.1, 0.2, 0.3], "n_bits": [4, 8]}, max_grid_points=5)


def test_sweep_parallel_matches_serial():
    spec = SweepSpec(tiny(stopping=StoppingSpec(max_rounds=2)), {"protocol": ["fa", "cfa"]})
    assert sweep_csv(spec, sweep(spec, jobs=1)) == sweep_csv(spec, sweep(spec, jobs=2))


def test_carbon_nonincreasing_in_efficiency_for_fixed_rounds():
    spec = SweepSpec(tiny("cfa", stopping=StoppingSpec(max_rounds=3)), {"ee_com": [1e3, 1e4, 1e5]})
    carbon = [r["c_tot_kg"] for r in sweep(spec)]
    assert carbon == sorted(carbon, reverse=True)
    spec = SweepSpec(tiny(links=LinkEfficiencies.uniform(1e3), stopping=StoppingSpec(max_rounds=3)), {"n_bits": [4, 8, 16]})
    carbon = [r["c_tot_kg"] for r in sweep(spec)]
    assert carbon == sorted(carbon)
