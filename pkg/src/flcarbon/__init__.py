"""Energy and carbon tracking for simulated federated learning (FA and CHOCO-style CFA)."""

from .compression import (
    CompressedUpdate,
    CompressionPolicy,
    compress,
    decompress,
    payload_bits,
    quantize_probabilistic,
    sparsify_top_t,
)
from .config import RunConfig, SweepSpec
from .energy import (
    CarbonIntensitySchedule,
    CarbonLedger,
    DeviceEnergy,
    LinkEfficiencies,
    ServerEnergy,
    cfa_device_energy,
    fa_device_energy,
    ledger_update,
    ps_energy,
    total_carbon,
)
from .harness import check_budget, run, sweep
from .model import MlpArchitecture, OptimizerConfig, evaluate, local_optimize

__all__ = [
    "CarbonIntensitySchedule",
    "CarbonLedger",
    "CompressedUpdate",
    "CompressionPolicy",
    "DeviceEnergy",
    "LinkEfficiencies",
    "MlpArchitecture",
    "OptimizerConfig",
    "RunConfig",
    "ServerEnergy",
    "SweepSpec",
    "cfa_device_energy",
    "check_budget",
    "compress",
    "decompress",
    "evaluate",
    "fa_device_energy",
    "ledger_update",
    "local_optimize",
    "payload_bits",
    "ps_energy",
    "quantize_probabilistic",
    "run",
    "sparsify_top_t",
    "sweep",
    "total_carbon",
]
