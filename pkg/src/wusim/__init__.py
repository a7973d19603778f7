"""Energy-aware wake-up signalling: traffic modeling, semi-Markov analytics,
an LSTM inter-arrival forecaster, and a slotted discrete-event simulator."""

from .config import ScenarioConfig, TrainConfig, WakeupParams, dump_config, load_config
from .forecast import (
    InterArrivalForecaster,
    calibrate_margin,
    decide_sleep,
    r_metric,
    rmse,
)
from .sim import (
    MonteCarloResult,
    RunMetrics,
    dynamic_density_run,
    monte_carlo,
    power_saving,
    resolve_t4,
    run_scenario,
    train_predictor,
)
from .spatial import (
    Deployment,
    ExponentialInfluence,
    activation_probability_analytic,
    per_device_activation,
    sample_deployment,
)
from .traffic import TrafficModel, TrafficTrace, generate_trace, geometric_pmf, sample_sojourn
from .wakeup import (
    SchemeKind,
    SemiMarkovChain,
    build_chain,
    mean_delay,
    mean_power,
    quantize_sleep,
    scheme_params,
    solve_t4,
)

__version__ = "0.1.0"

__all__ = [
    "ScenarioConfig",
    "TrainConfig",
    "WakeupParams",
    "load_config",
    "dump_config",
    "InterArrivalForecaster",
    "calibrate_margin",
    "decide_sleep",
    "rmse",
    "r_metric",
    "MonteCarloResult",
    "RunMetrics",
    "run_scenario",
    "monte_carlo",
    "dynamic_density_run",
    "power_saving",
    "resolve_t4",
    "train_predictor",
    "Deployment",
    "ExponentialInfluence",
    "sample_deployment",
    "activation_probability_analytic",
    "per_device_activation",
    "TrafficModel",
    "TrafficTrace",
    "geometric_pmf",
    "sample_sojourn",
    "generate_trace",
    "SchemeKind",
    "SemiMarkovChain",
    "build_chain",
    "mean_power",
    "mean_delay",
    "solve_t4",
    "quantize_sleep",
    "scheme_params",
]
