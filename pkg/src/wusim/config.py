"""Scenario configuration: tunable parameters, file parsing, validation.

Config files are flat ``key = value`` text.  Values are Python literals
(``1e-3``, ``[0.0, 0.3]``, ``True``); bare words are kept as strings.
Nested blocks use dotted keys (``wakeup.t1``, ``train.window``).  Any key
left out takes its default below.
"""

from __future__ import annotations

import ast
import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError, InvalidParameterError


@dataclass
class WakeupParams:
    """Radio state timings (TTI), power levels (mW) and channel error rates.

    t1 is the beacon-seek (WRx-On) duration, t2 one active-decoding slot,
    t3 the inactivity timer, t4 the sleep period between beacon checks.
    t_u / t_pd are the start-up and power-down transition times whose energy
    is charged as a triangular ramp (half the plateau power).
    """

    t1: float = 1.0 / 14.0
    t2: float = 1.0
    t3: float = 1.0
    t4: float | None = None          # solved from the delay budget when None
    t_u: float = 15.0
    t_pd: float = 10.0
    pw1: float = 57.0
    pw2: float = 935.0
    pw3: float = 850.0
    pw4: float = 0.0
    p_md: float = 0.01
    p_f: float = 0.1
    t_mac: float = 0.0
    t_on: float = 1.0                # DRX ON-window duration
    delay_budget: float = 30.0       # mean-delay target used by the t4 solver
    t4_max: float = 1e5              # sleep cap when traffic vanishes
    delay_mean_residual: bool = False  # replace the t4^2/2 delay term by t4/2

    def validate(self) -> None:
        for name in ("t1", "t2", "t3", "t_u", "t_pd", "t_mac", "t_on"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise InvalidParameterError(f"{name} must be finite and >= 0, got {v}")
        for name in ("pw1", "pw2", "pw3", "pw4"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise InvalidParameterError(f"{name} must be finite and >= 0, got {v}")
        for name in ("p_md", "p_f"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise InvalidParameterError(f"{name} must lie in [0, 1), got {v}")
        if self.t4 is not None and not self.t4 > 0:
            raise InvalidParameterError(f"t4 must be > 0, got {self.t4}")
        if self.delay_budget <= 0:
            raise InvalidParameterError("delay_budget must be > 0")
        if self.t4_max <= 0:
            raise InvalidParameterError("t4_max must be > 0")

    def replace(self, **kw) -> "WakeupParams":
        return dataclasses.replace(self, **kw)


@dataclass
class TrainConfig:
    """Hyper-parameters for the inter-arrival forecaster."""

    hidden_size: int = 100
    window: int = 20
    learning_rate: float = 1e-4
    max_epochs: int = 50
    batch_size: int = 256
    patience: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    split_train: float = 0.70
    split_val: float = 0.15
    split_test: float = 0.15
    include_phase: bool = True
    seed: int = 0
    # Calibration refuses to certify a miss-detection bound on fewer
    # validation decisions than this; 0 means ceil(3 / p_md target)
    # (rule of three).
    min_calibration_samples: int = 0
    # Fitting window: only the most recent gaps are used when a scenario
    # produces a longer series (keeps the training cost bounded).
    max_fit_gaps: int = 12_000

    def validate(self) -> None:
        if self.hidden_size < 1 or self.window < 1:
            raise InvalidParameterError("hidden_size and window must be >= 1")
        if self.learning_rate <= 0:
            raise InvalidParameterError("learning_rate must be > 0")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise InvalidParameterError("max_epochs and batch_size must be >= 1")
        s = self.split_train + self.split_val + self.split_test
        if abs(s - 1.0) > 1e-9:
            raise InvalidParameterError(f"split fractions must sum to 1, got {s}")
        if min(self.split_train, self.split_val, self.split_test) <= 0:
            raise InvalidParameterError("split fractions must be positive")


@dataclass
class ScenarioConfig:
    """Everything a simulation run needs, with defaults from the reference
    parameter table (1 ms TTI, exponential influence, q in [0.1, 0.9])."""

    lambda_e: float = 1e-3           # event epicenters per m^2
    lambda_m: float = 0.1            # devices per m^2
    region_radius: float = 42.0      # m, device disk
    guard_margin: float = 10.0       # m, extra radius for the event disk
    q_range: tuple[float, float] = (0.1, 0.9)
    device_count: int | None = None  # overrides the Poisson draw when set
    horizon: int = 200_000           # TTIs per run
    tti_ms: float = 1.0
    rate_active: float = 1.0         # packets per TTI in the active state
    rate_idle: float = 0.0
    jacobian_form: str = "as_printed"  # or "radial": include the 2-D Jacobian d
    runs: int = 150
    master_seed: int = 1
    workers: int = 1
    out_dir: str = "wusim-out"

    # Sleep-period policy for WuS/FWuS: "design_point" solves t4 once at the
    # design traffic intensity below and keeps it fixed across scenarios
    # (static beacon grid); "per_scenario" re-solves at the scenario's own
    # analytic activation probability.
    t4_policy: str = "design_point"
    t4_design_lambda_e: float = 1e-2
    t4_design_q: float = 0.5

    # "trace": beacons serve the generated packet buffer (product runs);
    # "markov": beacon outcomes are Bernoulli draws matching the analytic
    # chain (used for analytics cross-checks).
    beacon_coupling: str = "trace"
    train_per_run: bool = False      # retrain the forecaster for every run

    # Dynamic-density experiment knobs.
    dynamic_schedule: list | None = None   # [(start_slot, lambda_e), ...]
    dynamic_window: int = 10_000           # TTIs per reported power window
    recalib_interval: int = 50_000         # TTIs between margin refreshes
    recalib_window: int = 1000             # most recent gaps used to refresh
    recalib_epochs: int = 3                # fine-tuning epochs per refresh

    wakeup: WakeupParams = field(default_factory=WakeupParams)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        if not (math.isfinite(self.lambda_e) and self.lambda_e >= 0):
            raise InvalidParameterError(f"lambda_e must be finite and >= 0, got {self.lambda_e}")
        if not (math.isfinite(self.lambda_m) and self.lambda_m >= 0):
            raise InvalidParameterError(f"lambda_m must be finite and >= 0, got {self.lambda_m}")
        if self.region_radius <= 0 or self.guard_margin < 0:
            raise InvalidParameterError("region_radius must be > 0 and guard_margin >= 0")
        lo, hi = self.q_range
        if not (0.0 <= lo <= hi < 1.0):
            raise InvalidParameterError(f"q_range must satisfy 0 <= lo <= hi < 1, got {self.q_range}")
        if self.device_count is not None and self.device_count < 0:
            raise InvalidParameterError("device_count must be >= 0")
        if self.horizon < 1:
            raise InvalidParameterError("horizon must be >= 1")
        if self.rate_active <= 0 or self.rate_idle < 0:
            raise InvalidParameterError("rate_active must be > 0 and rate_idle >= 0")
        if self.jacobian_form not in ("as_printed", "radial"):
            raise InvalidParameterError(f"jacobian_form must be 'as_printed' or 'radial', got {self.jacobian_form!r}")
        if self.t4_policy not in ("design_point", "per_scenario"):
            raise InvalidParameterError(f"t4_policy must be 'design_point' or 'per_scenario', got {self.t4_policy!r}")
        if self.beacon_coupling not in ("trace", "markov"):
            raise InvalidParameterError(f"beacon_coupling must be 'trace' or 'markov', got {self.beacon_coupling!r}")
        if self.runs < 1 or self.workers < 1:
            raise InvalidParameterError("runs and workers must be >= 1")
        if self.dynamic_schedule is not None:
            starts = [s for s, _ in self.dynamic_schedule]
            if starts != sorted(starts):
                raise InvalidParameterError("dynamic_schedule must be sorted by start slot")
        self.wakeup.validate()
        self.train.validate()

    @property
    def guard_radius(self) -> float:
        return self.region_radius + self.guard_margin

    def replace(self, **kw) -> "ScenarioConfig":
        return dataclasses.replace(self, **kw)


_NESTED = {"wakeup": WakeupParams, "train": TrainConfig}


def _known_keys() -> list[str]:
    keys = [f.name for f in fields(ScenarioConfig) if f.name not in _NESTED]
    for prefix, cls in _NESTED.items():
        keys += [f"{prefix}.{f.name}" for f in fields(cls)]
    return sorted(keys)


def _parse_value(text: str):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text  # bare words such as design_point stay strings


def load_config(path: str | Path) -> ScenarioConfig:
    """Read a flat key=value config file; unset keys take their defaults.

    Raises ConfigError for unknown keys (listing the valid ones) and
    InvalidParameterError when a value violates an invariant.
    """
    path = Path(path)
    cfg = ScenarioConfig()
    valid = set(_known_keys())
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in valid:
            raise ConfigError(
                f"{path}:{lineno}: unknown key {key!r}; valid keys are: " + ", ".join(sorted(valid))
            )
        parsed = _parse_value(value)
        if "." in key:
            prefix, sub = key.split(".", 1)
            setattr(getattr(cfg, prefix), sub, parsed)
        else:
            default = next(f for f in fields(ScenarioConfig) if f.name == key)
            if key == "q_range" and isinstance(parsed, list):
                parsed = tuple(parsed)
            if key == "device_count" and parsed is not None:
                parsed = int(parsed)
            setattr(cfg, key, parsed)
            del default
    cfg.validate()
    return cfg


def dump_config(cfg: ScenarioConfig) -> str:
    """Serialize the full effective configuration in the input format."""
    lines = []
    for f in fields(ScenarioConfig):
        if f.name in _NESTED:
            continue
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = list(v)
        lines.append(f"{f.name} = {v!r}")
    for prefix in _NESTED:
        obj = getattr(cfg, prefix)
        for f in fields(type(obj)):
            lines.append(f"{prefix}.{f.name} = {getattr(obj, f.name)!r}")
    return "\n".join(lines) + "\n"
