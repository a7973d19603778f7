"""Inter-arrival forecasting: a from-scratch single-layer LSTM regressor
with Adam training, plus the sleep-decision rule and its margin calibration.

The estimator follows the scikit-learn fit/predict convention so it can sit
in standard pipelines; all numerics are plain numpy float64, which keeps
gradient checks tight and runs reproducible bit for bit.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .errors import FitQualityError, InvalidDatasetError, InvalidParameterError
from .wakeup import quantize_sleep

CHECKPOINT_VERSION = 1

_GATE_ORDER = "ifog"  # input, forget, output, candidate


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def init_lstm_params(rng: np.random.Generator, input_size: int, hidden_size: int) -> dict:
    """Uniform +-1/sqrt(hidden) weights; forget-gate bias starts at 1."""
    bound = 1.0 / math.sqrt(hidden_size)
    h4 = 4 * hidden_size
    params = {
        "wx": rng.uniform(-bound, bound, size=(input_size, h4)),
        "wh": rng.uniform(-bound, bound, size=(hidden_size, h4)),
        "b": np.zeros(h4),
        "wy": rng.uniform(-bound, bound, size=(hidden_size, 1)),
        "by": np.zeros(1),
    }
    params["b"][hidden_size : 2 * hidden_size] = 1.0
    return params


def lstm_forward(params: dict, x: np.ndarray, keep_caches: bool = True) -> tuple[np.ndarray, list]:
    """Run the gated recurrence over a batch of windows.

    x has shape (samples, steps, features); returns the scalar output per
    sample (normalized units) and the per-step caches needed for the
    backward pass (empty when keep_caches is off, which bounds memory for
    inference over long series).
    """
    if x.ndim != 3:
        raise InvalidParameterError(f"expected (samples, steps, features), got shape {x.shape}")
    if x.shape[2] != params["wx"].shape[0]:
        raise InvalidParameterError(
            f"feature dimension {x.shape[2]} does not match weights {params['wx'].shape[0]}"
        )
    s, t_steps, _ = x.shape
    hidden = params["wh"].shape[0]
    h = np.zeros((s, hidden))
    c = np.zeros((s, hidden))
    caches = []
    for t in range(t_steps):
        xt = x[:, t, :]
        z = xt @ params["wx"] + h @ params["wh"] + params["b"]
        zi, zf, zo, zg = np.split(z, 4, axis=1)
        i = _sigmoid(zi)
        f = _sigmoid(zf)
        o = _sigmoid(zo)
        g = np.tanh(zg)
        c_new = f * c + i * g
        tanh_c = np.tanh(c_new)
        h_new = o * tanh_c
        if keep_caches:
            caches.append((xt, h, c, i, f, o, g, c_new, tanh_c))
        h, c = h_new, c_new
    y = (h @ params["wy"] + params["by"]).ravel()
    if keep_caches:
        caches.append(h)
    return y, caches


_INFER_CHUNK = 4096


def _infer(params: dict, x: np.ndarray) -> np.ndarray:
    """Cache-free forward pass in memory-bounded chunks."""
    if len(x) <= _INFER_CHUNK:
        return lstm_forward(params, x, keep_caches=False)[0]
    parts = [
        lstm_forward(params, x[i : i + _INFER_CHUNK], keep_caches=False)[0]
        for i in range(0, len(x), _INFER_CHUNK)
    ]
    return np.concatenate(parts)


def lstm_gradients(params: dict, x: np.ndarray, targets: np.ndarray) -> tuple[float, dict]:
    """Mean-squared-error loss and exact gradients for every parameter."""
    y, caches = lstm_forward(params, x)
    targets = np.asarray(targets, dtype=float).ravel()
    s = len(y)
    err = y - targets
    loss = float(np.mean(err**2))
    dy = (2.0 * err / s)[:, None]

    h_last = caches[-1]
    grads = {
        "wy": h_last.T @ dy,
        "by": dy.sum(axis=0),
        "wx": np.zeros_like(params["wx"]),
        "wh": np.zeros_like(params["wh"]),
        "b": np.zeros_like(params["b"]),
    }
    dh = dy @ params["wy"].T
    dc = np.zeros_like(dh)
    for t in range(x.shape[1] - 1, -1, -1):
        xt, h_prev, c_prev, i, f, o, g, c_new, tanh_c = caches[t]
        do = dh * tanh_c
        dc = dc + dh * o * (1.0 - tanh_c**2)
        di = dc * g
        df = dc * c_prev
        dg = dc * i
        dz = np.concatenate(
            [
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                do * o * (1.0 - o),
                dg * (1.0 - g**2),
            ],
            axis=1,
        )
        grads["wx"] += xt.T @ dz
        grads["wh"] += h_prev.T @ dz
        grads["b"] += dz.sum(axis=0)
        dh = dz @ params["wh"].T
        dc = dc * f
    return loss, grads


def rmse(predictions, observations) -> float:
    """Root mean square prediction error."""
    p = np.asarray(predictions, dtype=float).ravel()
    o = np.asarray(observations, dtype=float).ravel()
    if len(p) == 0 or len(p) != len(o):
        raise InvalidParameterError("predictions and observations must be equal-length and non-empty")
    return float(np.sqrt(np.mean((p - o) ** 2)))


def r_metric(predictions, observations) -> float:
    """Fit statistic sqrt(1 - mean((1 - g/g_o)^2)) over paired samples.

    Raises on zero observations, and raises FitQualityError when the
    radicand goes negative (relative errors too large to call a fit).
    """
    p = np.asarray(predictions, dtype=float).ravel()
    o = np.asarray(observations, dtype=float).ravel()
    if len(p) == 0 or len(p) != len(o):
        raise InvalidParameterError("predictions and observations must be equal-length and non-empty")
    if np.any(o == 0.0):
        raise ZeroDivisionError("observations must be nonzero")
    radicand = 1.0 - float(np.mean((1.0 - p / o) ** 2))
    if radicand < 0.0:
        raise FitQualityError(f"relative errors too large (radicand {radicand:.4f})")
    return math.sqrt(radicand)


class InterArrivalForecaster(BaseEstimator):
    """LSTM regressor over sliding windows of coordinator inter-arrivals.

    fit() consumes the raw gap sequence (TTIs, chronological) and optionally
    the matching arrival slots; the slot phase modulo `phase_period` is then
    added as a second input feature.  The chronological 70/15/15 split,
    Adam updates and patience-based early stopping are all internal.
    """

    def __init__(
        self,
        hidden_size: int = 100,
        window: int = 20,
        learning_rate: float = 1e-4,
        max_epochs: int = 50,
        batch_size: int = 256,
        patience: int = 5,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
        split_train: float = 0.70,
        split_val: float = 0.15,
        split_test: float = 0.15,
        phase_period: float | None = None,
        seed: int = 0,
    ):
        self.hidden_size = hidden_size
        self.window = window
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.patience = patience
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.split_train = split_train
        self.split_val = split_val
        self.split_test = split_test
        self.phase_period = phase_period
        self.seed = seed

    # -- helpers -----------------------------------------------------------

    @property
    def is_fitted_(self) -> bool:
        return hasattr(self, "params_")

    def _check_fitted(self):
        if not self.is_fitted_:
            raise NotFittedError("forecaster must be fitted before prediction")

    def _n_features(self) -> int:
        return 2 if self.phase_period else 1

    @staticmethod
    def _scale_of(values: np.ndarray) -> float:
        s = float(np.std(values))
        return s if s > 1e-9 else 1.0

    def _build_samples(self, gaps: np.ndarray, slots: np.ndarray | None):
        """Window the gap series into (X, y, per-sample slot phases)."""
        w = self.window
        n_samples = len(gaps) - w
        windows = np.lib.stride_tricks.sliding_window_view(gaps, w)[:n_samples]
        x = windows[:, :, None].astype(float)
        if self.phase_period:
            if slots is None:
                raise InvalidParameterError("phase_period set but no arrival slots given")
            phase = np.mod(slots.astype(float), float(self.phase_period))
            ph_win = np.lib.stride_tricks.sliding_window_view(phase, w)[:n_samples]
            x = np.concatenate([x, ph_win[:, :, None]], axis=2)
        y = gaps[w:].astype(float)
        return np.ascontiguousarray(x), y

    def _normalize(self, x: np.ndarray, y: np.ndarray | None = None):
        xn = x.copy()
        xn[:, :, 0] = (x[:, :, 0] - self.gap_mean_) / self.gap_scale_
        if x.shape[2] > 1:
            xn[:, :, 1] = (x[:, :, 1] - self.phase_mean_) / self.phase_scale_
        if y is None:
            return xn
        return xn, (y - self.gap_mean_) / self.gap_scale_

    # -- estimator API ------------------------------------------------------

    def fit(self, gaps, arrival_slots=None):
        gaps = np.asarray(gaps, dtype=float).ravel()
        if np.any(gaps <= 0):
            raise InvalidParameterError("inter-arrival gaps must be positive")
        slots = None if arrival_slots is None else np.asarray(arrival_slots).ravel()
        if slots is not None and len(slots) != len(gaps):
            raise InvalidParameterError("arrival_slots must match the gap sequence length")
        if len(gaps) < self.window + 3:
            raise InvalidDatasetError(
                f"need at least window+3 = {self.window + 3} gaps, got {len(gaps)}"
            )

        x_all, y_all = self._build_samples(gaps, slots)
        n = len(y_all)
        n_train = max(1, int(round(self.split_train * n)))
        n_val = max(1, int(round(self.split_val * n)))
        n_train = min(n_train, n - 2)
        n_val = min(n_val, n - n_train - 1)

        train_targets = y_all[:n_train]
        self.gap_mean_ = float(np.mean(train_targets))
        self.gap_scale_ = self._scale_of(train_targets)
        if self.phase_period:
            tr_phase = x_all[:n_train, :, 1]
            self.phase_mean_ = float(np.mean(tr_phase))
            self.phase_scale_ = self._scale_of(tr_phase)

        xn, yn = self._normalize(x_all, y_all)
        x_tr, y_tr = xn[:n_train], yn[:n_train]
        x_val, y_val = xn[n_train : n_train + n_val], yn[n_train : n_train + n_val]
        self.split_bounds_ = (n_train, n_train + n_val, n)

        rng = np.random.default_rng(self.seed)
        params = init_lstm_params(rng, self._n_features(), self.hidden_size)
        adam_m = {k: np.zeros_like(v) for k, v in params.items()}
        adam_v = {k: np.zeros_like(v) for k, v in params.items()}
        step = 0

        best_val = math.inf
        best_params = {k: v.copy() for k, v in params.items()}
        stale = 0
        self.history_ = []
        for epoch in range(self.max_epochs):
            order = rng.permutation(n_train)
            epoch_sq = 0.0
            for start in range(0, n_train, self.batch_size):
                idx = order[start : start + self.batch_size]
                loss, grads = lstm_gradients(params, x_tr[idx], y_tr[idx])
                epoch_sq += loss * len(idx)
                step += 1
                bc1 = 1.0 - self.beta1**step
                bc2 = 1.0 - self.beta2**step
                for k in params:
                    adam_m[k] = self.beta1 * adam_m[k] + (1.0 - self.beta1) * grads[k]
                    adam_v[k] = self.beta2 * adam_v[k] + (1.0 - self.beta2) * grads[k] ** 2
                    params[k] -= (
                        self.learning_rate
                        * (adam_m[k] / bc1)
                        / (np.sqrt(adam_v[k] / bc2) + self.epsilon)
                    )
            train_rmse = math.sqrt(epoch_sq / n_train)
            val_pred = _infer(params, x_val)
            val_rmse = float(np.sqrt(np.mean((val_pred - y_val) ** 2)))
            self.history_.append(
                {
                    "epoch": epoch,
                    "train_rmse": train_rmse,
                    "val_rmse": val_rmse,
                    "train_rmse_tti": train_rmse * self.gap_scale_,
                    "val_rmse_tti": val_rmse * self.gap_scale_,
                }
            )
            if val_rmse < best_val - 1e-12:
                best_val = val_rmse
                best_params = {k: v.copy() for k, v in params.items()}
                stale = 0
            else:
                stale += 1
                if stale >= self.patience:
                    break

        self.params_ = best_params
        self.margin_ = 0.0
        self._train_gaps_ = gaps
        self._train_slots_ = slots
        return self

    def predict(self, windows, slot_windows=None):
        """Predict the next gap (TTIs) for each (window,) row of past gaps."""
        self._check_fitted()
        x = np.asarray(windows, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.window:
            raise InvalidParameterError(f"windows must have {self.window} columns, got {x.shape[1]}")
        feats = x[:, :, None]
        if self.phase_period:
            if slot_windows is None:
                raise InvalidParameterError("model uses the phase feature; slot_windows required")
            ph = np.mod(np.asarray(slot_windows, dtype=float), float(self.phase_period))
            if ph.ndim == 1:
                ph = ph[None, :]
            feats = np.concatenate([feats, ph[:, :, None]], axis=2)
        y = _infer(self.params_, self._normalize(feats))
        return y * self.gap_scale_ + self.gap_mean_

    def predict_sequence(self, gaps, arrival_slots=None) -> np.ndarray:
        """One-step-ahead predictions over a whole gap series (batched).

        Entry j is the forecast of gaps[j] made from the window ending at
        gaps[j-1]; the first `window` entries are NaN (no full history yet).
        """
        self._check_fitted()
        gaps = np.asarray(gaps, dtype=float).ravel()
        out = np.full(len(gaps), np.nan)
        if len(gaps) <= self.window:
            return out
        slots = None if arrival_slots is None else np.asarray(arrival_slots).ravel()
        x, _ = self._build_samples(gaps, slots)
        y = _infer(self.params_, self._normalize(x))
        out[self.window :] = y * self.gap_scale_ + self.gap_mean_
        return out

    def forecast_next(self, recent_gaps, recent_slots=None) -> float:
        """Forecast the gap following the most recent `window` observations."""
        self._check_fitted()
        recent_gaps = np.asarray(recent_gaps, dtype=float).ravel()
        if len(recent_gaps) < self.window:
            raise InvalidParameterError(f"need at least {self.window} recent gaps")
        w = recent_gaps[-self.window :]
        sw = None
        if recent_slots is not None:
            sw = np.asarray(recent_slots).ravel()[-self.window :]
        return float(self.predict(w, sw)[0])

    def forecast_after(self, gaps, arrival_slots=None, anchors=None) -> np.ndarray:
        """Forecast the gap following each anchor index, batched.

        The window for anchor j ends at gap j inclusive; anchors with less
        than a full window of history come back NaN.  Only the requested
        windows are materialized, so sparse anchor sets over long series
        stay cheap.
        """
        self._check_fitted()
        gaps = np.asarray(gaps, dtype=float).ravel()
        anchors = np.asarray(anchors, dtype=int).ravel()
        out = np.full(len(anchors), np.nan)
        valid = (anchors >= self.window - 1) & (anchors < len(gaps))
        if not np.any(valid):
            return out
        w = self.window
        rows = anchors[valid] - (w - 1)
        g_win = np.lib.stride_tricks.sliding_window_view(gaps, w)[rows]
        feats = g_win[:, :, None].astype(float)
        if self.phase_period:
            if arrival_slots is None:
                raise InvalidParameterError("model uses the phase feature; arrival_slots required")
            phase = np.mod(np.asarray(arrival_slots, dtype=float).ravel(), float(self.phase_period))
            p_win = np.lib.stride_tricks.sliding_window_view(phase, w)[rows]
            feats = np.concatenate([feats, p_win[:, :, None]], axis=2)
        y = _infer(self.params_, self._normalize(np.ascontiguousarray(feats)))
        out[valid] = y * self.gap_scale_ + self.gap_mean_
        return out

    def evaluate(self, gaps=None, arrival_slots=None, split: str = "test") -> dict:
        """RMSE (z-scored, TTI, and mean-relative) and R on a held-out split
        of the fitted series (the default), or on a fresh series."""
        self._check_fitted()
        if gaps is None:
            gaps = self._train_gaps_
            arrival_slots = self._train_slots_
        gaps = np.asarray(gaps, dtype=float).ravel()
        slots = None if arrival_slots is None else np.asarray(arrival_slots).ravel()
        x, y = self._build_samples(gaps, slots)
        if split in ("val", "test") and np.array_equal(gaps, self._train_gaps_):
            lo_val, lo_test, n = self.split_bounds_
            sl = slice(lo_val, lo_test) if split == "val" else slice(lo_test, n)
            x, y = x[sl], y[sl]
        pred = _infer(self.params_, self._normalize(x))
        pred_tti = pred * self.gap_scale_ + self.gap_mean_
        err_tti = rmse(pred_tti, y)
        return {
            "rmse_norm": err_tti / self.gap_scale_,
            "rmse_tti": err_tti,
            "rmse_rel": err_tti / self.gap_mean_ if self.gap_mean_ else math.inf,
            "r": r_metric(pred_tti, y),
            "n": len(y),
        }

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        """Write a self-describing .npz checkpoint (weights, normalization,
        calibrated margin, version)."""
        self._check_fitted()
        arrays = {f"param_{k}": v for k, v in self.params_.items()}
        np.savez(
            path,
            version=np.int64(CHECKPOINT_VERSION),
            hidden_size=np.int64(self.hidden_size),
            window=np.int64(self.window),
            phase_period=np.float64(self.phase_period or -1.0),
            gap_mean=np.float64(self.gap_mean_),
            gap_scale=np.float64(self.gap_scale_),
            phase_mean=np.float64(getattr(self, "phase_mean_", 0.0)),
            phase_scale=np.float64(getattr(self, "phase_scale_", 1.0)),
            margin=np.float64(self.margin_),
            **arrays,
        )

    @classmethod
    def load(cls, path) -> "InterArrivalForecaster":
        data = np.load(path)
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise InvalidParameterError(f"unsupported checkpoint version {version}")
        phase_period = float(data["phase_period"])
        model = cls(
            hidden_size=int(data["hidden_size"]),
            window=int(data["window"]),
            phase_period=None if phase_period < 0 else phase_period,
        )
        model.params_ = {k[len("param_") :]: data[k] for k in data.files if k.startswith("param_")}
        model.gap_mean_ = float(data["gap_mean"])
        model.gap_scale_ = float(data["gap_scale"])
        model.phase_mean_ = float(data["phase_mean"])
        model.phase_scale_ = float(data["phase_scale"])
        model.margin_ = float(data["margin"])
        model.history_ = []
        model._train_gaps_ = np.zeros(0)
        model._train_slots_ = None
        model.split_bounds_ = (0, 0, 0)
        return model


# -- sleep decisions ---------------------------------------------------------


def decide_sleep(model: InterArrivalForecaster, recent_gaps, t4: float, margin: float,
                 recent_slots=None) -> float:
    """Sleep duration before the next attended beacon.

    Forecasts the next gap, subtracts the safety margin, and snaps to the
    beacon grid; never shorter than one beacon period (the non-forecasting
    behavior is the floor).
    """
    if t4 <= 0:
        raise InvalidParameterError(f"t4 must be > 0, got {t4}")
    g = model.forecast_next(recent_gaps, recent_slots)
    return max(t4, quantize_sleep(max(g - margin, 0.0), t4))


def _window_index(value: float, t4: float) -> int:
    return max(1, int(math.floor(value / t4 + 0.5)))


class CalibrationResult(NamedTuple):
    margin: float
    p_md: float
    p_f: float
    attained: bool
    n_samples: int


def score_decisions(predictions, observations, t4: float, margin: float) -> tuple[float, float]:
    """Miss-detection and false-alarm rates of margin-adjusted decisions.

    A decision maps each forecast to the beacon window it would attend;
    attending after the observed gap's window is a miss, before it is a
    needless wake.
    """
    p = np.asarray(predictions, dtype=float).ravel()
    o = np.asarray(observations, dtype=float).ravel()
    w_obs = np.maximum(1, np.floor(o / t4 + 0.5).astype(int))
    w_dec = np.maximum(1, np.floor(np.maximum(p - margin, 0.0) / t4 + 0.5).astype(int))
    n = len(o)
    p_md = float(np.count_nonzero(w_dec > w_obs)) / n
    p_f = float(np.count_nonzero(w_dec < w_obs)) / n
    return p_md, p_f


def calibrate_margin(
    model: InterArrivalForecaster,
    gaps,
    t4: float,
    p_md_target: float = 0.01,
    p_f_target: float = 0.1,
    arrival_slots=None,
    min_samples: int | None = None,
) -> CalibrationResult:
    """Smallest margin whose validation decisions stay under the miss target.

    Candidates are quantiles of the positive overprediction errors.  When
    the validation set is too small to certify the target (rule of three:
    fewer than ceil(3/p_md_target) decisions), the most conservative margin
    is returned with attained=False, which collapses decisions to the
    non-forecasting floor.
    """
    model._check_fitted()
    gaps = np.asarray(gaps, dtype=float).ravel()
    if len(gaps) == 0:
        raise InvalidParameterError("validation gap sequence is empty")
    preds = model.predict_sequence(gaps, arrival_slots)
    mask = ~np.isnan(preds)
    preds, obs = preds[mask], gaps[mask]
    n = len(obs)
    if min_samples is None:
        min_samples = math.ceil(3.0 / p_md_target)
    conservative = float(np.max(preds)) + t4 if n else t4
    if n < min_samples:
        model.margin_ = conservative
        return CalibrationResult(conservative, 0.0, 0.0, False, n)

    over = np.maximum(preds - obs, 0.0)
    candidates = np.unique(np.concatenate([[0.0], np.quantile(over, np.linspace(0.0, 1.0, 101))]))
    for margin in candidates:
        p_md, p_f = score_decisions(preds, obs, t4, float(margin))
        if p_md <= p_md_target:
            model.margin_ = float(margin)
            return CalibrationResult(float(margin), p_md, p_f, True, n)
    p_md, p_f = score_decisions(preds, obs, t4, conservative)
    model.margin_ = conservative
    return CalibrationResult(conservative, p_md, p_f, False, n)
