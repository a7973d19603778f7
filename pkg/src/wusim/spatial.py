"""Spatial layer: Poisson point process deployments and event-driven
activation probabilities.

Devices and event epicenters are drawn as independent homogeneous PPPs on
concentric disks.  Events are sampled on a disk larger than the device
region (a guard ring) so that devices near the boundary see the same event
field as interior ones; the closed-form activation probability assumes an
infinite plane.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from .errors import InvalidParameterError, NonIntegrableInfluenceError

QUAD_ABS_TOL = 1e-10
TRUNCATION_LEVEL = 1e-12   # integrate out to where p(d) falls below this
TRUNCATION_LIMIT = 1e6     # give up on the tail search past this distance


class ExponentialInfluence:
    """Default distance-decay function exp(-d/scale).

    Carries its integrals in closed form so callers can skip quadrature:
    integral of p(d) over [0, inf) is `scale`, integral of d*p(d) is
    `scale**2`.
    """

    def __init__(self, scale: float = 1.0):
        if not (math.isfinite(scale) and scale > 0):
            raise InvalidParameterError(f"scale must be finite and > 0, got {scale}")
        self.scale = scale
        self.integral_printed = scale
        self.integral_radial = scale * scale

    def __call__(self, d):
        return np.exp(-np.asarray(d, dtype=float) / self.scale)


@dataclass(frozen=True)
class Deployment:
    """One spatial realization: device and event positions plus densities."""

    devices: np.ndarray        # (n, 2) positions in meters
    events: np.ndarray         # (m, 2) positions in meters
    region_radius: float
    guard_radius: float
    lambda_m: float
    lambda_e: float

    def __post_init__(self):
        if self.devices.size and not np.all(np.isfinite(self.devices)):
            raise InvalidParameterError("device coordinates must be finite")
        if self.events.size and not np.all(np.isfinite(self.events)):
            raise InvalidParameterError("event coordinates must be finite")


def _uniform_disk(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    r = radius * np.sqrt(rng.random(n))
    theta = 2.0 * math.pi * rng.random(n)
    return np.column_stack((r * np.cos(theta), r * np.sin(theta)))


def sample_deployment(cfg, rng: np.random.Generator) -> Deployment:
    """Draw device and event PPP realizations for one run.

    Device count is Poisson(lambda_m * pi * region_radius^2) unless
    cfg.device_count pins it; events are Poisson on the guard disk.
    """
    for name, val in (("lambda_m", cfg.lambda_m), ("lambda_e", cfg.lambda_e)):
        if not (math.isfinite(val) and val >= 0):
            raise InvalidParameterError(f"{name} must be finite and >= 0, got {val}")
    if cfg.region_radius <= 0:
        raise InvalidParameterError("region_radius must be > 0")

    if cfg.device_count is not None:
        n_dev = int(cfg.device_count)
    else:
        n_dev = int(rng.poisson(cfg.lambda_m * math.pi * cfg.region_radius**2))
    guard = cfg.region_radius + cfg.guard_margin
    n_ev = int(rng.poisson(cfg.lambda_e * math.pi * guard**2))
    return Deployment(
        devices=_uniform_disk(rng, n_dev, cfg.region_radius),
        events=_uniform_disk(rng, n_ev, guard),
        region_radius=cfg.region_radius,
        guard_radius=guard,
        lambda_m=cfg.lambda_m,
        lambda_e=cfg.lambda_e,
    )


def _influence_integral(p, jacobian_form: str) -> float:
    """Integrate p(d) (or d*p(d)) over [0, inf) with tail truncation."""
    if isinstance(p, ExponentialInfluence):
        return p.integral_printed if jacobian_form == "as_printed" else p.integral_radial

    # Find a truncation point where the influence is negligible.
    d_cut = 1.0
    while float(p(d_cut)) > TRUNCATION_LEVEL:
        d_cut *= 2.0
        if d_cut > TRUNCATION_LIMIT:
            raise NonIntegrableInfluenceError(
                "influence function does not decay below "
                f"{TRUNCATION_LEVEL} within {TRUNCATION_LIMIT} m"
            )
    if jacobian_form == "as_printed":
        integrand = lambda d: float(p(d))
    else:
        integrand = lambda d: d * float(p(d))
    value, _ = quad(integrand, 0.0, d_cut, epsabs=QUAD_ABS_TOL, limit=200)
    return value


def activation_probability_analytic(
    lambda_e: float, p=None, jacobian_form: str = "as_printed"
) -> float:
    """Closed-form per-slot activation probability of a device.

    Returns 1 - exp(-2*pi*lambda_e * I) where I integrates the influence
    function over distance.  The default form integrates p(d) directly;
    jacobian_form="radial" integrates d*p(d) instead (the planar PGFL
    weighting).  Both coincide for the default exponential influence.
    """
    if not (math.isfinite(lambda_e) and lambda_e >= 0):
        raise InvalidParameterError(f"lambda_e must be finite and >= 0, got {lambda_e}")
    if jacobian_form not in ("as_printed", "radial"):
        raise InvalidParameterError(f"unknown jacobian_form {jacobian_form!r}")
    if lambda_e == 0.0:
        return 0.0
    if p is None:
        p = ExponentialInfluence()
    integral = _influence_integral(p, jacobian_form)
    return -math.expm1(-2.0 * math.pi * lambda_e * integral)


def per_device_activation(dep: Deployment, p=None) -> np.ndarray:
    """Per-slot activation probability of each device for a fixed event set.

    Device i at position u_i gets 1 - prod_e (1 - p(|u_i - e|)), the
    complement of escaping the influence of every epicenter.  Computed once
    per realization; with no events every entry is 0.
    """
    if p is None:
        p = ExponentialInfluence()
    n = len(dep.devices)
    if n == 0:
        return np.zeros(0)
    if len(dep.events) == 0:
        return np.zeros(n)
    diff = dep.devices[:, None, :] - dep.events[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    escape = np.prod(1.0 - np.clip(p(dist), 0.0, 1.0), axis=1)
    return 1.0 - escape
