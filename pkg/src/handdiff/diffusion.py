"""Variance schedules, forward noising, the DDIM noiser and hypothesis averaging.

Timesteps are 1-based: index ``t`` in ``1..T`` refers to ``beta[t]``, and
``alpha_bar[0] == 1`` so that stepping to ``t_prev = 0`` is noise-free.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

SCHEDULE_KINDS = ("cosine", "linear")


class NumericalDomainError(ArithmeticError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    kind: str
    T: int
    beta: np.ndarray  # (T + 1,), beta[0] unused (0)
    alpha: np.ndarray  # (T + 1,)
    alpha_bar: np.ndarray  # (T + 1,), alpha_bar[0] = 1

    def sigma(self, t, t_prev):
        return ddim_sigma(self.alpha_bar[t], self.alpha_bar[t_prev])


def build_schedule(kind="cosine", T=500, linear_range=(1e-4, 0.02), cosine_offset=0.008,
                   max_beta=0.999):
    if T < 2:
        raise ValueError(f"schedule needs T >= 2, got {T}")
    if kind == "linear":
        beta = np.linspace(linear_range[0], linear_range[1], T)
    elif kind == "cosine":
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + cosine_offset) / (1 + cosine_offset) * math.pi / 2) ** 2
        beta = np.minimum(1.0 - f[1:] / f[:-1], max_beta)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    beta = np.concatenate([[0.0], beta])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if not (np.all(beta[1:] > 0) and np.all(beta[1:] < 1)):
        raise NumericalDomainError("betas must lie strictly inside (0, 1)")
    return DiffusionSchedule(kind, T, beta, alpha, alpha_bar)


def _check_t(schedule, t, name="t", lo=1):
    if not lo <= t <= schedule.T:
        raise ValueError(f"{name}={t} outside [{lo}, {schedule.T}]")


def forward_noise(j0, t, schedule, eps=None, rng=None):
    """Sample ``q(J_t | J_0) = sqrt(abar_t) J_0 + sqrt(1 - abar_t) eps``."""
    _check_t(schedule, t)
    j0 = np.asarray(j0, dtype=np.float64)
    if eps is None:
        eps = rng.standard_normal(j0.shape)
    ab = schedule.alpha_bar[t]
    return math.sqrt(ab) * j0 + eps * math.sqrt(1.0 - ab)


def ddim_sigma(ab_t, ab_prev):
    return math.sqrt((1.0 - ab_prev) * (1.0 - ab_t / ab_prev) / (1.0 - ab_t))


def predicted_noise(jt, j0_hat, ab_t):
    return (jt - math.sqrt(ab_t) * j0_hat) / math.sqrt(1.0 - ab_t)


def ddim_step(jt, j0_hat, t, t_prev, schedule, rng=None, eps=None, sigma=None):
    """Move hypotheses from ``t`` to ``t_prev`` given the denoised estimate.

    ``sigma`` overrides the default DDPM-equivalent noise level (0 gives the
    deterministic DDIM update).  ``eps`` supplies the fresh noise explicitly.
    """
    if not 0 <= t_prev < t:
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    _check_t(schedule, t)
    jt = np.asarray(jt, dtype=np.float64)
    j0_hat = np.asarray(j0_hat, dtype=np.float64)
    ab_t, ab_prev = schedule.alpha_bar[t], schedule.alpha_bar[t_prev]
    if sigma is None:
        sigma = ddim_sigma(ab_t, ab_prev)
    eps_t = predicted_noise(jt, j0_hat, ab_t)
    rest = 1.0 - ab_prev - sigma * sigma
    if rest < -1e-12:
        raise NumericalDomainError(f"1 - abar_prev - sigma^2 = {rest:.3e} < 0 at t={t}")
    rest = max(rest, 0.0)
    out = math.sqrt(ab_prev) * j0_hat + math.sqrt(rest) * eps_t
    if sigma > 0.0:
        if eps is None:
            eps = rng.standard_normal(jt.shape)
        out = out + sigma * eps
    return out


def subsample_timesteps(T, n_steps):
    """``n_steps`` evenly spaced timesteps in descending order, starting at ``T``."""
    if not 1 <= n_steps <= T:
        raise ValueError(f"need 1 <= T' <= T, got T'={n_steps}, T={T}")
    return [T * (n_steps - i) // n_steps for i in range(n_steps)]


def aggregate_hypotheses(hyps):
    """Per-joint mean over the leading hypothesis axis."""
    hyps = np.asarray(hyps, dtype=np.float64)
    if hyps.ndim < 1 or hyps.shape[0] == 0:
        raise ValueError("cannot aggregate an empty hypothesis set")
    return hyps.mean(axis=0)


def reverse_chain(denoise_fn, shape, schedule, n_steps, rng, return_states=False):
    """Run the reverse process from unit-Gaussian ``J_T`` of ``shape``.

    ``denoise_fn(jt, t)`` returns the clean estimate.  The result is the
    estimate produced at the last (smallest) subsampled step, so no noise is
    added after the final denoiser call.
    """
    steps = subsample_timesteps(schedule.T, n_steps)
    jt = rng.standard_normal(shape)
    states = {schedule.T: jt}
    j0_hat = None
    for i, t in enumerate(steps):
        j0_hat = denoise_fn(jt, t)
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        if t_prev == 0:
            break
        jt = ddim_step(jt, j0_hat, t, t_prev, schedule, rng)
        if return_states:
            states[t_prev] = jt
    return (j0_hat, states) if return_states else j0_hat


def write_schedule_csv(schedule, path_or_file):
    """Rows ``t, beta_t, alpha_bar_t, sigma_t`` for ``t = 1..T`` (sigma for the
    full-length chain step ``t -> t-1``)."""
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "beta", "alpha_bar", "sigma"])
        for t in range(1, schedule.T + 1):
            w.writerow([t, repr(float(schedule.beta[t])), repr(float(schedule.alpha_bar[t])),
                        repr(schedule.sigma(t, t - 1))])
    finally:
        if own:
            fh.close()
