"""Per-field mask-probability schedules.

Each field k has a mask probability curve m_k(t) on t in [0, T] with
cumulative corruption rate c_k(t) = -log(1 - m_k(t)), so a field
survives to time t with probability exp(-c_k(t)). Two curve kinds:

  linear-mask:     m_k(t) = lo + (hi - lo) * t / T
  geometric-rate:  c_k(t) = c_lo^(1 - t/T) * c_hi^(t/T), needs lo > 0

One t is drawn per training instance and shared by every field; with
per-field (lo, hi) the resulting mask probabilities still differ.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

MAX_MASK_PROB = 1.0 - 1e-4  # keeps 1/m and 1/(1 - exp(-c)) finite

KINDS = ("linear-mask", "geometric-rate")


@dataclass(frozen=True)
class FieldCurve:
    lo: float  # mask probability at t = 0
    hi: float  # mask probability at t = T

    def validate(self, kind: str) -> None:
        if not 0.0 <= self.lo < self.hi <= MAX_MASK_PROB:
            raise DataError(
                f"schedule bounds must satisfy 0 <= lo < hi <= {MAX_MASK_PROB}, got ({self.lo}, {self.hi})"
            )
        if kind == "geometric-rate" and self.lo <= 0.0:
            raise DataError("geometric-rate schedule requires lo > 0")


@dataclass(frozen=True)
class NoiseSchedule:
    """Mask-probability schedules for the N feature fields plus the label."""

    curves: tuple[FieldCurve, ...]  # one per field, label last
    horizon: int = 500
    kind: str = "linear-mask"
    shared: bool = False  # one unified curve for every field

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown schedule kind '{self.kind}'")
        if self.horizon < 1:
            raise DataError("schedule horizon must be a positive integer")
        if not self.curves:
            raise DataError("schedule needs at least one field curve")
        for c in self.curves:
            c.validate(self.kind)

    @property
    def num_fields(self) -> int:
        return len(self.curves)

    def _curve(self, field: int) -> FieldCurve:
        return self.curves[0] if self.shared else self.curves[field]

    def mask_prob(self, field: int, t: float) -> float:
        """Probability the field is masked by time t."""
        self._check_t(t)
        c = self._curve(field)
        if self.kind == "linear-mask":
            return c.lo + (c.hi - c.lo) * (t / self.horizon)
        rate_lo, rate_hi = -np.log1p(-c.lo), -np.log1p(-c.hi)
        rate = rate_lo ** (1.0 - t / self.horizon) * rate_hi ** (t / self.horizon)
        return float(-np.expm1(-rate))

    def cumulative_rate(self, field: int, t: float) -> float:
        """Integrated corruption rate: -log(1 - mask_prob)."""
        return float(-np.log1p(-self.mask_prob(field, t)))

    def mask_probs(self, t: float) -> np.ndarray:
        return np.array([self.mask_prob(k, t) for k in range(self.num_fields)])

    def sample_mask_probs(self, rng: np.random.Generator) -> np.ndarray:
        """Draw t uniform in (0, T] and return every field's mask probability."""
        t = self.horizon * (1.0 - rng.random())
        return self.mask_probs(t)

    def _bounds(self) -> tuple[np.ndarray, np.ndarray]:
        curves = [self._curve(k) for k in range(self.num_fields)]
        return np.array([c.lo for c in curves]), np.array([c.hi for c in curves])

    def sample_mask_prob_matrix(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Batched draw: one t per row, all fields evaluated at it: (n, P)."""
        ts = self.horizon * (1.0 - rng.random(n))
        lo, hi = self._bounds()
        frac = ts[:, None] / self.horizon
        if self.kind == "linear-mask":
            return lo[None, :] + (hi - lo)[None, :] * frac
        rate_lo, rate_hi = -np.log1p(-lo), -np.log1p(-hi)
        rates = rate_lo[None, :] ** (1.0 - frac) * rate_hi[None, :] ** frac
        return -np.expm1(-rates)

    def _check_t(self, t: float) -> None:
        if not 0.0 <= t <= self.horizon:
            raise DataError(f"t={t} outside [0, {self.horizon}]")


def build_schedule(
    num_fields: int,
    lo: float = 0.0,
    hi: float = 0.995,
    label_lo: float | None = None,
    label_hi: float | None = None,
    horizon: int = 500,
    kind: str = "linear-mask",
    shared: bool = False,
) -> NoiseSchedule:
    """Schedule over num_fields features plus the label field (last).

    The label curve may differ from the feature curve; a unified
    (shared=True) schedule ignores the label overrides.
    """
    feature = FieldCurve(lo, hi)
    label = FieldCurve(lo if label_lo is None else label_lo, hi if label_hi is None else label_hi)
    return NoiseSchedule(
        curves=tuple([feature] * num_fields + [label]),
        horizon=horizon,
        kind=kind,
        shared=shared,
    )
