"""Numerical tolerances shared by every stage of the pipeline."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass


@dataclass(frozen=True)
class Tolerances:
    # critical points and folds
    newton_tol: float = 1e-10
    degeneracy_tol: float = 1e-6
    fold_tol: float = 1e-10
    trans_tol: float = 1e-8
    dedup_tol: float = 1e-6
    ball_slack: float = 1e-3
    time_sep: float = 1e-6
    # slow branches
    branch_tol: float = 1e-9
    landing_tol: float = 1e-6
    fold_trigger: float = 1e-4
    # fast (frozen-time) dynamics
    fast_ode_tol: float = 1e-10
    land_grad_tol: float = 1e-9
    depart_tol: float = 1e-7
    land_tol: float = 1e-7
    s_budget: float = 1e6
    seed_offset: float = 1e-4
    # eps-flow
    ode_tol: float = 1e-8
    bound_slack: float = 1e-6
    event_tol: float = 1e-12
    min_step: float = 1e-15

    def replace(self, **overrides: float) -> "Tolerances":
        """Return a copy with ``overrides`` applied.

        Unknown keys and non-positive values raise ``ValueError``.
        """
        known = {f.name for f in dataclasses.fields(self)}
        for key, value in overrides.items():
            if key not in known:
                raise ValueError(f"unknown tolerance key {key!r}")
            if not value > 0:
                raise ValueError(f"tolerance {key} must be positive, got {value!r}")
        return dataclasses.replace(self, **{k: float(v) for k, v in overrides.items()})


DEFAULT = Tolerances()
