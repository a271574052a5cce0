"""Battery-control problem as a canonical QP, plus the raw-demand cost loss.

Two constructions of the same controller are provided:

* the three-block form with a hard net-load >= 0 constraint, which can be
  infeasible when the demand vector is deeply negative, and
* the epigraph form with auxiliary per-interval variables t >= net, t >= 0,
  which is always feasible and has the same optimal cost where both apply.

The canonical objective convention throughout is ``x^T Q x + q^T x`` (no 1/2
factor), so Q stores the penalty weights directly on its diagonal.
``objective_offset`` holds the constant dropped by that form; adding it back
yields the natural cost in currency units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import PriceSchedule

__all__ = [
    "BatterySpec",
    "CanonicalQP",
    "ControlDecision",
    "build_qp_paper_form",
    "build_qp_epigraph_form",
    "utility_loss",
    "utility_loss_grad_x",
]


@dataclass(frozen=True)
class BatterySpec:
    """Physical and economic parameters of the storage controller."""

    capacity: float            # B, kWh
    alpha: float               # state-of-charge target fraction
    beta1: float               # charge penalty weight
    beta2: float               # discharge penalty weight
    beta3: float               # state-target penalty weight
    eta_in: float              # charge efficiency
    eta_out: float             # discharge efficiency
    c_in: float                # charge power cap, kW
    c_out: float               # discharge power cap, kW
    b_init: float              # initial charge, kWh

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        if self.capacity < 0:
            raise ValueError("capacity must be nonnegative")
        if not 0.0 <= self.b_init <= self.capacity:
            raise ValueError("b_init must lie in [0, capacity]")
        if self.c_in <= 0 or self.c_out <= 0:
            raise ValueError("power capacities must be positive")
        if min(self.beta1, self.beta2, self.beta3) < 0:
            raise ValueError("penalty weights must be nonnegative")
        if not (0.0 < self.eta_in <= 1.0 and 0.0 < self.eta_out <= 1.0):
            raise ValueError("efficiencies must be in (0, 1]")


@dataclass(frozen=True)
class CanonicalQP:
    """min x^T Q x + q^T x  s.t.  A x = b,  G_c x <= h.

    ``demand_rows`` indexes the inequality rows whose right-hand side is
    ``demand_coeff * demand``; those are the rows the solver differentiates
    through. ``objective_offset`` restores the constant dropped from the
    natural cost.
    """

    Q: np.ndarray
    q: np.ndarray
    A: np.ndarray
    b: np.ndarray
    G_c: np.ndarray
    h: np.ndarray
    n: int
    horizon: int
    demand_rows: np.ndarray
    demand_coeff: float
    objective_offset: float
    epigraph: bool

    def objective(self, x: np.ndarray) -> float:
        return float(x @ self.Q @ x + self.q @ x)

    def natural_objective(self, x: np.ndarray) -> float:
        return self.objective(x) + self.objective_offset


@dataclass(frozen=True)
class ControlDecision:
    """Charging, discharging, and state-of-charge schedules (plus epigraph t)."""

    x_in: np.ndarray
    x_out: np.ndarray
    x_s: np.ndarray
    t: np.ndarray | None = None

    @classmethod
    def from_primal(cls, x: np.ndarray, horizon: int) -> "ControlDecision":
        H = horizon
        if x.shape[0] == 3 * H:
            return cls(x[:H], x[H : 2 * H], x[2 * H :])
        if x.shape[0] == 4 * H:
            return cls(x[:H], x[H : 2 * H], x[2 * H : 3 * H], x[3 * H :])
        raise ValueError(f"primal length {x.shape[0]} is neither 3H nor 4H for H={H}")


def _check_inputs(spec: BatterySpec, price: PriceSchedule, demand: np.ndarray) -> np.ndarray:
    demand = np.asarray(demand, dtype=float)
    H = demand.shape[0]
    if demand.ndim != 1:
        raise ValueError("demand must be a vector")
    if price.prices.shape[0] != H:
        raise ValueError(
            f"price horizon {price.prices.shape[0]} != demand horizon {H}"
        )
    return demand


def _equality_block(spec: BatterySpec, H: int, n: int):
    # Row 0 pins the initial state; rows 1..H-1 are the charge dynamics
    # x_s(k+1) = x_s(k) + eta_in x_in(k) - x_out(k) / eta_out.
    A = np.zeros((H, n))
    b = np.zeros(H)
    A[0, 2 * H] = 1.0
    b[0] = spec.b_init
    for k in range(H - 1):
        A[k + 1, k] = spec.eta_in
        A[k + 1, H + k] = -1.0 / spec.eta_out
        A[k + 1, 2 * H + k] = 1.0
        A[k + 1, 2 * H + k + 1] = -1.0
    return A, b


def _box_block(spec: BatterySpec, H: int, n: int):
    # Six groups: upper/lower bounds on x_in, x_out, x_s in that order.
    eye = np.eye(H)
    G = np.zeros((6 * H, n))
    h = np.zeros(6 * H)
    for g, (col, cap) in enumerate(
        [(0, spec.c_in), (H, spec.c_out), (2 * H, spec.capacity)]
    ):
        G[2 * g * H : (2 * g + 1) * H, col : col + H] = eye
        h[2 * g * H : (2 * g + 1) * H] = cap
        G[(2 * g + 1) * H : (2 * g + 2) * H, col : col + H] = -eye
    return G, h


def build_qp_paper_form(
    spec: BatterySpec, price: PriceSchedule, demand: np.ndarray
) -> CanonicalQP:
    """Three-block canonical form with the hard net-load >= 0 rows.

    The last H inequality rows read -x_in + x_out <= d; they make the linear
    price term equal the hinged cost but can render the program infeasible
    for deeply negative demand.
    """
    demand = _check_inputs(spec, price, demand)
    H = demand.shape[0]
    n = 3 * H
    eye = np.eye(H)

    Q = np.diag(
        np.concatenate(
            [
                np.full(H, spec.beta1),
                np.full(H, spec.beta2),
                np.full(H, spec.beta3),
            ]
        )
    )
    q = np.concatenate(
        [
            price.prices,
            -price.prices,
            np.full(H, -2.0 * spec.beta3 * spec.alpha * spec.capacity),
        ]
    )

    G_box, h_box = _box_block(spec, H, n)
    G_net = np.hstack([-eye, eye, np.zeros((H, H))])
    G_c = np.vstack([G_box, G_net])
    h = np.concatenate([h_box, demand])

    A, b = _equality_block(spec, H, n)

    offset = (
        spec.beta3 * (spec.alpha * spec.capacity) ** 2 * H
        + float(price.prices @ demand)
    )
    return CanonicalQP(
        Q=Q, q=q, A=A, b=b, G_c=G_c, h=h, n=n, horizon=H,
        demand_rows=np.arange(6 * H, 7 * H), demand_coeff=1.0,
        objective_offset=offset, epigraph=False,
    )


def build_qp_epigraph_form(
    spec: BatterySpec, price: PriceSchedule, demand: np.ndarray
) -> CanonicalQP:
    """Always-feasible form with per-interval t >= x_in - x_out + d, t >= 0.

    The hinge in the cost is exact here because prices are positive, so the
    optimal cost agrees with the hard-constraint form whenever that one is
    feasible.
    """
    demand = _check_inputs(spec, price, demand)
    H = demand.shape[0]
    n = 4 * H
    eye = np.eye(H)

    Q = np.diag(
        np.concatenate(
            [
                np.full(H, spec.beta1),
                np.full(H, spec.beta2),
                np.full(H, spec.beta3),
                np.zeros(H),
            ]
        )
    )
    q = np.concatenate(
        [
            np.zeros(H),
            np.zeros(H),
            np.full(H, -2.0 * spec.beta3 * spec.alpha * spec.capacity),
            price.prices,
        ]
    )

    G_box, h_box = _box_block(spec, H, n)
    G_tpos = np.hstack([np.zeros((H, 3 * H)), -eye])           # -t <= 0
    G_net = np.hstack([eye, -eye, np.zeros((H, H)), -eye])     # x_in - x_out - t <= -d
    G_c = np.vstack([G_box, G_tpos, G_net])
    h = np.concatenate([h_box, np.zeros(H), -demand])

    A, b = _equality_block(spec, H, n)

    offset = spec.beta3 * (spec.alpha * spec.capacity) ** 2 * H
    return CanonicalQP(
        Q=Q, q=q, A=A, b=b, G_c=G_c, h=h, n=n, horizon=H,
        demand_rows=np.arange(7 * H, 8 * H), demand_coeff=-1.0,
        objective_offset=offset, epigraph=True,
    )


def utility_loss(
    x: ControlDecision, d_raw: np.ndarray, price: PriceSchedule, spec: BatterySpec
) -> float:
    """Cost of a control decision evaluated against the raw demand."""
    d_raw = np.asarray(d_raw, dtype=float)
    net = x.x_in - x.x_out + d_raw
    hinge = np.maximum(net, 0.0)
    return float(
        price.prices @ hinge
        + spec.beta1 * x.x_in @ x.x_in
        + spec.beta2 * x.x_out @ x.x_out
        + spec.beta3 * np.sum((x.x_s - spec.alpha * spec.capacity) ** 2)
    )


def utility_loss_grad_x(
    x: ControlDecision, d_raw: np.ndarray, price: PriceSchedule, spec: BatterySpec
) -> np.ndarray:
    """Gradient of utility_loss in the stacked (x_in, x_out, x_s) coordinates.

    The hinge is separable, so the +/- price rows appear only on intervals
    with strictly positive net load; the subgradient at a kink is taken as 0.
    """
    d_raw = np.asarray(d_raw, dtype=float)
    active = (x.x_in - x.x_out + d_raw > 0.0).astype(float)
    g_in = price.prices * active + 2.0 * spec.beta1 * x.x_in
    g_out = -price.prices * active + 2.0 * spec.beta2 * x.x_out
    g_s = 2.0 * spec.beta3 * (x.x_s - spec.alpha * spec.capacity)
    return np.concatenate([g_in, g_out, g_s])
