"""Alternating minimax training of the privatization filter and adversary.

Each iteration draws one batch and one Gaussian noise sample per record,
then applies four updates in order: the adversary descends its
cross-entropy; the filter ascends the adversary loss through the
non-saturating flipped-label form plus the distortion penalty; the
controller QPs are solved on the freshly privatized demand; and the filter
descends the raw-demand cost through the solved programs. The noise draw is
shared by all four updates within an iteration.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import adversary as adv
from .battery import (
    BatterySpec,
    ControlDecision,
    build_qp_epigraph_form,
    utility_loss,
    utility_loss_grad_x,
)
from .data import Batch, Dataset, PriceSchedule, batches
from .privfilter import (
    FilterWeights,
    distortion_penalty,
    grad_wrt_weights,
    init_filter,
    penalty_grad,
    perturb,
)
from .qpengine import (
    DegenerateActiveSetError,
    SingularKktError,
    SolverConfig,
    SolverStatus,
    solve_batch,
    vjp_demand,
)

__all__ = [
    "TrainConfig",
    "TrainLog",
    "StepRecord",
    "SurrogateProblem",
    "BoundTrace",
    "generator_lr",
    "adversary_update",
    "step1_generator_privacy_update",
    "step2_solve_controls",
    "step3_generator_utility_update",
    "train",
    "evaluate",
    "evaluate_records",
    "convergence_probe",
]


@dataclass
class TrainConfig:
    lambda_a: float
    kappa: float = 1e-3
    kappa_v: float | None = None       # V-penalty weight; defaults to kappa
    lr_adversary: float = 1e-3
    lr_generator_initial: float = 0.1
    lr_decay: float = 0.2
    decay_interval: int = 100
    batch_size: int = 32
    max_steps: int = 500
    convergence_tol: float = 1e-5
    convergence_window: int = 10
    schedule_mode: str = "paper_decay"  # or "diminishing"
    seed: int = 0
    eval_every: int = 0                 # 0 disables periodic evaluation
    eval_sample: int = 64

    def __post_init__(self):
        if self.lambda_a < 0 or self.kappa < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lr_adversary <= 0 or self.lr_generator_initial <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.lr_decay < 1.0:
            raise ValueError("lr_decay must be in [0, 1)")
        if self.schedule_mode not in ("paper_decay", "diminishing"):
            raise ValueError(f"unknown schedule_mode {self.schedule_mode!r}")


@dataclass
class StepRecord:
    step: int
    adversary_loss: float
    utility_loss_mean: float
    distortion: float
    generator_lr: float
    test_accuracy: float = math.nan
    utility_gap_pct: float = math.nan


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    skipped_degenerate: int = 0
    failed_solves: int = 0
    reused_gradients: int = 0

    def rows(self):
        for r in self.steps:
            yield (
                r.step, r.adversary_loss, r.utility_loss_mean, r.distortion,
                r.generator_lr, r.test_accuracy, r.utility_gap_pct,
            )


def generator_lr(cfg: TrainConfig, step: int) -> float:
    """Learning rate for iteration ``step`` (0-based)."""
    if cfg.schedule_mode == "paper_decay":
        return cfg.lr_generator_initial * (1.0 - cfg.lr_decay) ** (
            step // cfg.decay_interval
        )
    return cfg.lr_generator_initial / (step + 1)


def adversary_update(
    params: adv.MlpParams,
    w: FilterWeights,
    batch: Batch,
    lr: float,
    eps: np.ndarray,
) -> tuple[adv.MlpParams, float]:
    """One SGD step on batch-mean cross-entropy over privatized demand."""
    m = len(batch)
    total = None
    loss = 0.0
    for i in range(m):
        d_tilde = perturb(w, batch.demand[i], eps[i], batch.one_hot[i])
        probs, trace = adv.forward(params, d_tilde)
        loss += adv.ce_loss(probs, batch.one_hot[i])
        grads, _ = adv.backward(params, trace, batch.one_hot[i])
        if total is None:
            total = list(grads.arrays())
        else:
            for acc, g in zip(total, grads.arrays()):
                acc += g
    mean = adv.MlpParams(*(g / m for g in total))
    return adv.sgd_step(params, mean, lr), loss / m


def step1_generator_privacy_update(
    w: FilterWeights,
    params: adv.MlpParams,
    batch: Batch,
    lambda_a: float,
    kappa: float,
    prior: np.ndarray,
    lr: float,
    eps: np.ndarray,
    kappa_v: float | None = None,
) -> FilterWeights:
    """Ascend the adversary loss via its non-saturating flipped-label form.

    The objective being descended is
    lambda_a * CE(f(d_tilde), 1 - y) + kappa * (||gamma||^2 + ||V pi||^2),
    whose first term equals -lambda_a * log(1 - f_y(d_tilde)) for two
    classes.
    """
    m = len(batch)
    g_gamma = np.zeros_like(w.gamma)
    g_V = np.zeros_like(w.V)
    if lambda_a > 0:
        for i in range(m):
            d_tilde = perturb(w, batch.demand[i], eps[i], batch.one_hot[i])
            _, trace = adv.forward(params, d_tilde)
            flipped = batch.one_hot[i][::-1]
            _, grad_input = adv.backward(params, trace, flipped)
            g = grad_wrt_weights(w, eps[i], batch.one_hot[i], grad_input)
            g_gamma += lambda_a * g.gamma
            g_V += lambda_a * g.V
        g_gamma /= m
        g_V /= m
    pen = penalty_grad(w, prior)
    kv = kappa if kappa_v is None else kappa_v
    g_gamma += kappa * pen.gamma
    g_V += kv * pen.V
    return FilterWeights(w.gamma - lr * g_gamma, w.V - lr * g_V)


@dataclass(frozen=True)
class ControlResult:
    d_tilde: np.ndarray
    qp: object
    solution: object


def step2_solve_controls(
    w: FilterWeights,
    batch: Batch,
    spec: BatterySpec,
    price: PriceSchedule,
    solver_cfg: SolverConfig,
    eps: np.ndarray,
) -> list[ControlResult]:
    """Privatize each record with the shared noise draw and solve its QP."""
    d_tildes = [
        perturb(w, batch.demand[i], eps[i], batch.one_hot[i]) for i in range(len(batch))
    ]
    qps = [build_qp_epigraph_form(spec, price, dt) for dt in d_tildes]
    sols = solve_batch(qps, solver_cfg)
    return [ControlResult(dt, qp, sol) for dt, qp, sol in zip(d_tildes, qps, sols)]


@dataclass
class Step3Stats:
    n_used: int = 0
    n_skipped: int = 0
    n_failed: int = 0
    utility_loss_mean: float = math.nan
    grad: FilterWeights | None = None


def step3_generator_utility_update(
    w: FilterWeights,
    batch: Batch,
    results: list[ControlResult],
    spec: BatterySpec,
    price: PriceSchedule,
    lr: float,
    solver_cfg: SolverConfig,
    eps: np.ndarray,
    fallback_grad: FilterWeights | None = None,
) -> tuple[FilterWeights, Step3Stats]:
    """Descend the raw-demand cost through the solved control programs.

    The cotangent is the cost gradient in the battery coordinates with zeros
    on the epigraph block; degenerate or failed records drop out of the
    batch mean. If nothing in the batch is usable, ``fallback_grad`` (the
    previous step's gradient) is applied instead.
    """
    H = batch.demand.shape[1]
    stats = Step3Stats()
    g_gamma = np.zeros_like(w.gamma)
    g_V = np.zeros_like(w.V)
    losses = []
    for i, res in enumerate(results):
        if res.solution.status is not SolverStatus.OPTIMAL:
            stats.n_failed += 1
            continue
        controls = ControlDecision.from_primal(res.solution.x, H)
        losses.append(utility_loss(controls, batch.demand[i], price, spec))
        cot = np.concatenate(
            [utility_loss_grad_x(controls, batch.demand[i], price, spec), np.zeros(H)]
        )
        try:
            upstream = vjp_demand(res.qp, res.solution, cot, solver_cfg)
        except (DegenerateActiveSetError, SingularKktError):
            stats.n_skipped += 1
            continue
        g = grad_wrt_weights(w, eps[i], batch.one_hot[i], upstream)
        g_gamma += g.gamma
        g_V += g.V
        stats.n_used += 1
    if losses:
        stats.utility_loss_mean = float(np.mean(losses))
    if stats.n_used > 0:
        grad = FilterWeights(g_gamma / stats.n_used, g_V / stats.n_used)
    elif fallback_grad is not None:
        grad = fallback_grad
    else:
        grad = None
    stats.grad = grad
    if grad is None:
        return w, stats
    return FilterWeights(w.gamma - lr * grad.gamma, w.V - lr * grad.V), stats


def _epoch_batches(ds: Dataset, m: int, rng: np.random.Generator):
    while True:
        epoch_seed = int(rng.integers(0, 2**63 - 1))
        yield from batches(ds, m, epoch_seed)


def train(
    datasets: tuple[Dataset, Dataset],
    specs: tuple[BatterySpec, PriceSchedule, SolverConfig],
    cfg: TrainConfig,
    w: FilterWeights | None = None,
    params: adv.MlpParams | None = None,
) -> tuple[FilterWeights, adv.MlpParams, TrainLog]:
    """Run the alternating updates until max_steps or parameter stagnation."""
    train_ds, test_ds = datasets
    spec, price, solver_cfg = specs
    H = train_ds.horizon
    prior = train_ds.prior

    root = np.random.SeedSequence(cfg.seed)
    s_filter, s_adv, s_eps, s_batch, s_eval = root.spawn(5)
    if w is None:
        w = init_filter(H, int(s_filter.generate_state(1)[0]))
    if params is None:
        params = adv.init_params(H, int(s_adv.generate_state(1)[0]))
    rng_eps = np.random.default_rng(s_eps)
    batch_iter = _epoch_batches(train_ds, cfg.batch_size, np.random.default_rng(s_batch))
    eval_seed = int(s_eval.generate_state(1)[0])

    log = TrainLog()
    deltas: deque[float] = deque(maxlen=cfg.convergence_window)
    prev_grad: FilterWeights | None = None

    for step in range(cfg.max_steps):
        batch = next(batch_iter)
        eps = rng_eps.standard_normal((len(batch), H))
        lr_g = generator_lr(cfg, step)

        params_new, adv_loss = adversary_update(
            params, w, batch, cfg.lr_adversary, eps
        )
        w_hat = step1_generator_privacy_update(
            w, params_new, batch, cfg.lambda_a, cfg.kappa, prior, lr_g, eps,
            kappa_v=cfg.kappa_v,
        )
        results = step2_solve_controls(w_hat, batch, spec, price, solver_cfg, eps)
        w_new, stats = step3_generator_utility_update(
            w_hat, batch, results, spec, price, lr_g, solver_cfg, eps,
            fallback_grad=prev_grad,
        )
        log.skipped_degenerate += stats.n_skipped
        log.failed_solves += stats.n_failed
        if stats.n_used == 0 and stats.grad is not None:
            log.reused_gradients += 1
        if stats.grad is not None:
            prev_grad = stats.grad

        rec = StepRecord(
            step=step,
            adversary_loss=adv_loss,
            utility_loss_mean=stats.utility_loss_mean,
            distortion=distortion_penalty(w_new, prior),
            generator_lr=lr_g,
        )
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            sub = test_ds
            if cfg.eval_sample and cfg.eval_sample < len(test_ds):
                keep = list(range(cfg.eval_sample))
                sub = Dataset.from_records(
                    [test_ds.records[i] for i in keep], H, test_ds.split_seed
                )
            metrics = evaluate(
                w_new, params_new, sub, spec, price, solver_cfg,
                seed=eval_seed, prior=prior,
            )
            rec.test_accuracy = metrics["accuracy"]
            rec.utility_gap_pct = metrics["utility_gap_pct"]
        log.steps.append(rec)

        delta = float(
            np.linalg.norm(w_new.flat() - w.flat())
            + np.linalg.norm(params_new.flat() - params.flat())
        )
        deltas.append(delta)
        w, params = w_new, params_new
        if len(deltas) == cfg.convergence_window and max(deltas) < cfg.convergence_tol:
            break

    return w, params, log


def evaluate_records(
    w: FilterWeights,
    params: adv.MlpParams,
    test_ds: Dataset,
    spec: BatterySpec,
    price: PriceSchedule,
    solver_cfg: SolverConfig,
    seed: int,
) -> list[dict]:
    """Per-record evaluation data: costs and control schedules, raw vs private."""
    H = test_ds.horizon
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    eps = rng.standard_normal((len(test_ds), H))
    d_tildes = [
        perturb(w, rec.demand, eps[i], rec.one_hot)
        for i, rec in enumerate(test_ds.records)
    ]
    raw_qps = [build_qp_epigraph_form(spec, price, rec.demand) for rec in test_ds.records]
    priv_qps = [build_qp_epigraph_form(spec, price, dt) for dt in d_tildes]
    raw_sols = solve_batch(raw_qps, solver_cfg)
    priv_sols = solve_batch(priv_qps, solver_cfg)

    out = []
    for i, rec in enumerate(test_ds.records):
        row = {
            "record": i,
            "label": rec.label,
            "demand": rec.demand,
            "demand_private": d_tildes[i],
            "solved": (
                raw_sols[i].status is SolverStatus.OPTIMAL
                and priv_sols[i].status is SolverStatus.OPTIMAL
            ),
        }
        if row["solved"]:
            raw_ctl = ControlDecision.from_primal(raw_sols[i].x, H)
            priv_ctl = ControlDecision.from_primal(priv_sols[i].x, H)
            raw_cost = utility_loss(raw_ctl, rec.demand, price, spec)
            priv_cost = utility_loss(priv_ctl, rec.demand, price, spec)
            row.update(
                raw_cost=raw_cost,
                private_cost=priv_cost,
                cost_delta=priv_cost - raw_cost,
                raw_controls=raw_ctl,
                private_controls=priv_ctl,
            )
        out.append(row)
    return out


def evaluate(
    w: FilterWeights,
    params: adv.MlpParams,
    test_ds: Dataset,
    spec: BatterySpec,
    price: PriceSchedule,
    solver_cfg: SolverConfig,
    seed: int,
    prior: np.ndarray | None = None,
) -> dict:
    """Co-trained adversary accuracy on privatized data plus the cost gap.

    The gap is the mean of per-record relative cost increases, in percent.
    """
    rows = evaluate_records(w, params, test_ds, spec, price, solver_cfg, seed)
    demands_priv = np.stack([r["demand_private"] for r in rows])
    acc = adv.accuracy(params, test_ds, demands=demands_priv)
    gaps = [
        100.0 * r["cost_delta"] / r["raw_cost"] for r in rows if r["solved"]
    ]
    if prior is None:
        prior = test_ds.prior
    return {
        "accuracy": acc,
        "utility_gap_pct": float(np.mean(gaps)) if gaps else math.nan,
        "distortion": distortion_penalty(w, prior),
    }


@dataclass(frozen=True)
class SurrogateProblem:
    """Convex stand-in for the two generator losses with known optima.

    The privacy part is linear, a . theta; the cost part is the quadratic
    0.5 (theta - center)^T diag(curv) (theta - center). Their sum is
    minimized at center - a / curv.
    """

    a: np.ndarray
    curv: np.ndarray
    center: np.ndarray
    theta0: np.ndarray

    def __post_init__(self):
        if np.any(self.curv < 0):
            raise ValueError("curvatures must be nonnegative")
        if np.any((self.curv == 0) & (self.a != 0)):
            raise ValueError("flat direction with nonzero linear term is unbounded")

    def optimum(self) -> np.ndarray:
        theta = self.center.astype(float).copy()
        pos = self.curv > 0
        theta[pos] -= self.a[pos] / self.curv[pos]
        return theta

    def loss_a(self, theta: np.ndarray) -> float:
        return float(self.a @ theta)

    def loss_u(self, theta: np.ndarray) -> float:
        diff = theta - self.center
        return 0.5 * float(self.curv @ (diff * diff))

    def grads(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.a, self.curv * (theta - self.center)


@dataclass
class BoundTrace:
    gaps: np.ndarray       # combined loss gap at each iterate
    min_gaps: np.ndarray   # running min over iterates
    bounds: np.ndarray     # analytic right-hand side after each step
    etas: np.ndarray


def convergence_probe(
    problem: SurrogateProblem,
    schedule: Callable[[int], float],
    steps: int = 1000,
) -> BoundTrace:
    """Run the two filter updates on the surrogate and track the bound.

    Both gradients are evaluated at the current iterate, matching the
    analysis of the combined update. Raises if the empirical min-gap ever
    exceeds (r^2 + sum eta^2 delta^2) / (2 sum eta).
    """
    theta_star = problem.optimum()
    l_star = problem.loss_a(theta_star) + problem.loss_u(theta_star)
    theta = problem.theta0.astype(float).copy()
    r2 = float(np.sum((theta - theta_star) ** 2))

    gaps, min_gaps, bounds, etas = [], [], [], []
    sum_eta = 0.0
    sum_eta2_delta2 = 0.0
    best = math.inf
    for k in range(1, steps + 1):
        eta = schedule(k)
        gap = problem.loss_a(theta) + problem.loss_u(theta) - l_star
        best = min(best, gap)
        g_a, g_u = problem.grads(theta)
        g = g_a + g_u
        delta2 = float(g @ g)
        sum_eta += eta
        sum_eta2_delta2 += eta * eta * delta2
        bound = (r2 + sum_eta2_delta2) / (2.0 * sum_eta)
        if best > bound + 1e-9 * (1.0 + abs(bound)):
            raise RuntimeError(
                f"min gap {best:.6e} exceeds analytic bound {bound:.6e} at k={k}"
            )
        gaps.append(gap)
        min_gaps.append(best)
        bounds.append(bound)
        etas.append(eta)
        theta = theta - eta * g
    return BoundTrace(
        np.array(gaps), np.array(min_gaps), np.array(bounds), np.array(etas)
    )
