"""Choose (tau, K, eta, sigma) under resource and privacy budgets.

The expected optimality gap after K iterations is bounded by

    F = (1 - eta*lam)^K (alpha - B) / K + B,
    B = (eta*L + eta^2 L^2 (tau-1) M) / (2 lam M) * (xi^2 + d/M * sum_m sigma_m^2),

which grows with tau and with every sigma_m^2. The cost constraint
``c1 K / tau + c2 K <= C_th`` and the privacy constraint therefore bind,
giving tau and sigma in closed form as functions of K, which leaves a
one-dimensional search over K followed by integer rounding.

The learning rate is held fixed while K varies. It is the largest rate
admissible for every tau up to ``tau_max`` (times a safety factor), so the
learning-rate constraint holds at whatever tau the search lands on.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import ConfigurationError, InfeasibleError
from .models import ProblemConstants
from .privacy import calibrate_sigma, privacy_constant, total_epsilon

ETA_SAFETY = 0.9
DEFAULT_TAU_MAX = 50
N_STARTS = 8
K_TOL = 0.5


@dataclass(frozen=True)
class Budgets:
    C_th: float = 1000.0
    epsilon_th: float = 10.0
    delta: float = 1e-4
    c1: float = 100.0
    c2: float = 1.0

    def __post_init__(self):
        if self.C_th <= 0 or self.epsilon_th <= 0:
            raise ConfigurationError("resource and privacy budgets must be positive")
        if not 0 < self.delta < 1:
            raise ConfigurationError("delta must lie in (0, 1)")
        if self.c1 < 0 or self.c2 <= 0:
            raise ConfigurationError("need c1 >= 0 and c2 > 0")

    def check_feasible(self) -> None:
        if self.C_th < self.c1 + self.c2:
            raise InfeasibleError(
                "resource budget",
                f"C_th = {self.C_th:g} < c1 + c2 = {self.c1 + self.c2:g}; "
                "not even one aggregated iteration fits",
            )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Plan:
    tau: int
    K: int
    eta: float
    sigma: list[float]
    predicted_F: float
    cost: float
    epsilons: list[float]
    feasibility: dict[str, bool]
    K_relaxed: float | None = None
    tau_relaxed: float | None = None
    score: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def resource_cost(K: float, tau: float, c1: float, c2: float) -> float:
    if tau < 1:
        raise ValueError("tau must be >= 1")
    return c1 * K / tau + c2 * K


def lr_constraint(eta: float, L: float, tau: float) -> float:
    """Left side of ``eta L + eta^2 L^2 tau (tau - 1) <= 1``."""
    return eta * L + eta * eta * L * L * tau * (tau - 1)


def max_learning_rate(L: float, tau: float, lam: float | None = None) -> float:
    """Largest eta with ``lr_constraint(eta, L, tau) <= 1``; 1/L when tau = 1."""
    if L <= 0 or tau < 1:
        raise ValueError("need L > 0 and tau >= 1")
    # positive root of a x^2 + x - 1 with x = eta L, a = tau (tau - 1), in the
    # cancellation-free form 2 / (1 + sqrt(1 + 4a))
    a = tau * (tau - 1)
    eta = 2.0 / (L * (1.0 + math.sqrt(1.0 + 4.0 * a)))
    if lam is not None and lam > 0 and eta * lam >= 1.0:
        eta = math.nextafter(1.0 / lam, 0.0)
    return eta


def max_feasible_tau(eta: float, L: float) -> int:
    """Largest integer tau for which ``eta`` satisfies the learning-rate constraint."""
    if lr_constraint(eta, L, 1) > 1:
        return 0
    x = eta * L
    bound = (1.0 - x) / (x * x)  # tau (tau - 1) <= bound
    tau = int(math.floor(0.5 + math.sqrt(0.25 + bound)))
    while tau > 1 and lr_constraint(eta, L, tau) > 1:
        tau -= 1
    while lr_constraint(eta, L, tau + 1) <= 1:
        tau += 1
    return max(tau, 1)


def planning_learning_rate(constants: ProblemConstants, tau_max: int = DEFAULT_TAU_MAX,
                           safety: float = ETA_SAFETY) -> float:
    return safety * max_learning_rate(constants.L, tau_max, constants.lam)


def bound_B(constants: ProblemConstants, eta: float, tau: float, sigma: Sequence[float]) -> float:
    c = constants
    noise = c.d / c.M * math.fsum(s * s for s in sigma)
    return (eta * c.L + eta * eta * c.L * c.L * (tau - 1) * c.M) / (2.0 * c.lam * c.M) * (c.xi_sq + noise)


def bound_F(constants: ProblemConstants, eta: float, tau: float, K: float,
            sigma: Sequence[float]) -> float:
    rate = eta * constants.lam
    if not 0 < rate < 1:
        raise ValueError(f"need 0 < eta*lambda < 1, got {rate}")
    if K < 1:
        raise ValueError("K must be >= 1")
    B = bound_B(constants, eta, tau, sigma)
    decay = math.exp(K * math.log1p(-rate))
    return decay * (constants.alpha - B) / K + B


def optimal_tau(K: float, budgets: Budgets) -> float:
    """Aggregation period that spends exactly ``C_th`` in K iterations."""
    room = budgets.C_th - budgets.c2 * K
    if room <= 0:
        raise InfeasibleError("resource budget", f"K = {K:g} >= C_th / c2 leaves no room for communication")
    return budgets.c1 * K / room


def optimal_sigma(K: float, constants: ProblemConstants, budgets: Budgets) -> list[float]:
    return [calibrate_sigma(K, constants.G, X, budgets.epsilon_th, budgets.delta)
            for X in constants.batch_sizes]


def feasible_interval(budgets: Budgets, tau_max: float = DEFAULT_TAU_MAX) -> tuple[float, float]:
    """K range where the cost-tight tau lies in [1, tau_max]."""
    budgets.check_feasible()
    b = budgets
    lo = b.C_th / (b.c1 + b.c2)
    hi = tau_max * b.C_th / (b.c1 + b.c2 * tau_max)
    return lo, hi


def objective_in_K(K: float, constants: ProblemConstants, budgets: Budgets, eta: float,
                   tau_max: float = DEFAULT_TAU_MAX) -> float:
    """Bound F with tau and sigma eliminated; ``inf`` outside the feasible interval."""
    lo, hi = feasible_interval(budgets, tau_max)
    if not lo * (1 - 1e-12) <= K <= hi * (1 + 1e-12):
        return math.inf
    c, b = constants, budgets
    tau = b.c1 * K / (b.C_th - b.c2 * K)
    Z = privacy_constant(b.epsilon_th, b.delta)
    decay = math.exp(K * math.log1p(-eta * c.lam)) / K
    noise = 2.0 * K * c.d * c.G * c.G / (c.M * Z) * math.fsum(1.0 / (X * X) for X in c.batch_sizes)
    step = eta * c.L / (2.0 * c.lam * c.M) + eta * eta * c.L * c.L * (tau - 1) / (2.0 * c.lam)
    return c.alpha * decay + (1.0 - decay) * step * (c.xi_sq + noise)


def _derivative(f: Callable[[float], float], K: float, lo: float, hi: float) -> float:
    h = 1e-4 * max(1.0, abs(K))
    a, b = max(lo, K - h), min(hi, K + h)
    return (f(b) - f(a)) / (b - a)


def _descend(f: Callable[[float], float], K: float, lo: float, hi: float) -> float:
    """Projected gradient descent with an adaptive step, stopping once |dK| < K_TOL."""
    fk = f(K)
    g = _derivative(f, K, lo, hi)
    if g == 0:
        return K
    t = (hi - lo) / N_STARTS / abs(g)
    for _ in range(500):
        cand = min(hi, max(lo, K - t * g))
        if abs(cand - K) < K_TOL:
            break
        fc = f(cand)
        if fc < fk:
            K, fk = cand, fc
            g = _derivative(f, K, lo, hi)
            t *= 1.5
        else:
            t *= 0.5
    return K


def minimize_in_K(constants: ProblemConstants, budgets: Budgets, eta: float,
                  tau_max: float = DEFAULT_TAU_MAX) -> float:
    lo, hi = feasible_interval(budgets, tau_max)
    if hi - lo < 1e-12:
        return lo
    f = lambda K: objective_in_K(K, constants, budgets, eta, tau_max)  # noqa: E731
    starts = [lo + (hi - lo) * (i + 0.5) / N_STARTS for i in range(N_STARTS)]
    candidates = [lo, hi] + [_descend(f, K0, lo, hi) for K0 in starts]
    return min(candidates, key=lambda K: (f(K), K))


def _largest_multiple(K_cap: int, tau: int, budgets: Budgets) -> int:
    b = budgets
    rounds = min(K_cap // tau, int(b.C_th // (b.c1 + b.c2 * tau)))
    while rounds > 0 and resource_cost(rounds * tau, tau, b.c1, b.c2) > b.C_th * (1 + 1e-12):
        rounds -= 1
    return rounds * tau


def make_plan(constants: ProblemConstants, budgets: Budgets, tau: int, K: int, eta: float,
              **fields) -> Plan:
    """Assemble a plan for an integer (tau, K) with privacy-tight noise."""
    sigma = optimal_sigma(K, constants, budgets)
    cost = resource_cost(K, tau, budgets.c1, budgets.c2)
    eps = [total_epsilon(K, constants.G, X, s, budgets.delta)
           for X, s in zip(constants.batch_sizes, sigma)]
    feasibility = {
        "cost_within_budget": cost <= budgets.C_th * (1 + 1e-12),
        "privacy_tight": all(abs(e - budgets.epsilon_th) <= 1e-9 * budgets.epsilon_th for e in eps),
        "learning_rate_ok": lr_constraint(eta, constants.L, tau) <= 1 + 1e-12,
        "K_multiple_of_tau": K % tau == 0,
    }
    return Plan(tau=tau, K=K, eta=eta, sigma=sigma,
                predicted_F=bound_F(constants, eta, tau, K, sigma),
                cost=cost, epsilons=eps, feasibility=feasibility, **fields)


def _round_count_candidates(constants: ProblemConstants, budgets: Budgets, eta: float,
                            tau_max: int, rounds_relaxed: float) -> list[tuple[int, int]]:
    """Integer (tau, K = R tau) candidates for round counts R near the relaxed one.

    For each R the bound is minimised over a continuous tau in
    ``[1, min(tau_max, (C_th/R - c1)/c2)]`` and the minimiser is rounded
    both ways.
    """
    b = budgets
    out = []
    first = max(1, int(math.floor(rounds_relaxed)) - 1)
    for R in range(first, int(math.ceil(rounds_relaxed)) + 2):
        t_hi = min(float(tau_max), (b.C_th / R - b.c1) / b.c2)
        if t_hi < 1:
            continue

        def f(t, R=R):
            return bound_F(constants, eta, t, R * t, optimal_sigma(R * t, constants, b))

        if t_hi - 1 < 1e-9:
            t_best = 1.0
        else:
            t_best = minimize_scalar(f, bounds=(1.0, t_hi), method="bounded",
                                     options={"xatol": 1e-3}).x
        for t in {int(math.floor(t_best)), int(math.ceil(t_best))}:
            if 1 <= t <= t_hi + 1e-12:
                out.append((t, R * t))
    return out


def _slack_candidates(constants: ProblemConstants, budgets: Budgets, eta: float) -> list[tuple[int, int]]:
    """tau = 1 with K below C_th/(c1 + c2), where the cost budget does not bind."""
    K_lo = int(math.floor(budgets.C_th / (budgets.c1 + budgets.c2)))
    if K_lo < 2:
        return []

    def f(K):
        return bound_F(constants, eta, 1, K, optimal_sigma(K, constants, budgets))

    K_best = minimize_scalar(f, bounds=(1.0, float(K_lo)), method="bounded", options={"xatol": 1e-3}).x
    return [(1, k) for k in {int(math.floor(K_best)), int(math.ceil(K_best))} if 1 <= k <= K_lo]


def solve(constants: ProblemConstants, budgets: Budgets, tau_max: int = DEFAULT_TAU_MAX,
          eta: float | None = None, refine: bool = True) -> Plan:
    """Relaxed 1-D minimisation over K, then rounding and feasibility repair.

    Rounding: K to the nearest integer, tau to the nearest integer of the
    cost-tight period, then K shrinks to the largest multiple of tau within
    the cost budget. With ``refine`` the rounded point competes against
    round-count candidates (see ``_round_count_candidates``) and tau = 1
    points with slack cost, and the lowest bound wins. This matters when only
    a few aggregation rounds fit or when communication is cheap.

    When ``eta`` is given, ``tau_max`` shrinks to the largest period that
    rate admits.
    """
    budgets.check_feasible()
    if eta is None:
        eta = planning_learning_rate(constants, tau_max)
    else:
        admissible = max_feasible_tau(eta, constants.L)
        if admissible < 1:
            raise InfeasibleError("learning rate", f"eta = {eta:g} violates eta*L <= 1 even for tau = 1")
        tau_max = min(tau_max, admissible)
    if not 0 < eta * constants.lam < 1:
        raise InfeasibleError("learning rate", "need 0 < eta * lambda < 1")

    K_star = minimize_in_K(constants, budgets, eta, tau_max)
    tau_star = optimal_tau(K_star, budgets)

    K_int = max(1, int(round(K_star)))
    while K_int > 1 and budgets.C_th - budgets.c2 * K_int <= 0:
        K_int -= 1
    tau = int(round(optimal_tau(K_int, budgets)))
    tau = min(max(tau, 1), int(tau_max))
    K = _largest_multiple(K_int, tau, budgets)
    while K == 0 and tau > 1:
        tau -= 1
        K = _largest_multiple(K_int, tau, budgets)
    if K == 0:
        raise InfeasibleError("resource budget", "no integer (tau, K) fits the budget")
    plan = make_plan(constants, budgets, tau, K, eta, K_relaxed=K_star, tau_relaxed=tau_star)
    plan.extra["method"] = "rounded"
    if not refine:
        return plan
    candidates = [(t, k, "round-count") for t, k in
                  _round_count_candidates(constants, budgets, eta, int(tau_max), K_star / tau_star)]
    candidates += [(t, k, "slack-cost") for t, k in _slack_candidates(constants, budgets, eta)]
    for t, k, method in candidates:
        if (t, k) == (plan.tau, plan.K):
            continue
        other = make_plan(constants, budgets, t, k, eta, K_relaxed=K_star, tau_relaxed=tau_star)
        if other.predicted_F < plan.predicted_F:
            plan = other
            plan.extra["method"] = method
    return plan


def grid_points(budgets: Budgets, tau_range: Iterable[int],
                K_grid: Iterable[int] | None = None) -> list[tuple[int, int]]:
    """All integer (tau, K) with K a positive multiple of tau inside the cost budget."""
    budgets.check_feasible()
    allowed = None if K_grid is None else set(int(k) for k in K_grid)
    points = []
    for tau in tau_range:
        K_max = _largest_multiple(10**12, int(tau), budgets)
        for K in range(int(tau), K_max + 1, int(tau)):
            if allowed is None or K in allowed:
                points.append((int(tau), K))
    return points


def grid_table(constants: ProblemConstants, budgets: Budgets, tau_range: Iterable[int],
               K_grid: Iterable[int] | None = None, eta: float | None = None) -> list[dict]:
    """Bound value at every grid point (tidy rows)."""
    tau_range = list(tau_range)
    if eta is None:
        eta = planning_learning_rate(constants, max(tau_range))
    rows = []
    for tau, K in grid_points(budgets, tau_range, K_grid):
        sigma = optimal_sigma(K, constants, budgets)
        rows.append({"tau": tau, "K": K, "eta": eta,
                     "predicted_F": bound_F(constants, eta, tau, K, sigma)})
    return rows


def grid_search(constants: ProblemConstants, budgets: Budgets,
                tau_range: Iterable[int] = range(1, DEFAULT_TAU_MAX + 1),
                K_grid: Iterable[int] | None = None, eta: float | None = None,
                evaluate: Callable[[Plan], float] | None = None) -> Plan:
    """Exhaustive search over integer (tau, K).

    Without ``evaluate`` the bound is minimised. With it, every candidate
    plan is scored by ``evaluate(plan)`` (e.g. validation accuracy from real
    training runs) and the highest score wins; ties go to the earlier point.
    """
    tau_range = list(tau_range)
    if eta is None:
        eta = planning_learning_rate(constants, max(tau_range))
    points = grid_points(budgets, tau_range, K_grid)
    if not points:
        raise InfeasibleError("resource budget", "grid has no feasible (tau, K)")
    best, best_key = None, None
    for tau, K in points:
        plan = make_plan(constants, budgets, tau, K, eta)
        if evaluate is None:
            key = plan.predicted_F
        else:
            plan.score = float(evaluate(plan))
            key = -plan.score
        if best_key is None or key < best_key:
            best, best_key = plan, key
    return best


def relative_gap(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), np.finfo(float).tiny)
