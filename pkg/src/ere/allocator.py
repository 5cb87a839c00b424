"""Rank-budget allocation across layers.

Minimizes total tail energy subject to a parameter budget by relaxing
each layer's tail curve to its log-linear fit, inverting the stationarity
condition of the Lagrangian in closed form (clamped to the feasible rank
interval), and bisecting on the multiplier until the budget is met. The
continuous solution is mixed with a uniform prior rank, rounded, and
greedily repaired so the budget constraint is hard.

The closed-form per-layer rank at multiplier lam is

    u(lam) = clamp((1/a) * (log(-(n+m)/a) - b + log lam), 0, min(n, m))

which is monotone in lam; the bisection direction is detected from the
bracket endpoints at runtime rather than assumed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .spectral import SpectralProfile

LAMBDA_EXPANSIONS = 60   # geometric bracket growth, factors of 10 each way
MAX_BISECTIONS = 500
BUDGET_SLACK = 0.5       # |C(lam) - M| below this counts as converged


@dataclass(frozen=True)
class AllocationConfig:
    """Solver knobs: uniform prior rank, mixing weight, search tolerance."""

    prior_rank: int
    alpha: float = 0.5
    lambda_tolerance: float = 1e-9
    min_dim_eligible: int = 8

    def __post_init__(self):
        if self.prior_rank < 1:
            raise ValueError(f"prior_rank must be >= 1, got {self.prior_rank}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")


@dataclass
class AllocationPlan:
    """Integer ranks per layer plus solver metadata.

    Invariant: sum(ranks[l] * (n_l + m_l)) <= budget and
    0 <= ranks[l] <= min(n_l, m_l).
    """

    budget: int
    lambda_star: float | None
    ranks: dict[str, int] = field(default_factory=dict)
    continuous_ranks: dict[str, float] = field(default_factory=dict)
    objective_estimate: float = 0.0


def budget_from_prior(shapes: list[tuple[int, int]], r_avg: int) -> int:
    """Total parameter budget implied by a uniform rank: sum r_avg*(n+m)."""
    if not shapes:
        raise ValueError("empty shape list")
    return sum(r_avg * (n + m) for n, m in shapes)


def clamped_rank(profile: SpectralProfile, lam: float) -> float:
    """Closed-form continuous rank of one layer at multiplier ``lam``."""
    if not profile.fit_valid:
        raise ValueError(f"layer {profile.layer_name!r} has no valid log-linear fit")
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    a, b = profile.fit_a, profile.fit_b
    raw = (math.log(-profile.cost_per_rank / a) - b + math.log(lam)) / a
    return min(max(raw, 0.0), float(profile.min_dim))


def _total_cost(profiles: list[SpectralProfile], lam: float) -> float:
    return sum(clamped_rank(p, lam) * p.cost_per_rank for p in profiles)


def solve_lambda(profiles: list[SpectralProfile], budget: float,
                 tol: float = 1e-9) -> float:
    """Find lam with sum of clamped ranks times cost equal to the budget.

    Brackets from lam=1 by geometric expansion, then bisects on log(lam)
    until the budget matches within half a unit or the bracket's relative
    width drops below ``tol``. If no bracket exists the budget is
    saturated at a clamp bound and the nearest endpoint is returned.
    """
    valid = [p for p in profiles if p.fit_valid]
    if not valid:
        raise ValueError("no profiles with a valid fit")
    if budget <= 0:
        raise ValueError(f"budget must be positive, got {budget}")

    def miss(lam: float) -> float:
        return _total_cost(valid, lam) - budget

    lo = hi = 1.0
    f_lo = f_hi = miss(1.0)
    if abs(f_lo) <= BUDGET_SLACK:
        return 1.0
    for _ in range(LAMBDA_EXPANSIONS):
        if f_lo == 0.0 or f_hi == 0.0 or (f_lo < 0) != (f_hi < 0):
            break
        lo /= 10.0
        hi *= 10.0
        f_lo = miss(lo)
        f_hi = miss(hi)
    else:
        # No sign change: every layer sits at a clamp bound. Return the
        # endpoint closest to the budget.
        return lo if abs(f_lo) <= abs(f_hi) else hi

    if f_lo == 0.0:
        return lo
    if f_hi == 0.0:
        return hi
    mid = math.sqrt(lo * hi)
    for _ in range(MAX_BISECTIONS):
        mid = math.sqrt(lo * hi)
        f_mid = miss(mid)
        if abs(f_mid) <= BUDGET_SLACK:
            return mid
        if (f_mid < 0) == (f_lo < 0):
            lo, f_lo = mid, f_mid
        else:
            hi, f_hi = mid, f_mid
        if math.log(hi / lo) <= tol:
            break
    return mid


def mix_prior(continuous_ranks: dict[str, float], r_avg: int,
              alpha: float) -> dict[str, float]:
    """Affine pull of the solved ranks toward the uniform prior."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return {name: (1.0 - alpha) * r + alpha * r_avg
            for name, r in continuous_ranks.items()}


def round_and_repair(continuous_ranks: dict[str, float],
                     profiles: dict[str, SpectralProfile],
                     budget: float) -> dict[str, int]:
    """Round to nearest integer rank, then decrement until the budget holds.

    Each repair step removes one rank unit from the layer whose decrement
    raises the true tail energy least per parameter freed (ties broken by
    name, for determinism). r = 0 everywhere is always feasible.
    """
    ranks: dict[str, int] = {}
    for name, r in continuous_ranks.items():
        cap = profiles[name].min_dim
        ranks[name] = int(min(max(math.floor(r + 0.5), 0), cap))
    cost = sum(ranks[n] * profiles[n].cost_per_rank for n in ranks)
    while cost > budget:
        best_name, best_rate = None, math.inf
        for name in sorted(ranks):
            r = ranks[name]
            if r == 0:
                continue
            p = profiles[name]
            rate = (p.tail_at(r - 1) - p.tail_at(r)) / p.cost_per_rank
            if rate < best_rate:
                best_name, best_rate = name, rate
        ranks[best_name] -= 1
        cost -= profiles[best_name].cost_per_rank
    return ranks


def _greedy_fill(ranks: dict[str, int], profiles: dict[str, SpectralProfile],
                 budget: float) -> None:
    """Spend leftover budget on the best tail-energy gain per parameter."""
    cost = sum(ranks[n] * profiles[n].cost_per_rank for n in ranks)
    while True:
        best_name, best_gain = None, 0.0
        for name in sorted(ranks):
            p = profiles[name]
            r = ranks[name]
            if r < p.min_dim and cost + p.cost_per_rank <= budget:
                gain = (p.tail_at(r) - p.tail_at(r + 1)) / p.cost_per_rank
                if gain > best_gain:
                    best_name, best_gain = name, gain
        if best_name is None:
            return
        ranks[best_name] += 1
        cost += profiles[best_name].cost_per_rank


def refine_ranks(ranks: dict[str, int], profiles: dict[str, SpectralProfile],
                 budget: float, max_moves: int = 1000) -> dict[str, int]:
    """Local search on integer ranks against the true tail energies.

    Fills leftover budget, then applies strictly-improving moves (one-rank
    swaps between layers, and dropping one or two ranks from a layer
    followed by a greedy refill) until a fixed point. Deterministic:
    candidates are scanned in name order and the best move wins.
    """
    ranks = dict(ranks)

    def objective(r: dict[str, int]) -> float:
        return sum(profiles[n].tail_at(r[n]) for n in r)

    def cost_of(r: dict[str, int]) -> float:
        return sum(r[n] * profiles[n].cost_per_rank for n in r)

    def repaired(trial: dict[str, int], frozen: str) -> dict[str, int] | None:
        cost = cost_of(trial)
        while cost > budget:
            best_name, best_rate = None, math.inf
            for name in sorted(trial):
                if name == frozen or trial[name] == 0:
                    continue
                p = profiles[name]
                rate = (p.tail_at(trial[name] - 1) - p.tail_at(trial[name])) / p.cost_per_rank
                if rate < best_rate:
                    best_name, best_rate = name, rate
            if best_name is None:
                return None
            trial[best_name] -= 1
            cost -= profiles[best_name].cost_per_rank
        return trial

    _greedy_fill(ranks, profiles, budget)
    for _ in range(max_moves):
        current = objective(ranks)
        best_ranks, best_obj = None, current - 1e-15 * max(current, 1.0)

        def consider(trial: dict[str, int] | None) -> None:
            nonlocal best_ranks, best_obj
            if trial is None:
                return
            obj = objective(trial)
            if obj < best_obj:
                best_ranks, best_obj = trial, obj

        for donor in sorted(ranks):
            for depth in (1, 2, 3):
                if ranks[donor] < depth:
                    continue
                dropped = dict(ranks)
                dropped[donor] -= depth
                dropped_cost = cost_of(dropped)
                # refill greedily, optionally forcing one receiver first
                for receiver in (None, *sorted(ranks)):
                    trial = dict(dropped)
                    if receiver is not None:
                        pr = profiles[receiver]
                        if (receiver == donor or trial[receiver] >= pr.min_dim
                                or dropped_cost + pr.cost_per_rank > budget):
                            continue
                        trial[receiver] += 1
                    _greedy_fill(trial, profiles, budget)
                    consider(trial)
            # empty this layer entirely, then refill
            if ranks[donor] > 3:
                trial = dict(ranks)
                trial[donor] = 0
                _greedy_fill(trial, profiles, budget)
                consider(trial)
        # raise one layer to full rank, funding it by cheapest-loss decrements
        for receiver in sorted(ranks):
            if ranks[receiver] >= profiles[receiver].min_dim:
                continue
            trial = dict(ranks)
            trial[receiver] = profiles[receiver].min_dim
            trial = repaired(trial, frozen=receiver)
            if trial is not None:
                _greedy_fill(trial, profiles, budget)
                consider(trial)
        if best_ranks is None:
            break
        ranks = best_ranks
    return ranks


def allocate(profiles: list[SpectralProfile], config: AllocationConfig) -> AllocationPlan:
    """Full allocation pass over a set of layer profiles.

    Layers with an invalid fit or min(n, m) below the eligibility floor
    are pinned to min(prior_rank, min(n, m)); their cost is deducted from
    the budget before the Lagrangian solve over the remaining layers.
    At alpha = 0 (follow the solver exactly) the rounded solution gets a
    local-search refinement against the true tail energies; at alpha > 0
    the mixed solution is kept as rounded, so alpha = 1 stays exactly
    uniform.
    """
    if not profiles:
        raise ValueError("no profiles to allocate over")
    by_name = {p.layer_name: p for p in profiles}
    if len(by_name) != len(profiles):
        raise ValueError("duplicate layer names")

    budget = budget_from_prior([(p.n, p.m) for p in profiles], config.prior_rank)
    eligible = [p for p in profiles
                if p.fit_valid and p.min_dim >= config.min_dim_eligible]
    eligible_names = {p.layer_name for p in eligible}
    pinned = {p.layer_name: min(config.prior_rank, p.min_dim)
              for p in profiles if p.layer_name not in eligible_names}
    remaining = budget - sum(r * by_name[n].cost_per_rank for n, r in pinned.items())

    lambda_star: float | None = None
    continuous: dict[str, float] = {n: float(r) for n, r in pinned.items()}
    ranks = dict(pinned)
    if eligible:
        full_cost = sum(p.min_dim * p.cost_per_rank for p in eligible)
        if remaining >= full_cost:
            solved = {p.layer_name: float(p.min_dim) for p in eligible}
        else:
            lambda_star = solve_lambda(eligible, remaining, config.lambda_tolerance)
            solved = {p.layer_name: clamped_rank(p, lambda_star) for p in eligible}
        mixed = mix_prior(solved, config.prior_rank, config.alpha)
        mixed = {n: min(max(r, 0.0), float(by_name[n].min_dim)) for n, r in mixed.items()}
        continuous.update(mixed)
        eligible_by_name = {p.layer_name: p for p in eligible}
        rounded = round_and_repair(mixed, eligible_by_name, remaining)
        if config.alpha == 0.0:
            rounded = refine_ranks(rounded, eligible_by_name, remaining)
        ranks.update(rounded)

    objective = sum(by_name[n].tail_at(r) for n, r in ranks.items())
    return AllocationPlan(budget=budget, lambda_star=lambda_star,
                          ranks=ranks, continuous_ranks=continuous,
                          objective_estimate=objective)
