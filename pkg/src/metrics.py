#!/usr/bin/env python3
"""
後悔估計與幾何工具
四種後悔估計、小型實例的精確列舉 oracle、MDP 後悔分解、
packing / Jung 檢查與 log-log 斜率擬合
"""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist
from scipy.stats import linregress

from environments import FiniteMDP, MDPAdversary, MDPInstance, MuSequence, mentor_rollout
from experts import PolicyClass, epsilon_cover
from protocol import (
    Adversary,
    Algorithm,
    CapabilityError,
    History,
    RunTrace,
    SeedLike,
    State,
    Step,
    UndefinedObjectiveError,
    run_protocol,
)


logger = logging.getLogger("Metrics")

Z95 = 1.96
KINDS = ("SA", "PLUS", "MUL", "MDP")
MAX_ORACLE_BRANCHES = 500_000
MAX_EXACT_PACKING = 20


def worker_count() -> int:
    """MENTORCORE_THREADS，預設 1"""
    try:
        return max(1, int(os.getenv("MENTORCORE_THREADS", "1")))
    except ValueError:
        logger.warning("MENTORCORE_THREADS 不是整數，改用 1")
        return 1


# ---------------------------------------------------------------------------
# 報告型別
# ---------------------------------------------------------------------------

@dataclass
class RegretReport:
    kind: str
    estimate: float
    ci_halfwidth: float
    trials: int
    query_mean: float
    extra: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials 必須 ≥ 1")
        if self.ci_halfwidth < 0:
            raise ValueError("ci_halfwidth 必須 ≥ 0")

    @classmethod
    def from_samples(cls, kind: str, samples: Sequence[float], queries: Sequence[float],
                     extra: Optional[dict] = None) -> "RegretReport":
        n = len(samples)
        mean = math.fsum(samples) / n
        sd = float(np.std(samples, ddof=1)) if n > 1 else 0.0
        return cls(kind, mean, Z95 * sd / math.sqrt(n), n,
                   math.fsum(queries) / max(len(queries), 1), dict(extra or {}))


@dataclass
class SlopeFit:
    points: List[Tuple[float, float]]
    slope: float
    intercept: float
    r_squared: float
    dropped: List[Tuple[float, float]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# 試驗收集
# ---------------------------------------------------------------------------

def _map_trials(fn, seeds: Sequence[np.random.SeedSequence], threads: Optional[int]):
    threads = threads or worker_count()
    if threads == 1:
        return [fn(i, s) for i, s in enumerate(seeds)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(len(seeds)), seeds))


def _trial_seeds(seed: SeedLike, trials: int) -> List[np.random.SeedSequence]:
    if trials < 1:
        raise ValueError(f"trials 必須 ≥ 1: {trials}")
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return root.spawn(trials)


def collect_trials(alg: Algorithm, adv: Adversary, T: int, trials: int, seed: SeedLike,
                   threads: Optional[int] = None) -> List[RunTrace]:
    """每個試驗使用全新的演算法實例與獨立的亂數子序列"""
    return _map_trials(lambda i, s: run_protocol(alg.fresh(), adv, T, s),
                       _trial_seeds(seed, trials), threads)


@dataclass
class MDPTrial:
    agent: RunTrace
    mentor_states: List[State]
    initial_state: State


def collect_mdp_trials(alg: Algorithm, mdp: MDPInstance, T: int, trials: int, seed: SeedLike,
                       threads: Optional[int] = None) -> List[MDPTrial]:
    """每個試驗：共用初始狀態，mentor rollout 與代理人執行各用獨立亂數"""
    def one(i, child):
        init, mentor_seed, agent_seed = child.spawn(3)
        s1 = mdp.initial_state(np.random.default_rng(init))
        mentor_states = mentor_rollout(mdp, T, mentor_seed, initial_state=s1)
        agent = run_protocol(alg.fresh(), MDPAdversary(mdp, s1), T, agent_seed)
        return MDPTrial(agent, mentor_states, s1)

    return _map_trials(one, _trial_seeds(seed, trials), threads)


def _trace_extra(traces: Sequence[RunTrace]) -> dict:
    extra = {"diam_mean": math.fsum(diameter(t.states) for t in traces) / len(traces)}
    sizes = [t.extra["cache_size"] for t in traces if "cache_size" in t.extra]
    if sizes:
        extra["cache_size_mean"] = math.fsum(sizes) / len(sizes)
    return extra


# ---------------------------------------------------------------------------
# 後悔估計
# ---------------------------------------------------------------------------

def comparator_class(policy_class: PolicyClass, T: int) -> Tuple[PolicyClass, str]:
    """有限類別原樣使用；否則改用 (1/T)-cover"""
    if policy_class.is_finite:
        return policy_class, "class"
    return epsilon_cover(policy_class, 1.0 / T).as_class(), "cover"


def regret_sa_sample(trace: RunTrace, comparators: PolicyClass) -> float:
    preds = np.array([comparators.predictions(s) for s in trace.states])
    mentor = np.asarray(trace.mentor_actions)
    best = int((preds != mentor[:, None]).sum(axis=0).min())
    return float(sum(trace.losses) - best)


def regret_plus_sample(trace: RunTrace, mu: MuSequence) -> float:
    mentor = math.fsum(mu.mentor_value(t, s) for t, s in enumerate(trace.states, start=1))
    agent = math.fsum(mu(t, step.state, step.action) for t, step in enumerate(trace.history, start=1))
    return mentor - agent


def regret_mul_sample(trace: RunTrace, mu: MuSequence) -> Tuple[float, float]:
    """回傳 (log-product 差, 本條軌跡上看到的最小 μ)"""
    logs_m, logs_a, seen = [], [], 1.0
    for t, step in enumerate(trace.history, start=1):
        vm = mu.mentor_value(t, step.state)
        va = mu(t, step.state, step.action)
        seen = min(seen, vm, va)
        if vm == 0 or va == 0:
            raise UndefinedObjectiveError(
                f"第 {t} 步 μ = 0：μ_min = 0 時乘法後悔未定義，請改用 R_plus"
            )
        logs_m.append(math.log(vm))
        logs_a.append(math.log(va))
    return math.fsum(logs_m) - math.fsum(logs_a), seen


def estimate_regret_sa(alg: Algorithm, adv: Adversary, policy_class: PolicyClass, T: int,
                       trials: int, seed: SeedLike,
                       traces: Optional[List[RunTrace]] = None) -> RegretReport:
    """Σℓ(a_t, a_t^m) − min_π Σℓ(π(s_t), a_t^m)，逐試驗配對取最小值"""
    traces = traces or collect_trials(alg, adv, T, trials, seed)
    comparators, source = comparator_class(policy_class, T)
    samples = [regret_sa_sample(t, comparators) for t in traces]
    extra = {"comparator": source, "comparator_size": comparators.size, **_trace_extra(traces)}
    return RegretReport.from_samples("SA", samples, [t.query_count for t in traces], extra)


def estimate_regret_plus(alg: Algorithm, adv: Adversary, mu: MuSequence, T: int, trials: int,
                         seed: SeedLike, traces: Optional[List[RunTrace]] = None) -> RegretReport:
    traces = traces or collect_trials(alg, adv, T, trials, seed)
    samples = [regret_plus_sample(t, mu) for t in traces]
    return RegretReport.from_samples("PLUS", samples, [t.query_count for t in traces],
                                     _trace_extra(traces))


def estimate_regret_mul(alg: Algorithm, adv: Adversary, mu: MuSequence, T: int, trials: int,
                        seed: SeedLike, traces: Optional[List[RunTrace]] = None) -> RegretReport:
    traces = traces or collect_trials(alg, adv, T, trials, seed)
    results = [regret_mul_sample(t, mu) for t in traces]
    extra = {"mu_min_seen": min(r[1] for r in results), **_trace_extra(traces)}
    return RegretReport.from_samples("MUL", [r[0] for r in results],
                                     [t.query_count for t in traces], extra)


def decompose_mdp_regret(agent_trace: RunTrace, mentor_trace: Sequence[State],
                         mdp: MDPInstance) -> Tuple[float, float]:
    """(state-based, action-based)；兩者之和等於該軌跡的後悔樣本"""
    if len(mentor_trace) != len(agent_trace.history):
        raise ValueError(f"軌跡長度不一致: agent={len(agent_trace.history)}, mentor={len(mentor_trace)}")
    mentor_total = math.fsum(mdp.reward(s, mdp.mentor(s)) for s in mentor_trace)
    on_agent_states = math.fsum(mdp.reward(step.state, mdp.mentor(step.state))
                                for step in agent_trace.history)
    agent_total = math.fsum(mdp.reward(step.state, step.action) for step in agent_trace.history)
    return mentor_total - on_agent_states, on_agent_states - agent_total


def regret_mdp_sample(trial: MDPTrial, mdp: MDPInstance) -> float:
    mentor_total = math.fsum(mdp.reward(s, mdp.mentor(s)) for s in trial.mentor_states)
    return mentor_total - math.fsum(trial.agent.rewards)


def estimate_regret_mdp(alg: Algorithm, mdp: MDPInstance, T: int, trials: int, seed: SeedLike,
                        mdp_trials: Optional[List[MDPTrial]] = None) -> RegretReport:
    mdp_trials = mdp_trials or collect_mdp_trials(alg, mdp, T, trials, seed)
    samples = [regret_mdp_sample(tr, mdp) for tr in mdp_trials]
    parts = [decompose_mdp_regret(tr.agent, tr.mentor_states, mdp) for tr in mdp_trials]
    traces = [tr.agent for tr in mdp_trials]
    extra = {
        "state_based_mean": math.fsum(p[0] for p in parts) / len(parts),
        "action_based_mean": math.fsum(p[1] for p in parts) / len(parts),
        **_trace_extra(traces),
    }
    return RegretReport.from_samples("MDP", samples, [t.query_count for t in traces], extra)


# ---------------------------------------------------------------------------
# 精確列舉 oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TraceBranch:
    probability: float
    steps: Tuple[Step, ...]
    mentor_actions: Tuple[int, ...]


def enumerate_traces(alg: Algorithm, adv: Adversary, T: int,
                     max_branches: int = MAX_ORACLE_BRANCHES) -> Iterator[TraceBranch]:
    """列舉 (狀態, 查詢, 動作) 的所有分支及其機率

    需要 adv.outcomes 與 alg 的 query_probability / action_distribution。
    """
    leaves = 0

    def expand(history: History, prob: float, mentor: Tuple[int, ...]):
        nonlocal leaves
        if len(history) == T:
            leaves += 1
            if leaves > max_branches:
                raise CapabilityError(f"分支數超過上限 {max_branches}")
            yield TraceBranch(prob, history.steps, mentor)
            return
        for state, a_m, p_s in adv.outcomes(history):
            p_query = alg.query_probability(history, state)
            for q, p_q in ((0, 1.0 - p_query), (1, p_query)):
                if p_q <= 0:
                    continue
                feedback = a_m if q else None
                dist = alg.action_distribution(history, state, feedback)
                for a in np.flatnonzero(dist > 0):
                    nxt = history.extended(Step(state, int(a), feedback, q))
                    yield from expand(nxt, prob * p_s * p_q * float(dist[a]), mentor + (int(a_m),))

    yield from expand(History(), 1.0, ())


@dataclass
class ExactRegret:
    values: Dict[str, float]
    expected_queries: float
    branches: int


def _mentor_expected_reward(mdp: FiniteMDP, T: int) -> float:
    """mentor 狀態邊際分佈的動態規劃"""
    S = len(mdp.states)
    marginal = mdp.initial.copy()
    r_m = np.array([mdp.rewards[i, mdp.mentor_actions[i]] for i in range(S)])
    P_m = np.array([mdp.P[i, mdp.mentor_actions[i]] for i in range(S)])
    total = []
    for _ in range(T):
        total.append(float(marginal @ r_m))
        marginal = marginal @ P_m
    return math.fsum(total)


def exact_regret_oracle(env, alg: Algorithm, T: int, mu: Optional[MuSequence] = None,
                        policy_class: Optional[PolicyClass] = None) -> ExactRegret:
    """小型實例的精確期望後悔

    env 為有限 MDP（計算 MDP 後悔）或可列舉的對手。
    """
    if isinstance(env, MDPInstance):
        if not isinstance(env, FiniteMDP):
            raise CapabilityError("精確 oracle 只支援有限 MDP")
        if len(env.states) > 4 or env.action_count > 3 or T > 6:
            raise CapabilityError(f"超出精確列舉限制: |S|={len(env.states)}, |A|={env.action_count}, T={T}")
        adv = MDPAdversary(env)
    else:
        adv = env
        if T > 8:
            raise CapabilityError(f"超出精確列舉限制: T={T}")

    sums = {kind: [] for kind in KINDS}
    queries, agent_reward, count = [], [], 0
    comparators = comparator_class(policy_class, T)[0] if policy_class is not None else None

    for branch in enumerate_traces(alg, adv, T):
        count += 1
        p = branch.probability
        queries.append(p * sum(s.queried for s in branch.steps))
        if isinstance(env, MDPInstance):
            agent_reward.append(p * math.fsum(env.reward(s.state, s.action) for s in branch.steps))
        trace = RunTrace(branch.steps, T, None, branch.mentor_actions,
                         tuple(int(s.action != m) for s, m in zip(branch.steps, branch.mentor_actions)))
        if comparators is not None:
            sums["SA"].append(p * regret_sa_sample(trace, comparators))
        if mu is not None:
            sums["PLUS"].append(p * regret_plus_sample(trace, mu))
            sums["MUL"].append(p * regret_mul_sample(trace, mu)[0])

    values = {kind: math.fsum(v) for kind, v in sums.items() if v}
    if isinstance(env, FiniteMDP):
        values["MDP"] = _mentor_expected_reward(env, T) - math.fsum(agent_reward)
    return ExactRegret(values, math.fsum(queries), count)


def _tv_gap_profile(mdp: FiniteMDP, policy: np.ndarray, T: int) -> np.ndarray:
    """穩定表格策略與 mentor 的狀態邊際 TV 差 Δ_t（除錯用）"""
    S = len(mdp.states)
    P_agent = np.einsum("sa,sat->st", policy, mdp.P)
    P_m = np.array([mdp.P[i, mdp.mentor_actions[i]] for i in range(S)])
    agent, mentor = mdp.initial.copy(), mdp.initial.copy()
    gaps = []
    for _ in range(T):
        gaps.append(0.5 * float(np.abs(agent - mentor).sum()))
        agent, mentor = agent @ P_agent, mentor @ P_m
    return np.array(gaps)


# ---------------------------------------------------------------------------
# 斜率擬合
# ---------------------------------------------------------------------------

def fit_loglog_slope(points: Sequence[Tuple[float, float]]) -> SlopeFit:
    """log-log 最小平方法；非正值被剔除並記錄"""
    Ts = [p[0] for p in points]
    if any(b <= a for a, b in zip(Ts, Ts[1:])):
        raise ValueError(f"T 必須嚴格遞增: {Ts}")
    usable = [(float(t), float(v)) for t, v in points if v > 0]
    dropped = [(float(t), float(v)) for t, v in points if not v > 0]
    if len(usable) < 3:
        raise ValueError(f"至少需要 3 個正值點，只有 {len(usable)} 個（剔除 {len(dropped)} 個）")
    x = np.log([t for t, _ in usable])
    y = np.log([v for _, v in usable])
    if np.ptp(y) == 0:
        return SlopeFit(usable, 0.0, float(y[0]), 1.0, dropped)
    fit = linregress(x, y)
    return SlopeFit(usable, float(fit.slope), float(fit.intercept), float(fit.rvalue ** 2), dropped)


# ---------------------------------------------------------------------------
# 幾何工具
# ---------------------------------------------------------------------------

def _as_points(points) -> np.ndarray:
    if len(points) and isinstance(points[0], State):
        return np.array([s.coords for s in points], dtype=float)
    arr = np.asarray(points, dtype=float)
    return arr[:, None] if arr.ndim == 1 else arr


def diameter(points) -> float:
    """max ‖s − s'‖；高維時先取凸包頂點"""
    arr = _as_points(points)
    if len(arr) < 2:
        return 0.0
    if arr.shape[1] == 1:
        return float(arr.max() - arr.min())
    candidates = arr
    if len(arr) > arr.shape[1] + 1:
        try:
            candidates = arr[ConvexHull(arr).vertices]
        except QhullError:
            candidates = np.unique(arr, axis=0)
    return float(pdist(candidates).max())


@dataclass
class PackingResult:
    count: int
    exact: bool


def packing_number_bruteforce(points, delta: float) -> PackingResult:
    """兩兩距離 > delta 的最大子集大小

    一維時由左而右的貪婪法即為最優；其他情況 ≤ 20 點精確搜尋，否則貪婪下界。
    """
    arr = _as_points(points)
    m = len(arr)
    if m == 0:
        return PackingResult(0, True)
    if arr.shape[1] == 1:
        xs = np.sort(arr[:, 0])
        count, last = 1, xs[0]
        for x in xs[1:]:
            if x - last > delta:
                count, last = count + 1, x
        return PackingResult(count, True)

    close = np.linalg.norm(arr[:, None, :] - arr[None, :, :], axis=2) <= delta
    if m > MAX_EXACT_PACKING:
        chosen: List[int] = []
        for i in range(m):
            if not any(close[i, j] for j in chosen):
                chosen.append(i)
        logger.debug(f"{m} 個候選點超過精確上限，使用貪婪下界 {len(chosen)}")
        return PackingResult(len(chosen), False)

    conflicts = [sum(1 << j for j in range(m) if close[i, j]) for i in range(m)]

    @lru_cache(maxsize=None)
    def best(candidates: int) -> int:
        if candidates == 0:
            return 0
        v = (candidates & -candidates).bit_length() - 1
        take = 1 + best(candidates & ~conflicts[v])
        if take >= bin(candidates).count("1"):
            return take
        return max(take, best(candidates & ~(1 << v)))

    return PackingResult(best((1 << m) - 1), True)


def unit_ball_volume(n: int) -> float:
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1)


def packing_bound(volume: float, delta: float, n: int) -> float:
    """M(K, δ) ≤ 3^n·vol(K) / (δ^n·vol(B))"""
    return 3 ** n * volume / (delta ** n * unit_ball_volume(n))


def _ball_through(support: List[np.ndarray]) -> Tuple[np.ndarray, float]:
    p0 = support[0]
    if len(support) == 1:
        return p0.copy(), 0.0
    A = np.array([p - p0 for p in support[1:]])
    lam = np.linalg.lstsq(A @ A.T, 0.5 * (A * A).sum(axis=1), rcond=None)[0]
    center = p0 + A.T @ lam
    return center, float(max(np.linalg.norm(p - center) for p in support))


def minimum_enclosing_ball(points) -> Tuple[np.ndarray, float]:
    """Welzl 演算法（固定洗牌順序）"""
    arr = _as_points(points)
    n = arr.shape[1]
    order = np.random.default_rng(0).permutation(len(arr))
    pts = [arr[i] for i in order]

    def welzl(k: int, support: List[np.ndarray]):
        if k == 0 or len(support) == n + 1:
            return _ball_through(support) if support else (np.zeros(n), -1.0)
        center, radius = welzl(k - 1, support)
        p = pts[k - 1]
        if radius >= 0 and np.linalg.norm(p - center) <= radius + 1e-12:
            return center, radius
        return welzl(k - 1, support + [p])

    center, radius = welzl(len(pts), [])
    return center, max(radius, 0.0)


def jung_radius_check(points) -> dict:
    """最小包圍球半徑 ≤ diam·√(n / (2(n+1)))"""
    arr = _as_points(points)
    n = arr.shape[1]
    if n > 3 or len(arr) > 50:
        raise CapabilityError(f"Jung 檢查限制 n ≤ 3、點數 ≤ 50: n={n}, 點數={len(arr)}")
    _, radius = minimum_enclosing_ball(arr)
    diam = diameter(arr)
    bound = diam * math.sqrt(n / (2 * (n + 1)))
    return {"meb_radius": radius, "diam": diam, "bound": bound, "pass": radius <= bound + 1e-9}


# ---------------------------------------------------------------------------
# 理論上界
# ---------------------------------------------------------------------------

def budgeted_regret_bound(T: int, k: float, base_regret_at_k: float) -> float:
    """預算包裝器的 R_SA ≤ (T/k)·R(k)"""
    return T / k * base_regret_at_k


def safe_regret_bounds(L: float, epsilon: float, base_regret: float,
                       mu_min: Optional[float] = None) -> Dict[str, Optional[float]]:
    """R_plus ≤ L·ε·R；μ_min > 0 且 ε ≤ μ_min/(2L) 時 R_mul ≤ 2L·ε·R/μ_min"""
    mul = None
    if mu_min and mu_min > 0 and epsilon <= mu_min / (2 * L):
        mul = 2 * L * epsilon * base_regret / mu_min
    return {"PLUS": L * epsilon * base_regret, "MUL": mul}


def ood_query_bound(action_count: int, diam: float, epsilon: float, n: int) -> float:
    """陌生狀態查詢數 ≤ |A|·M(B, ε)，B 的半徑取 max(Jung 半徑, ε)，以 packing 體積上界估計"""
    radius = max(diam * math.sqrt(n / (2 * (n + 1))), epsilon)
    ball_volume = unit_ball_volume(n) * radius ** n
    return action_count * max(1.0, packing_bound(ball_volume, epsilon, n))


def mdp_regret_bound(T: int, r_plus: float, r_sa: Optional[float] = None) -> float:
    """獎勵有局部泛化時 (T+1)·R_plus，否則 R_SA + T·R_plus"""
    if r_sa is None:
        return (T + 1) * r_plus
    return r_sa + T * r_plus
