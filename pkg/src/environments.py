#!/usr/bin/env python3
"""
環境模組
Heaven-or-Hell、不可逆的 cliff-line MDP、σ-smooth 序列對手、
mentor rollout 與局部泛化驗證器
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from protocol import (
    ActionId,
    Adversary,
    CapabilityError,
    SeedLike,
    SmoothnessViolation,
    State,
    sample_action,
)


logger = logging.getLogger("Environments")

SMOOTHNESS_TOL = 1e-12


# ---------------------------------------------------------------------------
# 區域
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    """軸對齊的盒子 [lo, hi]；dead=True 代表 Dead 吸收狀態這個原子"""

    lo: Tuple[float, ...] = ()
    hi: Tuple[float, ...] = ()
    dead: bool = False

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != len(hi):
            raise ValueError("lo 與 hi 維度不一致")
        if any(h < l for l, h in zip(lo, hi)):
            raise ValueError(f"空盒子: lo={lo}, hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def cube(cls, n: int) -> "Box":
        return cls((0.0,) * n, (1.0,) * n)

    @classmethod
    def dead_atom(cls) -> "Box":
        return cls(dead=True)

    @property
    def n(self) -> int:
        return len(self.lo)

    @property
    def volume(self) -> float:
        if self.dead:
            return 0.0
        return float(np.prod(np.subtract(self.hi, self.lo)))

    def contains(self, state: State) -> bool:
        if self.dead:
            return False
        x = state.array
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi))

    def sample(self, rng: np.random.Generator) -> State:
        lo = np.asarray(self.lo)
        return State.from_array(lo + (np.asarray(self.hi) - lo) * rng.random(self.n))


def overlap_volume(lo_a, hi_a, lo_b, hi_b) -> float:
    sides = np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b)
    return float(np.prod(np.clip(sides, 0.0, None)))


# ---------------------------------------------------------------------------
# MDP
# ---------------------------------------------------------------------------

class MDPInstance:
    """MDP 契約：轉移抽樣、初始分佈、mentor、獎勵

    L 為 (P, π^m) 的局部泛化常數；有限實例另外提供精確核函數。
    """

    name = "mdp"
    n: int = 1
    action_count: int = 2
    L: float = 1.0
    sigma: float = 0.0
    exact_kernel = False

    def initial_state(self, rng: np.random.Generator) -> State:
        raise NotImplementedError

    def step(self, state: State, action: ActionId, rng: np.random.Generator) -> State:
        raise NotImplementedError

    def mentor(self, state: State) -> ActionId:
        raise NotImplementedError

    def reward(self, state: State, action: ActionId) -> float:
        raise NotImplementedError

    def kernel_prob(self, state: State, action: ActionId, target) -> float:
        raise CapabilityError(f"{self.name} 沒有精確核函數")

    def tv(self, state: State, action: ActionId, other: State, other_action: ActionId) -> float:
        """‖P(state, action) − P(other, other_action)‖_TV"""
        raise CapabilityError(f"{self.name} 沒有精確 TV 計算")

    def is_absorbing(self, state: State) -> bool:
        return False

    def initial_distribution(self) -> List[Tuple[State, float]]:
        raise CapabilityError(f"{self.name} 的初始分佈不是有限的")

    def transition_outcomes(self, state: State, action: ActionId) -> List[Tuple[State, float]]:
        raise CapabilityError(f"{self.name} 的轉移不是有限的")

    def sample_state(self, rng: np.random.Generator) -> State:
        return self.initial_state(rng)


class FiniteMDP(MDPInstance):
    """有限狀態 MDP，狀態嵌入 ℝ^n"""

    exact_kernel = True

    def __init__(self, states: Sequence[State], P, initial, mentor_actions: Sequence[ActionId],
                 rewards, L: float = 1.0, sigma: float = 0.0, name: str = "finite",
                 absorbing: Iterable[State] = ()):
        P = np.asarray(P, dtype=float)
        rewards = np.asarray(rewards, dtype=float)
        initial = np.asarray(initial, dtype=float)
        S = len(states)
        if P.ndim != 3 or P.shape[0] != S or P.shape[2] != S:
            raise ValueError(f"P 形狀必須是 (S, A, S): {P.shape}")
        if not np.allclose(P.sum(axis=2), 1.0, atol=1e-12) or np.any(P < 0):
            raise ValueError("P 的每一列必須是機率向量")
        if initial.shape != (S,) or not math.isclose(initial.sum(), 1.0, abs_tol=1e-12):
            raise ValueError("initial 必須是長度 S 的機率向量")
        if rewards.shape != P.shape[:2] or np.any(rewards < 0) or np.any(rewards > 1):
            raise ValueError("rewards 必須是 (S, A) 且位於 [0, 1]")

        self.states = list(states)
        self.index = {s: i for i, s in enumerate(self.states)}
        self.P = P
        self.initial = initial
        self.mentor_actions = [int(a) for a in mentor_actions]
        self.rewards = rewards
        self.action_count = P.shape[1]
        self.n = self.states[0].n
        self.L = L
        self.sigma = sigma
        self.name = name
        self._absorbing = {self.index[s] for s in absorbing}

    def initial_state(self, rng):
        return self.states[sample_action(self.initial, rng)]

    def step(self, state, action, rng):
        return self.states[sample_action(self.P[self.index[state], action], rng)]

    def mentor(self, state):
        return self.mentor_actions[self.index[state]]

    def reward(self, state, action):
        return float(self.rewards[self.index[state], action])

    def kernel_prob(self, state, action, target):
        row = self.P[self.index[state], action]
        return float(math.fsum(row[self.index[s]] for s in set(target)))

    def tv(self, state, action, other, other_action):
        a = self.P[self.index[state], action]
        b = self.P[self.index[other], other_action]
        return 0.5 * float(np.abs(a - b).sum())

    def is_absorbing(self, state):
        return self.index[state] in self._absorbing

    def initial_distribution(self):
        return [(s, float(p)) for s, p in zip(self.states, self.initial) if p > 0]

    def transition_outcomes(self, state, action):
        row = self.P[self.index[state], action]
        return [(s, float(p)) for s, p in zip(self.states, row) if p > 0]

    def sample_state(self, rng):
        return self.states[int(rng.integers(len(self.states)))]

    def complement(self, target) -> List[State]:
        target = set(target)
        return [s for s in self.states if s not in target]


START = State.of(0.0)
HEAVEN = State.of(1.0)
HELL = State.of(-1.0)


def heaven_hell(T: int) -> FiniteMDP:
    """三狀態 Heaven-or-Hell：動作 0 通往 Heaven（獎勵 1），動作 1 通往 Hell（獎勵 0）"""
    if T < 2:
        raise ValueError(f"Heaven-or-Hell 需要 T ≥ 2: {T}")
    states = [START, HEAVEN, HELL]
    P = np.zeros((3, 2, 3))
    P[0, 0, 1] = 1.0
    P[0, 1, 2] = 1.0
    P[1, :, 1] = 1.0
    P[2, :, 2] = 1.0
    rewards = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 0.0]])
    mdp = FiniteMDP(states, P, [1.0, 0.0, 0.0], [0, 0, 0], rewards,
                    L=1.0, sigma=0.0, name="heaven_hell", absorbing=[HEAVEN, HELL])
    mdp.T = T
    return mdp


DEAD = -1.0


class CliffLineMDP(MDPInstance):
    """[0,1]^n 上的連續 cliff-line，外加吸收的 Dead 狀態

    下一狀態均勻分佈在邊長 w = σ^(1/n) 的盒子上，盒子落在 x1 < 0 的部分進入 Dead。
    門檻 θ = w/2 正好在懸崖邊：s1 < θ 時停在原地的盒子就會有 Dead 質量。
    動作 0 往 +e1 後退 min(w/2, |s1 − θ|)，動作 1 往 −e1 前進 min(w/2, r·|s1 − θ|)，
    r = min(1, L·w − 1)；兩者的 TV ≤ (1 + r)·|s1 − θ|/w ≤ L·|s1 − θ|。
    mentor 在 s1 ≥ θ 時前進、否則後退，且永遠不會跌落；需要 L·w ≥ 1。
    """

    name = "cliff_line"
    exact_kernel = True

    def __init__(self, n: int, L_target: float, sigma: float, T: Optional[int] = None):
        if n < 1:
            raise ValueError(f"n 必須 ≥ 1: {n}")
        if not 0 < sigma <= 1:
            raise ValueError(f"sigma 必須在 (0, 1]: {sigma}")
        if not L_target > 0:
            raise ValueError(f"L_target 必須 > 0: {L_target}")
        self.n = n
        self.L = float(L_target)
        self.sigma = float(sigma)
        self.T = T
        self.width = sigma ** (1.0 / n)
        if self.L * self.width < 1.0:
            raise ValueError(
                f"(sigma={sigma}, L_target={L_target}) 不可行: 需要 L·w ≥ 1，"
                f"w = σ^(1/n) = {self.width:.4g}"
            )
        self.theta = self.width / 2
        self.advance_rate = min(1.0, self.L * self.width - 1.0)
        self.dead_state = State((DEAD,) * n)
        self.live = Box.cube(n)

    def is_dead(self, state: State) -> bool:
        return state == self.dead_state

    def is_absorbing(self, state):
        return self.is_dead(state)

    def displacement(self, state: State, action: ActionId) -> float:
        rate = self.advance_rate if action == 1 else 1.0
        return min(self.width / 2, rate * abs(state.coords[0] - self.theta))

    def next_box(self, state: State, action: ActionId) -> Tuple[np.ndarray, np.ndarray]:
        """下一狀態的均勻支撐盒（第一維向下不截斷）"""
        w = self.width
        center = state.array.copy()
        shift = self.displacement(state, action)
        center[0] += shift if action == 0 else -shift
        lo = np.clip(center - w / 2, 0.0, 1.0 - w)
        lo[0] = min(center[0] - w / 2, 1.0 - w)
        return lo, lo + w

    def dead_mass(self, state: State, action: ActionId) -> float:
        if self.is_dead(state):
            return 1.0
        lo, _ = self.next_box(state, action)
        return min(1.0, max(0.0, -lo[0]) / self.width)

    def initial_state(self, rng):
        return State.from_array(rng.random(self.n))

    def step(self, state, action, rng):
        if self.is_dead(state):
            return state
        lo, _ = self.next_box(state, action)
        x = lo + self.width * rng.random(self.n)
        if x[0] < 0:
            return self.dead_state
        return State.from_array(x)

    def mentor(self, state):
        if self.is_dead(state):
            return 0
        return int(state.coords[0] >= self.theta)

    def reward(self, state, action):
        return 0.0 if self.is_dead(state) else 1.0

    def _live_part(self, state: State, action: ActionId):
        lo, hi = self.next_box(state, action)
        lo = lo.copy()
        lo[0] = max(lo[0], 0.0)
        return lo, hi

    def kernel_prob(self, state, action, target) -> float:
        """target 為 Box 或 Box 序列（彼此不相交）"""
        regions = [target] if isinstance(target, Box) else list(target)
        if self.is_dead(state):
            return 1.0 if any(r.dead for r in regions) else 0.0
        lo, hi = self._live_part(state, action)
        total = 0.0
        for region in regions:
            if region.dead:
                total += self.dead_mass(state, action)
            else:
                total += overlap_volume(lo, hi, region.lo, region.hi) / self.width ** self.n
        return min(1.0, total)

    def tv(self, state, action, other, other_action):
        """兩個截斷均勻盒分佈的精確 TV：Dead 原子差 + 存活部分的 L1 差"""
        if self.is_dead(state) and self.is_dead(other):
            return 0.0
        vol = self.width ** self.n
        pd = self.dead_mass(state, action)
        qd = self.dead_mass(other, other_action)
        if self.is_dead(state) or self.is_dead(other):
            live = 1.0 - (qd if self.is_dead(state) else pd)
            return 0.5 * (abs(pd - qd) + live)
        lo_a, hi_a = self._live_part(state, action)
        lo_b, hi_b = self._live_part(other, other_action)
        va = overlap_volume(lo_a, hi_a, lo_a, hi_a)
        vb = overlap_volume(lo_b, hi_b, lo_b, hi_b)
        vab = overlap_volume(lo_a, hi_a, lo_b, hi_b)
        return 0.5 * (abs(pd - qd) + (va + vb - 2 * vab) / vol)

    def sample_state(self, rng):
        return self.initial_state(rng)


def cliff_line(n: int, L_target: float, sigma: float, T: Optional[int] = None) -> CliffLineMDP:
    mdp = CliffLineMDP(n, L_target, sigma, T)
    logger.debug(f"cliff-line: n={n}, L={L_target}, σ={sigma}, θ={mdp.theta:.4g}, "
                 f"w={mdp.width:.4g}, r={mdp.advance_rate:.4g}")
    return mdp


def random_finite_mdp(rng: np.random.Generator, n_states: int = 3, action_count: int = 2,
                      deterministic: bool = False) -> FiniteMDP:
    """隨機小型有限 MDP（狀態放在整數座標上），L 取實際的最大 TV/距離比"""
    if not 2 <= n_states <= 4 or not 2 <= action_count <= 3:
        raise CapabilityError("隨機實例限制為 2 ≤ |S| ≤ 4、2 ≤ |A| ≤ 3")
    states = [State.of(float(i)) for i in range(n_states)]
    if deterministic:
        P = np.zeros((n_states, action_count, n_states))
        targets = rng.integers(n_states, size=(n_states, action_count))
        for s in range(n_states):
            for a in range(action_count):
                P[s, a, targets[s, a]] = 1.0
    else:
        P = rng.dirichlet(np.ones(n_states), size=(n_states, action_count))
    initial = rng.dirichlet(np.ones(n_states))
    mentor = rng.integers(action_count, size=n_states)
    rewards = rng.random((n_states, action_count))
    mdp = FiniteMDP(states, P, initial, mentor, rewards, name="random_finite")
    ratios = [mdp.tv(s, mdp.mentor(s), s, mdp.mentor(t)) / s.distance(t)
              for s in states for t in states if s != t]
    mdp.L = max(ratios) if ratios else 0.0
    return mdp


# ---------------------------------------------------------------------------
# MDP 當作對手
# ---------------------------------------------------------------------------

class MDPAdversary(Adversary):
    """MDP 的對手視角：下一狀態依最後一步的 (狀態, 動作) 轉移"""

    def __init__(self, mdp: MDPInstance, initial_state: Optional[State] = None):
        self.mdp = mdp
        self.initial_state = initial_state
        self.action_count = mdp.action_count
        self.sigma = mdp.sigma

    def next(self, history, rng):
        if len(history) == 0:
            state = self.initial_state if self.initial_state is not None else self.mdp.initial_state(rng)
        else:
            last = history[-1]
            state = self.mdp.step(last.state, last.action, rng)
        return state, self.mdp.mentor(state)

    def outcomes(self, history):
        if len(history) == 0:
            dist = ([(self.initial_state, 1.0)] if self.initial_state is not None
                    else self.mdp.initial_distribution())
        else:
            last = history[-1]
            dist = self.mdp.transition_outcomes(last.state, last.action)
        return [(s, self.mdp.mentor(s), p) for s, p in dist]

    def reward(self, state, action):
        return self.mdp.reward(state, action)


def mentor_rollout(mdp: MDPInstance, T: int, seed: SeedLike,
                   initial_state: Optional[State] = None) -> List[State]:
    """s_1 ~ D1，s_{t+1} ~ P(s_t, π^m(s_t))"""
    if T < 1:
        raise ValueError(f"T 必須 ≥ 1: {T}")
    rng = np.random.default_rng(seed)
    state = initial_state if initial_state is not None else mdp.initial_state(rng)
    states = [state]
    for _ in range(T - 1):
        state = mdp.step(state, mdp.mentor(state), rng)
        states.append(state)
    return states


# ---------------------------------------------------------------------------
# 存活機率序列 μ
# ---------------------------------------------------------------------------

class MuSequence:
    """μ_t(s, a) ∈ [0, 1]，附帶固定的 mentor 策略"""

    def __init__(self, fn: Callable[[int, State, ActionId], float], mentor: Callable[[State], ActionId],
                 mu_min: Optional[float] = None, L: Optional[float] = None, n: int = 1,
                 name: str = "mu"):
        self.fn = fn
        self.mentor = mentor
        self.mu_min = mu_min
        self.L = L
        self.n = n
        self.name = name

    def __call__(self, t: int, state: State, action: ActionId) -> float:
        value = float(self.fn(t, state, action))
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"μ_{t}{state.coords}, a={action} = {value} 不在 [0, 1]")
        return value

    def mentor_value(self, t: int, state: State) -> float:
        return self(t, state, self.mentor(state))

    def gap(self, t: int, state: State, action: ActionId) -> float:
        return self.mentor_value(t, state) - self(t, state, action)


def mu_from_mdp(mdp: MDPInstance, target_sets: Sequence) -> MuSequence:
    """μ_i(s, a) = P(s, a, X_i)，i 超過序列長度後為 1"""
    if not mdp.exact_kernel:
        raise CapabilityError(f"{mdp.name} 沒有精確核函數，無法建構 μ")
    targets = list(target_sets)

    def mu(t: int, state: State, action: ActionId) -> float:
        if 1 <= t <= len(targets):
            return mdp.kernel_prob(state, action, targets[t - 1])
        return 1.0

    mu_min = None
    if isinstance(mdp, FiniteMDP):
        values = [mdp.kernel_prob(s, a, X) for X in targets for s in mdp.states
                  for a in range(mdp.action_count)]
        mu_min = min(values + [1.0])
    return MuSequence(mu, mdp.mentor, mu_min=mu_min, L=mdp.L, n=mdp.n, name=f"mu({mdp.name})")


def cliff_survival_mu(mdp: CliffLineMDP, T: int) -> MuSequence:
    """μ_t(s, a) = P(s, a, 存活區)，即下一步不跌落的機率"""
    return mu_from_mdp(mdp, [mdp.live] * T)


def threshold_margin_mu(theta: float, L: float, floor: float = 0.5, axis: int = 0,
                        n: int = 1) -> MuSequence:
    """mentor π^m(s) = 1(s_axis ≥ θ) 的合成 μ：mentor 動作為 1，
    其他動作為 max(floor, 1 − L·|s_axis − θ|)，滿足 L-局部泛化"""
    if not 0.0 <= floor <= 1.0:
        raise ValueError(f"floor 必須在 [0, 1]: {floor}")

    def mentor(state: State) -> ActionId:
        return int(state.coords[axis] >= theta)

    def mu(t: int, state: State, action: ActionId) -> float:
        if action == mentor(state):
            return 1.0
        return max(floor, 1.0 - L * abs(state.coords[axis] - theta))

    return MuSequence(mu, mentor, mu_min=floor, L=L, n=n, name=f"margin(θ={theta:g})")


def random_tabular_mu(rng: np.random.Generator, states: Sequence[State],
                      mentor: Callable[[State], ActionId], action_count: int, T: int,
                      mu_min: float = 0.2) -> MuSequence:
    """mentor 動作逐點最優的隨機 μ 表（μ ∈ [mu_min, 1]）"""
    index = {s: i for i, s in enumerate(states)}
    table = mu_min + (1 - mu_min) * rng.random((T, len(states), action_count))
    for t in range(T):
        for i, s in enumerate(states):
            m = mentor(s)
            table[t, i, m] = max(table[t, i, m], table[t, i].max())

    def mu(t: int, state: State, action: ActionId) -> float:
        if 1 <= t <= T:
            return float(table[t - 1, index[state], action])
        return 1.0

    return MuSequence(mu, mentor, mu_min=float(table.min()), n=states[0].n, name="tabular")


# ---------------------------------------------------------------------------
# σ-smooth 序列對手
# ---------------------------------------------------------------------------

RegionPlan = Union[Sequence[Box], Callable[..., Box]]


class SmoothSequenceAdversary(Adversary):
    """每步從排定區域均勻抽樣（密度 ≤ 1/σ），mentor 動作為 π^m(s_t)"""

    def __init__(self, sigma: float, plan: RegionPlan, mentor: Callable[[State], ActionId],
                 action_count: int = 2, n: int = 1):
        if not 0 < sigma <= 1:
            raise ValueError(f"sigma 必須在 (0, 1]: {sigma}")
        self.sigma = float(sigma)
        self.plan = plan
        self.mentor = mentor
        self.action_count = action_count
        self.n = n
        if not callable(plan):
            if len(plan) == 0:
                raise ValueError("plan 不可為空")
            for region in plan:
                self._check(region)

    def _check(self, region: Box) -> Box:
        if region.dead or region.n != self.n:
            raise ValueError(f"區域必須是 {self.n} 維的存活盒子: {region}")
        if any(l < 0 or h > 1 for l, h in zip(region.lo, region.hi)):
            raise ValueError(f"區域超出 [0,1]^{self.n}: {region}")
        if region.volume < self.sigma - SMOOTHNESS_TOL:
            raise SmoothnessViolation(f"區域測度 {region.volume:.6g} < σ = {self.sigma:.6g}")
        return region

    def region_at(self, history) -> Box:
        if callable(self.plan):
            return self._check(self.plan(history, self.mentor))
        return self.plan[len(history) % len(self.plan)]

    def next(self, history, rng):
        state = self.region_at(history).sample(rng)
        return state, self.mentor(state)


def smooth_sequence_adversary(sigma: float, plan: RegionPlan, mentor: Callable[[State], ActionId],
                              action_count: int = 2, n: int = 1) -> SmoothSequenceAdversary:
    return SmoothSequenceAdversary(sigma, plan, mentor, action_count, n)


def threshold_stress_plan(theta: float, sigma: float, n: int = 1) -> Callable:
    """自適應計畫：貼著 θ 的一側放置測度 σ 的盒子；代理人上一步犯錯就留在同側，否則換邊"""
    w = sigma ** (1.0 / n)

    def plan(history, mentor) -> Box:
        side = 1
        if len(history):
            last = history[-1]
            wrong = last.action != mentor(last.state)
            was_above = last.state.coords[0] >= theta
            side = (1 if was_above else -1) if wrong else (-1 if was_above else 1)
        start = theta if side > 0 else theta - w
        start = min(max(start, 0.0), 1.0 - w)
        lo = (start,) + (0.0,) * (n - 1)
        hi = (start + w,) + (w,) * (n - 1)
        return Box(lo, hi)

    return plan


def smoothness_histogram_check(samples: Sequence[float], sigma: float, bins: int = 20) -> dict:
    """[0,1] 上的直方圖密度 ≤ 1/σ + 4·√(bins/samples)"""
    samples = np.asarray(samples, dtype=float)
    counts, _ = np.histogram(samples, bins=bins, range=(0.0, 1.0))
    density = counts * bins / len(samples)
    bound = 1.0 / sigma + 4.0 * math.sqrt(bins / len(samples))
    return {"max_density": float(density.max()), "bound": bound,
            "passed": bool(density.max() <= bound)}


# ---------------------------------------------------------------------------
# 局部泛化驗證
# ---------------------------------------------------------------------------

@dataclass
class LocalGeneralizationReport:
    max_ratio: float
    witness: Optional[Tuple[State, State]]
    L: float
    pairs: int

    @property
    def passed(self) -> bool:
        return self.max_ratio <= self.L + 1e-12


def _sample_pair(subject, rng: np.random.Generator, n: int) -> Tuple[State, State]:
    if isinstance(subject, FiniteMDP):
        i, j = rng.choice(len(subject.states), size=2, replace=False)
        return subject.states[i], subject.states[j]
    s = rng.random(n)
    if rng.random() < 0.5:
        other = np.clip(s + rng.normal(scale=0.05, size=n), 0.0, 1.0)
    else:
        other = rng.random(n)
    return State.from_array(s), State.from_array(other)


def check_local_generalization(subject: Union[MDPInstance, MuSequence], L: float,
                               num_pairs: int = 10_000, seed: SeedLike = 0,
                               t: int = 1) -> LocalGeneralizationReport:
    """抽樣狀態對，計算 |μ^m(s) − μ(s, π^m(s'))| / ‖s − s'‖（MDP 用 TV），回報最大比值"""
    rng = np.random.default_rng(seed)
    n = subject.n
    if isinstance(subject, MDPInstance):
        def gap(s, s2):
            return subject.tv(s, subject.mentor(s), s, subject.mentor(s2))
    else:
        def gap(s, s2):
            return abs(subject.mentor_value(t, s) - subject(t, s, subject.mentor(s2)))

    max_ratio, witness, used = 0.0, None, 0
    for _ in range(num_pairs):
        s, s2 = _sample_pair(subject, rng, n)
        dist = s.distance(s2)
        if dist == 0:
            continue
        used += 1
        ratio = gap(s, s2) / dist
        if ratio > max_ratio:
            max_ratio, witness = ratio, (s, s2)
    report = LocalGeneralizationReport(max_ratio, witness, L, used)
    if not report.passed:
        logger.warning(f"局部泛化檢查失敗: max_ratio={max_ratio:.6g} > L={L}")
    return report
