#!/usr/bin/env python3
"""
全回饋專家學習器
halving、small-loss 指數權重、ε-cover 建構、可實現平滑學習器，以及 one-vs-rest 包裝
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, List, Optional, Sequence

import numpy as np

from protocol import (
    ActionId,
    Algorithm,
    CapabilityError,
    ContractError,
    History,
    HistoryLearner,
    State,
    Step,
    sample_action,
)


logger = logging.getLogger("Experts")

SMALL_LOSS_CONSTANT = math.e / (math.e - 1)


# ---------------------------------------------------------------------------
# 策略類別
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ThresholdPolicy:
    """π(s) = 1(s[axis] ≥ θ)"""

    axis: int
    theta: float

    def __call__(self, state: State) -> ActionId:
        return int(state.coords[self.axis] >= self.theta)


@dataclass(frozen=True)
class TablePolicy:
    """有限狀態上的查表策略"""

    table: tuple  # ((coords, action), ...)
    default: ActionId = 0

    @classmethod
    def from_mapping(cls, mapping: dict, default: ActionId = 0) -> "TablePolicy":
        return cls(tuple(sorted((s.coords, int(a)) for s, a in mapping.items())), default)

    def __call__(self, state: State) -> ActionId:
        for coords, action in self.table:
            if coords == state.coords:
                return action
        return self.default


@dataclass(frozen=True)
class BinaryView:
    """one-vs-rest 用的二元化策略：1(π(s) = a)"""

    policy: Callable
    target: ActionId

    def __call__(self, state: State) -> ActionId:
        return int(self.policy(state) == self.target)


class PolicyClass:
    """已知策略類別 Π

    kind:
      - explicit        明確的有限策略列表
      - threshold       [0,1] 上的門檻（VC 維度 1）
      - axis_threshold  [0,1]^n 上沿座標軸的門檻（VC 維度記為 n）
    門檻類別的 members 為 None 時代表連續類別；給定 members 時為有限子集。
    """

    KINDS = ("explicit", "threshold", "axis_threshold")

    def __init__(self, kind: str, members: Optional[Sequence[Callable]] = None,
                 action_count: int = 2, n: int = 1, d: Optional[int] = None,
                 name: str = "", _view: Optional[tuple] = None):
        if kind not in self.KINDS:
            raise CapabilityError(f"未知的策略類別: {kind}")
        if kind in ("threshold", "axis_threshold") and action_count != 2:
            raise ValueError("門檻類別只支援 |A| = 2")
        if kind == "explicit" and not members:
            raise ValueError("explicit 類別需要至少一個策略")
        self.kind = kind
        self.action_count = action_count
        self.n = n
        self.members = list(members) if members is not None else None
        self.name = name or kind
        self._view = _view
        if d is None:
            d = {"threshold": 1, "axis_threshold": n}.get(kind)
            if d is None:
                d = max(1, math.ceil(math.log2(len(self.members)))) if len(self.members) > 1 else 1
        self.vc_dimension = d

        self._axes = None
        self._thetas = None
        if self.members is not None and kind != "explicit" and _view is None:
            self._axes = np.array([p.axis for p in self.members], dtype=int)
            self._thetas = np.array([p.theta for p in self.members], dtype=float)

    # 建構子 ----------------------------------------------------------------

    @classmethod
    def explicit(cls, policies: Sequence[Callable], action_count: int = 2,
                 n: int = 1, d: Optional[int] = None, name: str = "") -> "PolicyClass":
        return cls("explicit", policies, action_count=action_count, n=n, d=d, name=name)

    @classmethod
    def from_tables(cls, states: Sequence[State], tables: Sequence[Sequence[ActionId]],
                    action_count: int = 2) -> "PolicyClass":
        """每個 table[i] 是 states[i] 上的動作"""
        policies = [TablePolicy.from_mapping(dict(zip(states, table))) for table in tables]
        return cls.explicit(policies, action_count=action_count, n=states[0].n)

    @classmethod
    def thresholds(cls, thetas: Optional[Sequence[float]] = None) -> "PolicyClass":
        members = None if thetas is None else [ThresholdPolicy(0, float(t)) for t in thetas]
        return cls("threshold", members, n=1)

    @classmethod
    def axis_thresholds(cls, n: int, members: Optional[Sequence[ThresholdPolicy]] = None) -> "PolicyClass":
        return cls("axis_threshold", members, n=n)

    # 查詢 ------------------------------------------------------------------

    @property
    def is_finite(self) -> bool:
        return self.members is not None

    @property
    def size(self) -> int:
        if not self.is_finite:
            raise CapabilityError(f"{self.name} 是無限類別")
        return len(self.members)

    def evaluate(self, policy: Callable, state: State) -> ActionId:
        return int(policy(state))

    def predictions(self, state: State) -> np.ndarray:
        """所有成員在 state 上的動作"""
        if not self.is_finite:
            raise CapabilityError(f"{self.name} 是無限類別，無法列出所有預測")
        if self._view is not None:
            parent, target = self._view
            return (parent.predictions(state) == target).astype(int)
        if self._axes is not None:
            return (state.array[self._axes] >= self._thetas).astype(int)
        return np.fromiter((p(state) for p in self.members), dtype=int, count=len(self.members))

    def binary_view(self, action: ActionId) -> "PolicyClass":
        """one-vs-rest：預測 1(π(s) = action) 的二元類別"""
        if not self.is_finite:
            raise CapabilityError("binary_view 需要有限類別")
        members = [BinaryView(p, action) for p in self.members]
        return PolicyClass("explicit", members, action_count=2, n=self.n,
                           d=self.vc_dimension, name=f"{self.name}[={action}]",
                           _view=(self, action))

    def sample_members(self, rng: np.random.Generator, count: int) -> List[Callable]:
        if self.is_finite:
            idx = rng.integers(len(self.members), size=count)
            return [self.members[i] for i in idx]
        axes = rng.integers(self.n, size=count) if self.kind == "axis_threshold" else np.zeros(count, dtype=int)
        thetas = rng.random(count)
        return [ThresholdPolicy(int(a), float(t)) for a, t in zip(axes, thetas)]

    def disagreement(self, p: Callable, q: Callable, rng: Optional[np.random.Generator] = None,
                     samples: int = 20000) -> float:
        """Pr_{s~β}[p(s) ≠ q(s)]，β 為定義域上的均勻分佈

        門檻策略用區間長度精確計算，其餘策略以抽樣估計。
        """
        if isinstance(p, ThresholdPolicy) and isinstance(q, ThresholdPolicy):
            up = 1.0 - min(max(p.theta, 0.0), 1.0)
            uq = 1.0 - min(max(q.theta, 0.0), 1.0)
            if p.axis == q.axis:
                return abs(up - uq)
            return up * (1 - uq) + uq * (1 - up)
        rng = rng or np.random.default_rng(0)
        points = rng.random((samples, self.n))
        return float(np.mean([p(State.from_array(x)) != q(State.from_array(x)) for x in points]))

    def __repr__(self) -> str:
        size = len(self.members) if self.is_finite else "∞"
        return f"PolicyClass({self.name}, size={size}, d={self.vc_dimension})"


# ---------------------------------------------------------------------------
# ε-cover
# ---------------------------------------------------------------------------

@dataclass
class CoverResult:
    """有限的 ε-cover Π̃ 及其基準測度"""

    policies: List[Callable]
    epsilon: float
    baseline: str
    source: PolicyClass
    exact: bool = True

    @property
    def size(self) -> int:
        return len(self.policies)

    @property
    def size_bound(self) -> float:
        return (41.0 / self.epsilon) ** self.source.vc_dimension

    def as_class(self) -> PolicyClass:
        src = self.source
        if src.kind == "explicit":
            return PolicyClass.explicit(self.policies, action_count=src.action_count, n=src.n,
                                        d=src.vc_dimension, name=f"cover({src.name})")
        return PolicyClass(src.kind, self.policies, n=src.n, d=src.vc_dimension,
                           name=f"cover({src.name},{self.epsilon:g})")


def epsilon_cover(policy_class: PolicyClass, eps: float) -> CoverResult:
    """在均勻 β 下建構 ε-cover

    門檻類別使用間距 ≤ ε 的均勻格點；有限類別本身即為 0-cover。
    """
    if not 0 < eps <= 1:
        raise ValueError(f"eps 必須在 (0, 1]: {eps}")
    if policy_class.kind not in PolicyClass.KINDS:
        raise CapabilityError(f"不支援覆蓋的類別: {policy_class.kind}")

    baseline = f"uniform[0,1]^{policy_class.n}"

    if eps >= 1:
        first = policy_class.members[0] if policy_class.is_finite else ThresholdPolicy(0, 0.0)
        cover = CoverResult([first], eps, baseline, policy_class)
    elif policy_class.is_finite:
        cover = CoverResult(list(policy_class.members), eps, baseline, policy_class)
    else:
        m = math.ceil(1.0 / eps)
        grid = [i / m for i in range(m + 1)]
        axes = range(policy_class.n) if policy_class.kind == "axis_threshold" else [0]
        cover = CoverResult([ThresholdPolicy(a, t) for a in axes for t in grid], eps, baseline, policy_class)

    if cover.size > cover.size_bound:
        raise RuntimeError(f"cover 大小 {cover.size} 超過上界 {cover.size_bound:.3g}")
    logger.debug(f"{policy_class.name} 的 {eps:g}-cover 大小 {cover.size}")
    return cover


# ---------------------------------------------------------------------------
# 學習器
# ---------------------------------------------------------------------------

class HalvingLearner(HistoryLearner):
    """有限可實現類別上的 halving：預測版本空間的多數決"""

    def __init__(self, policy_class: PolicyClass):
        if not policy_class.is_finite:
            raise CapabilityError("halving 需要明確的有限類別")
        super().__init__(policy_class.action_count)
        self.policy_class = policy_class
        self._reset()

    def _reset(self):
        self._version = np.arange(self.policy_class.size)
        self.mistakes = 0
        self.inconsistent = False
        self.step_log: List[tuple] = []

    def _vote(self, preds: np.ndarray) -> ActionId:
        return int(np.bincount(preds, minlength=self.action_count).argmax())

    def _observe(self, step: Step):
        if step.mentor_feedback is None:
            return
        preds = self.policy_class.predictions(step.state)[self._version]
        mistake = self._vote(preds) != step.mentor_feedback
        before = len(self._version)
        keep = self._version[preds == step.mentor_feedback]
        if keep.size == 0:
            if not self.inconsistent:
                logger.warning("版本空間已空（輸入不可實現），保留最後一個策略")
            self.inconsistent = True
            keep = self._version[-1:]
        self._version = keep
        self.mistakes += int(mistake)
        self.step_log.append((before, len(keep), bool(mistake)))

    @property
    def version_space(self) -> List[Callable]:
        return [self.policy_class.members[i] for i in self._version]

    def action_distribution(self, history, state, feedback=None):
        self._sync(history)
        preds = self.policy_class.predictions(state)[self._version]
        dist = np.zeros(self.action_count)
        dist[self._vote(preds)] = 1.0
        return dist

    def fresh(self):
        return HalvingLearner(self.policy_class)

    def diagnostics(self):
        return {"mistakes": self.mistakes, "version_size": int(len(self._version)),
                "inconsistent": self.inconsistent}


class ExpWeightsLearner(HistoryLearner):
    """small-loss 指數權重預測器：以 ∝ exp(−η·累積損失) 的機率跟隨專家"""

    def __init__(self, policy_class: PolicyClass, eta: float = 1.0,
                 cover: Optional[CoverResult] = None):
        if not policy_class.is_finite or policy_class.size < 1:
            raise ValueError("指數權重需要非空有限類別")
        if eta <= 0:
            raise ValueError(f"eta 必須 > 0: {eta}")
        super().__init__(policy_class.action_count)
        self.policy_class = policy_class
        self.eta = float(eta)
        self.cover = cover
        self._reset()

    def _reset(self):
        self._cum = np.zeros(self.policy_class.size)

    def _observe(self, step: Step):
        if step.mentor_feedback is None:
            return
        self._cum += self.policy_class.predictions(step.state) != step.mentor_feedback

    @property
    def cumulative_losses(self) -> np.ndarray:
        return self._cum.copy()

    def weights(self, history: History) -> np.ndarray:
        self._sync(history)
        w = np.exp(-self.eta * (self._cum - self._cum.min()))
        return w / w.sum()

    def action_distribution(self, history, state, feedback=None):
        p = self.weights(history)
        preds = self.policy_class.predictions(state)
        return np.bincount(preds, weights=p, minlength=self.action_count)

    def expected_loss(self, history: History, state: State, mentor_action: ActionId) -> float:
        return float(1.0 - self.action_distribution(history, state)[mentor_action])

    def fresh(self):
        return ExpWeightsLearner(self.policy_class, self.eta, self.cover)

    def diagnostics(self):
        return {"experts": self.policy_class.size, "best_loss": float(self._cum.min())}


class OneVsRest(HistoryLearner):
    """|A| 個二元學習器，第 a 個預測 1(a_t^m = a)"""

    MAX_EXACT_ACTIONS = 12

    def __init__(self, factory: Callable[[ActionId], Algorithm], action_count: int):
        super().__init__(action_count)
        self.factory = factory
        self.copies = [factory(a) for a in range(action_count)]
        for a, copy in enumerate(self.copies):
            if copy.action_count != 2 or not copy.full_feedback:
                raise ContractError(f"第 {a} 個副本必須是二元全回饋學習器")
        self._reset()

    def _reset(self):
        self._views = [History() for _ in self.copies]

    def _observe(self, step: Step):
        fb = step.mentor_feedback
        for a, view in enumerate(self._views):
            view.append(Step(step.state, int(step.action == a),
                             None if fb is None else int(fb == a), step.queried))

    @staticmethod
    def combine(bits: Sequence[int]) -> ActionId:
        positives = [a for a, b in enumerate(bits) if b]
        return positives[0] if positives else 0

    def act(self, history, state, feedback, streams):
        self._sync(history)
        bits = [copy.act(view, state, None, streams) for copy, view in zip(self.copies, self._views)]
        return self.combine(bits)

    def action_distribution(self, history, state, feedback=None):
        if self.action_count > self.MAX_EXACT_ACTIONS:
            raise CapabilityError("動作數過多，無法精確列舉 one-vs-rest 分佈")
        self._sync(history)
        p_one = [copy.action_distribution(view, state)[1] for copy, view in zip(self.copies, self._views)]
        dist = np.zeros(self.action_count)
        for mask in range(2 ** self.action_count):
            bits = [(mask >> a) & 1 for a in range(self.action_count)]
            prob = math.prod(p if b else 1 - p for p, b in zip(p_one, bits))
            if prob > 0:
                dist[self.combine(bits)] += prob
        return dist

    def fresh(self):
        return OneVsRest(self.factory, self.action_count)

    def diagnostics(self):
        return {"copies": [copy.diagnostics() for copy in self.copies]}


# ---------------------------------------------------------------------------
# 建構函數
# ---------------------------------------------------------------------------

def halving_learner(policy_class: PolicyClass) -> HalvingLearner:
    return HalvingLearner(policy_class)


def exp_weights_learner(policy_class: PolicyClass, eta: float = 1.0) -> ExpWeightsLearner:
    return ExpWeightsLearner(policy_class, eta)


def realizable_smooth_learner(policy_class: PolicyClass, T: int) -> ExpWeightsLearner:
    """在 (1/T)-cover 上以 η=1 執行指數權重"""
    if T < 1:
        raise ValueError(f"T 必須 ≥ 1: {T}")
    cover = epsilon_cover(policy_class, 1.0 / T)
    return ExpWeightsLearner(cover.as_class(), eta=1.0, cover=cover)


def one_vs_rest(factory: Callable[[ActionId], Algorithm], action_count: int) -> OneVsRest:
    if action_count < 2:
        raise ValueError(f"|A| 必須 ≥ 2: {action_count}")
    return OneVsRest(factory, action_count)


# ---------------------------------------------------------------------------
# 閉式計算與 oracle
# ---------------------------------------------------------------------------

def small_loss_bound(best_loss: float, n_experts: int, eta: float = 1.0) -> float:
    """(η·L* + ln N) / (1 − e^{−η})；η=1 時即 e/(e−1)·(L* + ln N)"""
    return (eta * best_loss + math.log(n_experts)) / (1.0 - math.exp(-eta))


def exp_weights_expected_losses(policy_class: PolicyClass, states: Sequence[State],
                                mentor_actions: Sequence[ActionId], eta: float = 1.0) -> np.ndarray:
    """逐步期望損失 ⟨w_t, ℓ_t⟩，由權重遞迴閉式計算"""
    preds = np.array([policy_class.predictions(s) for s in states])
    losses = (preds != np.asarray(mentor_actions)[:, None]).astype(float)
    before = np.vstack([np.zeros(losses.shape[1]), np.cumsum(losses, axis=0)[:-1]])
    logits = -eta * (before - before.min(axis=1, keepdims=True))
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return np.sum(w * losses, axis=1)


def halving_worst_case_mistakes(policy_class: PolicyClass, states: Sequence[State], horizon: int) -> int:
    """窮舉可實現對手，求 halving 在 horizon 步內的最多錯誤數"""
    preds = np.array([policy_class.predictions(s) for s in states])
    action_count = policy_class.action_count

    @lru_cache(maxsize=None)
    def worst(version: tuple, remaining: int) -> int:
        if remaining == 0 or len(version) <= 1:
            return 0
        idx = np.array(version)
        best = 0
        for row in preds:
            labels = row[idx]
            vote = int(np.bincount(labels, minlength=action_count).argmax())
            for y in np.unique(labels):
                nxt = tuple(idx[labels == y].tolist())
                best = max(best, int(y != vote) + worst(nxt, remaining - 1))
        return best

    return worst(tuple(range(policy_class.size)), horizon)
