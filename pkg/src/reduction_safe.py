#!/usr/bin/env python3
"""
第二層歸約：安全包裝器
熟悉的狀態跟隨基底演算法；陌生的狀態（最近鄰距離 > ε）向 mentor 求助並快取答案
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.spatial.distance import pdist

from experts import PolicyClass, one_vs_rest, realizable_smooth_learner
from protocol import (
    ActionId,
    Algorithm,
    ContractError,
    History,
    ProtocolViolation,
    State,
    Step,
)
from reduction_budget import budgeted_active


logger = logging.getLogger("SafeWrapper")

OOD = "ood"
FAMILIAR = "familiar"


class MentorCache:
    """mentor 答案快取 X：依動作分組，保持插入順序"""

    def __init__(self):
        self._entries: List[Tuple[State, ActionId]] = []
        self._points: Dict[ActionId, np.ndarray] = {}

    def add(self, state: State, action: ActionId) -> None:
        self._entries.append((state, action))
        row = state.array[None, :]
        pts = self._points.get(action)
        self._points[action] = row.copy() if pts is None else np.vstack([pts, row])

    def nn_distance(self, state: State, action: ActionId) -> float:
        pts = self._points.get(action)
        if pts is None:
            return math.inf
        return float(np.min(np.linalg.norm(pts - state.array, axis=1)))

    def witness(self, state: State, action: ActionId) -> Optional[State]:
        """最近的同動作條目；距離相同時取最早插入者"""
        pts = self._points.get(action)
        if pts is None:
            return None
        idx = int(np.argmin(np.linalg.norm(pts - state.array, axis=1)))
        return State.from_array(pts[idx])

    def points(self, action: ActionId) -> np.ndarray:
        pts = self._points.get(action)
        return np.empty((0, 0)) if pts is None else pts.copy()

    @property
    def actions(self) -> List[ActionId]:
        return sorted(self._points)

    @property
    def entries(self) -> List[Tuple[State, ActionId]]:
        return list(self._entries)

    def min_separation(self) -> float:
        """同動作條目間的最小距離（不足兩個條目時為 ∞）"""
        gaps = [pdist(pts).min() for pts in self._points.values() if len(pts) > 1]
        return float(min(gaps)) if gaps else math.inf

    def is_packing(self, epsilon: float) -> bool:
        return self.min_separation() > epsilon

    def __len__(self) -> int:
        return len(self._entries)


def nn_distance(cache: MentorCache, state: State, action: ActionId) -> float:
    """到動作為 action 的最近快取條目的歐氏距離；沒有條目時為 ∞"""
    return cache.nn_distance(state, action)


@dataclass(frozen=True)
class SafeStepRecord:
    branch: str
    distance: float
    proposed: ActionId
    simulated_query: int
    cache_size: int


class SafeWrapper(Algorithm):
    """求助包裝器：最近鄰求助規則

    模擬歷史 F̃ 永遠記錄 (s_i, ã_i, π^m(s_i)·q̃_i)，
    與實際採取的動作無關。
    """

    full_feedback = False
    query_agnostic = False

    def __init__(self, base: Algorithm, epsilon: float, T: int):
        if not base.query_agnostic:
            raise ContractError(f"基底演算法 {type(base).__name__} 必須是 query-agnostic")
        if not epsilon > 0:
            raise ValueError(f"epsilon 必須 > 0: {epsilon}")
        if T < 1:
            raise ValueError(f"T 必須 ≥ 1: {T}")
        super().__init__(base.action_count)
        self.base = base
        self.epsilon = float(epsilon)
        self.T = T
        self._tracked: Optional[History] = None
        self._reset()

    def _reset(self) -> None:
        self.cache = MentorCache()
        self.simulated_history = History()
        self.records: List[SafeStepRecord] = []
        self._pending = None

    def _begin(self, history: History) -> None:
        if history is not self._tracked or len(history) != len(self.records):
            if len(history) != 0:
                raise ProtocolViolation("安全包裝器只能從空歷史開始執行", len(history) + 1)
            self._tracked = history
            self._reset()

    def query(self, history, state, streams):
        self._begin(history)
        q_tilde = self.base.query(self.simulated_history, state, streams)
        a_tilde = self.base.act(self.simulated_history, state, None, streams)
        distance = self.cache.nn_distance(state, a_tilde)
        ood = distance > self.epsilon
        self._pending = (state, q_tilde, a_tilde, distance, ood)
        return 1 if ood else q_tilde

    def act(self, history, state, feedback, streams):
        if self._pending is None or self._pending[0] != state:
            raise ProtocolViolation("act 必須緊接在同一狀態的 query 之後", len(history) + 1)
        _, q_tilde, a_tilde, distance, ood = self._pending
        self._pending = None

        if ood:
            if feedback is None:
                raise ProtocolViolation("陌生狀態需要 mentor 回饋", len(history) + 1)
            self.cache.add(state, feedback)
            action = feedback
            logger.debug(f"t={len(history) + 1} 陌生狀態 d={distance:.4g} > ε，求助 mentor")
        else:
            action = a_tilde

        if q_tilde and feedback is None:
            raise ProtocolViolation("模擬查詢需要 mentor 回饋", len(history) + 1)
        self.simulated_history.append(Step(state, a_tilde, feedback if q_tilde else None, q_tilde))
        self.records.append(SafeStepRecord(OOD if ood else FAMILIAR, distance, a_tilde,
                                           q_tilde, len(self.cache)))
        return action

    def matched_cache(self) -> MentorCache:
        """提議動作與 mentor 動作一致的陌生狀態條目；同動作者兩兩距離 > ε"""
        matched = MentorCache()
        ood = [r for r in self.records if r.branch == OOD]
        for record, (state, action) in zip(ood, self.cache.entries):
            if record.proposed == action:
                matched.add(state, action)
        return matched

    def fresh(self):
        return SafeWrapper(self.base.fresh(), self.epsilon, self.T)

    def diagnostics(self):
        return {
            "epsilon": self.epsilon,
            "cache_size": len(self.cache),
            "ood_steps": sum(r.branch == OOD for r in self.records),
            "simulated_queries": sum(r.simulated_query for r in self.records),
            "branches": [r.branch for r in self.records],
            "distances": [r.distance for r in self.records],
            "proposed": [r.proposed for r in self.records],
            "cache_sizes": [r.cache_size for r in self.records],
            "cache": self.cache.entries,
            "matched_separation": self.matched_cache().min_separation(),
            "base": self.base.diagnostics(),
        }


def safe_wrapper(base: Algorithm, epsilon: float, T: int) -> SafeWrapper:
    return SafeWrapper(base, epsilon, T)


def default_params(T: int, n: int) -> Tuple[float, float]:
    """k = T^((2n+1)/(2n+2))，ε = T^(−1/(n+1))"""
    if T < 1 or n < 1:
        raise ValueError(f"需要 T ≥ 1 且 n ≥ 1: T={T}, n={n}")
    k = float(T) ** ((2 * n + 1) / (2 * n + 2))
    epsilon = float(T) ** (-1.0 / (n + 1))
    return k, epsilon


def full_stack(policy_class: PolicyClass, T: int, n: int,
               k: Optional[float] = None, epsilon: Optional[float] = None) -> SafeWrapper:
    """可實現平滑學習器 → 預算包裝器 → 求助包裝器，參數預設取 default_params"""
    k_default, eps_default = default_params(T, n)
    k = k_default if k is None else k
    epsilon = eps_default if epsilon is None else epsilon
    horizon = max(1, math.ceil(k))

    if policy_class.action_count > 2:
        base = one_vs_rest(
            lambda a: realizable_smooth_learner(policy_class.binary_view(a), horizon),
            policy_class.action_count,
        )
    else:
        base = realizable_smooth_learner(policy_class, horizon)

    logger.info(f"建立完整堆疊: T={T}, n={n}, k={k:.4g}, ε={epsilon:.4g}, 類別={policy_class.name}")
    return safe_wrapper(budgeted_active(base, min(k, T), T), epsilon, T)
