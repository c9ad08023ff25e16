#!/usr/bin/env python3
"""
第一層歸約：預算查詢
把全回饋、query-agnostic 的演算法包成每步以 Bernoulli(k/T) 查詢的主動演算法，
基底學習器只看到查詢過的步驟
"""

import logging
from fractions import Fraction
from numbers import Rational
from typing import List, Optional, Union

from protocol import (
    Algorithm,
    ContractError,
    History,
    ProtocolViolation,
    bernoulli,
)


logger = logging.getLogger("BudgetedActive")

Budget = Union[int, float, Fraction]


def _query_rate(k: Budget, T: int):
    """k/T；k 為有理數時保持精確分數"""
    if isinstance(k, Rational):
        return Fraction(k) / T
    return float(k) / T


class BudgetedActive(Algorithm):
    """預算包裝器：期望查詢數為 k 的主動演算法"""

    full_feedback = False
    query_agnostic = True

    def __init__(self, base: Algorithm, k: Budget, T: int):
        if not (base.full_feedback and base.query_agnostic):
            raise ContractError(
                f"基底演算法 {type(base).__name__} 必須同時是全回饋與 query-agnostic: {base.flags}"
            )
        if T < 1:
            raise ValueError(f"T 必須 ≥ 1: {T}")
        if not 0 < k <= T:
            raise ValueError(f"k 必須在 (0, T]: k={k}, T={T}")
        super().__init__(base.action_count)
        self.base = base
        self.k = k
        self.T = T
        self.rate = _query_rate(k, T)

        self._tracked: Optional[History] = None
        self._consumed = 0
        self._log: List[int] = []
        self._restricted = History()

    def _sync(self, history: History) -> None:
        """依自己的查詢紀錄維護 F ∩ q；陌生的歷史改由 queried 位元推導"""
        if history is not self._tracked or len(history) < self._consumed:
            self._tracked = history
            self._consumed = 0
            self._log = []
            self._restricted = History()
        for i, step in enumerate(history.since(self._consumed), start=self._consumed):
            if i >= len(self._log):
                self._log.append(step.queried)
            if self._log[i]:
                if step.mentor_feedback is None:
                    raise ProtocolViolation("已查詢的步驟缺少 mentor 回饋", i + 1)
                self._restricted.append(step)
        self._consumed = len(history)

    def query(self, history, state, streams):
        self._sync(history)
        q = bernoulli(streams.query, self.rate)
        self._log.append(q)
        return q

    def act(self, history, state, feedback, streams):
        self._sync(history)
        return self.base.act(self._restricted, state, None, streams)

    def query_probability(self, history, state):
        return float(self.rate)

    def action_distribution(self, history, state, feedback=None):
        restricted = History(step for step in history if step.queried)
        return self.base.action_distribution(restricted, state)

    @property
    def restricted_history(self) -> History:
        return self._restricted

    @property
    def query_count(self) -> int:
        return sum(self._log)

    def fresh(self):
        return BudgetedActive(self.base.fresh(), self.k, self.T)

    def diagnostics(self):
        return {"budget": float(self.k), "queries": self.query_count,
                "base": self.base.diagnostics()}


def budgeted_active(base: Algorithm, k: Budget, T: int) -> BudgetedActive:
    wrapper = BudgetedActive(base, k, T)
    logger.debug(f"預算包裝器建立: k={k}, T={T}, rate={wrapper.rate}")
    return wrapper


def tilde_loss(q: int, k: Budget, T: int, loss_value: float) -> float:
    """重要性加權損失 q·(T/k)·ℓ，在 q ~ Bernoulli(k/T) 下不偏"""
    if not 0 < k <= T:
        raise ValueError(f"k 必須在 (0, T]: k={k}, T={T}")
    return q * (T / k) * loss_value
