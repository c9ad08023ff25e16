#!/usr/bin/env python3
"""
學習協定核心模組
定義狀態、歷史、演算法與對手的契約，以及把兩者接起來的逐步迴圈
"""

import hashlib
import json
import logging
import math
from fractions import Fraction
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np


logger = logging.getLogger("Protocol")

ActionId = int
SeedLike = Union[int, np.random.SeedSequence]


# ---------------------------------------------------------------------------
# 例外
# ---------------------------------------------------------------------------

class MentorCoreError(Exception):
    """所有 mentorcore 例外的基底類別"""


class ProtocolViolation(MentorCoreError):
    """協定違規（動作超出範圍、缺少 mentor 回饋等）"""

    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        if step is not None:
            message = f"第 {step} 步: {message}"
        super().__init__(message)


class ContractError(MentorCoreError, ValueError):
    """演算法旗標與包裝器要求不符"""


class CapabilityError(MentorCoreError, NotImplementedError):
    """不支援的類型或超出精確計算的規模限制"""


class SmoothnessViolation(MentorCoreError, ValueError):
    """區域的基準測度小於 σ"""


class UndefinedObjectiveError(MentorCoreError, ArithmeticError):
    """R_mul 遇到 μ = 0（μ_min = 0 時乘法後悔未定義）"""


class ConfigError(MentorCoreError, ValueError):
    """配置錯誤，附帶欄位路徑"""

    def __init__(self, field_path: str, message: str):
        self.field_path = field_path
        super().__init__(f"{field_path}: {message}")


# ---------------------------------------------------------------------------
# 領域型別
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class State:
    """ℝ^n 中的一個點"""

    coords: Tuple[float, ...]

    def __post_init__(self):
        coords = tuple(float(c) for c in self.coords)
        if not coords:
            raise ValueError("State 至少需要一個座標")
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"State 座標必須有限: {coords}")
        object.__setattr__(self, "coords", coords)

    @classmethod
    def of(cls, *coords: float) -> "State":
        return cls(tuple(coords))

    @classmethod
    def from_array(cls, values) -> "State":
        return cls(tuple(np.asarray(values, dtype=float).ravel().tolist()))

    @property
    def n(self) -> int:
        return len(self.coords)

    @cached_property
    def array(self) -> np.ndarray:
        arr = np.asarray(self.coords, dtype=float)
        arr.setflags(write=False)
        return arr

    def distance(self, other: "State") -> float:
        return float(np.linalg.norm(self.array - other.array))


@dataclass(frozen=True)
class Step:
    """一個時間步：(s_t, a_t, a_t^m q_t, q_t)"""

    state: State
    action: ActionId
    mentor_feedback: Optional[ActionId]
    queried: int

    def __post_init__(self):
        if self.queried not in (0, 1):
            raise ValueError(f"queried 必須是 0 或 1: {self.queried}")
        if (self.mentor_feedback is not None) != bool(self.queried):
            raise ValueError("mentor_feedback 非空若且唯若 queried=1")


class History:
    """有序的 Step 序列，執行期間只能附加"""

    __slots__ = ("_steps",)

    def __init__(self, steps: Iterable[Step] = ()):
        self._steps: List[Step] = list(steps)

    def append(self, step: Step) -> None:
        self._steps.append(step)

    def extended(self, step: Step) -> "History":
        """回傳附加一步後的新歷史（原歷史不變）"""
        return History(self._steps + [step])

    def since(self, index: int) -> List[Step]:
        return self._steps[index:]

    def restrict(self, u: Sequence[int]) -> "History":
        return restrict_history(self, u)

    @property
    def steps(self) -> Tuple[Step, ...]:
        return tuple(self._steps)

    def __len__(self) -> int:
        return len(self._steps)

    def __getitem__(self, index):
        return self._steps[index]

    def __iter__(self) -> Iterator[Step]:
        return iter(self._steps)

    def __eq__(self, other) -> bool:
        if not isinstance(other, History):
            return NotImplemented
        return self._steps == other._steps

    def __repr__(self) -> str:
        return f"History(len={len(self._steps)})"


@dataclass(frozen=True)
class RandomStreams:
    """每次執行的三條獨立亂數流：對手、查詢決策、動作抽樣"""

    adversary: np.random.Generator
    query: np.random.Generator
    action: np.random.Generator

    @classmethod
    def from_seed(cls, seed: SeedLike) -> "RandomStreams":
        root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        adv, query, action = root.spawn(3)
        return cls(
            adversary=np.random.default_rng(adv),
            query=np.random.default_rng(query),
            action=np.random.default_rng(action),
        )


def bernoulli(rng: np.random.Generator, p) -> int:
    """Bernoulli 抽樣；有理數機率用整數比較以避免浮點漂移"""
    if isinstance(p, Fraction):
        if p >= 1:
            return 1
        if p <= 0:
            return 0
        return int(rng.integers(p.denominator) < p.numerator)
    return int(rng.random() < float(p))


# ---------------------------------------------------------------------------
# 演算法與對手契約
# ---------------------------------------------------------------------------

class Algorithm:
    """(查詢函數, 動作函數) 契約

    子類別可選擇提供 query_probability / action_distribution，
    供精確列舉（小型實例的 oracle）使用。
    """

    full_feedback: bool = False
    query_agnostic: bool = False

    def __init__(self, action_count: int):
        if action_count < 2:
            raise ValueError(f"動作數至少為 2: {action_count}")
        self.action_count = int(action_count)

    @property
    def flags(self) -> Dict[str, bool]:
        return {"full_feedback": self.full_feedback, "query_agnostic": self.query_agnostic}

    def query(self, history: History, state: State, streams: RandomStreams) -> int:
        raise NotImplementedError

    def act(self, history: History, state: State, feedback: Optional[ActionId],
            streams: RandomStreams) -> ActionId:
        raise NotImplementedError

    def query_probability(self, history: History, state: State) -> float:
        raise CapabilityError(f"{type(self).__name__} 不提供精確查詢機率")

    def action_distribution(self, history: History, state: State,
                            feedback: Optional[ActionId] = None) -> np.ndarray:
        raise CapabilityError(f"{type(self).__name__} 不提供精確動作分佈")

    def fresh(self) -> "Algorithm":
        """回傳相同參數、全新狀態的實例（每次試驗一個）"""
        raise NotImplementedError

    def diagnostics(self) -> dict:
        return {}


class HistoryLearner(Algorithm):
    """從歷史增量學習的全回饋演算法

    學習器追蹤最後一次看到的歷史物件；同一物件繼續增長時只處理新步驟，
    換成別的歷史時重設並重播。
    """

    full_feedback = True
    query_agnostic = True

    def __init__(self, action_count: int):
        super().__init__(action_count)
        self._tracked: Optional[History] = None
        self._consumed = 0

    def _reset(self) -> None:
        raise NotImplementedError

    def _observe(self, step: Step) -> None:
        raise NotImplementedError

    def _sync(self, history: History) -> None:
        if history is not self._tracked or len(history) < self._consumed:
            self._reset()
            self._tracked = history
            self._consumed = 0
        for step in history.since(self._consumed):
            self._observe(step)
        self._consumed = len(history)

    def query(self, history, state, streams) -> int:
        return 1

    def query_probability(self, history, state) -> float:
        return 1.0

    def act(self, history, state, feedback, streams) -> ActionId:
        dist = self.action_distribution(history, state)
        return sample_action(dist, streams.action)


def sample_action(dist: np.ndarray, rng: np.random.Generator) -> ActionId:
    """依分佈抽一個動作；退化分佈不消耗亂數"""
    nonzero = np.flatnonzero(dist > 0)
    if len(nonzero) == 1:
        return int(nonzero[0])
    cdf = np.cumsum(dist)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, len(dist) - 1)


class Adversary:
    """對手契約：next(History, rng) -> (s_t, a_t^m)"""

    action_count: int = 2
    sigma: float = 0.0

    def next(self, history: History, rng: np.random.Generator) -> Tuple[State, ActionId]:
        raise NotImplementedError

    def outcomes(self, history: History) -> List[Tuple[State, ActionId, float]]:
        """精確的 (狀態, mentor 動作, 機率) 列表；僅有限對手提供"""
        raise CapabilityError(f"{type(self).__name__} 無法精確列舉")

    def reward(self, state: State, action: ActionId) -> Optional[float]:
        return None

    @property
    def sigma_plus(self) -> float:
        return 1.0 / self.sigma if self.sigma > 0 else 0.0


class FiniteAdversary(Adversary):
    """每步從有限狀態集合獨立抽樣，mentor 動作由固定策略決定"""

    def __init__(self, states: Sequence[State], probabilities: Sequence[float], mentor,
                 action_count: int = 2, sigma: float = 0.0):
        probs = np.asarray(probabilities, dtype=float)
        if len(states) != len(probs) or len(states) == 0:
            raise ValueError("states 與 probabilities 長度必須一致且非空")
        if np.any(probs < 0) or not math.isclose(probs.sum(), 1.0, abs_tol=1e-12):
            raise ValueError("probabilities 必須是機率向量")
        self.states = list(states)
        self.probabilities = probs
        self.mentor = mentor
        self.action_count = action_count
        self.sigma = sigma

    def next(self, history, rng):
        idx = int(rng.choice(len(self.states), p=self.probabilities))
        state = self.states[idx]
        return state, self.mentor(state)

    def outcomes(self, history):
        return [(s, self.mentor(s), float(p))
                for s, p in zip(self.states, self.probabilities) if p > 0]


# ---------------------------------------------------------------------------
# 參考代理人
# ---------------------------------------------------------------------------

class MentorCopyingAgent(Algorithm):
    """每步都查詢並照抄 mentor"""

    def query(self, history, state, streams):
        return 1

    def act(self, history, state, feedback, streams):
        if feedback is None:
            raise ProtocolViolation("查詢後沒有收到 mentor 回饋", len(history) + 1)
        return feedback

    def query_probability(self, history, state):
        return 1.0

    def action_distribution(self, history, state, feedback=None):
        if feedback is None:
            raise ProtocolViolation("查詢後沒有收到 mentor 回饋", len(history) + 1)
        dist = np.zeros(self.action_count)
        dist[feedback] = 1.0
        return dist

    def fresh(self):
        return MentorCopyingAgent(self.action_count)


class UniformRandomAgent(Algorithm):
    """從不查詢，均勻隨機選動作"""

    query_agnostic = True

    def query(self, history, state, streams):
        return 0

    def act(self, history, state, feedback, streams):
        return int(streams.action.integers(self.action_count))

    def query_probability(self, history, state):
        return 0.0

    def action_distribution(self, history, state, feedback=None):
        return np.full(self.action_count, 1.0 / self.action_count)

    def fresh(self):
        return UniformRandomAgent(self.action_count)


class FixedActionAgent(Algorithm):
    """從不查詢，永遠採取同一個動作"""

    query_agnostic = True

    def __init__(self, action_count: int, action: ActionId):
        super().__init__(action_count)
        self.action = int(action)

    def query(self, history, state, streams):
        return 0

    def act(self, history, state, feedback, streams):
        return self.action

    def query_probability(self, history, state):
        return 0.0

    def action_distribution(self, history, state, feedback=None):
        dist = np.zeros(self.action_count)
        dist[self.action] = 1.0
        return dist

    def fresh(self):
        return FixedActionAgent(self.action_count, self.action)


# ---------------------------------------------------------------------------
# 協定迴圈
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunTrace:
    """一次執行的完整紀錄"""

    history: Tuple[Step, ...]
    T: int
    seed: object
    mentor_actions: Tuple[ActionId, ...]
    losses: Tuple[int, ...]
    rewards: Optional[Tuple[float, ...]] = None
    extra: Dict[str, object] = field(default_factory=dict)

    @property
    def states(self) -> Tuple[State, ...]:
        return tuple(step.state for step in self.history)

    @property
    def actions(self) -> Tuple[ActionId, ...]:
        return tuple(step.action for step in self.history)

    @property
    def query_count(self) -> int:
        return sum(step.queried for step in self.history)

    def as_history(self) -> History:
        return History(self.history)

    def fingerprint(self) -> str:
        """規範化序列化後的 SHA-256，用於逐位元組的決定性檢查"""
        payload = {
            "T": self.T,
            "seed": repr(self.seed),
            "steps": [[list(map(repr, s.state.coords)), s.action, s.mentor_feedback, s.queried]
                      for s in self.history],
            "mentor": list(self.mentor_actions),
            "rewards": None if self.rewards is None else [repr(r) for r in self.rewards],
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def binary_loss(a: ActionId, a_m: ActionId) -> int:
    """ℓ(a, a^m) = 1(a ≠ a^m)"""
    return int(a != a_m)


def restrict_history(history: History, u: Sequence[int]) -> History:
    """查詢限制歷史 F ∩ u：保留 u_i = 1 的步驟，順序不變"""
    if len(u) < len(history):
        raise ValueError(f"u 長度 {len(u)} 小於歷史長度 {len(history)}")
    return History(step for step, keep in zip(history, u) if keep)


def _seed_label(seed: SeedLike):
    if isinstance(seed, np.random.SeedSequence):
        return (seed.entropy, tuple(seed.spawn_key))
    return seed


def run_protocol(alg: Algorithm, adv: Adversary, T: int, seed: SeedLike) -> RunTrace:
    """執行 T 步學習協定：對手抽樣 → 查詢決策 → 揭示回饋 → 動作"""
    if T < 1:
        raise ValueError(f"T 必須 ≥ 1: {T}")

    streams = RandomStreams.from_seed(seed)
    action_count = adv.action_count
    history = History()
    mentor_actions: List[ActionId] = []
    losses: List[int] = []
    rewards: List[float] = []
    has_reward = True

    for t in range(1, T + 1):
        state, mentor_action = adv.next(history, streams.adversary)
        if not 0 <= mentor_action < action_count:
            raise ProtocolViolation(f"對手回傳超出範圍的 mentor 動作 {mentor_action}", t)

        q = alg.query(history, state, streams)
        if q not in (0, 1):
            raise ProtocolViolation(f"查詢決策必須是 0 或 1: {q}", t)
        feedback = mentor_action if q else None

        action = alg.act(history, state, feedback, streams)
        if not isinstance(action, (int, np.integer)) or not 0 <= action < action_count:
            raise ProtocolViolation(f"演算法回傳超出範圍的動作 {action}", t)
        action = int(action)

        history.append(Step(state, action, feedback, q))
        mentor_actions.append(int(mentor_action))
        losses.append(binary_loss(action, mentor_action))

        if has_reward:
            r = adv.reward(state, action)
            if r is None:
                has_reward = False
            else:
                rewards.append(float(r))

        logger.debug(f"t={t} s={state.coords} q={q} a={action} a_m={mentor_action}")

    return RunTrace(
        history=history.steps,
        T=T,
        seed=_seed_label(seed),
        mentor_actions=tuple(mentor_actions),
        losses=tuple(losses),
        rewards=tuple(rewards) if has_reward else None,
        extra=alg.diagnostics(),
    )


def check_query_agnostic(alg: Algorithm, samples: Sequence[Tuple[History, State]],
                         seed: int = 0) -> bool:
    """行為驗證：相同亂數流下，回饋為空或任意動作時輸出的動作相同"""
    for i, (history, state) in enumerate(samples):
        baseline = alg.act(history, state, None, RandomStreams.from_seed([seed, i]))
        for fb in range(alg.action_count):
            other = alg.act(history, state, fb, RandomStreams.from_seed([seed, i]))
            if other != baseline:
                logger.warning(f"樣本 {i}: 回饋 {fb} 改變了動作 ({baseline} → {other})")
                return False
    return True
