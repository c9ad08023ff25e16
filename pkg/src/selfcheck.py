#!/usr/bin/env python3
"""
自我檢查腳本
以小規模重跑主要性質（查詢恆等式、錯誤上界、安全包裝器不變量等），
全部通過時 exit code 為 0
"""

import math
import sys

import numpy as np

from environments import (
    MDPAdversary,
    cliff_line,
    cliff_survival_mu,
    heaven_hell,
    random_tabular_mu,
)
from experts import (
    PolicyClass,
    exp_weights_expected_losses,
    halving_worst_case_mistakes,
    realizable_smooth_learner,
    small_loss_bound,
)
from metrics import (
    collect_mdp_trials,
    collect_trials,
    decompose_mdp_regret,
    exact_regret_oracle,
    jung_radius_check,
    packing_bound,
    packing_number_bruteforce,
    regret_mdp_sample,
)
from protocol import FiniteAdversary, State, UniformRandomAgent, run_protocol
from reduction_budget import budgeted_active, tilde_loss
from reduction_safe import full_stack


def check_query_identity(trials: int = 200) -> bool:
    """E[K] = k"""
    try:
        k, T = 32, 1024
        base = realizable_smooth_learner(PolicyClass.thresholds(), k)
        adv = FiniteAdversary([State.of(0.25), State.of(0.75)], [0.5, 0.5], lambda s: int(s.coords[0] >= 0.5))
        counts = [t.query_count for t in collect_trials(budgeted_active(base, k, T), adv, T, trials, 1)]
        stderr = math.sqrt(k * (1 - k / T) / trials)
        return bool(abs(np.mean(counts) - k) <= 4 * stderr)
    except Exception as e:
        print(f"查詢恆等式檢查失敗: {e}", file=sys.stderr)
        return False


def check_unbiased_loss(draws: int = 100_000) -> bool:
    try:
        rng = np.random.default_rng(2)
        k, T, loss = 10, 40, 0.7
        q = rng.random(draws) < k / T
        values = np.array([tilde_loss(int(b), k, T, loss) for b in q])
        return bool(abs(values.mean() - loss) <= 3 * values.std(ddof=1) / math.sqrt(draws))
    except Exception as e:
        print(f"不偏損失檢查失敗: {e}", file=sys.stderr)
        return False


def check_halving_bound() -> bool:
    try:
        states = [State.of(x) for x in (0.1, 0.35, 0.6, 0.85)]
        cls = PolicyClass.thresholds([0.0, 0.25, 0.5, 0.75])
        return halving_worst_case_mistakes(cls, states, 6) <= math.log2(cls.size)
    except Exception as e:
        print(f"halving 檢查失敗: {e}", file=sys.stderr)
        return False


def check_small_loss(instances: int = 100) -> bool:
    try:
        rng = np.random.default_rng(3)
        for _ in range(instances):
            thetas = rng.random(int(rng.integers(1, 9)))
            cls = PolicyClass.thresholds(thetas)
            states = [State.of(x) for x in rng.random(50)]
            labels = rng.integers(2, size=50)
            expected = exp_weights_expected_losses(cls, states, labels)
            best = min(sum(cls.evaluate(p, s) != y for s, y in zip(states, labels)) for p in cls.members)
            if expected.sum() > small_loss_bound(best, cls.size) + 1e-9:
                return False
        return True
    except Exception as e:
        print(f"small-loss 檢查失敗: {e}", file=sys.stderr)
        return False


def check_safe_wrapper(runs: int = 5, T: int = 512) -> bool:
    """分支互斥、快取 ε-packing、查詢計數與 Lipschitz 安全"""
    try:
        mdp = cliff_line(1, 2.0, 0.5, T)
        mu = cliff_survival_mu(mdp, T)
        alg = full_stack(PolicyClass.thresholds(), T, 1)
        for trial in collect_mdp_trials(alg, mdp, T, runs, 4):
            trace, extra = trial.agent, trial.agent.extra
            cache_pairs = extra["cache"]
            if any(a != mdp.mentor(s) for s, a in cache_pairs):
                return False
            if trace.query_count > extra["simulated_queries"] + extra["ood_steps"]:
                return False
            if not extra["matched_separation"] > extra["epsilon"]:
                return False
            for t, (step, branch) in enumerate(zip(trace.history, extra["branches"]), start=1):
                if branch == "ood" and (not step.queried or step.action != mdp.mentor(step.state)):
                    return False
                if branch == "familiar":
                    if mu(t, step.state, step.action) < mu.mentor_value(t, step.state) - mu.L * extra["epsilon"] - 1e-9:
                        return False
        return True
    except Exception as e:
        print(f"安全包裝器檢查失敗: {e}", file=sys.stderr)
        return False


def check_sandwich(instances: int = 10) -> bool:
    try:
        rng = np.random.default_rng(5)
        states = [State.of(0.0), State.of(1.0)]
        for _ in range(instances):
            mentor_table = rng.integers(2, size=2)
            mentor = lambda s, m=mentor_table: int(m[int(s.coords[0])])
            adv = FiniteAdversary(states, [0.5, 0.5], mentor)
            mu = random_tabular_mu(rng, states, mentor, 2, 3)
            exact = exact_regret_oracle(adv, UniformRandomAgent(2), 3, mu=mu)
            plus, mul = exact.values["PLUS"], exact.values["MUL"]
            if not plus - 1e-12 <= mul <= plus / mu.mu_min + 1e-12:
                return False
        return True
    except Exception as e:
        print(f"sandwich 檢查失敗: {e}", file=sys.stderr)
        return False


def check_heaven_hell(T: int = 100) -> bool:
    try:
        mdp = heaven_hell(T)
        safe = collect_mdp_trials(full_stack(PolicyClass.thresholds([0.5, 1.5]), T, 1), mdp, T, 5, 6)
        if any(regret_mdp_sample(tr, mdp) > 1 for tr in safe):
            return False
        for tr in safe:
            parts = decompose_mdp_regret(tr.agent, tr.mentor_states, mdp)
            if abs(sum(parts) - regret_mdp_sample(tr, mdp)) > 1e-9:
                return False
        random_agent = collect_mdp_trials(UniformRandomAgent(2), mdp, T, 2000, 7)
        mean = np.mean([regret_mdp_sample(tr, mdp) for tr in random_agent])
        return bool(abs(mean - (T - 1) / 2) <= 0.1 * (T - 1) / 2)
    except Exception as e:
        print(f"Heaven-or-Hell 檢查失敗: {e}", file=sys.stderr)
        return False


def check_geometry() -> bool:
    try:
        rng = np.random.default_rng(8)
        for _ in range(20):
            if not jung_radius_check(rng.random((30, 2)))["pass"]:
                return False
        line = rng.random((200, 1))
        return packing_number_bruteforce(line, 0.1).count <= packing_bound(1.0, 0.1, 1)
    except Exception as e:
        print(f"幾何檢查失敗: {e}", file=sys.stderr)
        return False


def check_determinism() -> bool:
    try:
        T = 64
        mdp = cliff_line(1, 2.0, 0.5, T)
        adv = MDPAdversary(mdp, State.of(0.5))
        alg = full_stack(PolicyClass.thresholds(), T, 1)
        first = run_protocol(alg.fresh(), adv, T, 9).fingerprint()
        second = run_protocol(alg.fresh(), adv, T, 9).fingerprint()
        return first == second
    except Exception as e:
        print(f"決定性檢查失敗: {e}", file=sys.stderr)
        return False


CHECKS = [
    ("查詢恆等式 E[K] = k", check_query_identity),
    ("重要性加權損失不偏", check_unbiased_loss),
    ("halving 錯誤上界", check_halving_bound),
    ("small-loss 上界", check_small_loss),
    ("安全包裝器不變量", check_safe_wrapper),
    ("R_plus ≤ R_mul ≤ R_plus/μ_min", check_sandwich),
    ("Heaven-or-Hell", check_heaven_hell),
    ("packing / Jung", check_geometry),
    ("決定性", check_determinism),
]


def main():
    """主檢查邏輯"""
    checks = [(name, fn()) for name, fn in CHECKS]

    all_ok = all(status for _, status in checks if status is not None)

    for check_name, status in checks:
        if status is True:
            print(f"✓ {check_name}: OK")
        elif status is False:
            print(f"✗ {check_name}: FAILED")
        else:
            print(f"- {check_name}: SKIPPED")

    sys.exit(0 if all_ok else 1)


if __name__ == "__main__":
    main()
