#!/usr/bin/env python3
"""
mentorcore 實驗執行器
讀取 YAML 配置，建立環境與演算法堆疊，掃描多個 horizon，輸出 CSV / JSON 結果
"""

import argparse
import csv
import io
import json
import logging
import math
import os
import re
import sys
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Union

import numpy as np
import yaml
from dotenv import load_dotenv

from environments import (
    HEAVEN,
    START,
    Box,
    MDPInstance,
    cliff_line,
    cliff_survival_mu,
    heaven_hell,
    mu_from_mdp,
    smooth_sequence_adversary,
    threshold_margin_mu,
    threshold_stress_plan,
)
from experts import PolicyClass, ThresholdPolicy, exp_weights_learner, halving_learner, realizable_smooth_learner
from metrics import (
    RegretReport,
    collect_mdp_trials,
    collect_trials,
    diameter,
    estimate_regret_mdp,
    estimate_regret_mul,
    estimate_regret_plus,
    estimate_regret_sa,
    fit_loglog_slope,
)
from protocol import (
    Algorithm,
    ConfigError,
    FixedActionAgent,
    MentorCopyingAgent,
    UniformRandomAgent,
)
from reduction_budget import budgeted_active
from reduction_safe import default_params, full_stack, safe_wrapper


SCHEMA_VERSION = 1
CSV_HEADER = ["T", "metric", "estimate", "ci95", "trials", "query_mean", "diam_mean", "wall_ms"]
METRICS = ("SA", "PLUS", "MUL", "MDP", "QUERIES")
ENVIRONMENTS = ("heaven_hell", "cliff_line", "threshold_sequence")
LEARNERS = ("mentor", "uniform_random", "fixed", "halving", "exp_weights", "realizable_smooth")
PRESETS = ("full_stack", "custom")
RULE = re.compile(r"^T\^(-?\d+(?:\.\d+)?)$")

EXIT_OK = 0
EXIT_CEILING_FAILED = 1
EXIT_ERROR = 2


def fmt(value) -> str:
    """17 位有效數字"""
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return format(float(value), ".17g")


def resolve_rule(value, T: int, default: float, field_path: str) -> Union[int, float]:
    """數字為絕對值（整數保持為 int）；"default" 用預設規則；"T^p" 為指數規則；"inf" 為 ∞"""
    if isinstance(value, bool):
        raise ConfigError(field_path, f"無效的參數規則: {value!r}")
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        return float(value)
    if value == "default":
        return default
    if value == "inf":
        return math.inf
    match = RULE.match(str(value).replace(" ", ""))
    if match:
        return float(T) ** float(match.group(1))
    raise ConfigError(field_path, f"無效的參數規則: {value!r}（可用數字、default、inf 或 T^p）")


@dataclass
class ExperimentConfig:
    """驗證過的實驗配置"""

    environment: Dict[str, object]
    stack: Dict[str, object]
    policy_class: Dict[str, object]
    T_list: List[int]
    trials: int
    seed: int
    metrics: List[str]
    output: Dict[str, object] = field(default_factory=dict)
    ceilings: Dict[str, float] = field(default_factory=dict)
    logging: Dict[str, object] = field(default_factory=dict)
    name: str = "experiment"

    @classmethod
    def from_dict(cls, raw: dict, overrides: Optional[dict] = None) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "配置必須是 mapping")
        version = raw.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError("schema_version", f"不支援的版本 {version!r}，目前為 {SCHEMA_VERSION}")

        exp = dict(raw.get("experiment") or {})
        for key, value in (overrides or {}).items():
            if value is not None:
                exp[key] = value

        T_list = exp.get("T_list")
        if not isinstance(T_list, list) or not T_list:
            raise ConfigError("experiment.T_list", "必須是非空列表")
        if not all(isinstance(t, int) and not isinstance(t, bool) and t >= 1 for t in T_list):
            raise ConfigError("experiment.T_list", f"必須是正整數: {T_list}")
        if any(b <= a for a, b in zip(T_list, T_list[1:])):
            raise ConfigError("experiment.T_list", f"必須嚴格遞增: {T_list}")

        trials = exp.get("trials", 200)
        if not isinstance(trials, int) or trials < 1:
            raise ConfigError("experiment.trials", f"必須 ≥ 1: {trials!r}")
        seed = exp.get("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("experiment.seed", f"必須是非負整數: {seed!r}")

        metrics = exp.get("metrics", ["QUERIES"])
        if isinstance(metrics, str):
            metrics = [m.strip() for m in metrics.split(",") if m.strip()]
        metrics = [str(m).upper() for m in metrics]
        unknown = [m for m in metrics if m not in METRICS]
        if unknown or not metrics:
            raise ConfigError("experiment.metrics", f"未知的指標 {unknown}，可用 {list(METRICS)}")

        env = dict(raw.get("environment") or {})
        if env.get("name") not in ENVIRONMENTS:
            raise ConfigError("environment.name", f"未知的環境 {env.get('name')!r}，可用 {list(ENVIRONMENTS)}")
        if "MDP" in metrics and env["name"] == "threshold_sequence":
            raise ConfigError("experiment.metrics", "MDP 指標需要 MDP 環境")

        stack = dict(raw.get("stack") or {"preset": "full_stack"})
        preset = stack.get("preset", "custom")
        if preset not in PRESETS:
            raise ConfigError("stack.preset", f"未知的堆疊 {preset!r}，可用 {list(PRESETS)}")
        if preset == "custom" and stack.get("learner") not in LEARNERS:
            raise ConfigError("stack.learner", f"未知的學習器 {stack.get('learner')!r}，可用 {list(LEARNERS)}")

        policy_class = dict(raw.get("policy_class") or {"kind": "threshold"})
        if policy_class.get("kind") not in ("threshold", "axis_threshold"):
            raise ConfigError("policy_class.kind", f"只支援 threshold / axis_threshold: {policy_class.get('kind')!r}")

        ceilings = {}
        for metric, value in (raw.get("ceilings") or {}).items():
            if str(metric).upper() not in METRICS or not isinstance(value, (int, float)):
                raise ConfigError(f"ceilings.{metric}", f"無效的上限: {value!r}")
            ceilings[str(metric).upper()] = float(value)

        return cls(
            environment=env,
            stack=stack,
            policy_class=policy_class,
            T_list=list(T_list),
            trials=trials,
            seed=seed,
            metrics=metrics,
            output=dict(raw.get("output") or {}),
            ceilings=ceilings,
            logging=dict(raw.get("logging") or {}),
            name=str(exp.get("name", "experiment")),
        )


class ExperimentRunner:
    """依配置執行 horizon 掃描"""

    def __init__(self, config_path: Optional[str] = None, overrides: Optional[dict] = None,
                 raw_config: Optional[dict] = None):
        load_dotenv()

        config_path = config_path or os.getenv("MENTORCORE_CONFIG", "config.yaml")
        raw = raw_config if raw_config is not None else self._load_config(config_path)
        self.config = ExperimentConfig.from_dict(raw, overrides)

        self._setup_logging()
        self.logger.info(f"實驗 {self.config.name} 初始化完成: T={self.config.T_list}, "
                         f"trials={self.config.trials}, metrics={self.config.metrics}")

    def _load_config(self, config_path: str) -> dict:
        """載入 YAML 配置文件"""
        try:
            with open(config_path, 'r', encoding='utf-8') as f:
                return yaml.safe_load(f)
        except Exception as e:
            print(f"無法載入配置文件: {e}")
            raise ConfigError(config_path, f"無法載入: {e}") from e

    def _setup_logging(self):
        """設置日誌系統"""
        log_level = os.getenv("LOG_LEVEL", self.config.logging.get("level", "INFO"))
        log_format = self.config.logging.get("format", "text")

        if log_format == "json":
            formatter = logging.Formatter(
                '{"time":"%(asctime)s","level":"%(levelname)s","logger":"%(name)s","message":"%(message)s"}'
            )
        else:
            formatter = logging.Formatter(
                '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
            )

        handler = logging.StreamHandler(sys.stdout)
        handler.setFormatter(formatter)

        root = logging.getLogger()
        root.handlers = [handler]
        root.setLevel(getattr(logging, str(log_level).upper(), logging.INFO))
        self.logger = logging.getLogger("Harness")

        log_file = self.config.logging.get("file")
        if log_file:
            try:
                os.makedirs(os.path.dirname(log_file) or ".", exist_ok=True)
                file_handler = logging.FileHandler(log_file, encoding="utf-8")
                file_handler.setFormatter(formatter)
                root.addHandler(file_handler)
            except Exception as e:
                self.logger.warning(f"無法創建日誌文件: {e}")

    # 建構 ----------------------------------------------------------------

    def build_environment(self, T: int):
        """回傳 (MDP 或對手, μ 或 None, 狀態維度)"""
        env = self.config.environment
        name = env["name"]
        try:
            if name == "heaven_hell":
                mdp = heaven_hell(T)
                mu = mu_from_mdp(mdp, [[START, HEAVEN]] * T)
                return mdp, mu, 1
            if name == "cliff_line":
                mdp = cliff_line(int(env.get("n", 1)), float(env.get("L_target", 2.0)),
                                 float(env.get("sigma", 0.5)), T)
                return mdp, cliff_survival_mu(mdp, T), mdp.n
            n = int(env.get("n", 1))
            sigma = float(env.get("sigma", 1.0))
            theta = float(env.get("theta", 0.5))
            if env.get("plan", "uniform") == "stress":
                plan = threshold_stress_plan(theta, sigma, n)
            else:
                plan = [Box.cube(n)]
            mu = threshold_margin_mu(theta, float(env.get("L_target", 2.0)),
                                     float(env.get("mu_floor", 0.5)), n=n)
            return smooth_sequence_adversary(sigma, plan, mu.mentor, n=n), mu, n
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError("environment", str(e)) from e

    def build_policy_class(self, n: int) -> PolicyClass:
        pc_config = self.config.policy_class
        thetas = pc_config.get("thetas")
        if pc_config["kind"] == "threshold":
            return PolicyClass.thresholds(thetas)
        members = None
        if thetas is not None:
            members = [ThresholdPolicy(axis, float(t)) for axis in range(n) for t in thetas]
        return PolicyClass.axis_thresholds(n, members)

    def build_stack(self, T: int, n: int, policy_class: PolicyClass) -> Algorithm:
        stack = self.config.stack
        if stack.get("preset", "custom") == "full_stack":
            k = stack.get("k", "default")
            eps = stack.get("epsilon", "default")
            k_default, eps_default = default_params(T, n)
            return full_stack(policy_class, T, n,
                              k=resolve_rule(k, T, k_default, "stack.k"),
                              epsilon=resolve_rule(eps, T, eps_default, "stack.epsilon"))

        k_default, eps_default = default_params(T, n)
        budget = stack.get("budget")
        k = resolve_rule(budget.get("k", "default"), T, k_default, "stack.budget.k") if budget else None
        if k is not None and not 0 < k <= T:
            raise ConfigError("stack.budget.k", f"k={k:.6g} 不在 (0, T={T}]")
        horizon = max(1, math.ceil(k)) if k is not None else T

        A = policy_class.action_count
        learner = stack["learner"]
        if learner == "mentor":
            alg = MentorCopyingAgent(A)
        elif learner == "uniform_random":
            alg = UniformRandomAgent(A)
        elif learner == "fixed":
            alg = FixedActionAgent(A, int(stack.get("action", 0)))
        elif learner == "halving":
            if not policy_class.is_finite:
                raise ConfigError("policy_class.thetas", "halving 需要有限類別（請設定 thetas）")
            alg = halving_learner(policy_class)
        elif learner == "exp_weights":
            if not policy_class.is_finite:
                raise ConfigError("policy_class.thetas", "exp_weights 需要有限類別（請設定 thetas）")
            alg = exp_weights_learner(policy_class, float(stack.get("eta", 1.0)))
        else:
            alg = realizable_smooth_learner(policy_class, horizon)

        if k is not None:
            alg = budgeted_active(alg, k, T)
        safe = stack.get("safe")
        if safe:
            eps = resolve_rule(safe.get("epsilon", "default"), T, eps_default, "stack.safe.epsilon")
            alg = safe_wrapper(alg, eps, T)
        return alg

    # 執行 ----------------------------------------------------------------

    def run_horizon(self, T: int, seed) -> List[dict]:
        cfg = self.config
        start = time.perf_counter()
        env, mu, n = self.build_environment(T)
        policy_class = self.build_policy_class(n)
        alg = self.build_stack(T, n, policy_class)

        reports: List[RegretReport] = []
        if isinstance(env, MDPInstance):
            trials = collect_mdp_trials(alg, env, T, cfg.trials, seed)
            traces = [tr.agent for tr in trials]
            if "MDP" in cfg.metrics:
                reports.append(estimate_regret_mdp(alg, env, T, cfg.trials, seed, mdp_trials=trials))
        else:
            traces = collect_trials(alg, env, T, cfg.trials, seed)

        for metric in cfg.metrics:
            if metric == "SA":
                reports.append(estimate_regret_sa(alg, env, policy_class, T, cfg.trials, seed, traces=traces))
            elif metric == "PLUS":
                reports.append(estimate_regret_plus(alg, env, mu, T, cfg.trials, seed, traces=traces))
            elif metric == "MUL":
                reports.append(estimate_regret_mul(alg, env, mu, T, cfg.trials, seed, traces=traces))
            elif metric == "QUERIES":
                q = [float(t.query_count) for t in traces]
                reports.append(RegretReport.from_samples("QUERIES", q, q))

        diam = math.fsum(diameter(t.states) for t in traces) / len(traces)
        wall_ms = (time.perf_counter() - start) * 1000 if cfg.output.get("record_wall_time") else 0
        order = {m: i for i, m in enumerate(cfg.metrics)}
        reports.sort(key=lambda r: order[r.kind])

        rows = []
        for report in reports:
            rows.append({
                "T": T, "metric": report.kind, "estimate": report.estimate,
                "ci95": report.ci_halfwidth, "trials": report.trials,
                "query_mean": report.query_mean, "diam_mean": diam, "wall_ms": wall_ms,
            })
            self.logger.info(f"T={T} {report.kind}: {report.estimate:.6g} ± {report.ci_halfwidth:.3g}, "
                             f"查詢 {report.query_mean:.4g}")
        return rows

    def run_experiment(self) -> List[dict]:
        """每個 (T, metric) 一列；同一 seed 結果決定性"""
        seeds = np.random.SeedSequence(self.config.seed).spawn(len(self.config.T_list))
        rows: List[dict] = []
        for T, seed in zip(self.config.T_list, seeds):
            rows.extend(self.run_horizon(T, seed))
        return rows


def write_csv(rows: List[dict], path: Optional[str] = None) -> str:
    """固定欄位順序；回傳 CSV 文字，給定 path 時同時寫檔"""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in rows:
        writer.writerow([row["T"] if col == "T" else row["metric"] if col == "metric" else fmt(row[col])
                         for col in CSV_HEADER])
    text = buffer.getvalue()
    if path:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(text)
    return text


def read_csv(path: str) -> List[dict]:
    with open(path, encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    for row in rows:
        row["T"] = int(row["T"])
        for col in CSV_HEADER[2:]:
            row[col] = float(row[col])
    return rows


def theoretical_exponent(n: int) -> float:
    """(2n+1)/(2n+2)"""
    return (2 * n + 1) / (2 * n + 2)


def fit_and_report(rows: List[dict], ceilings: Optional[Dict[str, float]] = None,
                   n: Optional[int] = None) -> dict:
    """每個指標擬合 log-log 斜率，並與上限比較（斜率 < 上限為通過）"""
    ceilings = ceilings or {}
    by_metric: Dict[str, List[tuple]] = {}
    for row in rows:
        by_metric.setdefault(row["metric"], []).append((row["T"], row["estimate"]))

    slopes, warnings = {}, []
    for metric, points in by_metric.items():
        points.sort()
        entry = {"ceiling": ceilings.get(metric)}
        try:
            fit = fit_loglog_slope(points)
            entry.update(slope=fit.slope, intercept=fit.intercept, r_squared=fit.r_squared,
                         dropped=[list(p) for p in fit.dropped])
            if entry["ceiling"] is not None:
                entry["passed"] = fit.slope < entry["ceiling"]
        except ValueError as e:
            warnings.append(f"{metric}: {e}")
            if entry["ceiling"] is not None:
                entry["passed"] = False
        slopes[metric] = entry

    for metric in ceilings:
        if metric not in slopes:
            warnings.append(f"{metric}: 沒有資料可以擬合")
            slopes[metric] = {"ceiling": ceilings[metric], "passed": False}

    summary = {
        "slopes": slopes,
        "warnings": warnings,
        "passed": all(e.get("passed", True) for e in slopes.values()),
    }
    if n is not None:
        summary["theoretical_exponent"] = theoretical_exponent(n)
    return summary


def parse_args(argv=None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="mentorcore 實驗執行器")
    parser.add_argument("--config", default=None, help="YAML 配置路徑（預設 MENTORCORE_CONFIG 或 config.yaml）")
    parser.add_argument("--out", default=None, help="CSV 輸出路徑（覆蓋 output.csv）")
    parser.add_argument("--seed", type=int, default=None, help="覆蓋根 seed")
    parser.add_argument("--trials", type=int, default=None, help="覆蓋試驗次數")
    parser.add_argument("--metric", default=None, help="覆蓋指標列表，逗號分隔")
    parser.add_argument("--emit-plots", action="store_true", help="依 CSV 輸出圖檔")
    return parser.parse_args(argv)


def run(argv=None) -> int:
    args = parse_args(argv)
    overrides = {"seed": args.seed, "trials": args.trials, "metrics": args.metric}
    runner = ExperimentRunner(args.config, overrides)
    cfg = runner.config

    rows = runner.run_experiment()
    csv_path = args.out or cfg.output.get("csv", "results/results.csv")
    write_csv(rows, csv_path)
    runner.logger.info(f"結果已寫入 {csv_path}")

    n = int(cfg.environment.get("n", 1))
    summary = fit_and_report(rows, cfg.ceilings, n)
    for warning in summary["warnings"]:
        runner.logger.warning(warning)
    summary_path = cfg.output.get("summary") or os.path.splitext(csv_path)[0] + ".json"
    with open(summary_path, "w", encoding="utf-8") as f:
        json.dump(summary, f, ensure_ascii=False, indent=2, sort_keys=True)

    if args.emit_plots:
        from plots import plot_results
        plot_dir = cfg.output.get("plots") or os.path.dirname(csv_path) or "."
        for path in plot_results(csv_path, plot_dir):
            runner.logger.info(f"圖檔已輸出 {path}")

    if not summary["passed"]:
        runner.logger.warning("有指標未通過斜率上限")
        return EXIT_CEILING_FAILED
    return EXIT_OK


def main():
    """主程式入口"""
    try:
        sys.exit(run())
    except Exception as e:
        print(f"啟動失敗: {e}", file=sys.stderr)
        sys.exit(EXIT_ERROR)


if __name__ == "__main__":
    main()
