"""Evaluation: per-K_test accuracy, seed sweeps, and report files.

Reports are written as CSV (the source of truth) with a rendered figure
alongside.  Dispersion is the standard deviation across run seeds; a
per-run binomial 95% half-width is kept in a secondary column for scale.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from srwm.config import TrainConfig
from srwm.episodes import (
    STREAM_EVAL,
    TaskSource,
    sample_episode,
    split_rng,
    stack_episodes,
)
from srwm.model import ConfigError, init_state
from srwm.objective import _query_probs, _scan_phase
from srwm.trainer import checkpoint_load

REPORT_HEADER = "k_test,config,mean_accuracy,std_accuracy,binomial_ci95,episodes,runs"
PAIRED_HEADER = "k_test,config_a,config_b,mean_diff,std_diff,runs"

EVAL_CHUNK = 256


def worker_count() -> int:
    """Evaluation thread cap; the SRWM_THREADS env var overrides."""
    env = os.environ.get("SRWM_THREADS", "")
    if env.strip():
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"SRWM_THREADS must be an integer, got {env!r}")
        if n < 1:
            raise ConfigError(f"SRWM_THREADS must be >= 1, got {n}")
        return n
    return min(4, os.cpu_count() or 1)


@dataclass
class EvalResult:
    accuracy: float  # fraction in [0, 1]
    correct: int
    total_queries: int
    episodes: int
    k_test: int


def _eval_chunk(params, config, mcfg, source, k_test, m_queries, seed, indices):
    episodes = [
        sample_episode(
            source, config.n_way, k_test, 0, m_queries,
            split_rng(seed, STREAM_EVAL, i),
        )
        for i in indices
    ]
    batch = stack_episodes(episodes)
    state = init_state(mcfg, params, batch.batch)
    state = _scan_phase(mcfg, params, state, batch.support_x, batch.support_y)
    probs = _query_probs(mcfg, params, state, batch.query_x)
    predicted = probs.data.argmax(axis=-1)
    truth = batch.query_y.reshape(-1)
    return int((predicted == truth).sum()), truth.size


def evaluate(
    params,
    config: TrainConfig,
    source: TaskSource,
    k_test: int,
    episodes: int,
    seed: int = 0,
    m_queries: int = 1,
) -> EvalResult:
    """Accuracy over fresh episodes at k_test shots; no parameter updates.

    Episodes are chunked and evaluated concurrently (SRWM_THREADS caps the
    workers); per-episode streams are pre-split, so the result is bitwise
    reproducible for a given (params, seed, episodes).
    """
    length = config.n_way * k_test + m_queries
    if length > config.max_unroll:
        raise ConfigError(
            f"episode length {length} (n_way={config.n_way} x k_test={k_test} "
            f"+ {m_queries}) exceeds max_unroll={config.max_unroll}"
        )
    mcfg = config.model_config()
    chunks = [
        range(start, min(start + EVAL_CHUNK, episodes))
        for start in range(0, episodes, EVAL_CHUNK)
    ]
    correct = 0
    total = 0
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        futures = [
            pool.submit(
                _eval_chunk, params, config, mcfg, source, k_test,
                m_queries, seed, chunk,
            )
            for chunk in chunks
        ]
        for future in futures:
            c, t = future.result()
            correct += c
            total += t
    return EvalResult(
        accuracy=correct / total,
        correct=correct,
        total_queries=total,
        episodes=episodes,
        k_test=k_test,
    )


def evaluate_checkpoint(
    path: str | Path,
    source: TaskSource,
    k_test: int,
    episodes: int,
    seed: int = 0,
    m_queries: int = 1,
) -> EvalResult:
    params, _, config, _ = checkpoint_load(path)
    return evaluate(params, config, source, k_test, episodes, seed, m_queries)


# ---------------------------------------------------------------------------
# sweep reports


@dataclass
class ReportRow:
    k_test: int
    label: str
    mean_accuracy: float  # percent
    std_accuracy: float   # percent across run seeds (0 for a single run)
    binomial_ci95: float  # percent, mean per-run 95% half-width
    episodes: int
    runs: int


@dataclass
class PairedDiff:
    k_test: int
    label_a: str
    label_b: str
    mean_diff: float  # percent, a minus b, paired by run index
    std_diff: float
    runs: int


@dataclass
class EvalReport:
    rows: list[ReportRow] = field(default_factory=list)
    paired: list[PairedDiff] = field(default_factory=list)
    csv_path: Path | None = None
    figure_paths: list[Path] = field(default_factory=list)
    paired_csv_path: Path | None = None

    def row(self, k_test: int, label: str) -> ReportRow:
        for r in self.rows:
            if r.k_test == k_test and r.label == label:
                return r
        raise KeyError((k_test, label))


def _fmt(x: float) -> str:
    return repr(round(float(x), 6))


def sweep_report(
    groups: dict[str, list[str | Path]],
    source: TaskSource,
    k_tests: list[int],
    episodes: int,
    out_dir: str | Path,
    seed: int = 0,
    m_queries: int = 1,
    make_figure: bool = True,
) -> EvalReport:
    """Evaluate checkpoint groups over a K_test sweep and write report files.

    `groups` maps a config label to its run checkpoints (one per seed).
    Writes report.csv, a line chart (SVG and PNG), and, when at least two
    groups have the same number of runs, paired_diff.csv with per-K mean
    and std of the run-wise accuracy differences.
    """
    if not groups or any(len(v) == 0 for v in groups.values()):
        raise ConfigError("sweep_report needs at least one checkpoint per group")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    per_run: dict[tuple[str, int], list[float]] = {}
    report = EvalReport()
    for label, paths in groups.items():
        loaded = [checkpoint_load(p) for p in paths]
        for k_test in k_tests:
            accs = []
            for params, _, cfg, _ in loaded:
                res = evaluate(params, cfg, source, k_test, episodes, seed, m_queries)
                accs.append(res.accuracy * 100.0)
            per_run[(label, k_test)] = accs
            mean = float(np.mean(accs))
            std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
            ci = float(
                np.mean(
                    [
                        196.0 * math.sqrt(max(a / 100 * (1 - a / 100), 0.0) / episodes)
                        for a in accs
                    ]
                )
            )
            report.rows.append(
                ReportRow(
                    k_test=k_test,
                    label=label,
                    mean_accuracy=mean,
                    std_accuracy=std,
                    binomial_ci95=ci,
                    episodes=episodes,
                    runs=len(accs),
                )
            )

    csv_path = out_dir / "report.csv"
    with csv_path.open("w", encoding="utf-8") as fh:
        fh.write(REPORT_HEADER + "\n")
        for r in report.rows:
            fh.write(
                f"{r.k_test},{r.label},{_fmt(r.mean_accuracy)},"
                f"{_fmt(r.std_accuracy)},{_fmt(r.binomial_ci95)},"
                f"{r.episodes},{r.runs}\n"
            )
    report.csv_path = csv_path

    labels = list(groups)
    for i, a in enumerate(labels):
        for b in labels[i + 1 :]:
            if len(groups[a]) != len(groups[b]):
                continue
            for k_test in k_tests:
                diffs = [
                    x - y
                    for x, y in zip(per_run[(a, k_test)], per_run[(b, k_test)])
                ]
                report.paired.append(
                    PairedDiff(
                        k_test=k_test,
                        label_a=a,
                        label_b=b,
                        mean_diff=float(np.mean(diffs)),
                        std_diff=float(np.std(diffs, ddof=1)) if len(diffs) > 1 else 0.0,
                        runs=len(diffs),
                    )
                )
    if report.paired:
        paired_path = out_dir / "paired_diff.csv"
        with paired_path.open("w", encoding="utf-8") as fh:
            fh.write(PAIRED_HEADER + "\n")
            for d in report.paired:
                fh.write(
                    f"{d.k_test},{d.label_a},{d.label_b},"
                    f"{_fmt(d.mean_diff)},{_fmt(d.std_diff)},{d.runs}\n"
                )
        report.paired_csv_path = paired_path

    if make_figure:
        from srwm import plots

        report.figure_paths = plots.render_sweep(report, out_dir / "report")
    return report
