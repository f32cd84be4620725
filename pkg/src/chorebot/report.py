"""Delimited outputs and figures for evaluation runs and ablation sweeps.

Every report path writes a CSV first and renders a matching SVG figure next
to it. Standard errors are cluster bootstraps over environments, since
episode outcomes within one environment are correlated.
"""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

N_BOOTSTRAP = 1000


def bootstrap_se(outcomes, env_ids, n_resamples: int = N_BOOTSTRAP,
                 seed: int = 0) -> float:
    """Standard error of the mean outcome, resampling environments."""
    outcomes = np.asarray(outcomes, dtype=float)
    env_ids = list(env_ids)
    if len(outcomes) != len(env_ids) or len(outcomes) == 0:
        raise ValueError("outcomes and env_ids must align and be nonempty")
    groups: dict[str, list[int]] = {}
    for i, e in enumerate(env_ids):
        groups.setdefault(str(e), []).append(i)
    keys = sorted(groups)
    rng = np.random.default_rng(seed)
    means = np.empty(n_resamples)
    for b in range(n_resamples):
        pick = rng.integers(0, len(keys), size=len(keys))
        idx = np.concatenate([groups[keys[j]] for j in pick])
        means[b] = outcomes[idx].mean()
    return float(means.std(ddof=0))


def write_summary_csv(report: dict, path) -> None:
    """Per-environment success table (columns are fixed)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["env_id", "episodes", "successes", "success_rate",
                    "first_try_successes", "first_try_rate"])
        for env_id in sorted(report["per_env"]):
            row = report["per_env"][env_id]
            w.writerow([env_id, row["episodes"], row["successes"],
                        f"{row['success_rate']:.6f}", row["first_try_successes"],
                        f"{row['first_try_successes'] / row['episodes']:.6f}"])


def write_sweep_csv(rows: list[dict], path) -> None:
    """One row per sweep condition (columns are fixed)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["condition", "episodes", "success_rate", "success_se",
                    "first_try_rate", "first_try_se"])
        for r in rows:
            w.writerow([r["condition"], r["episodes"],
                        f"{r['success_rate']:.6f}", f"{r['success_se']:.6f}",
                        f"{r['first_try_rate']:.6f}", f"{r['first_try_se']:.6f}"])


def condition_row(condition: str, results) -> dict:
    """Aggregate episode results (already transport-filtered) into a sweep row."""
    ok = [r for r in results if r.status == "ok"]
    outcomes = [float(r.oracle_success) for r in ok]
    first = [float(r.first_try_success) for r in ok]
    envs = [r.env_id for r in ok]
    return {
        "condition": condition,
        "episodes": len(ok),
        "success_rate": float(np.mean(outcomes)),
        "success_se": bootstrap_se(outcomes, envs),
        "first_try_rate": float(np.mean(first)),
        "first_try_se": bootstrap_se(first, envs),
    }


def plot_sweep(rows: list[dict], path, title: str = "",
               xlabel: str = "condition") -> None:
    """Success-rate bars with bootstrap-SE error bars, saved as SVG."""
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = np.arange(len(rows))
    rates = [r["success_rate"] for r in rows]
    errs = [r["success_se"] for r in rows]
    ax.bar(xs, rates, yerr=errs, capsize=4, color="#4878a8")
    ax.set_xticks(xs)
    ax.set_xticklabels([str(r["condition"]) for r in rows], rotation=20, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("success rate")
    ax.set_xlabel(xlabel)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_per_env(report: dict, path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    envs = sorted(report["per_env"])
    rates = [report["per_env"][e]["success_rate"] for e in envs]
    ax.bar(np.arange(len(envs)), rates, color="#6aa66a")
    ax.axhline(report["success_rate"], color="k", ls="--", lw=1,
               label=f"overall {report['success_rate']:.2f}")
    ax.set_xticks(np.arange(len(envs)))
    ax.set_xticklabels(envs, rotation=30, ha="right", fontsize=7)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("success rate")
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_tries_histogram(report: dict, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    hist = report.get("tries_histogram", {})
    ks = sorted(int(k) for k in hist)
    ax.bar(ks, [hist[k] for k in ks], color="#a86a6a")
    ax.set_xlabel("tries to success")
    ax.set_ylabel("episodes")
    mean = report.get("mean_tries_to_success")
    if mean == mean:  # not NaN
        ax.set_title(f"mean tries {mean:.2f}")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_loss_curve(curve, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(np.arange(len(curve)), curve)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean minibatch loss")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
