"""End-to-end experiment stages: data generation, training, evaluation, sweeps.

The CLI is a thin wrapper over these functions so tests can drive the same
code paths in-process.
"""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import rvq
from .config import ExperimentConfig
from .datalog import DatasetConfig, EpisodeLog, assemble
from .demos import collect_demo, collect_recovery_demo
from .errors import FormatError
from .orchestrator import (
    LLMCritic,
    NoisyCritic,
    OracleCritic,
    PolicyActor,
    RetryPolicy,
    run_episode,
    retry_report,
    write_results_jsonl,
)
from .policy import PolicyParams, save_loss_curve, train
from .report import (
    condition_row,
    ensure_dir,
    plot_loss_curve,
    plot_per_env,
    plot_sweep,
    plot_tries_histogram,
    write_summary_csv,
    write_sweep_csv,
)
from .sim2d import EVAL_SEED_BASE, EnvSpec, gen_envs

CODEBOOK_FILE = "codebook.rvq"
PARAMS_FILE = "policy.params"
CURVE_FILE = "loss_curve.csv"
MANIFEST_FILE = "manifest.json"


def plan_demo(cfg: ExperimentConfig, index: int) -> dict:
    """Expertise/noise assignment for the index-th demo of an environment."""
    plan = cfg.demo
    if plan.expertise == "expert":
        expertise = "expert"
    elif plan.expertise == "nonexpert":
        expertise = "nonexpert"
    else:  # mixed: alternate demonstrator pools
        expertise = "expert" if index % 2 == 0 else "nonexpert"
    return {
        "expertise": expertise,
        "noise_level": plan.noise_level if expertise == "nonexpert" else 0.0,
        "fail_rate": plan.fail_rate if expertise == "nonexpert" else 0.0,
        "tremor": plan.tremor,
        "start_jitter": plan.start_jitter,
    }


def generate_logs(cfg: ExperimentConfig) -> tuple[list[EnvSpec], list[EpisodeLog]]:
    """Scripted demonstrations for every training environment, in memory."""
    specs = gen_envs(cfg.task, cfg.train_envs, cfg.train_seed)
    recovery_every = (round(1.0 / cfg.demo.recovery_fraction)
                      if cfg.demo.recovery_fraction > 0 else 0)
    logs = []
    for spec in specs:
        for d in range(cfg.demo.demos_per_env):
            how = plan_demo(cfg, d)
            if recovery_every and d % recovery_every == recovery_every - 1:
                logs.append(collect_recovery_demo(
                    spec, d % 10, mode="AB"[d % 2], seed=d,
                    expertise=how["expertise"],
                    tremor=how["noise_level"] or how["tremor"],
                ))
            else:
                logs.append(collect_demo(
                    spec, d % 10, mode="AB"[d % 2], seed=d,
                    expertise=how["expertise"], noise_level=how["noise_level"],
                    fail_rate=how["fail_rate"], tremor=how["tremor"],
                    start_jitter=how["start_jitter"],
                ))
    return specs, logs


def generate_dataset_dir(cfg: ExperimentConfig, out_dir) -> Path:
    """gen-data: write one RUMLOG1 file per demo plus a manifest."""
    out = ensure_dir(out_dir)
    specs, logs = generate_logs(cfg)
    entries = []
    for i, log in enumerate(logs):
        name = f"{log.meta['env_id']}-d{i % cfg.demo.demos_per_env:03d}.rumlog"
        log.save(out / name)
        entries.append({
            "file": name,
            "env_id": log.meta["env_id"],
            "expertise": log.meta["expertise"],
            "success": log.meta["success"],
        })
    manifest = {
        "config": json.loads(cfg.to_json()),
        "envs": [json.loads(s.to_json()) for s in specs],
        "demos": entries,
    }
    with open(out / MANIFEST_FILE, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return out


def load_logs(data_dir) -> list[EpisodeLog]:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / MANIFEST_FILE).read_text())
    return [EpisodeLog.load(data_dir / e["file"]) for e in manifest["demos"]]


def fit_and_train(cfg: ExperimentConfig, logs: list[EpisodeLog],
                  dataset_cfg: DatasetConfig | None = None):
    """Assemble pairs, fit the action tokenizer, train the policy."""
    ds = assemble(logs, dataset_cfg or cfg.dataset, seed=cfg.train.seed)
    book = None
    if cfg.variant == "vqbet":
        book = rvq.fit(ds.targets, K=cfg.rvq.codes, L=cfg.rvq.layers,
                       iters=cfg.rvq.iters, seed=cfg.rvq.seed)
    params, curve = train(ds.inputs, ds.targets, cfg.train, book,
                          variant=cfg.variant)
    return ds, book, params, curve


def save_artifacts(out_dir, cfg: ExperimentConfig, book, params, curve) -> Path:
    out = ensure_dir(out_dir)
    if book is not None:
        book.save(out / CODEBOOK_FILE)
    params.save(out / PARAMS_FILE)
    save_loss_curve(curve, out / CURVE_FILE)
    plot_loss_curve(curve, out / "loss_curve.svg")
    (out / "config.json").write_text(cfg.to_json())
    return out


def load_artifacts(artifact_dir):
    artifact_dir = Path(artifact_dir)
    params = PolicyParams.load(artifact_dir / PARAMS_FILE)
    book = None
    if (artifact_dir / CODEBOOK_FILE).exists():
        book = rvq.Codebook.load(artifact_dir / CODEBOOK_FILE)
    return params, book


def make_critic(cfg: ExperimentConfig, seed: int = 0):
    if cfg.critic == "oracle":
        return OracleCritic()
    if cfg.critic == "noisy":
        return NoisyCritic(OracleCritic(), fp_rate=cfg.critic_fp_rate,
                           fn_rate=cfg.critic_fn_rate, seed=seed)
    if cfg.critic == "llm":
        from .orchestrator import CriticEndpoint
        return LLMCritic(CriticEndpoint.from_env())
    raise FormatError(f"unknown critic {cfg.critic!r}")


_WORKER_STATE: dict = {}


def _worker_init(artifact_json: str):
    _WORKER_STATE["setup"] = json.loads(artifact_json)


def _episode_task(payload):
    (cfg_json, spec_json, grid, seed, retry_on, artifact_dir, embodiment) = payload
    cfg = ExperimentConfig.from_json(cfg_json)
    spec = EnvSpec.from_json(spec_json)
    if embodiment is not None:
        spec = spec.with_embodiment(*embodiment)
    key = str(artifact_dir)
    if _WORKER_STATE.get("key") != key:
        _WORKER_STATE["params"], _WORKER_STATE["book"] = load_artifacts(artifact_dir)
        _WORKER_STATE["key"] = key
    params, book = _WORKER_STATE["params"], _WORKER_STATE["book"]
    return _run_one(cfg, spec, grid, seed, retry_on, params, book)


def _run_one(cfg, spec, grid, seed, retry_on, params, book):
    retry = cfg.retry if retry_on else RetryPolicy(max_tries=1)
    critic = make_critic(cfg, seed=seed)

    def actor_factory(actor_seed):
        return PolicyActor(params, book, cfg.dataset.history_len,
                           cfg.dataset.chunk_len, mode=cfg.infer_mode,
                           temperature=cfg.temperature, seed=actor_seed)

    return run_episode(spec, grid, actor_factory, critic, retry,
                       cfg.max_steps, seed)


def evaluate(cfg: ExperimentConfig, params, book, retry_on: bool = True,
             eval_specs: list[EnvSpec] | None = None, out_dir=None,
             embodiment: tuple | None = None, artifact_dir=None):
    """Run the evaluation grid; optionally write results + figures.

    ``embodiment`` overrides (step_gain, gripper_latency_steps) on the eval
    environments, standing in for deployment on different hardware.
    """
    if eval_specs is None:
        eval_specs = gen_envs(cfg.task, cfg.eval_envs, cfg.eval_seed)
    if embodiment is not None:
        eval_specs = [s.with_embodiment(*embodiment) for s in eval_specs]
    jobs = []
    seed = 0
    for spec in eval_specs:
        for grid in range(cfg.grid_runs):
            for _ in range(cfg.episodes_per_grid):
                jobs.append((spec, grid, seed))
                seed += 1
    if cfg.workers > 1 and artifact_dir is not None:
        payloads = [(cfg.to_json(), spec.to_json(), grid, s, retry_on,
                     str(artifact_dir), embodiment) for spec, grid, s in jobs]
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_episode_task, payloads, chunksize=4))
    else:
        results = [_run_one(cfg, spec, grid, s, retry_on, params, book)
                   for spec, grid, s in jobs]
    report = retry_report(results)
    if out_dir is not None:
        out = ensure_dir(out_dir)
        write_results_jsonl(results, out / "results.jsonl")
        write_summary_csv(report, out / "summary.csv")
        with open(out / "report.json", "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
        plot_per_env(report, out / "per_env.svg",
                     title=f"{cfg.task} ({'retry' if retry_on else 'single try'})")
        plot_tries_histogram(report, out / "tries_hist.svg")
    return results, report


ABLATION_KINDS = ("scaling", "diversity", "expert", "retry", "embodiment")
SCALING_ENV_COUNTS = (2, 5, 10, 20, 40)
EMBODIMENT_SHIFT = (0.85, 1)  # step gain, gripper latency


def _replace(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    d = json.loads(cfg.to_json())
    for k, v in kw.items():
        if isinstance(v, dict):
            d[k].update(v)
        else:
            d[k] = v
    return ExperimentConfig.from_dict(d)


def ablate(kind: str, cfg: ExperimentConfig, out_dir) -> list[dict]:
    """Run one ablation sweep; emits sweep.csv and sweep.svg."""
    out = ensure_dir(out_dir)
    if kind == "scaling":
        rows = _ablate_scaling(cfg, out)
    elif kind == "diversity":
        rows = _ablate_diversity(cfg, out)
    elif kind == "expert":
        rows = _ablate_expert(cfg, out)
    elif kind == "retry":
        rows = _ablate_retry(cfg, out)
    elif kind == "embodiment":
        rows = _ablate_embodiment(cfg, out)
    else:
        raise FormatError(f"unknown ablation kind {kind!r}; "
                          f"expected one of {ABLATION_KINDS}")
    write_sweep_csv(rows, out / "sweep.csv")
    plot_sweep(rows, out / "sweep.svg", title=f"{kind} ({cfg.task})")
    return rows


def _ablate_scaling(cfg: ExperimentConfig, out: Path) -> list[dict]:
    # one big corpus; per condition a seeded random env subset of it
    base = _replace(cfg, train_envs=max(SCALING_ENV_COUNTS))
    _, logs = generate_logs(base)
    rows = []
    for n in SCALING_ENV_COUNTS:
        cond = _replace(cfg, dataset={"env_count": n})
        ds_cfg = cond.dataset
        _, book, params, curve = fit_and_train(base, logs, dataset_cfg=ds_cfg)
        results, _ = evaluate(cond, params, book, retry_on=False,
                              out_dir=out / f"envs{n:02d}")
        rows.append(condition_row(f"{n} envs", results))
    return rows


def _ablate_diversity(cfg: ExperimentConfig, out: Path) -> list[dict]:
    diverse = _replace(cfg, train_envs=40, demo={"demos_per_env": 25})
    uniform = _replace(cfg, train_envs=5, demo={"demos_per_env": 200})
    rows = []
    for name, cond in (("diverse 40x25", diverse), ("uniform 5x200", uniform)):
        _, logs = generate_logs(cond)
        _, book, params, _ = fit_and_train(cond, logs)
        results, _ = evaluate(cond, params, book, retry_on=False,
                              out_dir=out / name.split()[0])
        rows.append(condition_row(name, results))
    return rows


def _ablate_expert(cfg: ExperimentConfig, out: Path) -> list[dict]:
    conditions = (("expert", "expert"), ("nonexpert", "nonexpert"),
                  ("cotrained", "mixed"))
    rows = []
    for name, expertise in conditions:
        cond = _replace(cfg, demo={"expertise": expertise},
                        dataset={"exclude_failed": False})
        _, logs = generate_logs(cond)
        _, book, params, _ = fit_and_train(cond, logs)
        results, _ = evaluate(cond, params, book, retry_on=False,
                              out_dir=out / name)
        rows.append(condition_row(name, results))
    return rows


def _ablate_retry(cfg: ExperimentConfig, out: Path) -> list[dict]:
    _, logs = generate_logs(cfg)
    _, book, params, _ = fit_and_train(cfg, logs)
    rows = []
    for name, retry_on in (("retry off", False), ("retry on", True)):
        results, _ = evaluate(cfg, params, book, retry_on=retry_on,
                              out_dir=out / name.replace(" ", "_"))
        rows.append(condition_row(name, results))
    return rows


def _ablate_embodiment(cfg: ExperimentConfig, out: Path) -> list[dict]:
    _, logs = generate_logs(cfg)
    _, book, params, _ = fit_and_train(cfg, logs)
    rows = []
    for name, emb in (("native", None), ("shifted", EMBODIMENT_SHIFT)):
        results, _ = evaluate(cfg, params, book, retry_on=False,
                              out_dir=out / name, embodiment=emb)
        rows.append(condition_row(name, results))
    return rows
