"""Deployment loop: rollout, self-critique, reset-and-retry, and accounting.

An episode runs up to ``max_tries`` attempts. Each attempt rolls the policy
out (replanning every chunk, executing chunks open-loop), summarizes the
trajectory, and asks a critic for a verdict. A success verdict ends the
episode; a failure verdict triggers a reset to home with a perturbed initial
gripper pose. The ground-truth oracle outcome of every try is recorded
regardless of what the critic said, which is what makes critic error rates
measurable.
"""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
import requests

from .errors import EndpointError, TransportError
from .policy import PolicyParams, predict_action
from .prompts import VERIFICATION_PROMPTS
from .rvq import Codebook
from .sim2d import EnvSpec, Summary, observe, reset, step, success, summarize

SUCCESS = "success"
FAILURE = "failure"


@dataclass
class CriticVerdict:
    verdict: str
    raw_response: str = ""
    latency: float = 0.0
    unparseable: bool = False

    def to_dict(self) -> dict:
        return {"verdict": self.verdict, "raw_response": self.raw_response,
                "latency": self.latency, "unparseable": self.unparseable}


@dataclass
class RetryPolicy:
    max_tries: int = 10
    perturb_pos: float = 0.03  # home-reset jitter, meters
    perturb_heading: float = 0.1  # radians

    def __post_init__(self):
        if self.max_tries < 1:
            raise ValueError("max_tries must be >= 1")


@dataclass
class TryRecord:
    oracle_success: bool
    verdict: CriticVerdict
    steps: int

    def to_dict(self) -> dict:
        return {"oracle_success": self.oracle_success,
                "verdict": self.verdict.to_dict(), "steps": self.steps}


@dataclass
class EpisodeResult:
    env_id: str
    grid_index: int
    tries: list = field(default_factory=list)
    status: str = "ok"  # ok | transport_error

    @property
    def tries_used(self) -> int:
        return len(self.tries)

    @property
    def critic_accepted(self) -> bool:
        return bool(self.tries) and self.tries[-1].verdict.verdict == SUCCESS

    @property
    def oracle_success(self) -> bool:
        return bool(self.tries) and self.tries[-1].oracle_success

    @property
    def first_try_success(self) -> bool:
        return bool(self.tries) and self.tries[0].oracle_success

    @property
    def false_positive(self) -> bool:
        return self.critic_accepted and not self.oracle_success

    def to_dict(self) -> dict:
        return {
            "env_id": self.env_id, "grid_index": self.grid_index,
            "status": self.status, "tries_used": self.tries_used,
            "critic_accepted": self.critic_accepted,
            "oracle_success": self.oracle_success,
            "first_try_success": self.first_try_success,
            "false_positive": self.false_positive,
            "tries": [t.to_dict() for t in self.tries],
        }


# Critics -------------------------------------------------------------------

class OracleCritic:
    """Ground-truth verdicts straight from the simulator oracle."""

    def __call__(self, summary: Summary) -> CriticVerdict:
        return CriticVerdict(SUCCESS if summary.oracle_success else FAILURE,
                             raw_response="oracle")


class NoisyCritic:
    """Seeded verdict flips on top of an inner critic.

    A failure verdict flips to success with probability fp_rate, a success
    verdict flips to failure with probability fn_rate.
    """

    def __init__(self, inner, fp_rate: float = 0.0, fn_rate: float = 0.0,
                 seed: int = 0):
        if not (0.0 <= fp_rate < 1.0 and 0.0 <= fn_rate < 1.0):
            raise ValueError("flip rates must lie in [0, 1)")
        self.inner = inner
        self.fp_rate = fp_rate
        self.fn_rate = fn_rate
        self.rng = np.random.default_rng(seed)

    def __call__(self, summary: Summary) -> CriticVerdict:
        v = self.inner(summary)
        u = float(self.rng.uniform())
        if v.verdict == FAILURE and u < self.fp_rate:
            return CriticVerdict(SUCCESS, raw_response="flip:" + v.raw_response,
                                 latency=v.latency)
        if v.verdict == SUCCESS and u < self.fn_rate:
            return CriticVerdict(FAILURE, raw_response="flip:" + v.raw_response,
                                 latency=v.latency)
        return v


def parse_verdict_text(text: str) -> tuple[str, bool]:
    """First alphabetic token, case-insensitive: yes/no, else unparseable."""
    token = ""
    for ch in text:
        if ch.isalpha():
            token += ch
        elif token:
            break
    token = token.lower()
    if token == "yes":
        return SUCCESS, False
    if token == "no":
        return FAILURE, False
    return FAILURE, True  # conservative: unparseable triggers a retry


@dataclass
class CriticEndpoint:
    """Chat-completion-style HTTP endpoint configuration."""

    url: str
    model: str
    api_key: str = ""
    timeout: float = 30.0
    max_retries: int = 3
    backoff: float = 0.25

    @staticmethod
    def from_env() -> "CriticEndpoint":
        url = os.environ.get("CHOREBOT_CRITIC_URL", "")
        if not url:
            raise EndpointError("CHOREBOT_CRITIC_URL is not set")
        return CriticEndpoint(
            url=url,
            model=os.environ.get("CHOREBOT_CRITIC_MODEL", "gpt-4o-2024-05-13"),
            api_key=os.environ.get("CHOREBOT_CRITIC_KEY", ""),
        )


class LLMCritic:
    """Asks a multimodal LLM endpoint to verify task success from a summary.

    Safe for concurrent use: each call builds its own request. Transport
    failures retry with exponential backoff before surfacing TransportError.
    """

    def __init__(self, endpoint: CriticEndpoint, session: requests.Session | None = None):
        self.endpoint = endpoint
        self.session = session or requests.Session()

    def build_payload(self, summary: Summary) -> dict:
        template = VERIFICATION_PROMPTS[summary.task]
        return {
            "model": self.endpoint.model,
            "messages": [
                {"role": "system", "content": template},
                {"role": "user", "content": summary.text()},
            ],
        }

    def __call__(self, summary: Summary) -> CriticVerdict:
        payload = self.build_payload(summary)
        headers = {"Content-Type": "application/json"}
        if self.endpoint.api_key:
            headers["Authorization"] = f"Bearer {self.endpoint.api_key}"
        last_err = None
        start = time.perf_counter()
        for attempt in range(self.endpoint.max_retries):
            try:
                resp = self.session.post(self.endpoint.url, json=payload,
                                         headers=headers,
                                         timeout=self.endpoint.timeout)
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_err = exc
                time.sleep(self.endpoint.backoff * (2 ** attempt))
                continue
            if not 200 <= resp.status_code < 300:
                raise EndpointError(f"critic endpoint returned HTTP {resp.status_code}")
            content = resp.json()["choices"][0]["message"]["content"]
            verdict, unparseable = parse_verdict_text(content)
            return CriticVerdict(verdict, raw_response=content,
                                 latency=time.perf_counter() - start,
                                 unparseable=unparseable)
        raise TransportError(
            f"critic endpoint unreachable after {self.endpoint.max_retries} attempts: {last_err}")


# Policy rollout ------------------------------------------------------------

class PolicyActor:
    """Replans every chunk_len steps and executes the chunk open-loop."""

    def __init__(self, params: PolicyParams, codebook: Codebook | None,
                 history_len: int, chunk_len: int, mode: str = "sample",
                 temperature: float = 1.0, seed: int = 0):
        self.params = params
        self.codebook = codebook
        self.history_len = history_len
        self.chunk_len = chunk_len
        self.mode = mode
        self.temperature = temperature
        self.rng = np.random.default_rng(seed)
        self.history: list = []
        self.pending: list = []

    def act(self, obs: np.ndarray):
        self.history.append(np.asarray(obs, dtype=float))
        if not self.pending:
            hist = self.history[-self.history_len:]
            while len(hist) < self.history_len:
                hist = [hist[0]] + hist
            stacked = np.concatenate(hist)
            self.pending = list(predict_action(
                self.params, stacked, self.codebook, self.chunk_len,
                mode=self.mode, temperature=self.temperature, rng=self.rng))
        return self.pending.pop(0)


def run_policy_try(spec: EnvSpec, grid_index: int, actor, max_steps: int,
                   ee_jitter=(0.0, 0.0, 0.0), noise_seed: int = 0):
    """One rollout; stops at the first oracle-success state or max_steps."""
    state = reset(spec, grid_index, ee_jitter=ee_jitter, noise_seed=noise_seed)
    states = [state]
    for _ in range(max_steps):
        action = actor.act(observe(spec, state))
        state = step(state, action, spec)
        states.append(state)
        if success(state, spec):
            break
    return summarize(spec, states), len(states) - 1


def run_episode_loop(run_try, critic, retry: RetryPolicy, seed: int,
                     env_id: str = "?", grid_index: int = 0) -> EpisodeResult:
    """Generic retry loop over a try-running callable.

    ``run_try(try_index, ee_jitter, noise_seed) -> (Summary, steps)``. The
    first try starts from the unperturbed home pose; later tries jitter it.
    """
    rng = np.random.default_rng(seed)
    result = EpisodeResult(env_id=env_id, grid_index=grid_index)
    for t in range(retry.max_tries):
        if t == 0:
            jitter = (0.0, 0.0, 0.0)
        else:
            jitter = (float(rng.uniform(-retry.perturb_pos, retry.perturb_pos)),
                      float(rng.uniform(-retry.perturb_pos, retry.perturb_pos)),
                      float(rng.uniform(-retry.perturb_heading, retry.perturb_heading)))
        summary, steps = run_try(t, jitter, int(rng.integers(2**31)))
        try:
            verdict = critic(summary)
        except TransportError:
            result.status = "transport_error"
            return result
        result.tries.append(TryRecord(oracle_success=summary.oracle_success,
                                      verdict=verdict, steps=steps))
        if verdict.verdict == SUCCESS:
            break
    return result


def run_episode(spec: EnvSpec, grid_index: int, actor_factory, critic,
                retry: RetryPolicy, max_steps: int, seed: int) -> EpisodeResult:
    """Full episode against the simulator; actor_factory(try_seed) -> actor."""

    def run_try(try_index, jitter, noise_seed):
        actor = actor_factory(seed * 1000 + try_index)
        return run_policy_try(spec, grid_index, actor, max_steps,
                              ee_jitter=jitter, noise_seed=noise_seed)

    return run_episode_loop(run_try, critic, retry, seed,
                            env_id=spec.env_id, grid_index=grid_index)


# Accounting ----------------------------------------------------------------

def retry_report(results: list[EpisodeResult]) -> dict:
    """Aggregate retry statistics over completed episodes.

    Transport-failed episodes are excluded from the rates but reported in
    their own counter.
    """
    if not results:
        raise ValueError("no episode results to report on")
    ok = [r for r in results if r.status == "ok"]
    if not ok:
        raise ValueError("every episode failed on transport")
    n = len(ok)
    success_rate = sum(r.oracle_success for r in ok) / n
    first_try = sum(r.first_try_success for r in ok) / n
    succeeded = [r for r in ok if r.oracle_success]
    hist: dict[int, int] = {}
    for r in succeeded:
        hist[r.tries_used] = hist.get(r.tries_used, 0) + 1
    mean_tries = (sum(r.tries_used for r in succeeded) / len(succeeded)
                  if succeeded else float("nan"))
    fp_rate = sum(r.false_positive for r in ok) / n
    verdicts_on_failure = sum(1 for r in ok for t in r.tries if not t.oracle_success)
    fp_verdicts = sum(1 for r in ok for t in r.tries
                      if not t.oracle_success and t.verdict.verdict == SUCCESS)
    per_env: dict[str, dict] = {}
    for r in ok:
        row = per_env.setdefault(r.env_id, {"episodes": 0, "successes": 0,
                                            "first_try_successes": 0})
        row["episodes"] += 1
        row["successes"] += int(r.oracle_success)
        row["first_try_successes"] += int(r.first_try_success)
    for row in per_env.values():
        row["success_rate"] = row["successes"] / row["episodes"]
    return {
        "episodes": n,
        "transport_errors": len(results) - n,
        "success_rate": success_rate,
        "first_try_success_rate": first_try,
        "improvement": success_rate - first_try,
        "mean_tries_to_success": mean_tries,
        "tries_histogram": dict(sorted(hist.items())),
        "false_positive_rate": fp_rate,
        "per_verdict_fp_rate": (fp_verdicts / verdicts_on_failure
                                 if verdicts_on_failure else 0.0),
        "per_env": per_env,
    }


def write_results_jsonl(results: list[EpisodeResult], path) -> None:
    with open(path, "w") as f:
        for r in results:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
