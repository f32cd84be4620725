import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from chorebot.demos import ExpertController, rollout_controller
from chorebot.errors import EndpointError, TransportError
from chorebot.geom import RelAction
from chorebot.orchestrator import (
    FAILURE,
    SUCCESS,
    CriticEndpoint,
    CriticVerdict,
    EpisodeResult,
    LLMCritic,
    NoisyCritic,
    OracleCritic,
    RetryPolicy,
    parse_verdict_text,
    retry_report,
    run_episode,
    run_episode_loop,
    write_results_jsonl,
)
from chorebot.prompts import VERIFICATION_PROMPTS, YES_NO_SUFFIX
from chorebot.sim2d import Summary, gen_envs, reset, step, success, summarize


def stub_summary(ok: bool) -> Summary:
    return Summary(task="door_opening", frame_indices=[0], lines=["stub"],
                   oracle_success=ok)


def bernoulli_runner(p: float, seed: int):
    rng = np.random.default_rng(seed)

    def run_try(t, jitter, noise_seed):
        return stub_summary(bool(rng.uniform() < p)), 1

    return run_try


def geometric_closed_form(p: float, max_tries: int):
    """Success probability and mean tries (successes only) under truncation."""
    q = 1.0 - p
    p_succ = 1.0 - q**max_tries
    mean = sum(k * q ** (k - 1) * p for k in range(1, max_tries + 1)) / p_succ
    return p_succ, mean


class TestRunEpisodeLoop:
    def test_first_try_success(self):
        res = run_episode_loop(lambda t, j, s: (stub_summary(True), 5),
                               OracleCritic(), RetryPolicy(), seed=0)
        assert res.tries_used == 1
        assert res.oracle_success and res.critic_accepted and not res.false_positive

    def test_always_failing_hits_timeout(self):
        res = run_episode_loop(lambda t, j, s: (stub_summary(False), 5),
                               OracleCritic(), RetryPolicy(max_tries=10), seed=0)
        assert res.tries_used == 10
        assert not res.oracle_success and not res.critic_accepted

    def test_truncated_geometric_statistics(self):
        p, max_tries, n = 0.5, 10, 2000
        results = [
            run_episode_loop(bernoulli_runner(p, seed=i), OracleCritic(),
                             RetryPolicy(max_tries=max_tries), seed=i)
            for i in range(n)
        ]
        report = retry_report(results)
        p_succ, mean_tries = geometric_closed_form(p, max_tries)
        assert abs(p_succ - (1.0 - 0.5**10)) < 1e-12
        assert abs(report["success_rate"] - p_succ) < 0.005
        assert abs(report["mean_tries_to_success"] - mean_tries) < 0.1
        assert abs(mean_tries - 1.998) < 0.01

    def test_retry_never_reduces_success_with_oracle(self):
        for seed in range(5):
            results = [
                run_episode_loop(bernoulli_runner(0.4, seed=seed * 100 + i),
                                 OracleCritic(), RetryPolicy(), seed=i)
                for i in range(200)
            ]
            rep = retry_report(results)
            assert rep["success_rate"] >= rep["first_try_success_rate"]

    def test_perturbation_applied_after_first_try(self):
        seen = []

        def run_try(t, jitter, noise_seed):
            seen.append(jitter)
            return stub_summary(False), 1

        run_episode_loop(run_try, OracleCritic(), RetryPolicy(max_tries=4), seed=3)
        assert seen[0] == (0.0, 0.0, 0.0)
        for jit in seen[1:]:
            assert any(abs(v) > 0 for v in jit)
            assert abs(jit[0]) <= 0.03 and abs(jit[1]) <= 0.03 and abs(jit[2]) <= 0.1

    def test_determinism(self):
        def run(seed):
            return [
                run_episode_loop(bernoulli_runner(0.5, seed=i),
                                 NoisyCritic(OracleCritic(), fp_rate=0.1, seed=i),
                                 RetryPolicy(), seed=i)
                for i in range(50)
            ]

        a, b = run(0), run(0)
        assert [r.to_dict() for r in a] == [r.to_dict() for r in b]

    def test_transport_error_excluded_but_logged(self):
        class FlakyCritic:
            def __call__(self, summary):
                raise TransportError("down")

        res = run_episode_loop(lambda t, j, s: (stub_summary(True), 1),
                               FlakyCritic(), RetryPolicy(), seed=0)
        assert res.status == "transport_error"
        ok = run_episode_loop(lambda t, j, s: (stub_summary(True), 1),
                              OracleCritic(), RetryPolicy(), seed=0)
        rep = retry_report([res, ok])
        assert rep["episodes"] == 1 and rep["transport_errors"] == 1


class TestOracleCritic:
    def test_matches_sim_oracle_on_random_states(self):
        critic = OracleCritic()
        rng = np.random.default_rng(0)
        checked = 0
        for task_seed in range(10):
            spec = gen_envs("drawer", 1, seed=task_seed)[0]
            state = reset(spec, task_seed % 10)
            states = [state]
            for _ in range(100):
                a = RelAction(rng.uniform(-0.04, 0.04, 2), rng.uniform(-0.2, 0.2),
                              rng.uniform(0, 1))
                state = step(state, a, spec)
                states.append(state)
                s = summarize(spec, states)
                assert (critic(s).verdict == SUCCESS) == success(state, spec)
                checked += 1
        assert checked == 1000


class TestNoisyCritic:
    def test_zero_rates_identity(self):
        critic = NoisyCritic(OracleCritic(), fp_rate=0.0, fn_rate=0.0, seed=0)
        for ok in (True, False):
            assert critic(stub_summary(ok)).verdict == OracleCritic()(stub_summary(ok)).verdict

    def test_fp_rate_binomial(self):
        critic = NoisyCritic(OracleCritic(), fp_rate=0.1, seed=1)
        flips = sum(critic(stub_summary(False)).verdict == SUCCESS for _ in range(5000))
        assert abs(flips / 5000 - 0.1) < 0.015

    def test_fn_one_forces_full_timeout(self):
        critic = NoisyCritic(OracleCritic(), fn_rate=0.999999, seed=2)
        res = run_episode_loop(lambda t, j, s: (stub_summary(True), 1), critic,
                               RetryPolicy(max_tries=10), seed=0)
        assert res.tries_used == 10
        assert res.oracle_success and not res.critic_accepted

    def test_false_positive_terminates_episode(self):
        results = [
            run_episode_loop(lambda t, j, s: (stub_summary(False), 1),
                             NoisyCritic(OracleCritic(), fp_rate=0.3, seed=i),
                             RetryPolicy(), seed=i)
            for i in range(300)
        ]
        for r in results:
            for t in r.tries[:-1]:
                assert t.verdict.verdict == FAILURE
            if r.false_positive:
                assert r.tries[-1].verdict.verdict == SUCCESS

    def test_per_verdict_fp_frequency(self):
        results = []
        i = 0
        verdicts = 0
        while verdicts < 5000:
            r = run_episode_loop(lambda t, j, s: (stub_summary(False), 1),
                                 NoisyCritic(OracleCritic(), fp_rate=0.05, seed=i),
                                 RetryPolicy(), seed=i)
            results.append(r)
            verdicts += r.tries_used
            i += 1
        rep = retry_report(results)
        assert abs(rep["per_verdict_fp_rate"] - 0.05) < 0.01


class TestParseVerdict:
    def test_yes(self):
        assert parse_verdict_text("Yes") == (SUCCESS, False)

    def test_no_with_punctuation(self):
        assert parse_verdict_text("no.") == (FAILURE, False)

    def test_case_insensitive(self):
        assert parse_verdict_text("YES!") == (SUCCESS, False)
        assert parse_verdict_text("  \nNo\n") == (FAILURE, False)

    def test_unparseable_is_failure_flagged(self):
        assert parse_verdict_text("The robot seems to...") == (FAILURE, True)
        assert parse_verdict_text("") == (FAILURE, True)
        assert parse_verdict_text("123") == (FAILURE, True)


class TestPromptContract:
    def test_all_templates_end_with_instruction(self):
        assert len(VERIFICATION_PROMPTS) == 5
        for text in VERIFICATION_PROMPTS.values():
            assert text.endswith(YES_NO_SUFFIX)

    def test_payload_carries_template_verbatim(self):
        critic = LLMCritic(CriticEndpoint(url="http://unused", model="m"))
        for key, template in VERIFICATION_PROMPTS.items():
            payload = critic.build_payload(
                Summary(task=key, frame_indices=[0], lines=["frame"]))
            assert payload["messages"][0]["content"] == template
            assert payload["messages"][1]["content"] == "frame"
            assert payload["model"] == "m"


class _MockHandler(BaseHTTPRequestHandler):
    script = {"drop_first": 0, "status": 200, "content": "Yes"}
    requests_seen = []
    drops_left = 0

    def do_POST(self):
        body = self.rfile.read(int(self.headers["Content-Length"]))
        type(self).requests_seen.append(json.loads(body))
        if type(self).drops_left > 0:
            type(self).drops_left -= 1
            self.connection.close()  # simulated transport fault
            return
        reply = {"choices": [{"message": {"content": self.script["content"]}}]}
        data = json.dumps(reply).encode()
        self.send_response(self.script["status"])
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def mock_endpoint():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _MockHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _MockHandler.requests_seen = []
    _MockHandler.drops_left = 0
    _MockHandler.script = {"drop_first": 0, "status": 200, "content": "Yes"}
    yield f"http://127.0.0.1:{server.server_port}/v1/chat/completions"
    server.shutdown()


class TestLLMCritic:
    def test_round_trip_yes(self, mock_endpoint):
        critic = LLMCritic(CriticEndpoint(url=mock_endpoint, model="test-model",
                                          api_key="k", backoff=0.01))
        v = critic(stub_summary(True))
        assert v.verdict == SUCCESS and v.raw_response == "Yes"
        assert v.latency > 0
        sent = _MockHandler.requests_seen[-1]
        assert sent["model"] == "test-model"
        assert sent["messages"][0]["content"] == VERIFICATION_PROMPTS["door_opening"]

    def test_unparseable_flagged(self, mock_endpoint):
        _MockHandler.script = {"drop_first": 0, "status": 200,
                               "content": "The robot seems to..."}
        critic = LLMCritic(CriticEndpoint(url=mock_endpoint, model="m", backoff=0.01))
        v = critic(stub_summary(True))
        assert v.verdict == FAILURE and v.unparseable

    def test_transport_retry_then_success(self, mock_endpoint):
        _MockHandler.drops_left = 2
        critic = LLMCritic(CriticEndpoint(url=mock_endpoint, model="m",
                                          max_retries=3, backoff=0.01))
        v = critic(stub_summary(True))
        assert v.verdict == SUCCESS
        assert len(_MockHandler.requests_seen) == 3

    def test_transport_exhaustion_raises(self, mock_endpoint):
        _MockHandler.drops_left = 99
        critic = LLMCritic(CriticEndpoint(url=mock_endpoint, model="m",
                                          max_retries=3, backoff=0.01))
        with pytest.raises(TransportError):
            critic(stub_summary(True))

    def test_http_error_raises_endpoint_error(self, mock_endpoint):
        _MockHandler.script = {"drop_first": 0, "status": 500, "content": "Yes"}
        critic = LLMCritic(CriticEndpoint(url=mock_endpoint, model="m", backoff=0.01))
        with pytest.raises(EndpointError):
            critic(stub_summary(True))

    def test_from_env(self, monkeypatch):
        monkeypatch.delenv("CHOREBOT_CRITIC_URL", raising=False)
        with pytest.raises(EndpointError):
            CriticEndpoint.from_env()
        monkeypatch.setenv("CHOREBOT_CRITIC_URL", "http://x")
        monkeypatch.setenv("CHOREBOT_CRITIC_KEY", "secret")
        ep = CriticEndpoint.from_env()
        assert ep.url == "http://x" and ep.api_key == "secret"


class TestRetryReport:
    def test_perfect_policy(self):
        results = [
            run_episode_loop(lambda t, j, s: (stub_summary(True), 1),
                             OracleCritic(), RetryPolicy(), seed=i)
            for i in range(50)
        ]
        rep = retry_report(results)
        assert rep["improvement"] == 0.0
        assert rep["mean_tries_to_success"] == 1.0
        assert rep["false_positive_rate"] == 0.0
        assert rep["tries_histogram"] == {1: 50}

    def test_improvement_closed_form(self):
        p, n = 0.6, 2000
        results = [
            run_episode_loop(bernoulli_runner(p, seed=i), OracleCritic(),
                             RetryPolicy(), seed=i)
            for i in range(n)
        ]
        rep = retry_report(results)
        expected = (1 - 0.4**10) - 0.6
        assert abs(rep["improvement"] - expected) < 0.02

    def test_per_env_breakdown(self):
        results = []
        for i in range(40):
            r = run_episode_loop(bernoulli_runner(0.7, seed=i), OracleCritic(),
                                 RetryPolicy(), seed=i,
                                 env_id=f"env{i % 4}", grid_index=i % 10)
            results.append(r)
        rep = retry_report(results)
        assert set(rep["per_env"]) == {"env0", "env1", "env2", "env3"}
        assert sum(v["episodes"] for v in rep["per_env"].values()) == 40

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            retry_report([])


class TestSimEpisode:
    def test_do_nothing_actor_times_out(self):
        spec = gen_envs("drawer", 1, seed=20)[0]

        class Idle:
            def act(self, obs):
                return RelAction(np.zeros(2), 0.0, 1.0)

        res = run_episode(spec, 0, lambda s: Idle(), OracleCritic(),
                          RetryPolicy(max_tries=3), max_steps=30, seed=0)
        assert res.tries_used == 3 and not res.oracle_success

    def test_replayed_expert_succeeds_first_try(self):
        spec = gen_envs("pickup", 1, seed=21)[0]
        _, actions = rollout_controller(spec, 0, ExpertController(spec, "A"))

        class Replay:
            def __init__(self, actions):
                self.queue = list(actions)

            def act(self, obs):
                return self.queue.pop(0) if self.queue else RelAction(np.zeros(2), 0.0, 0.0)

        res = run_episode(spec, 0, lambda s: Replay(actions), OracleCritic(),
                          RetryPolicy(), max_steps=200, seed=0)
        assert res.tries_used == 1 and res.oracle_success


def test_results_jsonl(tmp_path):
    results = [
        run_episode_loop(bernoulli_runner(0.5, seed=i), OracleCritic(),
                         RetryPolicy(), seed=i, env_id="e", grid_index=i)
        for i in range(5)
    ]
    path = tmp_path / "results.jsonl"
    write_results_jsonl(results, path)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 5
    parsed = json.loads(lines[0])
    assert {"env_id", "tries_used", "oracle_success", "tries"} <= set(parsed)
