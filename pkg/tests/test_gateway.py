import json
import threading
import time

import httpx
import pytest
from hypothesis import given, strategies as st

from pertreason import gateway as gw
from pertreason.gateway import ChatRequest, LiveBackend, Recorder, ScriptedBackend
from pertreason.oracle import OracleBackend, OracleWorld, role_of
from pertreason import prompts
from pertreason.samples import Sample


def req(text="hello", seed=1, temperature=0.7, max_tokens=64, system=None):
    msgs = ((("system", system),) if system else ()) + (("user", text),)
    return ChatRequest(msgs, temperature=temperature, seed=seed, max_tokens=max_tokens)


# -- request validation and hashing --------------------------------------------


def test_request_needs_user_message():
    with pytest.raises(ValueError):
        ChatRequest((("system", "x"),))


def test_request_rejects_unknown_role():
    with pytest.raises(ValueError):
        ChatRequest((("assistant", "x"), ("user", "y")))


def test_hash_ignores_max_tokens():
    assert gw.request_hash(req(max_tokens=10)) == gw.request_hash(req(max_tokens=999))


@given(st.text(min_size=1), st.integers(0, 2**31 - 1), st.integers(0, 2**31 - 1))
def test_hash_covers_messages_and_seed(text, s1, s2):
    same = gw.request_hash(req(text, s1)) == gw.request_hash(req(text, s2))
    assert same == (s1 == s2)
    assert gw.request_hash(req(text, s1)) != gw.request_hash(req(text + "!", s1))


def test_hash_covers_temperature():
    assert gw.request_hash(req(temperature=0.0)) != gw.request_hash(req(temperature=0.7))


# -- scripted ------------------------------------------------------------------


def test_scripted_lookup():
    r = req()
    b = ScriptedBackend({gw.request_hash(r): "X"})
    resp = b.complete(r)
    assert (resp.content, resp.backend) == ("X", "scripted")


def test_scripted_miss_raises():
    with pytest.raises(gw.UnscriptedRequest, match="unscripted request"):
        ScriptedBackend({}).complete(req())


def test_script_file_roundtrip(tmp_path):
    script = {gw.request_hash(req(str(i))): f"answer {i}\nline two" for i in range(5)}
    gw.write_script(script, tmp_path / "s.jsonl")
    assert gw.read_script(tmp_path / "s.jsonl") == script
    first = json.loads((tmp_path / "s.jsonl").read_text().splitlines()[0])
    assert set(first) == {"request_hash", "response_text"}


def test_recorder_replay():
    world = OracleWorld({("A375", "BRAF inhibitor (vemurafenib)", "DUSP6"): 0})
    rec = Recorder(OracleBackend(world))
    probe = prompts.load("probe").fill(cell_line="A375", target_gene="DUSP6", pert_or_moa="BRAF inhibitor (vemurafenib)")
    answers = [gw.ask(rec, probe, seed) for seed in range(5)]
    replay = ScriptedBackend(rec.script())
    assert [gw.ask(replay, probe, seed) for seed in range(5)] == answers


def test_in_flight_cap():
    class Slow(gw.Backend):
        name = "slow"

        def __init__(self):
            super().__init__(max_in_flight=3)
            self.active = self.peak = 0
            self.lock = threading.Lock()

        def _complete(self, r):
            with self.lock:
                self.active += 1
                self.peak = max(self.peak, self.active)
            time.sleep(0.01)
            with self.lock:
                self.active -= 1
            return "ok"

    b = Slow()
    threads = [threading.Thread(target=b.complete, args=(req(str(i)),)) for i in range(20)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert b.peak <= 3


# -- live ----------------------------------------------------------------------


def ok_body(text="hi"):
    return {"choices": [{"message": {"role": "assistant", "content": text}}]}


def live(handler, sleeps):
    client = httpx.Client(transport=httpx.MockTransport(handler))
    return LiveBackend("https://llm.test/v1", api_key_env="PERTREASON_TEST_KEY", client=client, sleep=sleeps.append)


def test_live_success_sends_wire_format(monkeypatch):
    monkeypatch.setenv("PERTREASON_TEST_KEY", "sk-test")
    seen = []

    def handler(request):
        seen.append(request)
        return httpx.Response(200, json=ok_body("done"))

    sleeps = []
    resp = live(handler, sleeps).complete(req("q", seed=7, system="sys"))
    assert resp.content == "done" and resp.backend == "live"
    body = json.loads(seen[0].content)
    assert body["messages"] == [{"role": "system", "content": "sys"}, {"role": "user", "content": "q"}]
    assert body["seed"] == 7 and body["max_tokens"] == 64 and body["model"] == "default"
    assert seen[0].url.path == "/v1/chat/completions"
    assert seen[0].headers["authorization"] == "Bearer sk-test"
    assert sleeps == []


def test_live_retries_5xx_then_succeeds():
    codes = iter([503, 500, 200])

    def handler(request):
        code = next(codes)
        return httpx.Response(code, json=ok_body() if code == 200 else {"error": "busy"})

    sleeps = []
    assert live(handler, sleeps).complete(req()).content == "hi"
    assert sleeps == [0.5, 1.0]


def test_live_timeout_exhausts_retries():
    calls = []

    def handler(request):
        calls.append(1)
        raise httpx.ReadTimeout("slow", request=request)

    sleeps = []
    with pytest.raises(gw.GatewayTimeout):
        live(handler, sleeps).complete(req())
    assert sleeps == [0.5, 1.0, 2.0]
    assert len(calls) == 4


def test_live_4xx_not_retried():
    sleeps = []
    with pytest.raises(gw.GatewayHTTPError) as info:
        live(lambda r: httpx.Response(401, text="no key"), sleeps).complete(req())
    assert info.value.status == 401 and sleeps == []


@pytest.mark.parametrize("body", ["not json", json.dumps({"choices": []}), json.dumps(ok_body(""))])
def test_live_malformed_body(body):
    with pytest.raises(gw.MalformedResponse):
        live(lambda r: httpx.Response(200, text=body), []).complete(req())


def test_errors_are_distinct():
    kinds = {gw.GatewayTimeout, gw.GatewayHTTPError, gw.MalformedResponse, gw.UnscriptedRequest}
    assert len(kinds) == 4
    assert all(issubclass(k, gw.GatewayError) for k in kinds)


# -- oracle --------------------------------------------------------------------


SAMPLE = Sample("A375", "vemurafenib", "BRAF inhibitor", "DUSP6", 0)


def probe_msgs(sample=SAMPLE):
    return prompts.load("probe").fill(cell_line=sample.cell_line, target_gene=sample.gene, pert_or_moa=sample.query.perturbation)


def test_role_detection():
    for name in ("probe", "context", "mechanism", "network", "integration", "history_leakage", "grounding", "consistency"):
        t = prompts.load(name)
        r = ChatRequest((("system", t.system), ("user", "x")))
        assert role_of(r) == name
    assert role_of(ChatRequest((("system", prompts.load("integration_prior").system), ("user", "x")))) == "integration"


def test_oracle_perfect_accuracy():
    world = OracleWorld.from_samples([SAMPLE], base_accuracy_easy=1.0)
    b = OracleBackend(world)
    assert {gw.ask(b, probe_msgs(), s) for s in range(50)} == {'{"answer": "downregulated"}'}


def test_oracle_deterministic_regardless_of_order():
    world = OracleWorld.from_samples([SAMPLE], base_accuracy_easy=0.5, rng_seed=9)
    seeds = list(range(30))
    a = [gw.ask(OracleBackend(world), probe_msgs(), s) for s in seeds]
    b = {s: gw.ask(OracleBackend(world), probe_msgs(), s) for s in reversed(seeds)}
    assert a == [b[s] for s in seeds]


@pytest.mark.parametrize("p", [0.3, 0.9])
def test_oracle_empirical_accuracy(p):
    world = OracleWorld.from_samples([SAMPLE], base_accuracy_easy=p, rng_seed=4)
    b = OracleBackend(world)
    n = 10_000
    hits = sum('"downregulated"' in gw.ask(b, probe_msgs(), s) for s in range(n))
    assert abs(hits / n - p) <= 0.02


def test_oracle_rejects_bad_probability():
    with pytest.raises(ValueError):
        OracleWorld({}, base_accuracy_easy=1.5)
