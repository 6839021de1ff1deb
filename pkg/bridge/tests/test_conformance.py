"""Protocol conformance: the unmodified spoofqa client against this service.

Covers the round-trip, out-of-order, timeout, and malformed-line behaviors
over a real TCP socket, plus the stdio transport through the installed
spoofqa-bridge console entry point.
"""

from __future__ import annotations

import sys
import threading

import pytest

from spoofqa.backend import (
    BackendDescriptor,
    BackendTimeoutError,
    ProtocolError,
    RemoteBackend,
    healthcheck,
)
from spoofqa_bridge.service import BridgeServer, BridgeService, ServeConfig, _ConnectionHandler


@pytest.fixture
def serve():
    """Start a TCP bridge on a free port; yields (endpoint, service)."""
    servers = []

    def start(**cfg_kwargs):
        service = BridgeService(ServeConfig(**cfg_kwargs))
        server = BridgeServer(("127.0.0.1", 0), _ConnectionHandler)
        server.service = service
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        servers.append(server)
        return f"127.0.0.1:{server.server_address[1]}", service

    yield start
    for server in servers:
        server.shutdown()
        server.server_close()


def test_roundtrip_fixed_policy(serve):
    endpoint, _ = serve(policy_spec="fixed:spoof")
    with RemoteBackend(endpoint=endpoint, timeout_s=5) as backend:
        for i in range(5):
            assert backend.classify(f"clip{i}.wav", "prompt") == "spoof"


def test_roundtrip_alternating_policy(serve):
    endpoint, _ = serve(policy_spec="alternating")
    with RemoteBackend(endpoint=endpoint, timeout_s=5) as backend:
        replies = [backend.classify(f"c{i}.wav", "p") for i in range(4)]
    assert replies == ["bonafide", "spoof", "bonafide", "spoof"]


def test_out_of_order_replies_resolved_by_id(serve):
    from spoofqa_bridge.policies import HashPolicy

    endpoint, _ = serve(policy_spec="hash", reorder_window=2)
    items = [(f"c{i}.wav", "p") for i in range(6)]
    with RemoteBackend(endpoint=endpoint, timeout_s=5, max_in_flight=4) as backend:
        results = backend.classify_many(items)
    # replies arrive reversed pairwise but must land on the right requests;
    # the hash policy makes each expected reply a pure function of the path
    expected = [HashPolicy().reply(path, "p") for path, _ in items]
    assert results == expected
    assert len(set(expected)) == 2  # the draw actually exercises both labels


def test_timeout_surfaces_as_retriable(serve):
    endpoint, _ = serve(policy_spec="fixed:x", delay_s=1.0)
    with RemoteBackend(endpoint=endpoint, timeout_s=0.2) as backend:
        with pytest.raises(BackendTimeoutError):
            backend.classify("c.wav", "p")


def test_malformed_line_rejected_with_raw(serve):
    endpoint, _ = serve(policy_spec="fixed:x", garbage_every=1)
    with RemoteBackend(endpoint=endpoint, timeout_s=5) as backend:
        with pytest.raises(ProtocolError) as err:
            backend.classify("c.wav", "p")
        assert "not json" in err.value.raw_line


def test_healthcheck_ready_and_degraded(serve):
    endpoint, _ = serve(policy_spec="fixed:x")
    status, name = healthcheck(BackendDescriptor(kind="remote", endpoint=endpoint, timeout_s=5))
    assert (status, name) == ("ready", "echo-mock")
    endpoint, _ = serve(model="qwen2-audio")  # no assets here -> degraded
    status, name = healthcheck(BackendDescriptor(kind="remote", endpoint=endpoint, timeout_s=5))
    assert status == "degraded"
    assert name == "qwen2-audio"


def test_stdio_transport_via_console_entry():
    command = (sys.executable, "-m", "spoofqa_bridge.cli", "--model", "echo-mock",
               "--policy", "hash", "--listen", "stdio")
    with RemoteBackend(command=command, timeout_s=20) as backend:
        pong = backend.ping()
        assert pong["model"] == "echo-mock"
        first = backend.classify("alpha.wav", "p")
        again = backend.classify("alpha.wav", "p")
        assert first == again
    # hash policy is stable across restarts
    with RemoteBackend(command=command, timeout_s=20) as backend:
        assert backend.classify("alpha.wav", "p") == first


def test_end_to_end_eval_against_scripted_policy(serve, tmp_path):
    from spoofqa import evaluation
    from spoofqa.corpus import Manifest, UtteranceRecord

    endpoint, _ = serve(policy_spec="hash")
    entries = []
    for i in range(10):
        label = "spoof" if i % 2 else "bonafide"
        attack = "glitch" if label == "spoof" else "-"
        entries.append(UtteranceRecord(f"u{i}", f"wav/u{i}.wav", label, attack, "eval"))
    manifest = Manifest(entries, name="scripted")

    # closed-form expectation: accuracy = fraction where the hash pick matches truth
    from spoofqa_bridge.policies import HashPolicy

    policy = HashPolicy()
    expected = sum(
        1 for e in entries if policy.reply(e.path, "") == e.label
    ) / len(entries)

    with RemoteBackend(endpoint=endpoint, timeout_s=5) as backend:
        run = evaluation.evaluate(backend, manifest, "P1")
    assert run.reports["P1"].accuracy == pytest.approx(expected)
    assert run.reports["P1"].n_excluded == 0
