"""Detector backends: the in-process toy model and a line-JSON remote client.

The remote protocol is newline-delimited JSON over a TCP socket or the stdio
pipes of a spawned server process. Requests carry an integer id; responses are
matched strictly by id, so servers may answer out of order. A ping request
({"id": n, "ping": true}) yields {"id": n, "pong": true, "model": name} with
an optional "degraded" flag.
"""

from __future__ import annotations

import json
import os
import selectors
import socket
import subprocess
import time
from dataclasses import dataclass

from . import evaluation
from .model import MultimodalModel, load_checkpoint
from .promptkit import TEMPLATES

DEFAULT_TIMEOUT_S = 120.0
DEFAULT_MAX_IN_FLIGHT = 4


class BackendError(Exception):
    """Base class for classification failures."""


class BackendTimeoutError(BackendError):
    """A request timed out; retriable."""


class ProtocolError(BackendError):
    """The remote peer violated the wire protocol; carries the raw line."""

    def __init__(self, message: str, raw_line: str = ""):
        super().__init__(f"{message}: {raw_line!r}" if raw_line else message)
        self.raw_line = raw_line


@dataclass(frozen=True)
class BackendDescriptor:
    kind: str  # "local" | "remote"
    checkpoint: str | None = None
    adapter: str | None = None
    endpoint: str | None = None
    command: tuple[str, ...] | None = None
    timeout_s: float = DEFAULT_TIMEOUT_S
    model_name: str = ""

    def __post_init__(self):
        if self.kind == "local":
            if not self.checkpoint or self.endpoint or self.command:
                raise ValueError("local descriptor needs a checkpoint and no remote fields")
        elif self.kind == "remote":
            if self.checkpoint or self.adapter:
                raise ValueError("remote descriptor must not carry checkpoint fields")
            if bool(self.endpoint) == bool(self.command):
                raise ValueError("remote descriptor needs exactly one of endpoint or command")
        else:
            raise ValueError(f"unknown backend kind {self.kind!r}")


def _answer_set_for_prompt(prompt: str) -> tuple[str, ...]:
    for template in TEMPLATES.values():
        if prompt in template.texts:
            return template.answer_set
    raise BackendError("constrained decoding requires a catalog prompt")


class LocalBackend:
    """Wraps an in-process model; classify is a pure function of its inputs."""

    def __init__(self, model: MultimodalModel, name: str = "toy-local"):
        self.model = model
        self.model_name = name

    @classmethod
    def from_model(cls, model: MultimodalModel, name: str = "toy-local") -> "LocalBackend":
        return cls(model, name)

    @classmethod
    def from_checkpoint(cls, checkpoint, adapter=None, name: str | None = None) -> "LocalBackend":
        from .lora import load_adapter

        model = load_checkpoint(checkpoint)
        if adapter:
            load_adapter(model, adapter)
        return cls(model, name or f"toy-local:{os.path.basename(str(checkpoint))}")

    def classify(self, wav_path, prompt: str, constrained: bool = False) -> str:
        try:
            mel = evaluation.load_features(wav_path)
            if constrained:
                return evaluation.constrained_decode(
                    self.model, mel, prompt, _answer_set_for_prompt(prompt)
                )
            return evaluation.greedy_decode(self.model, mel, prompt)
        except BackendError:
            raise
        except (OSError, ValueError) as exc:
            raise BackendError(f"{wav_path}: {exc}") from exc


class _SocketChannel:
    def __init__(self, endpoint: str, timeout_s: float):
        host, _, port = endpoint.rpartition(":")
        try:
            self.sock = socket.create_connection((host or "127.0.0.1", int(port)), timeout=timeout_s)
        except OSError as exc:
            raise BackendError(f"cannot connect to {endpoint}: {exc}") from exc
        self.buffer = b""

    def send_line(self, data: bytes) -> None:
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise ProtocolError(f"send failed: {exc}") from exc

    def read_line(self, deadline: float) -> bytes:
        while b"\n" not in self.buffer:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise BackendTimeoutError("timed out waiting for response")
            self.sock.settimeout(remaining)
            try:
                chunk = self.sock.recv(65536)
            except socket.timeout:
                raise BackendTimeoutError("timed out waiting for response") from None
            except OSError as exc:
                raise ProtocolError(f"recv failed: {exc}") from exc
            if not chunk:
                raise ProtocolError("connection closed mid-stream", self.buffer.decode("utf-8", "replace"))
            self.buffer += chunk
        line, _, self.buffer = self.buffer.partition(b"\n")
        return line

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class _ProcessChannel:
    def __init__(self, command: tuple[str, ...]):
        try:
            self.proc = subprocess.Popen(
                list(command), stdin=subprocess.PIPE, stdout=subprocess.PIPE
            )
        except OSError as exc:
            raise BackendError(f"cannot spawn {command!r}: {exc}") from exc
        self.buffer = b""
        self.selector = selectors.DefaultSelector()
        self.selector.register(self.proc.stdout, selectors.EVENT_READ)

    def send_line(self, data: bytes) -> None:
        try:
            self.proc.stdin.write(data)
            self.proc.stdin.flush()
        except (OSError, ValueError) as exc:
            raise ProtocolError(f"send failed: {exc}") from exc

    def read_line(self, deadline: float) -> bytes:
        while b"\n" not in self.buffer:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise BackendTimeoutError("timed out waiting for response")
            if not self.selector.select(timeout=remaining):
                raise BackendTimeoutError("timed out waiting for response")
            chunk = os.read(self.proc.stdout.fileno(), 65536)
            if not chunk:
                raise ProtocolError("server closed its pipe", self.buffer.decode("utf-8", "replace"))
            self.buffer += chunk
        line, _, self.buffer = self.buffer.partition(b"\n")
        return line

    def close(self) -> None:
        try:
            self.proc.stdin.close()
        except OSError:
            pass
        self.proc.terminate()
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self.proc.kill()
        self.selector.close()


class RemoteBackend:
    """Bridge protocol client with pipelined requests matched by id."""

    def __init__(self, endpoint: str | None = None, command: tuple[str, ...] | None = None,
                 timeout_s: float = DEFAULT_TIMEOUT_S, max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
                 model_name: str = "remote"):
        if bool(endpoint) == bool(command):
            raise ValueError("need exactly one of endpoint or command")
        self.endpoint = endpoint
        self.command = tuple(command) if command else None
        self.timeout_s = timeout_s
        self.max_in_flight = max_in_flight
        self.model_name = model_name
        self._channel = None
        self._next_id = 1

    def _ensure_channel(self):
        if self._channel is None:
            if self.endpoint:
                self._channel = _SocketChannel(self.endpoint, self.timeout_s)
            else:
                self._channel = _ProcessChannel(self.command)
        return self._channel

    def close(self) -> None:
        if self._channel is not None:
            self._channel.close()
            self._channel = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

    def _send(self, obj: dict) -> None:
        self._ensure_channel().send_line((json.dumps(obj) + "\n").encode("utf-8"))

    def _read_response(self, pending: set[int], deadline: float) -> tuple[int, dict]:
        line = self._ensure_channel().read_line(deadline)
        text = line.decode("utf-8", "replace")
        try:
            obj = json.loads(text)
        except json.JSONDecodeError:
            raise ProtocolError("malformed response line", text) from None
        if not isinstance(obj, dict) or not isinstance(obj.get("id"), int):
            raise ProtocolError("response missing integer id", text)
        if obj["id"] not in pending:
            raise ProtocolError(f"response id {obj['id']} does not match any pending request", text)
        return obj["id"], obj

    @staticmethod
    def _extract_text(obj: dict, raw: str = "") -> str:
        has_text, has_error = "text" in obj, "error" in obj
        if has_text == has_error:
            raise ProtocolError("response must carry exactly one of text/error", raw or json.dumps(obj))
        if has_error:
            raise BackendError(f"remote error: {obj['error']}")
        if not isinstance(obj["text"], str):
            raise ProtocolError("text field must be a string", raw or json.dumps(obj))
        return obj["text"]

    def classify(self, wav_path, prompt: str, constrained: bool = False) -> str:
        # constrained decoding is a local-model concept; remote models return text
        request_id = self._next_id
        self._next_id += 1
        self._send({"id": request_id, "wav_path": str(wav_path), "prompt": prompt,
                    "max_new_tokens": evaluation.MAX_NEW_TOKENS})
        deadline = time.monotonic() + self.timeout_s
        _, obj = self._read_response({request_id}, deadline)
        return self._extract_text(obj)

    def classify_many(self, items: list[tuple[str, str]]) -> list[str]:
        """Pipelined classification; results returned in request order."""
        results: dict[int, str] = {}
        pending: dict[int, int] = {}  # request id -> item index
        cursor = 0
        while len(results) < len(items):
            while cursor < len(items) and len(pending) < self.max_in_flight:
                wav_path, prompt = items[cursor]
                request_id = self._next_id
                self._next_id += 1
                self._send({"id": request_id, "wav_path": str(wav_path), "prompt": prompt,
                            "max_new_tokens": evaluation.MAX_NEW_TOKENS})
                pending[request_id] = cursor
                cursor += 1
            deadline = time.monotonic() + self.timeout_s
            response_id, obj = self._read_response(set(pending), deadline)
            results[pending.pop(response_id)] = self._extract_text(obj)
        return [results[i] for i in range(len(items))]

    def ping(self) -> dict:
        request_id = self._next_id
        self._next_id += 1
        self._send({"id": request_id, "ping": True})
        deadline = time.monotonic() + self.timeout_s
        _, obj = self._read_response({request_id}, deadline)
        if not obj.get("pong"):
            raise ProtocolError("ping did not return pong", json.dumps(obj))
        return obj


def make_backend(descriptor: BackendDescriptor):
    if descriptor.kind == "local":
        return LocalBackend.from_checkpoint(
            descriptor.checkpoint, descriptor.adapter, descriptor.model_name or None
        )
    return RemoteBackend(
        endpoint=descriptor.endpoint,
        command=descriptor.command,
        timeout_s=descriptor.timeout_s,
        model_name=descriptor.model_name or "remote",
    )


def healthcheck(descriptor: BackendDescriptor) -> tuple[str, str | None]:
    """Probe a backend: 'ready', 'degraded', or 'down' plus the model name."""
    if descriptor.kind == "local":
        try:
            load_checkpoint(descriptor.checkpoint)
        except Exception:
            return "down", None
        return "ready", descriptor.model_name or "toy-local"
    backend = None
    try:
        backend = make_backend(descriptor)
        pong = backend.ping()
    except BackendError:
        return "down", None
    finally:
        if backend is not None:
            backend.close()
    name = pong.get("model") if isinstance(pong.get("model"), str) else None
    if pong.get("degraded"):
        return "degraded", name
    return "ready", name
