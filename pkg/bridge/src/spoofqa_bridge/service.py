"""The bridge service: newline-JSON requests over TCP or stdio.

Protocol v1:
  classify  {"id": n, "wav_path": "...", "prompt": "...", "max_new_tokens": k}
        ->  {"id": n, "text": "..."} | {"id": n, "error": "..."}
  ping      {"id": n, "ping": true}
        ->  {"id": n, "pong": true, "model": "<name>"[, "degraded": true]}

One malformed request line produces one error response (id null) and the
connection stays open. Classification is read-only with respect to audio
files. Requests on a connection are answered sequentially; concurrent
connections are serialized at the inference lock. Generated text is returned
byte-identical to the wrapped model's decoded output.
"""

from __future__ import annotations

import json
import socketserver
import sys
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from .policies import ReplyPolicy

DEFAULT_MAX_NEW_TOKENS = 64


@dataclass
class ServeConfig:
    model: str = "echo-mock"  # echo-mock | qwen2-audio | salmonn
    policy_spec: str = "fixed:bonafide"  # echo-mock only
    checkpoint: str | None = None
    device: str | None = None
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS
    prompt_catalog: str | None = None
    # fault-injection knobs for client testing (echo-mock)
    delay_s: float = 0.0
    garbage_every: int = 0  # emit one garbage line before every Nth response
    reorder_window: int = 1  # buffer k requests, answer them in reverse


class BridgeService:
    def __init__(self, cfg: ServeConfig, policy: ReplyPolicy | None = None):
        self.cfg = cfg
        self.policy = policy
        self.generator = None
        self.degraded_reason: str | None = None
        self.model_name = cfg.model
        self.inference_lock = threading.Lock()
        self.request_count = 0
        self.prompt_by_id: dict[str, str] = {}
        if cfg.prompt_catalog:
            self._load_catalog(cfg.prompt_catalog)
        if cfg.model == "echo-mock":
            if self.policy is None:
                from .policies import make_policy

                self.policy = make_policy(cfg.policy_spec)
        else:
            from .models import ModelLoadError, load_wrapper

            try:
                self.generator = load_wrapper(cfg.model, cfg.checkpoint, cfg.device)
                self.model_name = self.generator.model_id
            except ModelLoadError as exc:
                self.degraded_reason = str(exc)

    def _load_catalog(self, path: str) -> None:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        for template in doc.get("templates", []):
            texts = template.get("texts") or []
            if len(texts) == 1:
                self.prompt_by_id[template["id"]] = texts[0]

    def _resolve_prompt(self, prompt: str) -> str:
        # a bare template id ("P1") resolves to its catalog text
        return self.prompt_by_id.get(prompt, prompt)

    def _classify(self, wav_path: str, prompt: str, max_new_tokens: int) -> str:
        prompt = self._resolve_prompt(prompt)
        capped = max(1, min(max_new_tokens, self.cfg.max_new_tokens))
        with self.inference_lock:
            if self.policy is not None:
                return self.policy.reply(wav_path, prompt)
            return self.generator.generate(wav_path, prompt, capped)

    def handle_line(self, line: str) -> list[str]:
        """Map one request line to the response lines to emit."""
        self.request_count += 1
        try:
            request = json.loads(line)
        except json.JSONDecodeError:
            return [json.dumps({"id": None, "error": "malformed request line"})]
        if not isinstance(request, dict) or not isinstance(request.get("id"), int):
            return [json.dumps({"id": None, "error": "request must carry an integer id"})]
        request_id = request["id"]

        if request.get("ping"):
            pong = {"id": request_id, "pong": True, "model": self.model_name}
            if self.degraded_reason:
                pong["degraded"] = True
            return [json.dumps(pong)]

        if "wav_path" not in request or "prompt" not in request:
            return [json.dumps({"id": request_id, "error": "need wav_path and prompt"})]
        if self.degraded_reason:
            return [json.dumps({"id": request_id, "error": f"model unavailable: {self.degraded_reason}"})]
        try:
            text = self._classify(
                str(request["wav_path"]),
                str(request["prompt"]),
                int(request.get("max_new_tokens", self.cfg.max_new_tokens)),
            )
            response = json.dumps({"id": request_id, "text": text})
        except Exception as exc:  # one bad request must not kill the service
            response = json.dumps({"id": request_id, "error": f"{type(exc).__name__}: {exc}"})

        out = []
        if self.cfg.garbage_every and self.request_count % self.cfg.garbage_every == 0:
            out.append("!!! this line is not json !!!")
        if self.cfg.delay_s:
            time.sleep(self.cfg.delay_s)
        out.append(response)
        return out


class _ConnectionHandler(socketserver.StreamRequestHandler):
    def handle(self):
        service: BridgeService = self.server.service  # type: ignore[attr-defined]
        window: list[str] = []

        def emit(lines: list[str]) -> None:
            for line in lines:
                self.wfile.write(line.encode("utf-8") + b"\n")
            self.wfile.flush()

        while True:
            raw = self.rfile.readline()
            if not raw:
                break
            line = raw.decode("utf-8", "replace").strip()
            if not line:
                continue
            window.append(line)
            if len(window) >= max(1, service.cfg.reorder_window):
                pending = list(reversed(window)) if service.cfg.reorder_window > 1 else window
                window = []
                for item in pending:
                    emit(service.handle_line(item))
        for item in reversed(window) if service.cfg.reorder_window > 1 else window:
            emit(service.handle_line(item))


class BridgeServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


def serve_tcp(cfg: ServeConfig, host: str = "127.0.0.1", port: int = 0,
              ready_callback=None) -> None:
    """Run the TCP server until interrupted; announces the bound port."""
    service = BridgeService(cfg)
    with BridgeServer((host, port), _ConnectionHandler) as server:
        server.service = service  # type: ignore[attr-defined]
        bound = server.server_address[1]
        print(f"listening on {host}:{bound} model={service.model_name}"
              + (" (degraded)" if service.degraded_reason else ""), file=sys.stderr, flush=True)
        if ready_callback is not None:
            ready_callback(server, service)
        server.serve_forever()


def serve_stdio(cfg: ServeConfig) -> None:
    """Answer requests on stdin/stdout (one JSON object per line)."""
    service = BridgeService(cfg)
    window: list[str] = []

    def emit(lines: list[str]) -> None:
        for line in lines:
            sys.stdout.write(line + "\n")
        sys.stdout.flush()

    for raw in sys.stdin:
        line = raw.strip()
        if not line:
            continue
        window.append(line)
        if len(window) >= max(1, cfg.reorder_window):
            pending = list(reversed(window)) if cfg.reorder_window > 1 else window
            window = []
            for item in pending:
                emit(service.handle_line(item))
    for item in reversed(window) if cfg.reorder_window > 1 else window:
        emit(service.handle_line(item))
