"""Local chat-completion stub server for offline tests and demos.

Implements the wire protocol of :mod:`exsearch.llm` on 127.0.0.1 so every
network path (retries, stop handling, log-probability scoring) is exercised
without a live model. Behaviors:

* :class:`ScriptedBehavior` replays a fixed response sequence verbatim;
* :class:`ChainOracleBehavior` acts as a rule-based search agent over
  synthetic chain questions ("ent7 rel2 rel0"), reading injected search
  results and emitting well-formed THINK/RECORD/FINAL segments;
* :class:`FlakyBehavior` prefixes any behavior with scripted HTTP statuses.
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Sequence

Responder = Callable[[dict], tuple[int, dict]]

_FIRST_DOC_RE = re.compile(r"\[1\] Title: .*? Content: (.*?)(?= \[\d+\] Title: |$)")
_RECORD_LINE_RE = re.compile(r"<RECORD>[ \t]*(.*)")


def chat_response(content: str, logprobs: list[dict] | None = None) -> dict:
    choice: dict = {"message": {"role": "assistant", "content": content}}
    if logprobs is not None:
        choice["logprobs"] = {"content": logprobs}
    return {"choices": [choice]}


def _truncate_at_stops(text: str, stops: Sequence[str]) -> str:
    cut = len(text)
    for stop in stops:
        idx = text.find(stop)
        if idx != -1:
            cut = min(cut, idx)
    return text[:cut]


@dataclass
class ScriptedBehavior:
    """Replay canned responses in order; each item is a str or a dict
    {"status": int, "content": str, "logprobs": [...]?}."""

    script: list
    index: int = 0

    def __call__(self, request: dict) -> tuple[int, dict]:
        if self.index >= len(self.script):
            return 500, {"error": "scripted stub exhausted"}
        item = self.script[self.index]
        self.index += 1
        if isinstance(item, str):
            return 200, chat_response(item)
        status = item.get("status", 200)
        if status != 200:
            return status, {"error": f"scripted status {status}"}
        return 200, chat_response(item.get("content", ""), item.get("logprobs"))


@dataclass
class FlakyBehavior:
    """Answer with scripted HTTP statuses before delegating to ``inner``."""

    statuses: list[int]
    inner: Responder

    def __call__(self, request: dict) -> tuple[int, dict]:
        if self.statuses:
            status = self.statuses.pop(0)
            if status != 200:
                return status, {"error": f"flaky status {status}"}
        return self.inner(request)


@dataclass
class ChainOracleBehavior:
    """Deterministic search agent over synthetic chain questions.

    Reads the question's relation sequence from the user turn, records the
    object of the top injected document at each hop, and answers with the
    last recorded evidence. Scoring requests are answered from
    ``logprob_table`` (per whitespace token, ``default_logprob`` otherwise)
    unless ``logprobs_enabled`` is off.
    """

    logprob_table: dict[str, float] = field(default_factory=dict)
    default_logprob: float = -0.5
    logprobs_enabled: bool = True
    honor_stops: bool = True

    @staticmethod
    def _question(request: dict) -> str:
        for message in request.get("messages", []):
            if message.get("role") == "user":
                m = re.search(r"<USER QUERY>[ \t]*(.*)", message["content"])
                if m:
                    return m.group(1).strip()
        return ""

    @staticmethod
    def _partial(request: dict) -> str:
        partial = ""
        for message in request.get("messages", []):
            if message.get("role") == "assistant":
                partial = message["content"]
        return partial

    def _score(self, target: str) -> tuple[int, dict]:
        if not self.logprobs_enabled:
            return 200, chat_response(target)
        logprobs = [
            {"token": tok, "logprob": self.logprob_table.get(tok, self.default_logprob)}
            for tok in target.split()
        ]
        return 200, chat_response(target, logprobs)

    def __call__(self, request: dict) -> tuple[int, dict]:
        if "score_completion" in request:
            return self._score(request["score_completion"])

        question = self._question(request)
        tokens = question.split()
        relations = tokens[1:]
        partial = self._partial(request)
        lines = [ln for ln in partial.splitlines() if ln.strip()]
        last = lines[-1].strip() if lines else ""
        search_lines = [ln for ln in lines if ln.strip().startswith("<SEARCH>")]
        n_records = sum(1 for ln in lines if ln.strip().startswith("<RECORD>"))

        if partial.rstrip().endswith("<FINAL>"):
            records = _RECORD_LINE_RE.findall(partial)
            answer = records[-1].strip() if records else "unknown"
            text = f" {answer}\n"
        elif last == "<RANK>":
            text = " " + " > ".join(f"[{i}]" for i in range(1, 4)) + "\n"
        elif len(search_lines) > n_records:
            hop = len(search_lines)
            doc = _FIRST_DOC_RE.search(search_lines[-1])
            obj = doc.group(1).split()[-1] if doc and doc.group(1).split() else "unknown"
            if hop < len(relations):
                text = f"<RECORD> {obj}\n<THINK> {obj} {relations[hop]}\n<SEARCH>"
            else:
                text = f"<RECORD> {obj}\n<FINAL>"
        elif not lines:
            start = tokens[0] if tokens else "unknown"
            first_rel = relations[0] if relations else ""
            text = f"<THINK> {start} {first_rel}\n<SEARCH>"
        else:
            text = "<FINAL>"

        if self.honor_stops:
            text = _truncate_at_stops(text, request.get("stop", []))
        return 200, chat_response(text)


class StubChatServer:
    """Threaded HTTP server speaking the chat-completion protocol."""

    def __init__(self, behavior: Responder):
        self.behavior = behavior
        self._lock = threading.Lock()
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):  # noqa: N802 (http.server API)
                length = int(self.headers.get("Content-Length", 0))
                try:
                    request = json.loads(self.rfile.read(length) or b"{}")
                except json.JSONDecodeError:
                    request = {}
                with outer._lock:
                    status, body = outer.behavior(request)
                payload = json.dumps(body).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def base_url(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}/v1"

    def __enter__(self) -> "StubChatServer":
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self._server.shutdown()
        self._server.server_close()
