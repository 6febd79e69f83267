"""HTTP chat-completion client and the chat-driven policy built on it.

The engine, not the model, executes retrieval: generation is driven
turn-by-turn with stop sequences at the search and final-answer tags, and
retrieved documents are injected into the running transcript between
generations. The wire protocol is the de-facto open chat-completion shape:

    request  {"model", "messages": [{"role", "content"}, ...],
              "max_tokens", "stop": [...], "logprobs"?: bool,
              "score_completion"?: str}
    response {"choices": [{"message": {"role", "content"},
                           "logprobs"?: {"content": [{"token", "logprob"}]}}]}

A trailing assistant message is treated as a prefix the model continues.
``score_completion`` requests per-token log-probabilities of the given text
conditioned on the messages; servers without log-probability support simply
omit the ``logprobs`` field, which surfaces as LogprobsUnsupported here.
"""

from __future__ import annotations

import os
import random
import re
import threading
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import requests

from .errors import AuthError, EndpointError, LogprobsUnsupported, NoDocuments, Timeout
from .policy import PolicyDecision, PolicyState
from .trajectory import FINAL_VARIANTS, SEARCH, Passage, Trajectory, render_transcript

DEFAULT_API_KEY_ENV = "EXSEARCH_API_KEY"

SYSTEM_PROMPT = """You are an intelligent search agent capable of simulating a question-answering process by actively seeking information from Wikipedia to answer a given question.

Specifically, given an open-domain query, please iteratively: (1) Formulate a sub-query to search on Wikipedia; (2) Select useful documents from the search results and (3) Extract supporting facts from the selected documents.
Your output should include three types of special actions corresponding to the above steps:
(1) <THINK>: Formulate a sub-query.
(2) <SEARCH>: Retrieve and carefully read the documents using the formulated sub-query.
(3) <RECORD>: Extract the answer to the sub-query from the documents.

Since this is a multi-hop question, your output should interleave <THINK>, <SEARCH> and <RECORD> actions until reaching the final answer. Conclude your output with the special token <FINIAL> followed by the final answer."""

USER_TURN_TEMPLATE = """Below is the task for you to complete:

<USER QUERY> {question}
Your Output:"""

# The tag grammar tolerates all final-token spellings the prompt and parser
# know about, so generation halts wherever the model announces its answer.
GENERATION_STOPS = [SEARCH, *FINAL_VARIANTS]

_THINK_RE = re.compile(r"<THINK>[ \t]*(.+)")
_RECORD_RE = re.compile(r"<RECORD>[ \t]*(.*)")


def build_system_prompt() -> str:
    """The static instruction block sent as the system turn."""
    return SYSTEM_PROMPT


def build_user_turn(question: str) -> str:
    """The task block sent as the user turn."""
    return USER_TURN_TEMPLATE.format(question=question)


@dataclass(frozen=True)
class ChatTurn:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown chat role {self.role!r}")
        if self.role in ("system", "user") and not self.content:
            raise ValueError(f"{self.role} turn must have content")


@dataclass
class EndpointConfig:
    """Connection settings for one chat-completion endpoint."""

    base_url: str
    model_name: str
    api_key_env: str = DEFAULT_API_KEY_ENV
    timeout: float = 30.0
    max_retries: int = 3
    parallelism_cap: int = 4
    supports_logprobs: str = "probe"  # yes | no | probe
    backoff_base: float = 1.0

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.parallelism_cap < 1:
            raise ValueError("parallelism_cap must be >= 1")
        if self.supports_logprobs not in ("yes", "no", "probe"):
            raise ValueError("supports_logprobs must be yes, no or probe")


class HttpChatClient:
    """Thread-safe chat-completion client with bounded parallelism.

    Retries transport errors and HTTP 429/5xx with exponential backoff
    (factor 2 plus jitter) up to ``max_retries``; 401/403 raise AuthError
    immediately and are never retried. The resolved log-probability
    capability is cached write-once after the first probe.
    """

    def __init__(self, config: EndpointConfig):
        self.config = config
        self._session = requests.Session()
        self._slots = threading.BoundedSemaphore(config.parallelism_cap)
        self._probe_lock = threading.Lock()
        self._logprobs_ok: bool | None = {
            "yes": True, "no": False, "probe": None
        }[config.supports_logprobs]

    def _api_key(self) -> str:
        key = os.environ.get(self.config.api_key_env)
        if not key:
            raise AuthError(
                f"environment variable {self.config.api_key_env} is not set")
        return key

    def _request(self, payload: dict) -> dict:
        url = f"{self.config.base_url.rstrip('/')}/chat/completions"
        headers = {"Authorization": f"Bearer {self._api_key()}",
                   "Content-Type": "application/json"}
        attempts = self.config.max_retries + 1
        last_error: Exception | None = None
        timed_out = False
        for attempt in range(attempts):
            if attempt:
                delay = self.config.backoff_base * (2 ** (attempt - 1))
                time.sleep(delay * (1.0 + 0.1 * random.random()))
            try:
                with self._slots:
                    resp = self._session.post(url, json=payload, headers=headers,
                                              timeout=self.config.timeout)
            except requests.Timeout as exc:
                last_error, timed_out = exc, True
                continue
            except requests.RequestException as exc:
                last_error = exc
                continue
            if resp.status_code in (401, 403):
                raise AuthError(f"endpoint rejected credentials (HTTP {resp.status_code})")
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = EndpointError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                continue
            if resp.status_code != 200:
                raise EndpointError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise EndpointError(f"endpoint returned non-JSON body: {exc}") from exc
        if timed_out:
            raise Timeout(f"no response within {self.config.timeout}s "
                          f"after {attempts} attempts") from last_error
        raise EndpointError(
            f"request failed after {attempts} attempts: {last_error}") from last_error

    @staticmethod
    def _message(response: dict) -> dict:
        try:
            return response["choices"][0]["message"]
        except (KeyError, IndexError, TypeError) as exc:
            raise EndpointError(f"malformed endpoint response: {response!r}") from exc

    def complete(self, turns: Sequence[ChatTurn], stop_sequences: Sequence[str],
                 max_tokens: int = 512) -> str:
        """Run one generation and return the assistant text."""
        payload = {
            "model": self.config.model_name,
            "messages": [{"role": t.role, "content": t.content} for t in turns],
            "max_tokens": max_tokens,
            "stop": list(stop_sequences),
        }
        message = self._message(self._request(payload))
        content = message.get("content")
        if content is None:
            raise EndpointError("endpoint response carries no message content")
        return content

    def _score_request(self, turns: Sequence[ChatTurn], target: str) -> list[float]:
        payload = {
            "model": self.config.model_name,
            "messages": [{"role": t.role, "content": t.content} for t in turns],
            "max_tokens": 0,
            "logprobs": True,
            "score_completion": target,
        }
        response = self._request(payload)
        message = self._message(response)
        logprobs = response["choices"][0].get("logprobs") or message.get("logprobs")
        if not logprobs or "content" not in logprobs:
            raise LogprobsUnsupported(
                f"endpoint {self.config.base_url} reports no token log-probabilities")
        return [float(item["logprob"]) for item in logprobs["content"]]

    def _ensure_logprobs(self, turns: Sequence[ChatTurn], target: str) -> list[float]:
        if self._logprobs_ok is False:
            raise LogprobsUnsupported("endpoint is configured without logprobs support")
        if self._logprobs_ok is None:
            with self._probe_lock:
                if self._logprobs_ok is None:
                    try:
                        scores = self._score_request(turns, target)
                    except LogprobsUnsupported:
                        self._logprobs_ok = False
                        raise
                    self._logprobs_ok = True
                    return scores
        return self._score_request(turns, target)

    def score_answer_logprob(self, question: str, trajectory: Trajectory,
                             y: str) -> float:
        """Sum of token log-probs of ``y`` conditioned on the rendered transcript."""
        context = render_transcript(trajectory)
        turns = [
            ChatTurn("system", build_system_prompt()),
            ChatTurn("user", build_user_turn(question)),
            ChatTurn("assistant", context + ("\n" if context else "") + "<FINAL>"),
        ]
        return sum(self._ensure_logprobs(turns, y))


@dataclass
class _EpisodeState:
    question: str
    assistant: str = ""
    pending_think: str | None = None
    finalizing: bool = False
    docs_injected: bool = False


class ChatPolicy:
    """Policy implementation that drives a chat endpoint per episode.

    Per-decision log-probabilities are not observable over the wire and are
    reported as 0.0; answer likelihoods for importance weighting come from
    :meth:`score_answer` instead.
    """

    def __init__(self, client: HttpChatClient, max_tokens: int = 512):
        self.client = client
        self.max_tokens = max_tokens
        self._episode: _EpisodeState | None = None

    def begin_episode(self, question: str) -> None:
        self._episode = _EpisodeState(question=question)

    def _state(self) -> _EpisodeState:
        if self._episode is None:
            raise RuntimeError("begin_episode() was not called")
        return self._episode

    def _turns(self) -> list[ChatTurn]:
        ep = self._state()
        turns = [
            ChatTurn("system", build_system_prompt()),
            ChatTurn("user", build_user_turn(ep.question)),
        ]
        if ep.assistant:
            turns.append(ChatTurn("assistant", ep.assistant))
        return turns

    def _generate(self, stop: Sequence[str], max_tokens: int | None = None) -> str:
        return self.client.complete(self._turns(), stop,
                                    max_tokens or self.max_tokens)

    def _append(self, text: str) -> None:
        ep = self._state()
        if ep.assistant and not ep.assistant.endswith("\n") and text and not text.startswith("\n"):
            ep.assistant += "\n"
        ep.assistant += text

    def propose_subquery(self, state: PolicyState,
                         rng: np.random.Generator) -> PolicyDecision:
        ep = self._state()
        if ep.finalizing:
            return PolicyDecision(choice=None, log_prob=0.0)
        if ep.pending_think is not None:
            sub_query, ep.pending_think = ep.pending_think, None
            return PolicyDecision(choice=sub_query, log_prob=0.0)
        text = self._generate(GENERATION_STOPS)
        self._append(text)
        thinks = _THINK_RE.findall(text)
        if not thinks:
            ep.finalizing = True
            return PolicyDecision(choice=None, log_prob=0.0)
        return PolicyDecision(choice=thinks[-1].strip(), log_prob=0.0)

    def _docs_line(self, documents: Sequence[Passage]) -> str:
        def flat(text: str) -> str:
            return " ".join(text.split())

        rendered = " ".join(
            f"[{i}] Title: {flat(doc.title)}. Content: {flat(doc.text)}"
            for i, doc in enumerate(documents, 1))
        return f"<SEARCH> {rendered}\n"

    def rank_directive(self, sub_query: str, documents: Sequence[Passage],
                       keep: int) -> str:
        ep = self._state()
        self._append(self._docs_line(documents))
        ep.docs_injected = True
        self._append("<RANK>")
        text = self._generate(["\n"], max_tokens=64)
        self._append(f" {text.strip()}\n")
        return text.strip()

    def extract_evidence(self, state: PolicyState, sub_query: str,
                         documents: Sequence[Passage],
                         rng: np.random.Generator) -> PolicyDecision:
        if not documents:
            raise NoDocuments("cannot extract evidence from an empty document list")
        ep = self._state()
        if not ep.docs_injected:
            self._append(self._docs_line(documents))
        ep.docs_injected = False
        text = self._generate(GENERATION_STOPS)
        self._append(text)
        record = _RECORD_RE.search(text)
        evidence = record.group(1).strip() if record else ""
        thinks = _THINK_RE.findall(text)
        if thinks:
            ep.pending_think = thinks[-1].strip()
        else:
            ep.finalizing = True
        return PolicyDecision(choice=evidence, log_prob=0.0)

    def answer(self, question: str, trajectory: Trajectory,
               rng: np.random.Generator) -> PolicyDecision:
        # Answer aggregation conditions on the canonical transcript (all
        # steps: sub-queries, citations, evidence) rather than the raw
        # generation context with full document bodies.
        ep = self._state()
        context = render_transcript(trajectory)
        ep.assistant = context + ("\n" if context else "") + "<FINAL>"
        text = self._generate(["\n"], max_tokens=64)
        self._append(text)
        return PolicyDecision(choice=text.strip(), log_prob=0.0)

    def score_answer(self, question: str, trajectory: Trajectory, y: str) -> float:
        return self.client.score_answer_logprob(question, trajectory, y)
