"""Trajectory data structures, the textual action grammar, and JSONL serialization.

A trajectory is the ordered record of one search episode: per hop a sub-query,
the retrieved passages, and the evidence extracted from them, plus a terminal
answer. Transcripts encode trajectories as one action per line using the tags
<THINK>, <SEARCH>, <RECORD>, <RANK> and <FINAL> (UTF-8, LF line endings).
``<Final>`` and ``<FINIAL>`` are accepted as spellings of ``<FINAL>`` on parse
and canonicalized on render.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator

from .errors import MalformedAction, SchemaError

THINK = "<THINK>"
SEARCH = "<SEARCH>"
RECORD = "<RECORD>"
RANK = "<RANK>"
FINAL = "<FINAL>"
FINAL_VARIANTS = (FINAL, "<Final>", "<FINIAL>")

_CITATION_RE = re.compile(r"\[(\d+)\]")
_OUTPUT_RE = re.compile(r"^Output:\s*(.*)$")


@dataclass(frozen=True)
class Passage:
    """One retrievable unit of text."""

    id: str
    title: str
    text: str
    extras: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.id:
            raise ValueError("passage id must be non-empty")
        if not self.text:
            raise ValueError(f"passage {self.id!r} has empty text")


@dataclass(frozen=True)
class ScoredPassage:
    """A passage reference inside one retrieval result."""

    passage_ref: str
    score: float
    rank: int


@dataclass(frozen=True)
class Step:
    """One hop of a trajectory: sub-query, retrieval result, evidence.

    ``selected`` holds the re-ranked subset of retrieved passage ids when the
    document-selection action is enabled, in selection order.
    """

    sub_query: str
    retrieved: tuple[ScoredPassage, ...]
    selected: tuple[str, ...] | None
    evidence: str
    hop: int

    def __post_init__(self):
        if self.hop < 1:
            raise ValueError("hop indices are 1-based")
        if "\n" in self.sub_query or "\n" in self.evidence:
            raise ValueError("sub-query and evidence must be single-line "
                             "(the transcript grammar is line-based)")
        ranks = [sp.rank for sp in self.retrieved]
        if ranks != list(range(1, len(ranks) + 1)):
            raise ValueError("retrieved ranks must be 1..K without gaps")
        scores = [sp.score for sp in self.retrieved]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError("retrieved scores must be non-increasing in rank")
        if self.selected is not None:
            ids = {sp.passage_ref for sp in self.retrieved}
            missing = [pid for pid in self.selected if pid not in ids]
            if missing:
                raise ValueError(f"selected ids not among retrieved: {missing}")


@dataclass(frozen=True)
class Trajectory:
    """A full episode: question, ordered steps, and the step budget."""

    question: str
    steps: tuple[Step, ...]
    terminated: bool
    budget: int

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("budget must be positive")
        if len(self.steps) > self.budget:
            raise ValueError("trajectory exceeds its step budget")
        hops = [s.hop for s in self.steps]
        if hops != list(range(1, len(hops) + 1)):
            raise ValueError("step hops must be 1..n in order")

    @property
    def last_evidence(self) -> str:
        return self.steps[-1].evidence if self.steps else ""


WEIGHT_MODES = ("posterior-logprob", "reward-em", "reward-acc", "reward-f1")


@dataclass(frozen=True)
class WeightedTrajectory:
    """A trajectory with its candidate answer and importance weight.

    ``log_weight`` is the raw (log-domain) weight; ``weight`` is the softmax-
    normalized value within the example's sample set and lies in [0, 1].
    """

    trajectory: Trajectory
    answer: str
    log_weight: float
    weight: float
    weight_mode: str
    extras: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not (0.0 <= self.weight <= 1.0):
            raise ValueError(f"normalized weight {self.weight} outside [0, 1]")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"unknown weight mode {self.weight_mode!r}")


@dataclass(frozen=True)
class Example:
    """A question with its gold answers and optional search annotations."""

    id: str
    question: str
    gold_answers: tuple[str, ...]
    gold_passages: tuple[str, ...] | None = None
    gold_subqueries: tuple[str, ...] | None = None
    gold_evidences: tuple[str, ...] | None = None
    extras: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.gold_answers:
            raise ValueError(f"example {self.id!r} has no gold answers")


@dataclass(frozen=True)
class ParsedStep:
    """One hop recovered from a transcript: citations only, no scores."""

    sub_query: str
    citations: tuple[int, ...]
    evidence: str
    rank_directive: str | None = None


@dataclass(frozen=True)
class ParsedTranscript:
    """Skeleton recovered by :func:`parse_transcript`.

    ``skipped_lines`` counts non-empty lines outside the action grammar.
    """

    steps: tuple[ParsedStep, ...]
    answer: str | None
    skipped_lines: int


def step_citations(step: Step) -> tuple[int, ...]:
    """Citation numbers for a step: ranks of selected ids, else all ranks."""
    if step.selected is not None:
        by_id = {sp.passage_ref: sp.rank for sp in step.retrieved}
        return tuple(by_id[pid] for pid in step.selected)
    return tuple(sp.rank for sp in step.retrieved)


def _action_line(tag: str, payload: str) -> str:
    return f"{tag} {payload}" if payload else tag


def render_transcript(trajectory: Trajectory, answer: str | None = None) -> str:
    """Render a trajectory as canonical transcript text.

    One line per action; <SEARCH> lines cite passages as "[n]" where n is the
    1-based rank within the step's retrieval result (only the selected subset
    is cited when present). Closes with <FINAL> when an answer is given.
    """
    lines = []
    for step in trajectory.steps:
        lines.append(_action_line(THINK, step.sub_query))
        cites = " ".join(f"[{n}]" for n in step_citations(step))
        lines.append(_action_line(SEARCH, cites))
        lines.append(_action_line(RECORD, step.evidence))
    if answer is not None:
        lines.append(_action_line(FINAL, answer))
    return "\n".join(lines)


def render_parsed(parsed: ParsedTranscript) -> str:
    """Render a parsed skeleton back to canonical transcript text."""
    lines = []
    for step in parsed.steps:
        lines.append(_action_line(THINK, step.sub_query))
        cites = " ".join(f"[{n}]" for n in step.citations)
        lines.append(_action_line(SEARCH, cites))
        if step.rank_directive is not None:
            lines.append(_action_line(RANK, step.rank_directive))
        lines.append(_action_line(RECORD, step.evidence))
    if parsed.answer is not None:
        lines.append(_action_line(FINAL, parsed.answer))
    return "\n".join(lines)


def _match_tag(line: str) -> tuple[str, str] | None:
    for tag in (THINK, SEARCH, RECORD, RANK) + FINAL_VARIANTS:
        if line == tag or line.startswith(tag + " "):
            canonical = FINAL if tag in FINAL_VARIANTS else tag
            return canonical, line[len(tag):].strip()
    return None


def parse_transcript(text: str) -> ParsedTranscript:
    """Parse transcript text into a trajectory skeleton and final answer.

    Retrieval results are reconstructed from cited "[n]" numbers only; scores
    are not recoverable. Lines outside the grammar are skipped and counted.
    A bare <FINAL> recovers its answer from a later "Output: ..." line when
    present (model output sometimes defers the answer); <THINK> and <RANK>
    with no payload raise MalformedAction.
    """
    steps: list[ParsedStep] = []
    skipped = 0
    answer: str | None = None
    final_seen = False
    current: dict[str, Any] | None = None

    def close_current():
        nonlocal current
        if current is not None:
            steps.append(
                ParsedStep(
                    sub_query=current["sub_query"],
                    citations=tuple(current["citations"]),
                    evidence=current["evidence"],
                    rank_directive=current["rank"],
                )
            )
            current = None

    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        matched = _match_tag(line)
        if final_seen:
            if answer is None and matched is None:
                m = _OUTPUT_RE.match(line)
                if m:
                    answer = m.group(1).strip()
                    continue
            skipped += 1
            continue
        if matched is None:
            skipped += 1
            continue
        tag, payload = matched
        if tag == THINK:
            if not payload:
                raise MalformedAction("<THINK> without a sub-query")
            close_current()
            current = {"sub_query": payload, "citations": [], "evidence": "", "rank": None,
                       "searched": False, "recorded": False}
        elif tag == SEARCH:
            if current is None or current["searched"]:
                skipped += 1
            else:
                current["searched"] = True
                current["citations"] = [int(n) for n in _CITATION_RE.findall(payload)]
        elif tag == RANK:
            if not payload:
                raise MalformedAction("<RANK> without a ranking")
            if current is None or current["rank"] is not None:
                skipped += 1
            else:
                current["rank"] = payload
        elif tag == RECORD:
            if current is None:
                skipped += 1
            else:
                current["evidence"] = payload
                close_current()
        elif tag == FINAL:
            close_current()
            final_seen = True
            if payload:
                answer = payload

    close_current()
    if final_seen and answer is None:
        answer = ""
    return ParsedTranscript(steps=tuple(steps), answer=answer, skipped_lines=skipped)


def repeated_subquery_hops(steps: Iterable[ParsedStep] | Iterable[Step]) -> tuple[int, ...]:
    """Hop numbers (1-based) whose sub-query occurs more than once."""
    queries = [s.sub_query for s in steps]
    dup = {q for q in queries if queries.count(q) > 1}
    return tuple(i for i, q in enumerate(queries, 1) if q in dup)


# --- JSONL serialization -----------------------------------------------------
#
# Schemas (one JSON object per line):
#   passage    {"id", "title", "text"}
#   example    {"id", "question", "answers": [...],
#               "gold_passages": [...]?, "gold_subqueries": [...]?,
#               "gold_evidences": [...]?}
#   trajectory {"id", "question", "steps": [{"sub_query",
#               "retrieved": [{"id", "score", "rank"}], "selected": [...]?,
#               "evidence"}], "answer"?, "budget", "terminated"}
#   weighted   trajectory fields plus {"log_weight", "weight", "weight_mode"}
#
# Unknown fields are preserved opaquely on read-then-write.


@dataclass(frozen=True)
class TrajectoryRecord:
    """A trajectory as stored on disk: id, episode, candidate answer."""

    id: str
    trajectory: Trajectory
    answer: str | None = None
    extras: dict = field(default_factory=dict, compare=False)


def _require(record: dict, fields: Iterable[str], line: int | None) -> None:
    for name in fields:
        if name not in record:
            raise SchemaError(f"record missing required field {name!r}", line)


def passage_to_dict(p: Passage) -> dict:
    return {"id": p.id, "title": p.title, "text": p.text, **p.extras}


def passage_from_dict(d: dict, line: int | None = None) -> Passage:
    _require(d, ("id", "title", "text"), line)
    extras = {k: v for k, v in d.items() if k not in ("id", "title", "text")}
    try:
        return Passage(id=d["id"], title=d["title"], text=d["text"], extras=extras)
    except (ValueError, TypeError) as exc:
        raise SchemaError(str(exc), line) from exc


_EXAMPLE_FIELDS = ("id", "question", "answers", "gold_passages", "gold_subqueries",
                   "gold_evidences")


def example_to_dict(e: Example) -> dict:
    d: dict[str, Any] = {"id": e.id, "question": e.question, "answers": list(e.gold_answers)}
    if e.gold_passages is not None:
        d["gold_passages"] = list(e.gold_passages)
    if e.gold_subqueries is not None:
        d["gold_subqueries"] = list(e.gold_subqueries)
    if e.gold_evidences is not None:
        d["gold_evidences"] = list(e.gold_evidences)
    d.update(e.extras)
    return d


def example_from_dict(d: dict, line: int | None = None) -> Example:
    _require(d, ("id", "question", "answers"), line)
    extras = {k: v for k, v in d.items() if k not in _EXAMPLE_FIELDS}

    def opt(name):
        return tuple(d[name]) if name in d and d[name] is not None else None

    try:
        return Example(
            id=d["id"],
            question=d["question"],
            gold_answers=tuple(d["answers"]),
            gold_passages=opt("gold_passages"),
            gold_subqueries=opt("gold_subqueries"),
            gold_evidences=opt("gold_evidences"),
            extras=extras,
        )
    except (ValueError, TypeError) as exc:
        raise SchemaError(str(exc), line) from exc


def _step_to_dict(s: Step) -> dict:
    d: dict[str, Any] = {
        "sub_query": s.sub_query,
        "retrieved": [{"id": sp.passage_ref, "score": sp.score, "rank": sp.rank}
                      for sp in s.retrieved],
        "evidence": s.evidence,
    }
    if s.selected is not None:
        d["selected"] = list(s.selected)
    return d


def _step_from_dict(d: dict, hop: int, line: int | None) -> Step:
    _require(d, ("sub_query", "retrieved", "evidence"), line)
    retrieved = []
    for r in d["retrieved"]:
        _require(r, ("id", "score", "rank"), line)
        retrieved.append(ScoredPassage(passage_ref=r["id"], score=float(r["score"]),
                                       rank=int(r["rank"])))
    selected = tuple(d["selected"]) if d.get("selected") is not None else None
    try:
        return Step(sub_query=d["sub_query"], retrieved=tuple(retrieved),
                    selected=selected, evidence=d["evidence"], hop=hop)
    except (ValueError, TypeError) as exc:
        raise SchemaError(str(exc), line) from exc


_TRAJECTORY_FIELDS = ("id", "question", "steps", "answer", "budget", "terminated")


def trajectory_record_to_dict(rec: TrajectoryRecord) -> dict:
    t = rec.trajectory
    d: dict[str, Any] = {
        "id": rec.id,
        "question": t.question,
        "steps": [_step_to_dict(s) for s in t.steps],
    }
    if rec.answer is not None:
        d["answer"] = rec.answer
    d["budget"] = t.budget
    d["terminated"] = t.terminated
    d.update(rec.extras)
    return d


def trajectory_record_from_dict(d: dict, line: int | None = None) -> TrajectoryRecord:
    _require(d, ("id", "question", "steps"), line)
    extras = {k: v for k, v in d.items() if k not in _TRAJECTORY_FIELDS}
    steps = tuple(_step_from_dict(s, hop, line) for hop, s in enumerate(d["steps"], 1))
    try:
        trajectory = Trajectory(
            question=d["question"],
            steps=steps,
            terminated=bool(d.get("terminated", True)),
            budget=int(d.get("budget", max(1, len(steps)))),
        )
    except (ValueError, TypeError) as exc:
        raise SchemaError(str(exc), line) from exc
    return TrajectoryRecord(id=d["id"], trajectory=trajectory,
                            answer=d.get("answer"), extras=extras)


_WEIGHTED_FIELDS = _TRAJECTORY_FIELDS + ("log_weight", "weight", "weight_mode")


def weighted_to_dict(rec_id: str, wt: WeightedTrajectory) -> dict:
    d = trajectory_record_to_dict(
        TrajectoryRecord(id=rec_id, trajectory=wt.trajectory, answer=wt.answer)
    )
    d["log_weight"] = wt.log_weight
    d["weight"] = wt.weight
    d["weight_mode"] = wt.weight_mode
    d.update(wt.extras)
    return d


def weighted_from_dict(d: dict, line: int | None = None) -> tuple[str, WeightedTrajectory]:
    _require(d, ("id", "question", "steps", "log_weight", "weight", "weight_mode"), line)
    base = trajectory_record_from_dict({k: v for k, v in d.items() if k in _TRAJECTORY_FIELDS},
                                       line)
    extras = {k: v for k, v in d.items() if k not in _WEIGHTED_FIELDS}
    try:
        wt = WeightedTrajectory(
            trajectory=base.trajectory,
            answer=d.get("answer", ""),
            log_weight=float(d["log_weight"]),
            weight=float(d["weight"]),
            weight_mode=d["weight_mode"],
            extras=extras,
        )
    except (ValueError, TypeError) as exc:
        raise SchemaError(str(exc), line) from exc
    return base.id, wt


def write_jsonl(path, records: Iterable[dict]) -> int:
    """Write dict records as line-delimited JSON; returns the record count."""
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False))
            fh.write("\n")
            n += 1
    return n


def iter_jsonl(path) -> Iterator[tuple[int, dict]]:
    """Yield (line_number, record) pairs; raises SchemaError on bad JSON."""
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", line_no) from exc
            if not isinstance(record, dict):
                raise SchemaError("record is not a JSON object", line_no)
            yield line_no, record


def read_passages_jsonl(path) -> list[Passage]:
    return [passage_from_dict(d, n) for n, d in iter_jsonl(path)]


def write_passages_jsonl(path, passages: Iterable[Passage]) -> int:
    return write_jsonl(path, (passage_to_dict(p) for p in passages))


def read_examples_jsonl(path) -> list[Example]:
    return [example_from_dict(d, n) for n, d in iter_jsonl(path)]


def write_examples_jsonl(path, examples: Iterable[Example]) -> int:
    return write_jsonl(path, (example_to_dict(e) for e in examples))


def read_trajectories_jsonl(path) -> list[TrajectoryRecord]:
    return [trajectory_record_from_dict(d, n) for n, d in iter_jsonl(path)]


def write_trajectories_jsonl(path, records: Iterable[TrajectoryRecord]) -> int:
    return write_jsonl(path, (trajectory_record_to_dict(r) for r in records))


def read_weighted_jsonl(path) -> list[tuple[str, WeightedTrajectory]]:
    return [weighted_from_dict(d, n) for n, d in iter_jsonl(path)]


def write_weighted_jsonl(path, items: Iterable[tuple[str, WeightedTrajectory]]) -> int:
    return write_jsonl(path, (weighted_to_dict(i, wt) for i, wt in items))
