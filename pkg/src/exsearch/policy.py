"""Decision-making interface behind the agent loop, and its exactly
tractable tabular implementation.

The tabular policy factors an episode into categorical decisions:

* a think head per hop over relations plus STOP, producing the sub-query
  "<current entity> <relation>" (current entity = last evidence, or the
  question's first token at hop 1);
* a record head over retrieved positions, whose outcome is the object
  entity (last token) of the chosen passage;
* an answer head over {copy the last evidence, abstain}.

Decisions are distributions over the *texts* they produce: positions that
yield the same evidence string pool their probability mass, so replayed
log-probabilities match sampled ones exactly. Because episodes are short
and heads are small, the trajectory space can be enumerated exhaustively,
which makes marginal likelihoods and posteriors computable in closed form
at desk scale.

Logits of -1e9 underflow to probability 0.0 exactly and such branches are
pruned from enumeration, so deterministic policies stay expressible with
finite logits.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import EnumerationTooLarge, NoDocuments, UnrealizableTrajectory
from .retrieval import Retriever, tokenize
from .trajectory import Example, Passage, Step, Trajectory

LOG_FLOOR = -1e9
ABSTAIN = "ABSTAIN"
PARAMS_VERSION = 1


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Numerically stable softmax; shift-invariant by construction."""
    scaled = np.asarray(logits, dtype=float) / temperature
    shifted = scaled - scaled.max()
    exps = np.exp(shifted)
    return exps / exps.sum()


def logsumexp(values: Iterable[float]) -> float:
    vals = list(values)
    if not vals:
        return LOG_FLOOR
    m = max(vals)
    return m + math.log(sum(math.exp(v - m) for v in vals))


@dataclass(frozen=True)
class PolicyDecision:
    """An action choice and its natural-log probability.

    ``choice`` is the produced payload (sub-query, evidence, or answer text);
    None encodes the STOP outcome of the think head.
    """

    choice: str | None
    log_prob: float


@dataclass(frozen=True)
class PolicyState:
    """Conditioning context for the next decision: question plus history."""

    question: str
    history: Trajectory
    hop: int

    def __post_init__(self):
        if self.hop != len(self.history.steps) + 1:
            raise ValueError("hop must equal len(history.steps) + 1")


@dataclass(eq=False)
class TabularPolicyParams:
    """Categorical logits for the think/record/answer heads.

    ``think_logits`` has one row per hop (rows 1..T+1; queries beyond the
    table reuse the last row) over relations in a fixed order plus a final
    STOP column. ``record_logits`` covers retrieved positions 1..K and is
    renormalized over however many documents a step actually has.
    ``answer_logits`` is the pair (copy last evidence, abstain).
    """

    think_logits: np.ndarray
    record_logits: np.ndarray
    answer_logits: np.ndarray
    temperature: float = 1.0

    def __post_init__(self):
        self.think_logits = np.asarray(self.think_logits, dtype=float)
        self.record_logits = np.asarray(self.record_logits, dtype=float)
        self.answer_logits = np.asarray(self.answer_logits, dtype=float)
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        for name, arr in (("think_logits", self.think_logits),
                          ("record_logits", self.record_logits),
                          ("answer_logits", self.answer_logits)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
        if self.think_logits.ndim != 2:
            raise ValueError("think_logits must be 2-D (hop rows x outcomes)")
        if self.answer_logits.shape != (2,):
            raise ValueError("answer_logits must have exactly two entries")

    @classmethod
    def uniform(cls, n_relations: int, budget: int, k: int,
                temperature: float = 1.0) -> "TabularPolicyParams":
        return cls(
            think_logits=np.zeros((budget + 1, n_relations + 1)),
            record_logits=np.zeros(k),
            answer_logits=np.zeros(2),
            temperature=temperature,
        )

    def allclose(self, other: "TabularPolicyParams", atol: float = 1e-12) -> bool:
        return (
            self.think_logits.shape == other.think_logits.shape
            and self.record_logits.shape == other.record_logits.shape
            and np.allclose(self.think_logits, other.think_logits, atol=atol)
            and np.allclose(self.record_logits, other.record_logits, atol=atol)
            and np.allclose(self.answer_logits, other.answer_logits, atol=atol)
            and abs(self.temperature - other.temperature) <= atol
        )

    def to_json_dict(self) -> dict:
        return {
            "think_logits": self.think_logits.tolist(),
            "record_logits": self.record_logits.tolist(),
            "answer_logits": self.answer_logits.tolist(),
            "temperature": self.temperature,
            "version": PARAMS_VERSION,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "TabularPolicyParams":
        return cls(
            think_logits=np.asarray(d["think_logits"], dtype=float),
            record_logits=np.asarray(d["record_logits"], dtype=float),
            answer_logits=np.asarray(d["answer_logits"], dtype=float),
            temperature=float(d.get("temperature", 1.0)),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "TabularPolicyParams":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def passage_object(passage: Passage) -> str:
    """The object entity of a fact passage (its last whitespace token)."""
    parts = passage.text.split()
    return parts[-1] if parts else ""


def question_start_entity(question: str) -> str:
    """Convention: a chain question's first whitespace token names the start entity."""
    tokens = question.split()
    return tokens[0] if tokens else ""


class TabularPolicy:
    """Tractable reference policy over a fixed relation vocabulary."""

    def __init__(self, params: TabularPolicyParams, relations: Sequence[str]):
        if params.think_logits.shape[1] != len(relations) + 1:
            raise ValueError(
                f"think head width {params.think_logits.shape[1]} does not match "
                f"{len(relations)} relations + STOP")
        self.params = params
        self.relations = tuple(relations)

    def with_params(self, params: TabularPolicyParams) -> "TabularPolicy":
        return TabularPolicy(params, self.relations)

    # -- per-head distributions ------------------------------------------------

    def think_probs(self, hop: int) -> np.ndarray:
        rows = self.params.think_logits.shape[0]
        row = self.params.think_logits[min(hop, rows) - 1]
        return softmax(row, self.params.temperature)

    def record_probs(self, n_docs: int) -> np.ndarray:
        logits = self.params.record_logits[:n_docs]
        if len(logits) < n_docs:
            raise UnrealizableTrajectory(
                f"{n_docs} retrieved documents exceed the record head size "
                f"{len(self.params.record_logits)}")
        return softmax(logits, self.params.temperature)

    def answer_probs(self) -> np.ndarray:
        return softmax(self.params.answer_logits, self.params.temperature)

    def _current_entity(self, state: PolicyState) -> str:
        if state.history.steps:
            return state.history.steps[-1].evidence
        return question_start_entity(state.question)

    def _answer_texts(self, trajectory: Trajectory) -> tuple[str, str]:
        return trajectory.last_evidence, ABSTAIN

    # -- decision sampling -----------------------------------------------------

    def propose_subquery(self, state: PolicyState, rng: np.random.Generator) -> PolicyDecision:
        probs = self.think_probs(state.hop)
        idx = int(rng.choice(len(probs), p=probs))
        if idx == len(self.relations):
            return PolicyDecision(choice=None, log_prob=math.log(probs[idx]))
        entity = self._current_entity(state)
        sub_query = f"{entity} {self.relations[idx]}"
        return PolicyDecision(choice=sub_query, log_prob=math.log(probs[idx]))

    def extract_evidence(self, state: PolicyState, sub_query: str,
                         documents: Sequence[Passage],
                         rng: np.random.Generator) -> PolicyDecision:
        if not documents:
            raise NoDocuments("cannot extract evidence from an empty document list")
        probs = self.record_probs(len(documents))
        idx = int(rng.choice(len(probs), p=probs))
        evidence = passage_object(documents[idx])
        mass = sum(p for p, doc in zip(probs, documents)
                   if passage_object(doc) == evidence)
        return PolicyDecision(choice=evidence, log_prob=math.log(mass))

    def answer(self, question: str, trajectory: Trajectory,
               rng: np.random.Generator) -> PolicyDecision:
        probs = self.answer_probs()
        texts = self._answer_texts(trajectory)
        idx = int(rng.choice(len(probs), p=probs))
        mass = sum(p for p, text in zip(probs, texts) if text == texts[idx])
        return PolicyDecision(choice=texts[idx], log_prob=math.log(mass))

    def score_answer(self, question: str, trajectory: Trajectory, y: str) -> float:
        """log of the probability mass the answer head assigns to exactly y.

        Returns the representable floor (-1e9) when y is outside the support,
        meaning this trajectory cannot produce y.
        """
        probs = self.answer_probs()
        texts = self._answer_texts(trajectory)
        mass = sum(p for p, text in zip(probs, texts) if text == y)
        return math.log(mass) if mass > 0.0 else LOG_FLOOR

    def score_answer_set(self, question: str, trajectory: Trajectory,
                         golds: Iterable[str]) -> float:
        """log mass on any of the gold answers (they are mutually exclusive texts)."""
        return logsumexp(self.score_answer(question, trajectory, g)
                         for g in dict.fromkeys(golds))

    # -- document selection (extension action) ---------------------------------

    def rank_directive(self, sub_query: str, documents: Sequence[Passage],
                       keep: int) -> str:
        """Emit a "[i] > [j] > ..." ordering preferring exact fact matches.

        Documents whose text starts with "<entity> <relation>" from the
        sub-query come first, then documents titled by the entity, then the
        retriever's order; ties keep the original order.
        """
        tokens = tokenize(sub_query)
        entity = tokens[0] if tokens else ""
        relation = tokens[1] if len(tokens) > 1 else ""

        def priority(doc: Passage) -> int:
            doc_tokens = tokenize(doc.text)
            if len(doc_tokens) >= 2 and doc_tokens[0] == entity and doc_tokens[1] == relation:
                return 2
            if tokenize(doc.title)[:1] == [entity]:
                return 1
            return 0

        order = sorted(range(len(documents)),
                       key=lambda i: (-priority(documents[i]), i))
        return " > ".join(f"[{i + 1}]" for i in order)

    # -- replay, enumeration, marginals -----------------------------------------

    def relation_of(self, sub_query: str, entity: str) -> str:
        prefix = f"{entity} "
        if not sub_query.startswith(prefix):
            raise UnrealizableTrajectory(
                f"sub-query {sub_query!r} does not extend entity {entity!r}")
        relation = sub_query[len(prefix):]
        if relation not in self.relations:
            raise UnrealizableTrajectory(f"unknown relation in sub-query {sub_query!r}")
        return relation

    def trajectory_log_prob(self, trajectory: Trajectory, retriever: Retriever,
                            answer: str | None = None) -> float:
        """Replay a trajectory: sum of per-decision log-probs (+ answer term).

        Raises UnrealizableTrajectory when the structure cannot arise under
        this policy and retriever (wrong sub-query shape, mismatched
        retrieval results, evidence absent from the retrieved documents).
        Zero-probability but structurally valid decisions contribute the
        -1e9 floor instead.
        """
        total = 0.0
        entity = question_start_entity(trajectory.question)
        for step in trajectory.steps:
            relation = self.relation_of(step.sub_query, entity)
            probs = self.think_probs(step.hop)
            p = probs[self.relations.index(relation)]
            total += math.log(p) if p > 0.0 else LOG_FLOOR

            expected = retriever.search(step.sub_query, max(1, len(step.retrieved)))
            got = [sp.passage_ref for sp in step.retrieved]
            want = [sp.passage_ref for sp in expected[:len(got)]] if got else []
            if got != want or (not got and expected):
                raise UnrealizableTrajectory(
                    f"retrieved set for {step.sub_query!r} disagrees with the retriever")

            if not step.retrieved:
                if step.evidence != "":
                    raise UnrealizableTrajectory(
                        "evidence recorded for a hop with no retrieved documents")
            else:
                if step.selected is not None:
                    docs = [retriever.get(pid) for pid in step.selected]
                else:
                    docs = retriever.resolve(step.retrieved)
                rec = self.record_probs(len(docs))
                matching = [p for p, doc in zip(rec, docs)
                            if passage_object(doc) == step.evidence]
                if not matching:
                    raise UnrealizableTrajectory(
                        f"evidence {step.evidence!r} not producible from the "
                        f"documents of hop {step.hop}")
                mass = sum(matching)
                total += math.log(mass) if mass > 0.0 else LOG_FLOOR
            entity = step.evidence

        if len(trajectory.steps) < trajectory.budget:
            probs = self.think_probs(len(trajectory.steps) + 1)
            p_stop = probs[len(self.relations)]
            total += math.log(p_stop) if p_stop > 0.0 else LOG_FLOOR

        if answer is not None:
            total += self.score_answer(trajectory.question, trajectory, answer)
        return total

    def enumeration_bound(self, budget: int, k: int) -> int:
        return ((len(self.relations) + 1) * max(1, k)) ** budget * 2

    def enumerate_trajectories(self, example: Example | str, retriever: Retriever,
                               budget: int, k: int,
                               cap: int = 1_000_000
                               ) -> list[tuple[Trajectory, str, float]]:
        """Exhaustively enumerate (trajectory, answer, joint log-prob) leaves.

        Leaves are mutually exclusive and probability-complete: their
        linear-domain probabilities sum to 1 (within float error). Branches
        of probability exactly 0 are pruned. The document-selection action
        is not part of the enumerated process.
        """
        question = example.question if isinstance(example, Example) else example
        bound = self.enumeration_bound(budget, k)
        if bound > cap:
            raise EnumerationTooLarge(bound, cap)

        leaves: list[tuple[Trajectory, str, float]] = []
        answer_probs = self.answer_probs()

        def emit(steps: tuple[Step, ...], logp: float) -> None:
            trajectory = Trajectory(question=question, steps=steps,
                                    terminated=True, budget=budget)
            masses: dict[str, float] = {}
            for p, text in zip(answer_probs, self._answer_texts(trajectory)):
                masses[text] = masses.get(text, 0.0) + float(p)
            for text, mass in masses.items():
                if mass > 0.0:
                    leaves.append((trajectory, text, logp + math.log(mass)))

        def recurse(steps: tuple[Step, ...], logp: float, entity: str, hop: int) -> None:
            if hop > budget:
                emit(steps, logp)
                return
            probs = self.think_probs(hop)
            p_stop = float(probs[len(self.relations)])
            if p_stop > 0.0:
                emit(steps, logp + math.log(p_stop))
            for idx, relation in enumerate(self.relations):
                p_rel = float(probs[idx])
                if p_rel == 0.0:
                    continue
                sub_query = f"{entity} {relation}"
                hits = retriever.search(sub_query, k)
                if not hits:
                    step = Step(sub_query=sub_query, retrieved=(), selected=None,
                                evidence="", hop=hop)
                    recurse(steps + (step,), logp + math.log(p_rel), "", hop + 1)
                    continue
                docs = retriever.resolve(hits)
                rec = self.record_probs(len(docs))
                masses: dict[str, float] = {}
                for p, doc in zip(rec, docs):
                    obj = passage_object(doc)
                    masses[obj] = masses.get(obj, 0.0) + float(p)
                for evidence, mass in masses.items():
                    if mass == 0.0:
                        continue
                    step = Step(sub_query=sub_query, retrieved=tuple(hits),
                                selected=None, evidence=evidence, hop=hop)
                    recurse(steps + (step,),
                            logp + math.log(p_rel) + math.log(mass),
                            evidence, hop + 1)

        recurse((), 0.0, question_start_entity(question), 1)
        return leaves

    def exact_marginal(self, example: Example | str, retriever: Retriever, y: str,
                       budget: int, k: int, cap: int = 1_000_000) -> float:
        """log sum over trajectories of p(z | x) * p(y | x, z), by enumeration."""
        leaves = self.enumerate_trajectories(example, retriever, budget, k, cap)
        terms = [lp for _t, answer, lp in leaves if answer == y]
        return logsumexp(terms)

    def exact_marginal_set(self, example: Example, retriever: Retriever,
                           budget: int, k: int, cap: int = 1_000_000) -> float:
        """Marginal log-probability of producing any gold answer."""
        golds = set(example.gold_answers)
        leaves = self.enumerate_trajectories(example, retriever, budget, k, cap)
        terms = [lp for _t, answer, lp in leaves if answer in golds]
        return logsumexp(terms)
