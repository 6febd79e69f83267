"""Self-training loop: trajectory exploration with importance weights,
re-weighted closed-form updates for the tabular policy, likelihood/ELBO
tracking, early stopping, and weighted training-data export.

Each iteration explores trajectories under the current policy (sampled
episodes, or exhaustive enumeration when the world is small enough), weights
them by how well they support the gold answer, and refits the policy's
categorical heads on the weighted choices. Weights are normalized per
example with a max-subtracted softmax over the raw log-weights. With
exact-enumeration weighting and the closed-form update, the mean training
log-likelihood is non-decreasing across iterations (up to the additive
smoothing, which is kept tiny to avoid zero-probability lock-in).

Raw weights come in two families: ``posterior-logprob`` uses the policy's
own log-likelihood of the gold answer given the trajectory, while the
``reward-*`` modes plug a task metric of the sampled answer (EM, accuracy,
or token F1) into the same softmax, yielding the goal-oriented variant.
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .agent import AgentConfig, EpisodeResult, episode_rng, run_episode
from .errors import ExsearchError, LogprobsUnsupported, MissingAnnotation, UnrealizableTrajectory
from .llm import build_system_prompt, build_user_turn
from .metrics import accuracy, exact_match, token_f1
from .policy import (
    ABSTAIN,
    LOG_FLOOR,
    TabularPolicy,
    TabularPolicyParams,
    logsumexp,
    passage_object,
    question_start_entity,
)
from .retrieval import Retriever
from .trajectory import (
    Example,
    Trajectory,
    WeightedTrajectory,
    render_transcript,
    write_jsonl,
)

logger = logging.getLogger("exsearch")

E_STEP_MODES = ("sampled", "exact-enumeration")
VALIDATION_METRICS = ("loglik", "em", "acc")

REWARD_FNS = {
    "reward-em": exact_match,
    "reward-acc": accuracy,
    "reward-f1": token_f1,
}


@dataclass(frozen=True)
class TrainConfig:
    """Loop settings: iteration and sample counts, weighting, stopping."""

    iterations: int = 5
    samples_per_example: int = 2
    weight_mode: str = "posterior-logprob"
    e_step_mode: str = "sampled"
    early_stop_patience: int = 1  # 0 disables early stopping
    early_stop_min_delta: float = 1e-6
    validation_metric: str = "loglik"
    smoothing: float = 1e-3
    enumeration_cap: int = 1_000_000

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.samples_per_example < 1:
            raise ValueError("samples_per_example must be >= 1")
        if self.weight_mode not in ("posterior-logprob", *REWARD_FNS):
            raise ValueError(f"unknown weight mode {self.weight_mode!r}")
        if self.e_step_mode not in E_STEP_MODES:
            raise ValueError(f"unknown e-step mode {self.e_step_mode!r}")
        if self.validation_metric not in VALIDATION_METRICS:
            raise ValueError(f"unknown validation metric {self.validation_metric!r}")
        if self.early_stop_patience < 0:
            raise ValueError("early_stop_patience must be >= 0")


@dataclass
class ExampleBatch:
    """Weighted trajectories explored for one example."""

    example: Example
    items: list[WeightedTrajectory]
    failures: int = 0


@dataclass(frozen=True)
class IterationReport:
    """One completed training iteration."""

    iteration: int
    train_loglik: float | None
    elbo: float
    validation_score: float
    wall_time: float


def normalize_weights(raw_log_weights: Sequence[float]) -> np.ndarray:
    """Softmax with max-subtraction: shift-invariant, sums to 1."""
    arr = np.asarray(raw_log_weights, dtype=float)
    if arr.size == 0:
        raise ValueError("need at least one raw weight")
    shifted = arr - arr.max()
    exps = np.exp(shifted)
    return exps / exps.sum()


def score_answer_set(policy, question: str, trajectory: Trajectory,
                     golds: Iterable[str]) -> float:
    """log-probability mass the policy puts on any gold answer."""
    return logsumexp(policy.score_answer(question, trajectory, g)
                     for g in dict.fromkeys(golds))


def raw_log_weight(policy, example: Example, result: EpisodeResult,
                   weight_mode: str) -> float:
    """Raw (log-domain) weight of one sampled episode under the given mode."""
    if weight_mode == "posterior-logprob":
        return score_answer_set(policy, example.question, result.trajectory,
                                example.gold_answers)
    reward = REWARD_FNS[weight_mode]
    return float(reward(result.answer, list(example.gold_answers)))


def _weighted_batch(example: Example, entries: list[tuple[Trajectory, str, float]],
                    weight_mode: str, failures: int = 0,
                    drop_zero: bool = False) -> ExampleBatch:
    if not entries:
        return ExampleBatch(example=example, items=[], failures=failures)
    weights = normalize_weights([raw for _t, _a, raw in entries])
    items = [
        WeightedTrajectory(trajectory=t, answer=a, log_weight=raw,
                           weight=float(w), weight_mode=weight_mode)
        for (t, a, raw), w in zip(entries, weights)
        if not (drop_zero and w == 0.0)
    ]
    return ExampleBatch(example=example, items=items, failures=failures)


def _e_step_sampled_one(example: Example, policy, retriever: Retriever,
                        config: TrainConfig, agent_config: AgentConfig,
                        seed: int, sample_base: int) -> ExampleBatch:
    entries: list[tuple[Trajectory, str, float]] = []
    failures = 0
    mode = config.weight_mode
    for i in range(config.samples_per_example):
        rng = episode_rng(seed, example.id, sample_base + i)
        try:
            result = run_episode(example.question, policy, retriever,
                                 agent_config, rng)
        except ExsearchError as exc:
            logger.warning("episode failed for %s sample %d: %s", example.id, i, exc)
            failures += 1
            continue
        try:
            raw = raw_log_weight(policy, example, result, mode)
        except LogprobsUnsupported:
            logger.warning("endpoint lacks logprobs; falling back to reward-em "
                           "weighting for %s", example.id)
            mode = "reward-em"
            raw = raw_log_weight(policy, example, result, mode)
        entries.append((result.trajectory, result.answer, raw))
    return _weighted_batch(example, entries, mode, failures)


def _e_step_exact_one(example: Example, policy: TabularPolicy,
                      retriever: Retriever, config: TrainConfig,
                      agent_config: AgentConfig) -> ExampleBatch:
    leaves = policy.enumerate_trajectories(example, retriever,
                                           agent_config.budget, agent_config.k,
                                           config.enumeration_cap)
    golds = set(example.gold_answers)
    per_traj: dict[Trajectory, list[float]] = {}
    for trajectory, answer, logp in leaves:
        per_traj.setdefault(trajectory, [])
        if answer in golds:
            per_traj[trajectory].append(logp)
    gold_answer = example.gold_answers[0]
    entries = [(t, gold_answer, logsumexp(terms) if terms else LOG_FLOOR)
               for t, terms in per_traj.items()]
    return _weighted_batch(example, entries, "posterior-logprob", drop_zero=True)


def e_step(examples: Sequence[Example], policy, retriever: Retriever,
           config: TrainConfig, agent_config: AgentConfig, seed: int = 0,
           sample_base: int = 0, jobs: int = 1) -> list[ExampleBatch]:
    """Explore and weight trajectories for every example.

    Sampled mode runs ``samples_per_example`` episodes per example with
    isolated RNG streams; exact mode enumerates the full trajectory space
    and weights each trajectory by the true posterior given the gold answer.
    Per-example failures are recorded on the batch and never abort the run.
    """
    if not examples:
        raise ValueError("e_step needs a non-empty dataset")
    if config.e_step_mode == "exact-enumeration":
        return [_e_step_exact_one(ex, policy, retriever, config, agent_config)
                for ex in examples]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(
                lambda ex: _e_step_sampled_one(ex, policy, retriever, config,
                                               agent_config, seed, sample_base),
                examples))
    return [_e_step_sampled_one(ex, policy, retriever, config, agent_config,
                                seed, sample_base)
            for ex in examples]


def _batch_has_signal(batch: ExampleBatch) -> bool:
    """Whether any sample actually supports the answer target.

    When every raw weight sits at its no-signal level (the -1e9 floor under
    posterior weighting, reward 0 under reward weighting), the normalized
    weights are uniform over unsupportive trajectories and updating on them
    would reinforce noise; such examples are skipped for the iteration.
    """
    for wt in batch.items:
        if wt.weight_mode.startswith("reward-"):
            if wt.log_weight > 0.0:
                return True
        elif wt.log_weight > LOG_FLOOR:
            return True
    return False


def _updated_logits(old_row: np.ndarray, counts: np.ndarray, smoothing: float,
                    temperature: float) -> np.ndarray:
    total = counts.sum()
    if total == 0.0:
        return old_row.copy()
    probs = (counts + smoothing) / (total + smoothing * len(counts))
    return temperature * np.log(probs)


def m_step_tabular(params: TabularPolicyParams, batches: Sequence[ExampleBatch],
                   relations: Sequence[str], retriever: Retriever,
                   smoothing: float = 1e-3) -> TabularPolicyParams:
    """Closed-form categorical update from weighted choices.

    Each head's new probability is the smoothed, normalized weighted count
    of its chosen outcomes; heads (or think rows) that received no weight
    keep their prior logits. The answer head counts the outcomes that
    produce the weighting target: the gold answer under posterior weighting,
    the sampled answer under reward weighting. Where several outcomes yield
    the same text, weight is split in proportion to the current policy's
    probabilities (the within-factor expectation).
    """
    policy = TabularPolicy(params, relations)
    stop_col = len(relations)
    think_counts = np.zeros_like(params.think_logits)
    record_counts = np.zeros_like(params.record_logits)
    answer_counts = np.zeros_like(params.answer_logits)
    rows = params.think_logits.shape[0]

    for batch in batches:
        if not _batch_has_signal(batch):
            continue
        golds = set(batch.example.gold_answers)
        for wt in batch.items:
            w = wt.weight
            if w <= 0.0:
                continue
            trajectory = wt.trajectory
            entity = question_start_entity(trajectory.question)
            for step in trajectory.steps:
                relation = policy.relation_of(step.sub_query, entity)
                row = min(step.hop, rows) - 1
                think_counts[row, relations.index(relation)] += w
                if step.retrieved:
                    if step.selected is not None:
                        docs = [retriever.get(pid) for pid in step.selected]
                    else:
                        docs = retriever.resolve(step.retrieved)
                    rec_probs = policy.record_probs(len(docs))
                    matched = [j for j, doc in enumerate(docs)
                               if passage_object(doc) == step.evidence]
                    if not matched:
                        raise UnrealizableTrajectory(
                            f"evidence {step.evidence!r} not producible at hop "
                            f"{step.hop} of example {batch.example.id}")
                    mass = sum(rec_probs[j] for j in matched)
                    for j in matched:
                        share = rec_probs[j] / mass if mass > 0 else 1.0 / len(matched)
                        record_counts[j] += w * share
                elif step.evidence != "":
                    raise UnrealizableTrajectory(
                        f"evidence recorded without documents at hop {step.hop} "
                        f"of example {batch.example.id}")
                entity = step.evidence
            if len(trajectory.steps) < trajectory.budget:
                row = min(len(trajectory.steps) + 1, rows) - 1
                think_counts[row, stop_col] += w

            if wt.weight_mode.startswith("reward-"):
                targets = {wt.answer}
            else:
                targets = golds
            texts = (trajectory.last_evidence, ABSTAIN)
            ans_probs = policy.answer_probs()
            matched = [i for i, text in enumerate(texts) if text in targets]
            if matched:
                mass = sum(ans_probs[i] for i in matched)
                for i in matched:
                    share = ans_probs[i] / mass if mass > 0 else 1.0 / len(matched)
                    answer_counts[i] += w * share

    new_think = np.vstack([
        _updated_logits(params.think_logits[r], think_counts[r], smoothing,
                        params.temperature)
        for r in range(rows)])
    new_record = _updated_logits(params.record_logits, record_counts, smoothing,
                                 params.temperature)
    new_answer = _updated_logits(params.answer_logits, answer_counts, smoothing,
                                 params.temperature)
    return TabularPolicyParams(think_logits=new_think, record_logits=new_record,
                               answer_logits=new_answer,
                               temperature=params.temperature)


def compute_elbo(policy: TabularPolicy, batches: Sequence[ExampleBatch],
                 retriever: Retriever) -> float:
    """Mean over examples of sum_z w(z) [log p(z|x) + log p(gold|x,z)].

    The proposal entropy term is constant within an iteration and omitted;
    add :func:`posterior_entropy` back to compare against the exact marginal.
    """
    values = []
    for batch in batches:
        if not batch.items or not _batch_has_signal(batch):
            continue
        total = 0.0
        for wt in batch.items:
            if wt.weight == 0.0:
                continue
            logp_z = policy.trajectory_log_prob(wt.trajectory, retriever)
            logp_y = score_answer_set(policy, batch.example.question,
                                      wt.trajectory, batch.example.gold_answers)
            total += wt.weight * (logp_z + logp_y)
        values.append(total)
    return float(np.mean(values)) if values else 0.0


def posterior_entropy(weights: Iterable[float]) -> float:
    """Entropy of a normalized weight assignment (0 log 0 = 0)."""
    return float(-sum(w * np.log(w) for w in weights if w > 0.0))


def mean_train_loglik(policy: TabularPolicy, examples: Sequence[Example],
                      retriever: Retriever, agent_config: AgentConfig,
                      cap: int = 1_000_000) -> float:
    """Mean exact log-marginal of the gold answers, by enumeration."""
    return float(np.mean([
        policy.exact_marginal_set(ex, retriever, agent_config.budget,
                                  agent_config.k, cap)
        for ex in examples]))


def _validation_score(policy, examples: Sequence[Example], retriever: Retriever,
                      config: TrainConfig, agent_config: AgentConfig,
                      seed: int, iteration: int) -> float:
    if config.validation_metric == "loglik":
        return mean_train_loglik(policy, examples, retriever, agent_config,
                                 config.enumeration_cap)
    metric = exact_match if config.validation_metric == "em" else accuracy
    scores = []
    for ex in examples:
        rng = episode_rng(seed, f"validation:{ex.id}", iteration)
        result = run_episode(ex.question, policy, retriever, agent_config, rng)
        scores.append(metric(result.answer, list(ex.gold_answers)))
    return float(np.mean(scores))


def em_train(examples: Sequence[Example], policy: TabularPolicy,
             retriever: Retriever, config: TrainConfig,
             agent_config: AgentConfig, seed: int = 0,
             val_examples: Sequence[Example] | None = None,
             jobs: int = 1) -> tuple[list[IterationReport], TabularPolicyParams]:
    """Alternate exploration and re-weighted updates for up to N iterations.

    Stops early when the validation metric fails to improve for
    ``early_stop_patience`` consecutive iterations (patience 0 disables).
    Returns one report per completed iteration plus the final parameters.
    """
    val = list(val_examples) if val_examples is not None else list(examples)
    reports: list[IterationReport] = []
    best: float | None = None
    streak = 0
    for iteration in range(config.iterations):
        started = time.perf_counter()
        batches = e_step(examples, policy, retriever, config, agent_config,
                         seed=seed,
                         sample_base=iteration * config.samples_per_example,
                         jobs=jobs)
        new_params = m_step_tabular(policy.params, batches, policy.relations,
                                    retriever, config.smoothing)
        policy = policy.with_params(new_params)
        elbo = compute_elbo(policy, batches, retriever)
        train_loglik = (
            mean_train_loglik(policy, examples, retriever, agent_config,
                              config.enumeration_cap)
            if config.e_step_mode == "exact-enumeration" else None)
        score = _validation_score(policy, val, retriever, config, agent_config,
                                  seed, iteration)
        reports.append(IterationReport(
            iteration=iteration, train_loglik=train_loglik, elbo=elbo,
            validation_score=score, wall_time=time.perf_counter() - started))
        if best is None or score > best + config.early_stop_min_delta:
            best = score
            streak = 0
        else:
            streak += 1
            if config.early_stop_patience and streak >= config.early_stop_patience:
                logger.info("early stop after iteration %d (no improvement for "
                            "%d iterations)", iteration, streak)
                break
    return reports, policy.params


def write_history_csv(path, reports: Sequence[IterationReport]) -> None:
    """Training history CSV for external plotting of convergence curves."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "train_loglik", "elbo", "validation_score",
                         "wall_time"])
        for r in reports:
            writer.writerow([
                r.iteration,
                "" if r.train_loglik is None else repr(r.train_loglik),
                repr(r.elbo), repr(r.validation_score), repr(r.wall_time)])


def sft_record(example_id: str, sample_index: int, example: Example,
               wt: WeightedTrajectory) -> dict:
    golds = list(example.gold_answers)
    return {
        "id": f"{example_id}/{sample_index}",
        "messages": [
            {"role": "system", "content": build_system_prompt()},
            {"role": "user", "content": build_user_turn(example.question)},
            {"role": "assistant",
             "content": render_transcript(wt.trajectory, wt.answer)},
        ],
        "answer": wt.answer,
        "weight": wt.weight,
        "weight_mode": wt.weight_mode,
        "metrics": {
            "em": exact_match(wt.answer, golds),
            "f1": token_f1(wt.answer, golds),
            "acc": accuracy(wt.answer, golds),
        },
    }


def export_weighted_sft(batches: Sequence[ExampleBatch], path) -> int:
    """Write weighted trajectories as chat-format training records.

    One JSON line per trajectory, deterministically ordered by (example id,
    sample index); re-exporting the same batches is byte-identical.
    """
    rows = []
    for batch in sorted(batches, key=lambda b: b.example.id):
        for i, wt in enumerate(batch.items):
            rows.append(sft_record(batch.example.id, i, batch.example, wt))
    return write_jsonl(path, rows)


def warmup_format(examples: Sequence[Example], retriever: Retriever,
                  k: int) -> list[dict]:
    """Format annotated examples into supervised transcripts.

    Each gold sub-query is paired with a live retrieval; when the example
    carries positionally matching gold passages, the paired gold passage is
    pinned to rank 1 (taking the top score so ranks stay score-ordered) and
    becomes the step's citation. Recorded evidence comes from
    ``gold_evidences`` when present, falling back to the paired passage
    title. Raises MissingAnnotation without gold sub-queries.
    """
    from .trajectory import ScoredPassage, Step  # local to avoid wide import surface

    records = []
    for ex in examples:
        if not ex.gold_subqueries:
            raise MissingAnnotation("gold_subqueries")
        n = len(ex.gold_subqueries)
        paired = (list(ex.gold_passages)
                  if ex.gold_passages and len(ex.gold_passages) == n else None)
        evidences = (list(ex.gold_evidences)
                     if ex.gold_evidences and len(ex.gold_evidences) == n else None)
        steps = []
        for i, sub_query in enumerate(ex.gold_subqueries):
            hits = retriever.search(sub_query, k)
            gold_id = paired[i] if paired else None
            if gold_id is not None:
                try:
                    retriever.get(gold_id)
                except KeyError:
                    gold_id = None
            if gold_id is not None:
                top_score = hits[0].score if hits else 1.0
                tail = [h for h in hits if h.passage_ref != gold_id][:max(0, k - 1)]
                retrieved = [ScoredPassage(gold_id, top_score, 1)] + [
                    ScoredPassage(h.passage_ref, min(h.score, top_score), r)
                    for r, h in enumerate(tail, 2)]
                selected: tuple[str, ...] | None = (gold_id,)
            else:
                retrieved = list(hits)
                selected = None
            if evidences is not None:
                evidence = evidences[i]
            elif gold_id is not None:
                evidence = retriever.get(gold_id).title
            elif hits:
                evidence = retriever.get(hits[0].passage_ref).title
            else:
                evidence = ""
            steps.append(Step(sub_query=sub_query, retrieved=tuple(retrieved),
                              selected=selected, evidence=evidence, hop=i + 1))
        trajectory = Trajectory(question=ex.question, steps=tuple(steps),
                                terminated=True, budget=max(1, len(steps)))
        records.append({
            "id": ex.id,
            "messages": [
                {"role": "system", "content": build_system_prompt()},
                {"role": "user", "content": build_user_turn(ex.question)},
                {"role": "assistant",
                 "content": render_transcript(trajectory, ex.gold_answers[0])},
            ],
            "answer": ex.gold_answers[0],
        })
    return records
