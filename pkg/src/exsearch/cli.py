"""exsearch command-line interface.

Single binary, one subcommand per pipeline stage:

    ingest          corpus JSONL -> search index
    synth-world     generate a synthetic world (corpus + examples + manifest)
    ask             answer one question with the tabular or llm policy
    explore         batch episode collection (the exploration half of a
                    training iteration)
    weigh           attach importance weights to explored trajectories
    train           full tabular self-training loop (history CSV + params)
    eval            score predictions against a dataset
    export-sft      weighted trajectories -> chat-format training records
    warmup-format   annotated examples -> supervised transcripts

Exit codes: 0 success, 1 usage, 2 data error, 3 endpoint error. Errors are
one machine-parseable line on stderr: ``exsearch: error: <Kind>: <message>``.
``--config FILE`` supplies an engine configuration (JSON always; TOML on
Python 3.11+) whose values individual flags override.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from . import agent, llm, metrics, retrieval, synth, training, trajectory
from .errors import DataError, EndpointError, ExsearchError, LogprobsUnsupported, UnknownId
from .policy import TabularPolicy, TabularPolicyParams

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_ENDPOINT = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"exsearch: error: UsageError: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if p.suffix == ".toml":
        try:
            import tomllib
        except ImportError as exc:
            raise UsageError("TOML configs need Python 3.11+; use JSON") from exc
        with open(p, "rb") as fh:
            return tomllib.load(fh)
    with open(p, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _pick(flag_value, config: dict, section: str, key: str, default):
    if flag_value is not None:
        return flag_value
    return config.get(section, {}).get(key, default)


def _agent_config(args, config: dict) -> agent.AgentConfig:
    return agent.AgentConfig(
        budget=int(_pick(getattr(args, "budget", None), config, "agent", "budget", 5)),
        k=int(_pick(getattr(args, "k", None), config, "agent", "k", 5)),
        rerank=bool(_pick(getattr(args, "rerank", None) or None, config, "agent",
                          "rerank", False)),
        rerank_keep=int(_pick(getattr(args, "rerank_keep", None), config, "agent",
                              "rerank_keep", 3)),
        dedup_subqueries=bool(_pick(getattr(args, "dedup", None) or None, config,
                                    "agent", "dedup_subqueries", False)),
    )


def _seed(args, config: dict) -> int:
    if args.seed is not None:
        return int(args.seed)
    return int(config.get("seed", 0))


def _endpoint_config(config: dict) -> llm.EndpointConfig:
    section = config.get("llm")
    if not section or "base_url" not in section or "model_name" not in section:
        raise UsageError("--policy llm needs a config file with an [llm] section "
                         "providing base_url and model_name")
    return llm.EndpointConfig(**section)


def _load_retriever(args, config: dict) -> retrieval.Retriever:
    index_path = _pick(getattr(args, "index", None), config, "retriever", "index", None)
    if index_path:
        return retrieval.Retriever(retrieval.load_index(index_path))
    world_path = getattr(args, "world", None)
    if world_path:
        world = synth.load_world(world_path)
        return retrieval.Retriever(retrieval.build_index(synth.render_corpus(world)))
    raise UsageError("need --index (or a retriever.index config entry) or --world")


def _load_policy(args, config: dict, agent_config: agent.AgentConfig):
    if args.policy == "llm":
        client = llm.HttpChatClient(_endpoint_config(config))
        return llm.ChatPolicy(client)
    world_path = getattr(args, "world", None)
    if not world_path:
        raise UsageError("--policy tabular needs --world for the relation vocabulary")
    world = synth.load_world(world_path)
    params_path = getattr(args, "params", None)
    if params_path:
        params = TabularPolicyParams.load(params_path)
    else:
        params = TabularPolicyParams.uniform(len(world.relations),
                                             agent_config.budget, agent_config.k)
    return TabularPolicy(params, world.relations)


def _emit(args, human: str, payload: dict) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, ensure_ascii=False))
    else:
        print(human)


# -- subcommands ---------------------------------------------------------------


def cmd_ingest(args, config: dict) -> int:
    passages = trajectory.read_passages_jsonl(args.corpus)
    index = retrieval.build_index(passages)
    out = Path(args.index)
    out.mkdir(parents=True, exist_ok=True)
    retrieval.save_index(index, out)
    _emit(args, f"indexed {index.doc_count} passages",
          {"indexed": index.doc_count, "index": str(out / retrieval.INDEX_FILENAME)})
    return EXIT_OK


def cmd_synth_world(args, config: dict) -> int:
    seed = _seed(args, config)
    world = synth.generate_world(args.entities, args.relations, args.hops,
                                 args.density, seed)
    corpus = synth.render_corpus(world)
    sequence = None
    if args.align_relations:
        sequence = synth.best_relation_sequence(world, distinct_nodes=args.distinct_nodes)
    examples = synth.make_questions(world, args.questions, seed,
                                    relation_sequence=sequence,
                                    distinct_nodes=args.distinct_nodes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    synth.save_world(world, out / "world.json")
    trajectory.write_passages_jsonl(out / "corpus.jsonl", corpus)
    trajectory.write_examples_jsonl(out / "examples.jsonl", examples)
    _emit(args,
          f"world with {len(world.facts)} facts, {len(corpus)} passages, "
          f"{len(examples)} questions -> {out}",
          {"facts": len(world.facts), "passages": len(corpus),
           "questions": len(examples), "out": str(out)})
    return EXIT_OK


def cmd_ask(args, config: dict) -> int:
    agent_config = _agent_config(args, config)
    retriever = _load_retriever(args, config)
    policy = _load_policy(args, config, agent_config)
    rng = agent.episode_rng(_seed(args, config), args.question, 0)
    result = agent.run_episode(args.question, policy, retriever, agent_config, rng)
    transcript = trajectory.render_transcript(result.trajectory, result.answer)
    _emit(args, transcript,
          {"question": args.question, "answer": result.answer,
           "transcript": transcript, "steps": len(result.trajectory.steps)})
    return EXIT_OK


def cmd_explore(args, config: dict) -> int:
    agent_config = _agent_config(args, config)
    retriever = _load_retriever(args, config)
    examples = trajectory.read_examples_jsonl(args.examples)
    seed = _seed(args, config)

    # ChatPolicy holds per-episode state, so each worker gets its own policy
    # over the shared client; the tabular policy is read-only and shared.
    if args.policy == "llm":
        client = llm.HttpChatClient(_endpoint_config(config))
        make_policy = lambda: llm.ChatPolicy(client)  # noqa: E731
    else:
        shared = _load_policy(args, config, agent_config)
        make_policy = lambda: shared  # noqa: E731

    def explore_example(ex):
        policy = make_policy()
        out = []
        for i in range(args.samples):
            rng = agent.episode_rng(seed, ex.id, i)
            result = agent.run_episode(ex.question, policy, retriever,
                                       agent_config, rng)
            out.append(trajectory.TrajectoryRecord(
                id=f"{ex.id}/{i}", trajectory=result.trajectory,
                answer=result.answer))
        return out

    jobs = max(1, args.jobs)
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_example = list(pool.map(explore_example, examples))
    else:
        per_example = [explore_example(ex) for ex in examples]
    records = [rec for group in per_example for rec in group]
    n = trajectory.write_trajectories_jsonl(args.out, records)
    _emit(args, f"explored {n} trajectories over {len(examples)} examples -> {args.out}",
          {"trajectories": n, "examples": len(examples), "out": str(args.out)})
    return EXIT_OK


def _group_by_example(records, examples):
    by_id = {ex.id: ex for ex in examples}
    groups: dict[str, list] = {ex.id: [] for ex in examples}
    for rec in records:
        ex_id, _, sample = rec_id_parts(rec[0] if isinstance(rec, tuple) else rec.id)
        if ex_id not in by_id:
            raise UnknownId(f"trajectory references unknown example id {ex_id!r}")
        groups[ex_id].append((sample, rec))
    for ex_id in groups:
        groups[ex_id].sort(key=lambda item: item[0])
    return by_id, groups


def rec_id_parts(record_id: str) -> tuple[str, str, int]:
    ex_id, sep, sample = record_id.rpartition("/")
    if not sep:
        return record_id, "", 0
    try:
        return ex_id, sep, int(sample)
    except ValueError:
        return record_id, "", 0


def cmd_weigh(args, config: dict) -> int:
    examples = trajectory.read_examples_jsonl(args.examples)
    records = trajectory.read_trajectories_jsonl(args.trajectories)
    by_id, groups = _group_by_example(records, examples)

    scorer = None
    if args.mode == "posterior-logprob":
        agent_config = _agent_config(args, config)
        policy = _load_policy(args, config, agent_config)
        scorer = lambda ex, rec: training.score_answer_set(  # noqa: E731
            policy, ex.question, rec.trajectory, ex.gold_answers)

    out_items = []
    for ex_id, group in groups.items():
        if not group:
            continue
        ex = by_id[ex_id]
        raws = []
        for _sample, rec in group:
            if scorer is not None:
                raws.append(scorer(ex, rec))
            else:
                reward = training.REWARD_FNS[args.mode]
                raws.append(float(reward(rec.answer or "", list(ex.gold_answers))))
        weights = training.normalize_weights(raws)
        for (_sample, rec), raw, w in zip(group, raws, weights):
            out_items.append((rec.id, trajectory.WeightedTrajectory(
                trajectory=rec.trajectory, answer=rec.answer or "",
                log_weight=float(raw), weight=float(w), weight_mode=args.mode)))
    n = trajectory.write_weighted_jsonl(args.out, out_items)
    _emit(args, f"weighted {n} trajectories ({args.mode}) -> {args.out}",
          {"weighted": n, "mode": args.mode, "out": str(args.out)})
    return EXIT_OK


def cmd_train(args, config: dict) -> int:
    world = synth.load_world(args.world)
    retriever = retrieval.Retriever(retrieval.build_index(synth.render_corpus(world)))
    examples = trajectory.read_examples_jsonl(args.examples)
    val = trajectory.read_examples_jsonl(args.val) if args.val else None
    agent_config = _agent_config(args, config)

    train_config = training.TrainConfig(
        iterations=int(_pick(args.iterations, config, "trainer", "iterations", 5)),
        samples_per_example=int(_pick(args.samples, config, "trainer",
                                      "samples_per_example", 2)),
        weight_mode=_pick(args.weight_mode, config, "trainer", "weight_mode",
                          "posterior-logprob"),
        e_step_mode=("exact-enumeration" if args.mode == "exact" else "sampled"),
        early_stop_patience=int(_pick(args.patience, config, "trainer",
                                      "early_stop_patience", 1)),
        validation_metric=_pick(args.val_metric, config, "trainer",
                                "validation_metric",
                                "loglik" if args.mode == "exact" else "em"),
    )
    if args.params_in:
        params = TabularPolicyParams.load(args.params_in)
    else:
        params = TabularPolicyParams.uniform(len(world.relations),
                                             agent_config.budget, agent_config.k)
    policy = TabularPolicy(params, world.relations)
    reports, final_params = training.em_train(
        examples, policy, retriever, train_config, agent_config,
        seed=_seed(args, config), val_examples=val, jobs=args.jobs)
    training.write_history_csv(args.history, reports)
    final_params.save(args.params_out)
    for r in reports:
        loglik = "" if r.train_loglik is None else f" train_loglik={r.train_loglik:.6f}"
        print(f"iteration {r.iteration}{loglik} elbo={r.elbo:.6f} "
              f"val={r.validation_score:.6f}")
    _emit(args, f"trained {len(reports)} iterations -> {args.params_out}, {args.history}",
          {"iterations": len(reports), "params": str(args.params_out),
           "history": str(args.history)})
    return EXIT_OK


def cmd_eval(args, config: dict) -> int:
    dataset = trajectory.read_examples_jsonl(args.dataset)
    predictions: dict[str, str] = {}
    for n, record in trajectory.iter_jsonl(args.predictions):
        if "id" not in record or "answer" not in record:
            raise DataError(f"line {n}: prediction records need id and answer")
        predictions[record["id"]] = record["answer"]

    k_list = tuple(int(k) for k in args.k.split(",")) if args.k else ()
    trajectories = None
    lookup = None
    if args.trajectories:
        recs = trajectory.read_trajectories_jsonl(args.trajectories)
        trajectories = {}
        for rec in recs:
            ex_id, _, _ = rec_id_parts(rec.id)
            trajectories.setdefault(ex_id, rec.trajectory)
        retriever = _load_retriever(args, config)
        lookup = retriever.get

    report = metrics.evaluate_run(predictions, dataset, k_list,
                                  trajectories=trajectories, passage_lookup=lookup,
                                  use_selected=args.use_selected)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(report.to_json_dict(), fh, ensure_ascii=False, indent=2)
            fh.write("\n")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "em", "f1", "acc"])
            for ex in dataset:
                pred = predictions.get(ex.id)
                golds = list(ex.gold_answers)
                if pred is None:
                    writer.writerow([ex.id, 0.0, 0.0, 0.0])
                else:
                    writer.writerow([ex.id,
                                     metrics.exact_match(pred, golds),
                                     metrics.token_f1(pred, golds),
                                     metrics.accuracy(pred, golds)])
    if args.json:
        print(json.dumps(report.to_json_dict(), ensure_ascii=False))
    else:
        parts = [f"em={report.em:.4f}", f"f1={report.f1:.4f}", f"acc={report.acc:.4f}"]
        parts += [f"recall@{k}={v:.4f}" for k, v in sorted(report.recall_at.items())]
        parts += [f"precision@{k}={v:.4f}" for k, v in sorted(report.precision_at.items())]
        parts.append(f"n={report.n_examples}")
        if report.n_missing:
            parts.append(f"missing={report.n_missing}")
        print(" ".join(parts))
    return EXIT_OK


def cmd_export_sft(args, config: dict) -> int:
    examples = trajectory.read_examples_jsonl(args.examples)
    weighted = trajectory.read_weighted_jsonl(args.weighted)
    by_id, groups = _group_by_example(weighted, examples)
    batches = []
    for ex_id, group in groups.items():
        if group:
            batches.append(training.ExampleBatch(
                example=by_id[ex_id], items=[wt for _s, (_rid, wt) in group]))
    n = training.export_weighted_sft(batches, args.out)
    _emit(args, f"exported {n} weighted records -> {args.out}",
          {"exported": n, "out": str(args.out)})
    return EXIT_OK


def cmd_warmup_format(args, config: dict) -> int:
    examples = trajectory.read_examples_jsonl(args.examples)
    retriever = _load_retriever(args, config)
    records = training.warmup_format(examples, retriever, args.k or 5)
    n = trajectory.write_jsonl(args.out, records)
    _emit(args, f"formatted {n} warm-up transcripts -> {args.out}",
          {"formatted": n, "out": str(args.out)})
    return EXIT_OK


# -- wiring ---------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="engine config file (JSON; TOML on 3.11+)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                   help="worker pool size for batch commands")


def _add_agent_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--budget", type=int, default=None, help="max hops per episode")
    p.add_argument("--k", type=int, default=None, help="retrieval size per hop")
    p.add_argument("--rerank", action="store_true", default=None)
    p.add_argument("--rerank-keep", dest="rerank_keep", type=int, default=None)
    p.add_argument("--dedup", action="store_true", default=None,
                   help="terminate on exact-repeat sub-queries")


def _add_policy_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--policy", choices=["tabular", "llm"], default="tabular")
    p.add_argument("--index", help="search index file or directory")
    p.add_argument("--world", help="world manifest JSON (relations + corpus)")
    p.add_argument("--params", help="tabular policy parameters JSON")


def build_parser() -> _Parser:
    parser = _Parser(prog="exsearch",
                     description="agentic retrieval with EM self-training")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build a search index from passage JSONL")
    p.add_argument("--corpus", required=True)
    p.add_argument("--index", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth-world", help="generate a synthetic multi-hop world")
    p.add_argument("--entities", type=int, default=20)
    p.add_argument("--relations", type=int, default=4)
    p.add_argument("--hops", type=int, default=2)
    p.add_argument("--density", type=float, default=0.5)
    p.add_argument("--questions", type=int, default=20)
    p.add_argument("--align-relations", dest="align_relations", action="store_true",
                   help="restrict questions to one shared relation sequence "
                        "(learnable by the hop-keyed tabular policy)")
    p.add_argument("--distinct-nodes", dest="distinct_nodes", action="store_true",
                   help="exclude chains that revisit an entity")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_synth_world)

    p = sub.add_parser("ask", help="answer a single question")
    p.add_argument("--question", required=True)
    _add_policy_flags(p)
    _add_agent_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_ask)

    p = sub.add_parser("explore", help="collect episodes for a dataset")
    p.add_argument("--examples", required=True)
    p.add_argument("--samples", type=int, default=2)
    p.add_argument("--out", required=True)
    _add_policy_flags(p)
    _add_agent_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_explore)

    p = sub.add_parser("weigh", help="attach importance weights to trajectories")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--examples", required=True)
    p.add_argument("--mode", choices=["posterior-logprob", "reward-em", "reward-acc",
                                      "reward-f1"], default="reward-em")
    p.add_argument("--out", required=True)
    _add_policy_flags(p)
    _add_agent_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_weigh)

    p = sub.add_parser("train", help="tabular EM self-training")
    p.add_argument("--world", required=True)
    p.add_argument("--examples", required=True)
    p.add_argument("--val")
    p.add_argument("--mode", choices=["exact", "sampled"], default="exact")
    p.add_argument("--weight-mode", dest="weight_mode", default=None,
                   choices=["posterior-logprob", "reward-em", "reward-acc", "reward-f1"])
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--val-metric", dest="val_metric", default=None,
                   choices=["loglik", "em", "acc"])
    p.add_argument("--params-in", dest="params_in")
    p.add_argument("--params-out", dest="params_out", required=True)
    p.add_argument("--history", required=True)
    _add_agent_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score predictions against a dataset")
    p.add_argument("--predictions", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--k", default="", help="comma-separated K values for retrieval metrics")
    p.add_argument("--trajectories", help="trajectory JSONL for retrieval metrics")
    p.add_argument("--use-selected", dest="use_selected", action="store_true")
    p.add_argument("--index")
    p.add_argument("--world")
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--csv", help="write the per-example CSV here")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-sft", help="weighted trajectories -> SFT records")
    p.add_argument("--weighted", required=True)
    p.add_argument("--examples", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_export_sft)

    p = sub.add_parser("warmup-format", help="annotated examples -> transcripts")
    p.add_argument("--examples", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", required=True)
    p.add_argument("--index")
    p.add_argument("--world")
    _add_common(p)
    p.set_defaults(func=cmd_warmup_format)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(args.config)
        return args.func(args, config)
    except UsageError as exc:
        print(f"exsearch: error: UsageError: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"exsearch: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EndpointError, LogprobsUnsupported) as exc:
        print(f"exsearch: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ENDPOINT
    except (DataError, OSError) as exc:
        print(f"exsearch: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ExsearchError as exc:
        print(f"exsearch: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
