"""Command-line harness: episodes, batch evaluation, learning runs, memory tools.

Exit codes: 0 success, 1 user error (bad arguments or configuration),
2 runtime error. One invocation at a time per store path, enforced by an
advisory lock file.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from pathlib import Path
from typing import Optional

from .config import RunConfig, load_taskset
from .errors import ConfigError, DeepResearchError, StoreLockedError
from .records import canonical_dumps, fmt6, sha256_file
from .runtime import apply_episode_to_memory, run_episode
from .ttl import run_ttl

TTL_STATE_SCHEMA = "ttl-state/1"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


@contextlib.contextmanager
def store_lock(config: RunConfig):
    """Advisory lock keyed on the memory-store path."""
    store_path = config.path("memory_store")
    if store_path is None:
        yield
        return
    lock_path = Path(str(store_path) + ".lock")
    lock_path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StoreLockedError(f"store is locked by another invocation: {lock_path}")
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            lock_path.unlink()


def _persist_stores(config: RunConfig, store, meta) -> None:
    store_path = config.path("memory_store")
    if store_path is not None:
        store_path.parent.mkdir(parents=True, exist_ok=True)
        store.save(store_path)
    meta_path = config.path("meta_store")
    if meta_path is not None:
        meta_path.parent.mkdir(parents=True, exist_ok=True)
        meta.save(meta_path)


def _build_world(config: RunConfig):
    embedder = config.build_embedder()
    backends = config.build_backends()
    tools = config.build_tools(embedder)
    prompts = config.build_prompts()
    store = config.load_store(embedder)
    meta = config.load_meta(embedder)
    return embedder, backends, tools, prompts, store, meta


def cmd_episode(args) -> int:
    config = RunConfig.load(args.config)
    with store_lock(config):
        _, backends, tools, prompts, store, meta = _build_world(config)
        tasks = load_taskset(config.path("taskset"))
        task = next((t for t in tasks if t.task_id == args.task_id), None)
        if task is None:
            raise ConfigError(f"task id not found in taskset: {args.task_id}")
        supervision = "unsupervised" if args.unsupervised else config.supervision
        options = config.episode_options(supervision=supervision)
        record = run_episode(task, store, tools, backends, prompts, options)
        if args.update_memory:
            apply_episode_to_memory(
                task, record, store, backends, prompts, config.replace_threshold()
            )
            _persist_stores(config, store, meta)
        out_dir = config.out_dir()
        record_path = out_dir / f"episode_{task.task_id}.json"
        record_path.write_text(canonical_dumps(record.to_json()) + "\n", encoding="utf-8")
        print(f"record={record_path}")
        print(f"answer={record.answer}")
        print(f"verdict={record.verdict_final.verdict if record.verdict_final else 'none'}")
    return 0


def cmd_eval(args) -> int:
    config = RunConfig.load(args.config)
    with store_lock(config):
        _, backends, tools, prompts, store, meta = _build_world(config)
        taskset_path = Path(args.taskset) if args.taskset else config.path("taskset")
        tasks = load_taskset(taskset_path)
        if not tasks:
            raise ConfigError("taskset is empty")
        supervision = "unsupervised" if args.unsupervised else config.supervision
        options = config.episode_options(supervision=supervision)
        update_memory = args.update_memory or config.raw.get("eval", {}).get(
            "update_memory", False
        )
        results = []
        per_category: dict[str, list[int]] = {}
        episode_rows = []
        for task in tasks:
            record = run_episode(task, store, tools, backends, prompts, options)
            correct = bool(record.verdict_final and record.verdict_final.correct)
            results.append(
                {
                    "task_id": task.task_id,
                    "answer": record.answer,
                    "verdict": record.verdict_final.verdict if record.verdict_final else "none",
                    "category": task.category or "general",
                }
            )
            per_category.setdefault(task.category or "general", []).append(int(correct))
            episode_rows.append(record.to_json())
            if update_memory:
                apply_episode_to_memory(
                    task, record, store, backends, prompts, config.replace_threshold()
                )
        if update_memory:
            _persist_stores(config, store, meta)
        correct_total = sum(sum(v) for v in per_category.values())
        accuracy = correct_total / len(tasks)
        out_dir = config.out_dir()
        summary = {
            "schema": "eval-summary/1",
            "total": len(tasks),
            "correct": correct_total,
            "accuracy": accuracy,
            "supervision": supervision,
            "results": results,
            "per_category": {
                cat: {"total": len(v), "correct": sum(v), "accuracy": sum(v) / len(v)}
                for cat, v in sorted(per_category.items())
            },
        }
        summary_path = out_dir / "eval_summary.json"
        summary_path.write_text(canonical_dumps(summary) + "\n", encoding="utf-8")
        from .records import write_jsonl

        write_jsonl(out_dir / "episodes.jsonl", episode_rows)
        metrics_lines = [
            f"total={len(tasks)}",
            f"correct={correct_total}",
            f"accuracy={fmt6(accuracy)}",
        ]
        for cat, v in sorted(per_category.items()):
            metrics_lines.append(f"category.{cat}.accuracy={fmt6(sum(v) / len(v))}")
        (out_dir / "eval_metrics.txt").write_text(
            "\n".join(metrics_lines) + "\n", encoding="utf-8"
        )
        print(f"summary={summary_path}")
        print(f"accuracy={fmt6(accuracy)}")
    return 0


def _load_ttl_state(path: Path) -> int:
    if not path.is_file():
        return 0
    state = json.loads(path.read_text(encoding="utf-8"))
    if state.get("schema") != TTL_STATE_SCHEMA:
        raise ConfigError(f"not a learning-state file: {path}")
    return int(state.get("completed_epochs", 0))


def cmd_ttl(args) -> int:
    config = RunConfig.load(args.config)
    with store_lock(config):
        _, backends, tools, prompts, store, meta = _build_world(config)
        taskset_path = Path(args.taskset) if args.taskset else config.path("taskset")
        tasks = load_taskset(taskset_path)
        ttl_cfg = config.ttl_config()
        grpo_cfg = config.grpo_config()
        out_dir = config.out_dir()
        state_path = out_dir / "ttl_state.json"
        report_path = out_dir / "ttl_report.json"
        completed = _load_ttl_state(state_path)
        if completed >= ttl_cfg.epochs:
            print(f"nothing to do: {completed} epochs already completed")
            return 0
        existing = (
            json.loads(report_path.read_text(encoding="utf-8"))
            if report_path.is_file()
            else {"schema": "ttl-run/1", "epochs": [], "steps": []}
        )
        for epoch in range(completed + 1, ttl_cfg.epochs + 1):
            report = run_ttl(
                tasks,
                store,
                meta,
                tools,
                backends,
                prompts,
                ttl_cfg,
                grpo_cfg,
                export_dir=out_dir / "signals",
                seed=config.seed,
                start_epoch=epoch,
                end_epoch=epoch,
            )
            existing["epochs"].extend(e.to_json() for e in report.epochs)
            existing["steps"].extend(s.to_json() for s in report.steps)
            _persist_stores(config, store, meta)
            state_path.write_text(
                canonical_dumps({"schema": TTL_STATE_SCHEMA, "completed_epochs": epoch}) + "\n",
                encoding="utf-8",
            )
            report_path.write_text(canonical_dumps(existing) + "\n", encoding="utf-8")
        metrics_lines = []
        for entry in existing["epochs"]:
            e = entry["epoch"]
            if entry["accuracy"] is not None:
                metrics_lines.append(f"epoch{e}.accuracy={fmt6(entry['accuracy'])}")
            metrics_lines.append(f"epoch{e}.acceptance_rate={fmt6(entry['acceptance_rate'])}")
            metrics_lines.append(f"epoch{e}.memory_size={entry['memory_size']}")
            metrics_lines.append(f"epoch{e}.inserts={entry['inserts']}")
            metrics_lines.append(f"epoch{e}.replacements={entry['replacements']}")
            metrics_lines.append(f"epoch{e}.router_fallbacks={entry['router_fallbacks']}")
        (out_dir / "ttl_metrics.txt").write_text("\n".join(metrics_lines) + "\n", encoding="utf-8")
        for entry in existing["epochs"]:
            label = (
                f"accuracy={fmt6(entry['accuracy'])}"
                if entry["accuracy"] is not None
                else f"acceptance_rate={fmt6(entry['acceptance_rate'])}"
            )
            print(f"epoch{entry['epoch']}: {label}")
        print(f"report={report_path}")
    return 0


def cmd_mem(args) -> int:
    config = RunConfig.load(args.config)
    with store_lock(config):
        embedder = config.build_embedder()
        store = config.load_store(embedder)
        meta = config.load_meta(embedder)
        if args.mem_command == "inspect":
            print(f"{'id':>4}  {'bucket':<24} {'label':<10} {'u':>4} {'s':>4}  question")
            for uid in sorted(store.units):
                u = store.units[uid]
                question = u.question if len(u.question) <= 48 else u.question[:45] + "..."
                print(
                    f"{uid:>4}  {u.bucket:<24} {u.label:<10} {u.usage:>4} {u.success:>4}  {question}"
                )
            print(f"total={len(store)} meta_pairs={len(meta)}")
        elif args.mem_command == "score":
            if not args.query:
                raise ConfigError("mem score requires --query")
            bucket = args.bucket or (store.buckets()[0] if store.buckets() else "")
            scored = store.score_all(args.query, args.caption, bucket, config.retrieval_config())
            print(f"{'id':>4}  {'score':>16} {'sim_norm':>16} {'value':>16} {'freq':>16}")
            for entry in scored:
                b = entry.breakdown
                # 12 places so the weighted sum is recomputable from the
                # printed components to far better than report precision.
                print(
                    f"{entry.unit_id:>4}  {entry.score:>16.12f} {b.sim_norm:>16.12f} "
                    f"{b.value:>16.12f} {b.frequency:>16.12f}"
                )
            print(f"bucket={bucket} units={len(scored)}")
        elif args.mem_command == "clear":
            policy = config.clear_policy()
            if args.dry_run:
                matches = sum(1 for u in store.units.values() if policy.matches(u))
                print(f"dry-run: {matches} unit(s) would be removed")
            else:
                removed = store.selective_clear(policy)
                _persist_stores(config, store, meta)
                print(f"removed={removed}")
        else:
            raise ConfigError(f"unknown mem subcommand: {args.mem_command}")
    return 0


def cmd_verify_export(args) -> int:
    export_path = Path(args.export)
    if not export_path.is_file():
        raise ConfigError(f"export file not found: {export_path}")
    manifest_path = (
        Path(args.manifest)
        if args.manifest
        else export_path.with_name(export_path.name + ".manifest.json")
    )
    if not manifest_path.is_file():
        raise ConfigError(f"manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    actual_hash = sha256_file(export_path)
    actual_records = sum(
        1 for line in export_path.read_text(encoding="utf-8").splitlines() if line.strip()
    )
    ok = manifest.get("sha256") == actual_hash and manifest.get("records") == actual_records
    print(f"records={actual_records} expected={manifest.get('records')}")
    print(f"sha256={'match' if manifest.get('sha256') == actual_hash else 'MISMATCH'}")
    print(f"verify={'ok' if ok else 'failed'}")
    return 0 if ok else 2


def build_parser() -> _Parser:
    parser = _Parser(prog="deepresearch", description="Deep research agent harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_episode = sub.add_parser("episode", help="run a single episode")
    p_episode.add_argument("--config", required=True)
    p_episode.add_argument("--task-id", required=True)
    p_episode.add_argument("--unsupervised", action="store_true")
    p_episode.add_argument("--update-memory", action="store_true")
    p_episode.set_defaults(func=cmd_episode)

    p_eval = sub.add_parser("eval", help="evaluate a task set")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--taskset")
    p_eval.add_argument("--unsupervised", action="store_true")
    p_eval.add_argument("--update-memory", action="store_true")
    p_eval.set_defaults(func=cmd_eval)

    p_ttl = sub.add_parser("ttl", help="run the online learning loop")
    p_ttl.add_argument("--config", required=True)
    p_ttl.add_argument("--taskset")
    p_ttl.set_defaults(func=cmd_ttl)

    p_mem = sub.add_parser("mem", help="inspect or maintain the memory store")
    p_mem.add_argument("mem_command", choices=["inspect", "score", "clear"])
    p_mem.add_argument("--config", required=True)
    p_mem.add_argument("--query")
    p_mem.add_argument("--caption")
    p_mem.add_argument("--bucket")
    p_mem.add_argument("--dry-run", action="store_true")
    p_mem.set_defaults(func=cmd_mem)

    p_verify = sub.add_parser("verify-export", help="check an export against its manifest")
    p_verify.add_argument("--export", required=True)
    p_verify.add_argument("--manifest")
    p_verify.set_defaults(func=cmd_verify_export)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DeepResearchError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
