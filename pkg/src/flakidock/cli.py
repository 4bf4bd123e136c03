"""Command-line entry point.

Exit codes are a stable contract: 0 ok, 1 operational error, 2 flaky
detected, 3 unresolved. With --json every command prints one JSON object
on stdout; diagnostics go to stderr either way.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import click

from .build_engine import BuildRecord
from .config import RunConfig, load_config
from .demo_store import (
    DemonstrationIndex,
    DemonstrationRecord,
    FlakinessCategory,
    builtin_store_path,
    category_stats,
    classify_failure_exclusion,
    load_exclusion_filters,
    load_store,
    save_store,
)
from .dockerfile_model import diff_docs, parse_dockerfile, render_diff
from .errors import FlakiDockError
from .log_preprocess import preprocess_log, segment_stages
from .repair_pipeline import (
    VERDICT_NON_FLAKY,
    VERDICT_REPAIRED,
    VERDICT_UNRESOLVED,
    RepairSession,
    assemble_prompt,
    detect_flakiness,
    guess_category,
    repair_flaky_dockerfile,
)
from .similarity import RepairQuery, cluster_add, embed, retrieve_top_k

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_FLAKY = 2
EXIT_UNRESOLVED = 3


class _StateLock:
    """One CLI process per state directory; stale pid locks are reclaimed."""

    def __init__(self, state_dir: Path):
        self.path = Path(state_dir) / ".lock"

    def acquire(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        while True:
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                pid = self._holder()
                if pid is not None and _pid_alive(pid):
                    raise FlakiDockError(
                        f"state directory locked by running process {pid} ({self.path})"
                    )
                self.path.unlink(missing_ok=True)
                continue
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            return

    def release(self) -> None:
        self.path.unlink(missing_ok=True)

    def _holder(self) -> int | None:
        try:
            return int(self.path.read_text())
        except (OSError, ValueError):
            return None


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def _emit(ctx: click.Context, payload: dict, human: str) -> None:
    if ctx.obj["json"]:
        click.echo(json.dumps(payload, indent=2, sort_keys=True, default=str))
    else:
        click.echo(human)


def _fail(ctx: click.Context, message: str) -> None:
    if ctx.obj["json"]:
        click.echo(json.dumps({"error": message}))
    else:
        click.echo(f"error: {message}", err=True)
    ctx.exit(EXIT_ERROR)


def _build_summary(record: BuildRecord) -> dict:
    return {
        "status": record.status,
        "exit_code": record.exit_code,
        "duration": record.duration,
        "started_at": record.started_at,
    }


def _load_doc(ctx: click.Context, path: Path):
    if not path.exists():
        _fail(ctx, f"no such file: {path}")
    try:
        return parse_dockerfile(path.read_bytes())
    except FlakiDockError as exc:
        _fail(ctx, f"cannot parse {path}: {exc}")


def _resolve_store(ctx: click.Context, config: RunConfig) -> DemonstrationIndex:
    providers = ctx.obj["providers"]
    if config.store == "builtin":
        return load_store(builtin_store_path(), providers.query_embedder)
    return load_store(config.store, providers.query_embedder)


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None, help="Config file (key = value lines).")
@click.option("--state-dir", type=click.Path(), default=None, help="Working state directory.")
@click.option("--driver", default=None, help="'real' or 'simulated:<scenario.json>'.")
@click.option("--json", "as_json", is_flag=True, help="Machine-readable output.")
@click.option("--rules", type=click.Path(), default=None, help="Error-expression rules file.")
@click.pass_context
def main(ctx, config_path, state_dir, driver, as_json, rules):
    """Detect, analyze, and repair flaky container-image build definitions."""
    ctx.ensure_object(dict)
    ctx.obj["json"] = as_json
    overrides = {}
    if state_dir is not None:
        overrides["state_dir"] = Path(state_dir)
    if driver is not None:
        overrides["driver"] = driver
    if rules is not None:
        overrides["rules"] = Path(rules)
    try:
        config = load_config(config_path, overrides)
    except FlakiDockError as exc:
        if as_json:
            click.echo(json.dumps({"error": str(exc)}))
        else:
            click.echo(f"error: {exc}", err=True)
        ctx.exit(EXIT_ERROR)
    ctx.obj["config"] = config
    ctx.obj["providers"] = config.make_providers()
    lock = _StateLock(config.state_dir)
    try:
        lock.acquire()
    except FlakiDockError as exc:
        if as_json:
            click.echo(json.dumps({"error": str(exc)}))
        else:
            click.echo(f"error: {exc}", err=True)
        ctx.exit(EXIT_ERROR)
    ctx.call_on_close(lock.release)


@main.command()
@click.argument("dockerfile", type=click.Path())
@click.option("--context", "context_dir", type=click.Path(), default=None, help="Build context (defaults to the Dockerfile's directory).")
@click.pass_context
def detect(ctx, dockerfile, context_dir):
    """Classify DOCKERFILE as flaky or non-flaky by repeated building."""
    config: RunConfig = ctx.obj["config"]
    path = Path(dockerfile)
    doc = _load_doc(ctx, path)
    context = Path(context_dir) if context_dir else path.parent
    try:
        engine = config.make_engine()
        detection = detect_flakiness(doc, context, engine, config.validation_policy())
    except FlakiDockError as exc:
        _fail(ctx, str(exc))
    report = {
        "verdict": "flaky" if detection.flaky else "non-flaky",
        "builds": [_build_summary(r) for r in detection.records],
    }
    if detection.flaky:
        excerpt = preprocess_log(detection.failing_record.log, config.ruleset())
        report["excerpt"] = excerpt.as_text()
    _emit(ctx, report, f"verdict: {report['verdict']} ({len(detection.records)} builds)")
    ctx.exit(EXIT_FLAKY if detection.flaky else EXIT_OK)


@main.command()
@click.argument("dockerfile", type=click.Path())
@click.option("--context", "context_dir", type=click.Path(), default=None)
@click.option("--store", "store_path", type=click.Path(), default=None, help="Demonstration store (records.jsonl). Defaults to the configured store.")
@click.option("--dry-run", is_flag=True, help="Detect, retrieve, and print the prompt without calling the generator.")
@click.pass_context
def repair(ctx, dockerfile, context_dir, store_path, dry_run):
    """Run the full repair loop on DOCKERFILE; writes <name>.repaired on success."""
    config: RunConfig = ctx.obj["config"]
    if store_path is not None:
        config.store = store_path
    path = Path(dockerfile)
    doc = _load_doc(ctx, path)
    context = Path(context_dir) if context_dir else path.parent
    providers = ctx.obj["providers"]
    try:
        store = _resolve_store(ctx, config)
        engine = config.make_engine()
        policy = config.validation_policy()
        if dry_run:
            detection = detect_flakiness(doc, context, engine, policy)
            if not detection.flaky:
                _emit(ctx, {"verdict": VERDICT_NON_FLAKY, "note": "non-flaky"}, "non-flaky; nothing to repair")
                ctx.exit(EXIT_OK)
            rules = config.ruleset()
            dynamic = preprocess_log(detection.failing_record.log, rules).as_text()
            query = RepairQuery.build(doc.raw_text, dynamic or detection.failing_record.log[-2000:])
            session = RepairSession(query=query)
            session.retrieved = retrieve_top_k(query, store, config.retrieval_k, providers.query_embedder)
            prompt = assemble_prompt(session, config.prompt_budget)
            if ctx.obj["json"]:
                _emit(ctx, {"verdict": "dry-run", "prompt": prompt,
                            "retrieved": [r.id for r, _ in session.retrieved]}, "")
            else:
                click.echo(prompt)
            ctx.exit(EXIT_OK)
        if providers.generator is None:
            _fail(ctx, "no generation provider configured (set generation_provider)")
        session_id = f"{path.stem}-{doc.content_hash[:12]}"
        session_dir = Path(config.state_dir) / "sessions" / session_id
        suffix = 2
        while session_dir.exists():  # keep earlier audit trails intact
            session_dir = session_dir.with_name(f"{session_id}-{suffix}")
            suffix += 1
        session = repair_flaky_dockerfile(
            doc, context, store, providers, policy, engine,
            retrieval_k=config.retrieval_k,
            rules=config.ruleset(),
            session_dir=session_dir,
            prompt_budget=config.prompt_budget,
        )
    except FlakiDockError as exc:
        _fail(ctx, str(exc))
    summary = {
        "verdict": session.verdict,
        "attempts_used": session.attempts_used,
        "retrieved": [record.id for record, _ in session.retrieved],
        "category_guess": guess_category(session).value,
        "session_dir": str(session.session_dir) if session.session_dir else None,
    }
    if session.verdict == VERDICT_NON_FLAKY:
        summary["note"] = "non-flaky"
        _emit(ctx, summary, "non-flaky; nothing to repair")
        ctx.exit(EXIT_OK)
    if session.verdict == VERDICT_REPAIRED:
        repaired_path = path.with_name(path.name + ".repaired")
        repaired_path.write_text(session.final_dockerfile, encoding="utf-8")
        summary["repaired_file"] = str(repaired_path)
        diff = render_diff(diff_docs(doc, parse_dockerfile(session.final_dockerfile)))
        _emit(ctx, summary, f"repaired after {session.attempts_used} attempt(s):\n{diff}")
        ctx.exit(EXIT_OK)
    if session.verdict == VERDICT_UNRESOLVED:
        _emit(ctx, summary, f"unable to resolve after {session.attempts_used} attempt(s)")
        ctx.exit(EXIT_UNRESOLVED)
    _fail(ctx, f"session aborted: {session.verdict}")


@main.command()
@click.argument("log_dir", type=click.Path())
@click.pass_context
def cluster(ctx, log_dir):
    """Cluster the failing build logs in LOG_DIR by error similarity."""
    config: RunConfig = ctx.obj["config"]
    providers = ctx.obj["providers"]
    directory = Path(log_dir)
    if not directory.is_dir():
        _fail(ctx, f"no such directory: {directory}")
    files = sorted(p for p in directory.iterdir() if p.is_file())
    if not files:
        _fail(ctx, f"no log files in {directory}")
    rules = config.ruleset()
    state = []
    assignments = {}
    try:
        for log_file in files:
            try:
                text = log_file.read_text(encoding="utf-8", errors="replace")
            except OSError as exc:
                _fail(ctx, f"unreadable file {log_file}: {exc}")
            excerpt = preprocess_log(text, rules).as_text() or text[-2000:] or log_file.name
            vec = embed(excerpt, providers.sentence_embedder)
            state, cid = cluster_add(state, log_file.name, vec, config.cluster_threshold)
            assignments[log_file.name] = cid
    except FlakiDockError as exc:
        _fail(ctx, str(exc))
    report = {
        "inputs": len(files),
        "clusters": [
            {"id": c.id, "members": list(c.member_ids)} for c in state
        ],
        "reduction": 1.0 - len(state) / len(files),
    }
    _emit(
        ctx,
        report,
        f"{len(files)} logs -> {len(state)} clusters (reduction {report['reduction']:.2f})",
    )


@main.command()
@click.argument("manifest", type=click.Path())
@click.option("--rounds", type=int, required=True, help="Builds per project in this invocation.")
@click.pass_context
def monitor(ctx, manifest, rounds):
    """Build every project in MANIFEST repeatedly and track failure history.

    MANIFEST lists one `name context_dir` pair per line (# comments allowed).
    """
    config: RunConfig = ctx.obj["config"]
    manifest_path = Path(manifest)
    if not manifest_path.exists():
        _fail(ctx, f"no such file: {manifest_path}")
    if rounds < 0:
        _fail(ctx, "rounds must be >= 0")
    projects = []
    for lineno, raw in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(None, 1)
        if len(parts) != 2:
            _fail(ctx, f"{manifest_path}:{lineno}: expected 'name context_dir'")
        projects.append((parts[0], Path(parts[1])))

    history_dir = Path(config.state_dir) / "history"
    history_dir.mkdir(parents=True, exist_ok=True)
    filters = load_exclusion_filters()
    rules = config.ruleset()
    engine = config.make_engine()  # one engine: series run one after another
    summary = {}
    for name, context in projects:
        entry = {"builds": 0, "failures": 0, "excluded": 0, "errors": []}
        summary[name] = entry
        dockerfile = context / "Dockerfile"
        records: list[BuildRecord] = []
        if rounds > 0:
            try:
                doc = parse_dockerfile(dockerfile.read_bytes())
                records = engine.run_build_series(doc, context, rounds)
            except (OSError, FlakiDockError) as exc:
                entry["errors"].append(str(exc))  # record and keep going
        history_file = history_dir / f"{name}.jsonl"
        with open(history_file, "a", encoding="utf-8") as fh:
            for record in records:
                excerpt = preprocess_log(record.log, rules).as_text()
                exclusion = (
                    classify_failure_exclusion(excerpt or record.log, filters)
                    if not record.succeeded
                    else None
                )
                fh.write(
                    json.dumps(
                        {
                            "status": record.status,
                            "started_at": record.started_at,
                            "duration": record.duration,
                            "exclusion": exclusion,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
        entry["builds"] = len(records)
        history = [
            json.loads(line)
            for line in history_file.read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
        failures = [h for h in history if h["status"] != "success"]
        excluded = [h for h in failures if h.get("exclusion")]
        entry["failures"] = len(failures)
        entry["excluded"] = len(excluded)
        entry["flaky_candidate"] = len(failures) > len(excluded)
    report = {
        "projects": summary,
        "flaky_candidates": sorted(
            name for name, entry in summary.items() if entry.get("flaky_candidate")
        ),
        "cleanups_performed": engine.cleanups_performed,
    }
    human = "\n".join(
        f"{name}: builds={e['builds']} failures={e['failures']} "
        f"excluded={e['excluded']} flaky_candidate={e.get('flaky_candidate', False)}"
        for name, e in summary.items()
    )
    _emit(ctx, report, human or "no projects")


@main.command()
@click.argument("logfile", type=click.Path())
@click.pass_context
def preprocess(ctx, logfile):
    """Print the error-focused excerpt of a raw build log (debugging aid)."""
    config: RunConfig = ctx.obj["config"]
    path = Path(logfile)
    if not path.exists():
        _fail(ctx, f"no such file: {path}")
    try:
        text = path.read_text(encoding="utf-8", errors="replace")
        sections = segment_stages(text)
        result = preprocess_log(text, config.ruleset())
    except FlakiDockError as exc:
        _fail(ctx, str(exc))
    payload = {
        "stages": len([s for s in sections if not s.is_preamble]),
        "total_lines_in": result.total_lines_in,
        "total_lines_out": result.total_lines_out,
        "rule_hits": result.rule_hits,
        "excerpt": result.as_text(),
    }
    _emit(ctx, payload, result.as_text())


@main.group()
def dataset():
    """Inspect and extend demonstration stores."""


@dataset.command("validate")
@click.argument("store_path", type=click.Path())
@click.pass_context
def dataset_validate(ctx, store_path):
    """Validate every record in a store against the schema."""
    providers = ctx.obj["providers"]
    try:
        index = load_store(store_path, providers.query_embedder)
    except FlakiDockError as exc:
        _fail(ctx, str(exc))
    _emit(
        ctx,
        {"valid": True, "records": len(index)},
        f"ok: {len(index)} valid records",
    )


@dataset.command("stats")
@click.argument("store_path", type=click.Path())
@click.pass_context
def dataset_stats(ctx, store_path):
    """Per-category record counts and fractions."""
    providers = ctx.obj["providers"]
    try:
        index = load_store(store_path, providers.query_embedder)
    except FlakiDockError as exc:
        _fail(ctx, str(exc))
    stats = category_stats(index)
    payload = {
        "records": len(index),
        "categories": {
            major.value: {"count": share.count, "fraction": share.fraction}
            for major, share in stats.items()
        },
    }
    human = "\n".join(
        f"{major.value}: {share.count} ({share.fraction:.1%})"
        for major, share in stats.items()
    )
    _emit(ctx, payload, human or "empty store")


@dataset.command("add")
@click.argument("store_path", type=click.Path())
@click.option("--id", "record_id", required=True)
@click.option("--dockerfile", "dockerfile_path", type=click.Path(exists=True), required=True)
@click.option("--log", "log_path", type=click.Path(exists=True), required=True, help="Raw failing build log (preprocessed on ingest).")
@click.option("--category", required=True, help="e.g. 'DEP/Versioning Issues' or 'MISC'.")
@click.option("--repair", "repair_paths", type=click.Path(exists=True), multiple=True, required=True)
@click.option("--iterations", default=None, help="Comma-separated validation build counts, one per repair (default 2 each).")
@click.pass_context
def dataset_add(ctx, store_path, record_id, dockerfile_path, log_path, category, repair_paths, iterations):
    """Append one demonstration record to a store (created if missing)."""
    config: RunConfig = ctx.obj["config"]
    providers = ctx.obj["providers"]
    store_file = Path(store_path)
    records_path = store_file / "records.jsonl" if store_file.is_dir() else store_file
    try:
        if records_path.exists():
            index = load_store(store_file, providers.query_embedder)
        else:
            index = DemonstrationIndex([])
        raw_log = Path(log_path).read_text(encoding="utf-8", errors="replace")
        dynamic = preprocess_log(raw_log, config.ruleset()).as_text() or raw_log[-2000:]
        if iterations:
            counts = tuple(int(v) for v in iterations.split(","))
        else:
            counts = tuple(config.build_iterations for _ in repair_paths)
        record = DemonstrationRecord(
            id=record_id,
            static_part=Path(dockerfile_path).read_text(encoding="utf-8"),
            dynamic_part=dynamic,
            category=FlakinessCategory.from_string(category),
            repairs=tuple(Path(p).read_text(encoding="utf-8") for p in repair_paths),
            iterations=counts,
        )
        index.add(record, providers.query_embedder)
        save_store(index, store_file)
    except (OSError, ValueError, FlakiDockError) as exc:
        _fail(ctx, str(exc))
    _emit(
        ctx,
        {"added": record_id, "records": len(index)},
        f"added {record_id!r}; store now holds {len(index)} records",
    )


if __name__ == "__main__":
    main()
