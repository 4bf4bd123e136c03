"""End-to-end repair flow: detect, retrieve, generate, validate, feed back.

Detection builds the document n times and stops at the first failure.
The failing output is preprocessed and, together with the document text,
forms the retrieval query. Repair candidates come from the generation
provider and are validated by rebuilding n times; a failed candidate
becomes a false demonstration in the next prompt. When the same failure
keeps recurring (measured by sentence similarity of the preprocessed
outputs) the session gives up rather than looping on a dead end.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

from .build_engine import BuildEngine, BuildRecord
from .demo_store import DemonstrationIndex, DemonstrationRecord, MajorCategory
from .dockerfile_model import DockerfileDoc, parse_dockerfile
from .errors import BudgetExhausted, EngineError, FlakiDockError, UnparseableResponse
from .log_preprocess import RuleSet, preprocess_log
from .providers import (
    EmbeddingProvider,
    TextGenerationProvider,
    estimate_tokens,
    truncate_to_tokens,
)
from .similarity import RepairQuery, cosine, embed, retrieve_top_k

log = logging.getLogger(__name__)

VERDICT_IN_PROGRESS = "in-progress"
VERDICT_REPAIRED = "repaired"
VERDICT_UNRESOLVED = "unresolved"
VERDICT_NON_FLAKY = "non-flaky"
VERDICT_ENGINE_ABORTED = "engine-aborted"

UNPARSEABLE_FEEDBACK = "provider returned unparseable repair"


@dataclass(frozen=True)
class ValidationPolicy:
    build_iterations: int = 2  # n: consecutive successes required
    failure_threshold: int = 3  # T: similar failures before giving up
    max_total_attempts: int = 10  # hard cap on generator calls per session
    feedback_similarity_threshold: float = 0.90

    def __post_init__(self):
        if self.build_iterations < 1:
            raise ValueError("build_iterations must be >= 1")
        if self.failure_threshold < 1:
            raise ValueError("failure_threshold must be >= 1")
        if self.max_total_attempts < 1:
            raise ValueError("max_total_attempts must be >= 1")
        if not 0.0 < self.feedback_similarity_threshold < 1.0:
            raise ValueError("feedback_similarity_threshold must be in (0, 1)")


@dataclass(frozen=True)
class FeedbackEntry:
    false_repair: str  # candidate that failed validation
    failure_output: str  # its preprocessed failing build output
    attempt_index: int


@dataclass
class RepairSession:
    query: RepairQuery
    retrieved: list[tuple[DemonstrationRecord, float]] = field(default_factory=list)
    feedback: list[FeedbackEntry] = field(default_factory=list)
    verdict: str = VERDICT_IN_PROGRESS
    final_dockerfile: str | None = None
    attempts_used: int = 0
    session_dir: Path | None = None

    def add_feedback(self, false_repair: str, failure_output: str) -> None:
        if self.feedback and self.attempts_used <= self.feedback[-1].attempt_index:
            raise ValueError("feedback attempt indices must strictly increase")
        self.feedback.append(
            FeedbackEntry(false_repair, failure_output, self.attempts_used)
        )


@dataclass(frozen=True)
class Detection:
    flaky: bool
    failing_record: BuildRecord | None
    records: list[BuildRecord]


def detect_flakiness(
    doc: DockerfileDoc,
    context_dir,
    engine: BuildEngine,
    policy: ValidationPolicy,
    persist_dir: Path | None = None,
) -> Detection:
    """Non-flaky only when all n builds succeed; stops at the first failure."""
    records = engine.run_build_series(
        doc,
        context_dir,
        policy.build_iterations,
        stop_on_failure=True,
        persist_dir=persist_dir,
    )
    failing = next((r for r in records if not r.succeeded), None)
    return Detection(failing is not None, failing, records)


# --- prompt assembly ---

TASK_DESCRIPTION = """\
You are repairing a flaky Dockerfile: one whose builds alternate between
success and failure over time although neither the file nor the project
source changed. Using the build output below, produce a corrected
Dockerfile that builds reliably. Respond with the complete repaired
Dockerfile in a single fenced code block and nothing else."""

COT_GUIDANCE = """\
Reason step by step before writing the file:
1. Locate the instruction whose stage failed in the build output.
2. Identify what changed underneath the build (base image contents,
   package availability, protocol or environment requirements).
3. Decide the smallest edit that removes the failure without pinning the
   build to an outdated or vulnerable state.
4. Re-check that every other instruction still works after your edit."""

EXAMPLE_HEADER = "### Example {idx} (similarity {sim:.2f})"
QUERY_HEADER = "### Flaky Dockerfile (repair this one)"
FEEDBACK_HEADER = "### Failed attempt {idx} (false demonstration - do not repeat it)"
STATIC_LABEL = "--- DOCKERFILE ---"
DYNAMIC_LABEL = "--- BUILD OUTPUT ---"
REPAIR_LABEL = "--- REPAIR ---"
REJECTED_LABEL = "--- REJECTED DOCKERFILE ---"
FEEDBACK_OUTPUT_LABEL = "--- ITS BUILD OUTPUT ---"

_MIN_DYNAMIC_TOKENS = 64


def _render_prompt(
    session: RepairSession,
    examples: list[tuple[DemonstrationRecord, float]],
    dynamic_budget: int | None,
) -> str:
    def clip(text: str) -> str:
        if dynamic_budget is None:
            return text
        return truncate_to_tokens(text, dynamic_budget)

    blocks = [TASK_DESCRIPTION, COT_GUIDANCE]
    for idx, (record, sim) in enumerate(examples, start=1):
        parts = [
            EXAMPLE_HEADER.format(idx=idx, sim=sim),
            STATIC_LABEL,
            record.static_part,
            DYNAMIC_LABEL,
            clip(record.dynamic_part),
        ]
        for pos, repair in enumerate(record.repairs):
            parts.append(REPAIR_LABEL if pos == 0 else f"--- REPAIR (alternative {pos + 1}) ---")
            parts.append(repair)
        blocks.append("\n".join(parts))
    blocks.append(
        "\n".join(
            [
                QUERY_HEADER,
                STATIC_LABEL,
                session.query.static_part,
                DYNAMIC_LABEL,
                clip(session.query.dynamic_part),
            ]
        )
    )
    for idx, entry in enumerate(session.feedback, start=1):
        blocks.append(
            "\n".join(
                [
                    FEEDBACK_HEADER.format(idx=idx),
                    REJECTED_LABEL,
                    entry.false_repair,
                    FEEDBACK_OUTPUT_LABEL,
                    clip(entry.failure_output),
                ]
            )
        )
    return "\n\n".join(blocks)


def assemble_prompt(session: RepairSession, budget_tokens: int = 8000) -> str:
    """Build the generation prompt within the provider context budget.

    Over budget, the lowest-similarity examples are dropped first, then all
    build-output texts are tail-truncated in halving steps. If the bare
    query still does not fit, BudgetExhausted is raised.
    """
    examples = list(session.retrieved)
    prompt = _render_prompt(session, examples, None)
    while estimate_tokens(prompt) > budget_tokens and examples:
        examples.pop()  # retrieved is sorted by similarity, weakest last
        prompt = _render_prompt(session, examples, None)
    dynamic_budget = None
    while estimate_tokens(prompt) > budget_tokens:
        dynamic_budget = (
            estimate_tokens(session.query.dynamic_part) // 2
            if dynamic_budget is None
            else dynamic_budget // 2
        )
        if dynamic_budget < _MIN_DYNAMIC_TOKENS:
            raise BudgetExhausted(
                f"query alone exceeds the {budget_tokens}-token prompt budget"
            )
        prompt = _render_prompt(session, examples, dynamic_budget)
    return prompt


# --- repair generation ---

_FENCE_RE = re.compile(r"```[^\n]*\n(.*?)```", re.DOTALL)


def generate_repair(prompt: str, provider: TextGenerationProvider) -> DockerfileDoc:
    """One generator call; the first fenced code block must be a buildable file."""
    response = provider.generate(prompt)
    return parse_candidate(response)


def parse_candidate(response: str) -> DockerfileDoc:
    match = _FENCE_RE.search(response)
    if not match:
        raise UnparseableResponse("response contains no fenced code block")
    body = match.group(1)
    try:
        doc = parse_dockerfile(body)
    except FlakiDockError as exc:
        raise UnparseableResponse(f"fenced block does not parse: {exc}") from exc
    if doc.stage_count < 1:
        raise UnparseableResponse("candidate has no FROM instruction")
    return doc


# --- validation ---

@dataclass(frozen=True)
class ValidationOutcome:
    kind: str  # "repair" | "feedback" | "unresolved" | "engine-aborted"
    records: list[BuildRecord]
    failure_output: str | None = None


def _failure_text(record: BuildRecord, rules: RuleSet) -> str:
    text = preprocess_log(record.log, rules).as_text()
    if text:
        return text
    # No rule matched; fall back to the log tail so feedback is never empty.
    tail = record.log[-2000:]
    return tail if tail.strip() else "(empty build output)"


def count_similar_failures(
    new_output: str,
    feedback: list[FeedbackEntry],
    sentence_provider: EmbeddingProvider,
    threshold: float,
) -> int:
    """Similar prior failures plus one for the new failure itself."""
    new_vec = embed(new_output, sentence_provider)
    similar = sum(
        1
        for entry in feedback
        if cosine(embed(entry.failure_output, sentence_provider), new_vec) >= threshold
    )
    return similar + 1


def validate_repair(
    candidate: DockerfileDoc,
    session: RepairSession,
    policy: ValidationPolicy,
    context_dir,
    engine: BuildEngine,
    sentence_provider: EmbeddingProvider,
    rules: RuleSet | None = None,
    persist_dir: Path | None = None,
) -> ValidationOutcome:
    """Decide repair / feedback / unresolved for one candidate.

    The candidate is built n times. All successes confirm the repair.
    Otherwise the failing output is preprocessed and compared against the
    accumulated feedback: once the same failure has been seen T times in
    total the session is abandoned, else the candidate joins the feedback
    list for the next prompt.
    """
    if session.verdict != VERDICT_IN_PROGRESS:
        raise ValueError(f"session already terminal: {session.verdict}")
    rules = rules or RuleSet.default()
    try:
        records = engine.run_build_series(
            candidate,
            context_dir,
            policy.build_iterations,
            stop_on_failure=True,
            persist_dir=persist_dir,
        )
    except EngineError as exc:
        session.verdict = VERDICT_ENGINE_ABORTED
        return ValidationOutcome(VERDICT_ENGINE_ABORTED, exc.records)

    failing = next((r for r in records if not r.succeeded), None)
    if failing is None:
        return ValidationOutcome("repair", records)

    failure_output = _failure_text(failing, rules)
    failures = count_similar_failures(
        failure_output,
        session.feedback,
        sentence_provider,
        policy.feedback_similarity_threshold,
    )
    if failures >= policy.failure_threshold:
        return ValidationOutcome(VERDICT_UNRESOLVED, records, failure_output)
    session.add_feedback(candidate.raw_text, failure_output)
    return ValidationOutcome("feedback", records, failure_output)


# --- full pipeline ---

@dataclass
class ProviderSet:
    query_embedder: EmbeddingProvider
    sentence_embedder: EmbeddingProvider
    generator: TextGenerationProvider | None


def repair_flaky_dockerfile(
    doc: DockerfileDoc,
    context_dir,
    store: DemonstrationIndex,
    providers: ProviderSet,
    policy: ValidationPolicy,
    engine: BuildEngine,
    *,
    retrieval_k: int = 3,
    rules: RuleSet | None = None,
    session_dir: Path | None = None,
    prompt_budget: int = 8000,
) -> RepairSession:
    """Run detection, retrieval, and the generate-validate-feedback loop.

    Always returns a session with a terminal verdict. Every prompt,
    response, and build log is persisted under session_dir when given, so
    a session can be audited or replayed offline.
    """
    rules = rules or RuleSet.default()
    if session_dir is not None:
        session_dir = Path(session_dir)
        session_dir.mkdir(parents=True, exist_ok=True)

    def persist(name: str, text: str) -> None:
        if session_dir is not None:
            (session_dir / name).write_text(text, encoding="utf-8")

    builds_dir = None if session_dir is None else session_dir / "builds" / "detect"
    try:
        detection = detect_flakiness(doc, context_dir, engine, policy, persist_dir=builds_dir)
    except EngineError:
        session = RepairSession(
            query=RepairQuery.build(doc.raw_text, ""),
            verdict=VERDICT_ENGINE_ABORTED,
            session_dir=session_dir,
        )
        _persist_session(session)
        return session
    if not detection.flaky:
        session = RepairSession(
            query=RepairQuery.build(doc.raw_text, ""),
            verdict=VERDICT_NON_FLAKY,
            session_dir=session_dir,
        )
        _persist_session(session)
        return session

    dynamic_part = _failure_text(detection.failing_record, rules)
    query = RepairQuery.build(doc.raw_text, dynamic_part)
    session = RepairSession(query=query, session_dir=session_dir)
    session.retrieved = retrieve_top_k(query, store, retrieval_k, providers.query_embedder)
    persist(
        "query.json",
        json.dumps(
            {
                "static_part": query.static_part,
                "dynamic_part": query.dynamic_part,
                "retrieved": [
                    {"id": rec.id, "similarity": sim} for rec, sim in session.retrieved
                ],
            },
            indent=2,
            sort_keys=True,
        ),
    )

    if providers.generator is None:
        raise FlakiDockError("no generation provider configured")

    while session.attempts_used < policy.max_total_attempts:
        attempt = session.attempts_used + 1
        prompt = assemble_prompt(session, prompt_budget)
        persist(f"prompt-{attempt}.txt", prompt)
        response = providers.generator.generate(prompt)
        persist(f"response-{attempt}.txt", response)
        session.attempts_used = attempt

        try:
            candidate = parse_candidate(response)
        except UnparseableResponse:
            session.add_feedback(response, UNPARSEABLE_FEEDBACK)
            continue

        builds_dir = (
            None if session_dir is None else session_dir / "builds" / f"attempt-{attempt}"
        )
        outcome = validate_repair(
            candidate,
            session,
            policy,
            context_dir,
            engine,
            providers.sentence_embedder,
            rules,
            persist_dir=builds_dir,
        )
        if outcome.kind == "repair":
            session.verdict = VERDICT_REPAIRED
            session.final_dockerfile = candidate.raw_text
            break
        if outcome.kind in (VERDICT_UNRESOLVED, VERDICT_ENGINE_ABORTED):
            session.verdict = outcome.kind
            break

    if session.verdict == VERDICT_IN_PROGRESS:
        session.verdict = VERDICT_UNRESOLVED  # attempt cap reached
    _persist_session(session)
    return session


def _persist_session(session: RepairSession) -> None:
    if session.session_dir is None:
        return
    payload = {
        "verdict": session.verdict,
        "attempts_used": session.attempts_used,
        "final_dockerfile": session.final_dockerfile,
        "retrieved": [
            {"id": rec.id, "similarity": sim} for rec, sim in session.retrieved
        ],
        "feedback": [
            {
                "attempt_index": entry.attempt_index,
                "false_repair": entry.false_repair,
                "failure_output": entry.failure_output,
            }
            for entry in session.feedback
        ],
    }
    (session.session_dir / "verdict.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8"
    )


def guess_category(session: RepairSession) -> MajorCategory:
    """Majority major category among the retrieved demonstrations."""
    if not session.retrieved:
        return MajorCategory.MISC
    counts: dict[MajorCategory, int] = {}
    for record, _ in session.retrieved:
        counts[record.category.major] = counts.get(record.category.major, 0) + 1
    best = max(counts.values())
    for record, _ in session.retrieved:  # similarity order breaks ties
        if counts[record.category.major] == best:
            return record.category.major
    return MajorCategory.MISC
