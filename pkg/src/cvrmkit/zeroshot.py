"""Two-prompt zero-shot labeling pipeline.

Per record: rule-based de-identification, a translation request (Dutch to
English, prefixed with age and gender), then an extraction request over the
translated text answered strictly yes/no. Backends are pluggable: a generic
HTTP chat-completion endpoint or an offline mock that encodes the synthetic
corpus' planted rule. Responses are cached on disk so paid calls are never
repeated, and no call may contain text that still matches a
de-identification rule.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .evaluation import MetricsReport, compute_metrics, confusion_from_pairs
from .records import PatientRecord
from .synth import POSITIVE_RULE_MIN, count_risk_phrases

log = logging.getLogger(__name__)

API_KEY_ENV = "CHAT_API_KEY"

SYSTEM_TEMPLATE = (
    "You are a faithful and truthful label extractor in the cardio/geriatrics domain. "
    "You are an expert in cardiovascular risk management. You assign people to the "
    "cardiovascular risk management regime based on the Dutch guidelines. "
    "This is an extract of the CVRM guidelines: {summary}"
)

TRANSLATION_PROMPT = "Translate this Dutch geriatrics consult to English."

EXTRACTION_PROMPT = (
    "We want to know whether the patient, based on this medical consult text and the "
    "CVRM guidelines, has an elevated risk for cardiovascular disease. "
    "Only respond with yes / no."
)


def load_guideline_summary() -> str:
    return (resources.files("cvrmkit.resources") / "cvrm_guidelines_summary.md").read_text(
        encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# de-identification stub
# ---------------------------------------------------------------------------

_MONTHS = (
    "januari|februari|maart|april|mei|juni|juli|augustus|september|oktober|november|december"
)
_CAP_WORD = r"[A-Z][a-zà-öø-ÿ]+"
_PARTICLE = r"(?:de|van|der|den|ter|te)"


@dataclass(frozen=True)
class DeidRule:
    name: str
    pattern: re.Pattern
    tag: str


# Fixed application order: dates, then person names, then long digit runs.
# Replacement tags are all-caps inside angle brackets, which no rule matches,
# so masking is idempotent and free of rewrite loops.
DEID_RULES = (
    DeidRule("date", re.compile(r"\b\d{1,2}-\d{1,2}-\d{4}\b"), "<DATUM>"),
    DeidRule("date_written", re.compile(rf"\b\d{{1,2}} (?:{_MONTHS}) \d{{4}}\b"), "<DATUM>"),
    DeidRule(
        "person",
        re.compile(rf"\b{_CAP_WORD}(?:(?:\s+{_PARTICLE})*\s+{_CAP_WORD})+\b"),
        "<PERSOON>",
    ),
    DeidRule("id", re.compile(r"\d{7,}"), "<ID>"),
)


def deidentify(text: str) -> str:
    """Apply the masking rules in fixed order; idempotent."""
    for rule in DEID_RULES:
        text = rule.pattern.sub(rule.tag, text)
    return text


def scan_for_identifiers(text: str) -> list[tuple[str, str]]:
    """All residual (rule name, matched text) pairs; empty means clean."""
    found = []
    for rule in DEID_RULES:
        found.extend((rule.name, m.group(0)) for m in rule.pattern.finditer(text))
    return found


class DeidLeakError(RuntimeError):
    """Outbound content still matches a de-identification rule."""


# ---------------------------------------------------------------------------
# prompts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown role {self.role!r}")
        if self.role in ("system", "user") and not self.content.strip():
            raise ValueError(f"{self.role} message must have content")

    def as_dict(self) -> dict:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class PromptBundle:
    system: ChatMessage
    translation_request: ChatMessage
    extraction_request: ChatMessage
    guideline_summary: str


def build_prompts(
    record: PatientRecord,
    guideline_summary: str | None = None,
    texts: list[str] | None = None,
) -> PromptBundle:
    """Assemble the two-prompt conversation pieces for one record.

    ``texts`` should be the de-identified consult texts; they default to the
    record's raw texts for callers that handle masking themselves.
    """
    summary = guideline_summary if guideline_summary is not None else load_guideline_summary()
    texts = record.consult_texts() if texts is None else texts
    if not any(t.strip() for t in texts):
        raise ValueError("record has no consult text")
    translation = "\n".join(
        [TRANSLATION_PROMPT, f"Age: {record.age}. Gender: {record.gender}.", "\n".join(texts)]
    )
    return PromptBundle(
        system=ChatMessage("system", SYSTEM_TEMPLATE.format(summary=summary)),
        translation_request=ChatMessage("user", translation),
        extraction_request=ChatMessage("user", EXTRACTION_PROMPT),
        guideline_summary=summary,
    )


# ---------------------------------------------------------------------------
# chat clients
# ---------------------------------------------------------------------------

class ChatClientError(RuntimeError):
    pass


class AuthError(ChatClientError):
    pass


class TransientError(ChatClientError):
    """Retryable failure: connection trouble, rate limit, or a 5xx answer."""


class MalformedResponseError(ChatClientError):
    pass


def _messages_hash(messages: list[ChatMessage]) -> str:
    h = hashlib.sha256()
    for m in messages:
        h.update(m.role.encode())
        h.update(b"\x00")
        h.update(m.content.encode())
        h.update(b"\x01")
    return h.hexdigest()


def chat_complete(
    client,
    messages: list[ChatMessage],
    max_attempts: int = 3,
    base_delay: float = 0.5,
    _sleep=time.sleep,
) -> str:
    """Call the backend with retry on transient failures (exponential backoff).

    Only a request hash and message count are logged, never patient text.
    """
    digest = _messages_hash(messages)[:12]
    last: TransientError | None = None
    for attempt in range(1, max_attempts + 1):
        try:
            reply = client.complete(messages)
            log.info("chat request %s ok (%d messages, attempt %d)", digest, len(messages), attempt)
            return reply
        except TransientError as exc:
            last = exc
            log.warning("chat request %s failed on attempt %d: %s", digest, attempt, exc)
            if attempt < max_attempts:
                _sleep(base_delay * 2 ** (attempt - 1))
    raise TransientError(f"request {digest} failed after {max_attempts} attempts: {last}")


class MockChatClient:
    """Offline backend encoding the synthetic corpus' planted rule.

    Translation requests are answered with the text unchanged (identity
    translation); extraction requests answer "yes" iff the translated
    context contains at least POSITIVE_RULE_MIN risk phrases. ``inverted``
    flips the answer (an anti-oracle for metric sanity checks).
    """

    def __init__(self, inverted: bool = False):
        self.inverted = inverted
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, messages: list[ChatMessage]) -> str:
        with self._lock:
            self.calls += 1
        last = messages[-1]
        if last.content.startswith(TRANSLATION_PROMPT):
            return last.content
        context = " ".join(m.content for m in messages if m.role == "assistant")
        answer = count_risk_phrases(context) >= POSITIVE_RULE_MIN
        if self.inverted:
            answer = not answer
        return "yes" if answer else "no"


class HttpChatClient:
    """Generic JSON chat-completion endpoint: POST {model, messages}.

    The assistant text is extracted from the response at ``response_path``.
    The API key comes from the CHAT_API_KEY environment variable unless
    passed explicitly.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str | None = None,
        response_path: tuple = ("choices", 0, "message", "content"),
        timeout: float = 60.0,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        if not self.api_key:
            raise AuthError(f"no API key: set {API_KEY_ENV} or pass api_key")
        self.response_path = tuple(response_path)
        self.timeout = timeout
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, messages: list[ChatMessage]) -> str:
        with self._lock:
            self.calls += 1
        payload = json.dumps(
            {"model": self.model, "messages": [m.as_dict() for m in messages]}
        ).encode("utf-8")
        request = urllib.request.Request(
            self.endpoint,
            data=payload,
            headers={
                "Content-Type": "application/json",
                "Authorization": f"Bearer {self.api_key}",
            },
            method="POST",
        )
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as response:
                body = response.read().decode("utf-8")
        except urllib.error.HTTPError as exc:
            if exc.code in (401, 403):
                raise AuthError(f"authentication failed (HTTP {exc.code})") from None
            if exc.code == 429 or exc.code >= 500:
                raise TransientError(f"HTTP {exc.code}") from None
            raise ChatClientError(f"HTTP {exc.code}") from None
        except urllib.error.URLError as exc:
            raise TransientError(f"connection failed: {exc.reason}") from None
        try:
            node = json.loads(body)
        except json.JSONDecodeError:
            raise MalformedResponseError("response is not JSON") from None
        try:
            for step in self.response_path:
                node = node[step]
        except (KeyError, IndexError, TypeError):
            raise MalformedResponseError(
                f"response lacks assistant text at path {self.response_path}"
            ) from None
        if not isinstance(node, str):
            raise MalformedResponseError("assistant content is not a string")
        return node


# ---------------------------------------------------------------------------
# response cache
# ---------------------------------------------------------------------------

class ResponseCache:
    """Append-only JSONL cache keyed by (record id, prompt hash)."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[tuple[str, str], str] = {}
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    obj = json.loads(line)
                    self._entries[(obj["record_id"], obj["prompt_hash"])] = obj["response"]

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, record_id: str, prompt_hash: str) -> str | None:
        return self._entries.get((record_id, prompt_hash))

    def put(self, record_id: str, prompt_hash: str, response: str) -> None:
        with self._lock:
            self._entries[(record_id, prompt_hash)] = response
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(
                    json.dumps(
                        {"record_id": record_id, "prompt_hash": prompt_hash, "response": response},
                        ensure_ascii=False,
                    )
                    + "\n"
                )


# ---------------------------------------------------------------------------
# label parsing and the pipeline
# ---------------------------------------------------------------------------

class LabelParseError(ValueError):
    pass


def parse_label(response: str) -> int:
    """Strict yes/no to 1/0; anything else is a parse error."""
    cleaned = response.strip().lower().rstrip(".!?,;:")
    if cleaned == "yes":
        return 1
    if cleaned == "no":
        return 0
    raise LabelParseError(f"expected yes/no, got {response!r}")


@dataclass
class ZeroShotResult:
    report: MetricsReport | None
    predictions: dict[str, int]
    parse_errors: list[tuple[str, str]] = field(default_factory=list)
    records_seen: int = 0

    @property
    def parse_error_count(self) -> int:
        return len(self.parse_errors)


def _assert_clean(messages: list[ChatMessage], record_id: str) -> None:
    for message in messages:
        leaks = scan_for_identifiers(message.content)
        if leaks:
            raise DeidLeakError(
                f"record {record_id}: outbound {message.role} message still matches "
                f"de-identification rules: {leaks[:3]}"
            )


def _label_one(
    record: PatientRecord,
    client,
    cache: ResponseCache | None,
    summary: str,
    use_cache: bool,
) -> int:
    masked = [deidentify(t) for t in record.consult_texts()]
    bundle = build_prompts(record, summary, texts=masked)
    conversation = [bundle.system, bundle.translation_request]
    _assert_clean(conversation, record.patient_id)

    h1 = _messages_hash(conversation)
    translation = cache.get(record.patient_id, h1) if (cache and use_cache) else None
    if translation is None:
        translation = chat_complete(client, conversation)
        if cache is not None:
            cache.put(record.patient_id, h1, translation)
    # re-mask the model's translation before it travels again
    conversation = conversation + [
        ChatMessage("assistant", deidentify(translation)),
        bundle.extraction_request,
    ]
    _assert_clean(conversation, record.patient_id)

    h2 = _messages_hash(conversation)
    answer = cache.get(record.patient_id, h2) if (cache and use_cache) else None
    if answer is None:
        answer = chat_complete(client, conversation)
        if cache is not None:
            cache.put(record.patient_id, h2, answer)
    return parse_label(answer)


def run_zeroshot(
    records: list[PatientRecord],
    client,
    cache: ResponseCache | None = None,
    guideline_summary: str | None = None,
    concurrency: int = 4,
    use_cache: bool = True,
) -> ZeroShotResult:
    """Label every record via the two-prompt flow and score the parsed ones.

    Parse failures exclude the record and are reported separately. With a
    cache, completed calls persist, so an aborted batch resumes where it
    stopped and a warm rerun issues no calls at all.
    """
    summary = guideline_summary if guideline_summary is not None else load_guideline_summary()
    predictions: dict[str, int] = {}
    parse_errors: list[tuple[str, str]] = []

    def worker(record: PatientRecord):
        return _label_one(record, client, cache, summary, use_cache)

    if records:
        with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
            outcomes = list(pool.map(lambda r: _safe(worker, r), records))
        for record, (label, error) in zip(records, outcomes):
            if error is not None:
                parse_errors.append((record.patient_id, error))
            else:
                predictions[record.patient_id] = label

    report = None
    if predictions:
        y_true = np.array([r.label for r in records if r.patient_id in predictions])
        y_pred = np.array([predictions[r.patient_id] for r in records if r.patient_id in predictions])
        report = MetricsReport.from_entries([compute_metrics(confusion_from_pairs(y_true, y_pred))])
    return ZeroShotResult(
        report=report,
        predictions=predictions,
        parse_errors=parse_errors,
        records_seen=len(records),
    )


def _safe(worker, record):
    try:
        return worker(record), None
    except LabelParseError as exc:
        return None, str(exc)
