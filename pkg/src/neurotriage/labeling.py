"""Report labeling: prompt construction, endpoint client, JSON parsing, offline mock.

The endpoint speaks the chat-completions wire format.  A transport callable can
be injected everywhere, which is how the offline mock and the tests run the
full path without a network.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import requests

from .core import NUM_FINDINGS, REGISTRY, FindingRegistry, Label, LabelVector
from .errors import (
    AuthError,
    EndpointUnreachable,
    LengthMismatch,
    NoJsonFound,
    TemplateError,
    Timeout,
)

DEFAULT_PROMPT = (
    "Given this radiology report, extract POS or NEG value for these concepts "
    "{concepts}. POS means the concept is present in patient as per report. "
    "NEG means not. Return as json format with keys being the name of the "
    "concepts and value being either POS or NEG. Report:{report}"
)

SYSTEM_MESSAGE = "You extract structured findings from radiology reports."


@dataclass(frozen=True)
class RadiologyReport:
    study_id: str
    text: str
    expert_labels: LabelVector | None = None

    def __post_init__(self):
        if not self.text:
            raise ValueError("report text must be non-empty")


@dataclass(frozen=True)
class PromptTemplate:
    template: str = DEFAULT_PROMPT
    few_shot: tuple[tuple[str, str], ...] = ()   # (report text, label JSON) pairs

    def __post_init__(self):
        for ph in ("{concepts}", "{report}"):
            if self.template.count(ph) != 1:
                raise TemplateError(f"template must contain {ph} exactly once")

    def render(self, report_text: str, registry: FindingRegistry = REGISTRY) -> str:
        concepts = "[" + ", ".join(registry.display_names) + "]"
        return self.template.replace("{concepts}", concepts).replace("{report}", report_text)

    def content_hash(self) -> str:
        payload = json.dumps({"template": self.template, "few_shot": list(self.few_shot)},
                             sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class LLMEndpointConfig:
    base_url: str = "http://localhost:8080/v1/chat/completions"
    model: str = "labeling-model"
    auth_env: str = "NEUROTRIAGE_LLM_TOKEN"   # env var NAME, never the secret
    timeout_s: float = 30.0
    max_retries: int = 3
    requests_per_minute: float = 120.0
    temperature: float = 0.0
    backoff_base_s: float = 0.5
    max_in_flight: int = 4

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.requests_per_minute <= 0:
            raise ValueError("requests_per_minute must be > 0")


@dataclass
class LabelingResult:
    study_id: str
    labels: LabelVector
    raw_response: str
    status: str        # ok | parse_repaired | failed
    attempts: int

    def __post_init__(self):
        if self.status not in ("ok", "parse_repaired", "failed"):
            raise ValueError(f"bad status {self.status!r}")
        if self.status == "failed" and any(v is not Label.UNKNOWN for v in self.labels.values):
            raise ValueError("failed results must carry all-UNKNOWN labels")


def build_messages(report: RadiologyReport, registry: FindingRegistry = REGISTRY,
                   template: PromptTemplate = PromptTemplate()) -> list[dict]:
    """Chat turns: system, then few-shot user/assistant pairs, then the target report."""
    messages = [{"role": "system", "content": SYSTEM_MESSAGE}]
    for example_text, example_json in template.few_shot:
        messages.append({"role": "user", "content": template.render(example_text, registry)})
        messages.append({"role": "assistant", "content": example_json})
    messages.append({"role": "user", "content": template.render(report.text, registry)})
    return messages


def build_prompt(report: RadiologyReport, registry: FindingRegistry = REGISTRY,
                 template: PromptTemplate = PromptTemplate()) -> str:
    """Flat-text rendering of the conversation (few-shot turns precede the target)."""
    blocks = []
    for example_text, example_json in template.few_shot:
        blocks.append(template.render(example_text, registry))
        blocks.append(example_json)
    blocks.append(template.render(report.text, registry))
    return "\n\n".join(blocks)


class _TokenBucket:
    """Requests-per-minute limiter shared by all workers of one client."""

    def __init__(self, rpm: float):
        self.capacity = max(1.0, rpm)
        self.tokens = self.capacity
        self.rate = rpm / 60.0
        self.updated = time.monotonic()
        self.lock = threading.Lock()

    def acquire(self):
        while True:
            with self.lock:
                now = time.monotonic()
                self.tokens = min(self.capacity, self.tokens + (now - self.updated) * self.rate)
                self.updated = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            time.sleep(wait)


def _http_transport(cfg: LLMEndpointConfig):
    def transport(payload: dict) -> tuple[int, str]:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(cfg.auth_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        try:
            resp = requests.post(cfg.base_url, json=payload, headers=headers,
                                 timeout=cfg.timeout_s)
        except requests.Timeout as exc:
            raise Timeout(str(exc)) from exc
        except requests.RequestException as exc:
            raise ConnectionError(str(exc)) from exc
        return resp.status_code, resp.text
    return transport


class LLMClient:
    """Retry/rate-limit wrapper over a chat-completions transport."""

    def __init__(self, cfg: LLMEndpointConfig, transport=None):
        self.cfg = cfg
        self.transport = transport if transport is not None else _http_transport(cfg)
        self.bucket = _TokenBucket(cfg.requests_per_minute)

    def complete(self, messages: list[dict]) -> tuple[str, int]:
        """Send one request; returns (assistant text, attempts used)."""
        payload = {
            "model": self.cfg.model,
            "messages": messages,
            "temperature": self.cfg.temperature,
        }
        attempts = self.cfg.max_retries + 1
        last_exc = None
        for attempt in range(1, attempts + 1):
            self.bucket.acquire()
            try:
                status, body = self.transport(payload)
            except Timeout as exc:
                last_exc = exc
            except ConnectionError as exc:
                last_exc = EndpointUnreachable(str(exc))
            else:
                if status in (401, 403):
                    raise AuthError(f"endpoint returned HTTP {status}")
                if status == 200:
                    return _extract_content(body), attempt
                last_exc = EndpointUnreachable(f"endpoint returned HTTP {status}")
            if attempt < attempts and self.cfg.backoff_base_s > 0:
                time.sleep(self.cfg.backoff_base_s * 2 ** (attempt - 1))
        if isinstance(last_exc, Timeout):
            raise last_exc
        raise EndpointUnreachable(str(last_exc))


def _extract_content(body: str) -> str:
    try:
        obj = json.loads(body)
        return obj["choices"][0]["message"]["content"]
    except (json.JSONDecodeError, KeyError, IndexError, TypeError):
        # bare-text endpoints are tolerated; parsing happens downstream
        return body


def query_llm(prompt, cfg: LLMEndpointConfig, transport=None) -> str:
    """One-shot completion; prompt may be a string or a prepared message list."""
    messages = prompt if isinstance(prompt, list) else [
        {"role": "system", "content": SYSTEM_MESSAGE},
        {"role": "user", "content": prompt},
    ]
    text, _ = LLMClient(cfg, transport).complete(messages)
    return text


def parse_llm_json(raw: str, registry: FindingRegistry = REGISTRY) -> LabelVector:
    """Extract the first JSON object and map its keys onto the registry.

    Keys match case-insensitively ignoring punctuation/whitespace; values other
    than POS/NEG (any case) become UNKNOWN, as do missing findings.
    """
    decoder = json.JSONDecoder()
    obj = None
    for m in re.finditer(r"\{", raw):
        try:
            candidate, _ = decoder.raw_decode(raw, m.start())
        except json.JSONDecodeError:
            continue
        if isinstance(candidate, dict):
            obj = candidate
            break
    if obj is None:
        raise NoJsonFound("no JSON object found in response")
    return LabelVector.from_dict(obj, registry)


def labeling_status(labels: LabelVector) -> str:
    return "ok" if not labels.has_unknown else "parse_repaired"


def _cache_key(template: PromptTemplate, report: RadiologyReport, model: str) -> str:
    h = hashlib.sha256()
    h.update(template.content_hash().encode())
    h.update(hashlib.sha256(report.text.encode("utf-8")).hexdigest().encode())
    h.update(model.encode("utf-8"))
    return h.hexdigest()


def _result_to_json(key: str, result: LabelingResult) -> str:
    return json.dumps({
        "key": key,
        "study_id": result.study_id,
        "labels": [v.value for v in result.labels.values],
        "raw_response": result.raw_response,
        "status": result.status,
        "attempts": result.attempts,
    }, ensure_ascii=False)


def _result_from_json(line: str) -> tuple[str, LabelingResult]:
    obj = json.loads(line)
    labels = LabelVector(tuple(Label(v) for v in obj["labels"]))
    return obj["key"], LabelingResult(
        study_id=obj["study_id"],
        labels=labels,
        raw_response=obj.get("raw_response", ""),
        status=obj["status"],
        attempts=int(obj.get("attempts", 1)),
    )


def load_cache(cache_path) -> dict[str, LabelingResult]:
    cache: dict[str, LabelingResult] = {}
    path = Path(cache_path)
    if not path.exists():
        return cache
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        try:
            key, result = _result_from_json(line)
        except (json.JSONDecodeError, KeyError, ValueError):
            continue  # tolerate torn writes at the tail
        cache[key] = result
    return cache


@dataclass
class LabelingRun:
    results: list[LabelingResult]
    endpoint_calls: int
    cache_hits: int


def label_dataset(reports: list[RadiologyReport], cfg: LLMEndpointConfig, cache_path,
                  template: PromptTemplate = PromptTemplate(),
                  registry: FindingRegistry = REGISTRY,
                  transport=None) -> LabelingRun:
    """Label every report, reusing cached results and bounding in-flight requests.

    Per-report failures are recorded as status "failed"; the batch always
    completes.  The cache is an append-only JSONL keyed by content hashes.
    """
    cache_path = Path(cache_path)
    cache_path.parent.mkdir(parents=True, exist_ok=True)
    cache = load_cache(cache_path)
    client = LLMClient(cfg, transport)
    write_lock = threading.Lock()
    calls = 0
    calls_lock = threading.Lock()

    def work(report: RadiologyReport) -> LabelingResult:
        nonlocal calls
        key = _cache_key(template, report, cfg.model)
        if key in cache:
            return cache[key]
        with calls_lock:
            calls += 1
        persist = True
        try:
            raw, attempts = client.complete(build_messages(report, registry, template))
            labels = parse_llm_json(raw, registry)
            result = LabelingResult(report.study_id, labels, raw,
                                    labeling_status(labels), attempts)
        except NoJsonFound as exc:
            result = LabelingResult(report.study_id, LabelVector.all_of(Label.UNKNOWN),
                                    str(exc), "failed", 1)
        except (EndpointUnreachable, AuthError, Timeout) as exc:
            # transient transport failures are not cached, so a rerun retries them
            persist = False
            result = LabelingResult(report.study_id, LabelVector.all_of(Label.UNKNOWN),
                                    str(exc), "failed", cfg.max_retries + 1)
        if persist:
            with write_lock:
                with open(cache_path, "a") as fh:
                    fh.write(_result_to_json(key, result) + "\n")
        return result

    uncached = [r for r in reports if _cache_key(template, r, cfg.model) not in cache]
    if uncached:
        with ThreadPoolExecutor(max_workers=max(1, cfg.max_in_flight)) as pool:
            fresh = list(pool.map(work, uncached))
        cache.update({_cache_key(template, r, cfg.model): res
                      for r, res in zip(uncached, fresh)})

    hits = len(reports) - len(uncached)
    results = [cache[_cache_key(template, r, cfg.model)] for r in reports]
    return LabelingRun(results=results, endpoint_calls=calls, cache_hits=hits)


# --- offline mock -----------------------------------------------------------

# keyword patterns per finding; a match is positive unless a negation cue
# precedes it in the same sentence
_KEYWORDS = {
    "hemorrhage": (r"\bhemorrhage\b", r"\bhemorrhages\b", r"\bhematoma\b", r"\bbleed\b"),
    "infarct": (r"\binfarct", r"\bischemi"),
    "mass_lesion": (r"\bmass lesion\b",),
    "mass_effect": (r"\bmass effect\b",),
    "hydrocephalus": (r"\bhydrocephalus\b",),
    "midline_shift": (r"\bmidline shift\b",),
    "skull_fracture": (r"\bskull fracture\b", r"\bcalvarial fracture\b"),
    "cerebral_hemorrhagic_contusion": (r"\bhemorrhagic contusion", r"\bcontusion"),
    "diffuse_cerebral_edema": (r"\bdiffuse cerebral edema\b",),
    "microhemorrhage": (r"\bmicrohemorrhage",),
    "diffuse_axonal_injury": (r"\bdiffuse axonal injury\b", r"\baxonal injury\b"),
    "generalized_cerebral_edema": (r"\bgeneralized cerebral edema\b",),
    "pneumocephalus": (r"\bpneumocephalus\b", r"\bintracranial air\b"),
    "brain_herniation": (r"\bherniation\b",),
    "arterial_hyperdensity": (r"\barterial hyperdensity\b", r"\bhyperdense artery\b",
                              r"\barterial hyper-density\b"),
    "venous_sinus_hyperdensity": (r"\bvenous sinus hyperdensity\b",
                                  r"\bvenous sinus hyper-density\b"),
}
_NEGATION = re.compile(r"\b(no|not|without|absent|negative for|free of)\b")
_SENTENCE_SPLIT = re.compile(r"[.!?\n]+")


def mock_labeler(report: RadiologyReport | str,
                 registry: FindingRegistry = REGISTRY) -> LabelVector:
    """Deterministic keyword labeler; labels phantom template reports exactly."""
    text = report.text if isinstance(report, RadiologyReport) else report
    sentences = [s.strip().lower() for s in _SENTENCE_SPLIT.split(text) if s.strip()]
    values = []
    for fid in registry.ids:
        label = Label.NEG
        for sentence in sentences:
            for pattern in _KEYWORDS.get(fid, ()):
                m = re.search(pattern, sentence)
                if m is None:
                    continue
                neg = _NEGATION.search(sentence[:m.start()])
                if neg is None:
                    label = Label.POS
                break
        values.append(label)
    return LabelVector(tuple(values))


def mock_transport(payload: dict) -> tuple[int, str]:
    """Chat-completions lookalike backed by mock_labeler.

    Reads the report out of the last user turn (after "Report:") and answers
    with the label JSON the prompt asks for.
    """
    user_turns = [m["content"] for m in payload.get("messages", []) if m.get("role") == "user"]
    content = user_turns[-1] if user_turns else ""
    report_text = content.rsplit("Report:", 1)[-1]
    labels = mock_labeler(report_text)
    body = json.dumps({"choices": [{"message": {"role": "assistant",
                                                "content": labels.to_json()}}]})
    return 200, body


# --- accuracy against expert labels ----------------------------------------

@dataclass
class LabelingAccuracy:
    finding_ids: list[str]
    accuracies: list[float]
    total: int

    @property
    def mean(self) -> float:
        return float(sum(self.accuracies) / len(self.accuracies))

    def get(self, fid: str) -> float:
        return self.accuracies[self.finding_ids.index(fid)]

    def format_table(self, registry: FindingRegistry = REGISTRY) -> str:
        width = max(len(registry.display_name(f)) for f in self.finding_ids)
        lines = [f"{'Finding':<{width}}  Accuracy"]
        for fid, acc in zip(self.finding_ids, self.accuracies):
            lines.append(f"{registry.display_name(fid):<{width}}  {acc:.2f}")
        lines.append(f"{'Mean':<{width}}  {self.mean:.2f}")
        return "\n".join(lines)


def evaluate_labeling_accuracy(predicted: list[LabelVector], expert: list[LabelVector],
                               registry: FindingRegistry = REGISTRY,
                               subset: list[str] | None = None) -> LabelingAccuracy:
    """Per-finding agreement; UNKNOWN predictions count as mismatches."""
    if len(predicted) != len(expert):
        raise LengthMismatch(f"{len(predicted)} predictions vs {len(expert)} expert labels")
    if not predicted:
        raise LengthMismatch("no label pairs supplied")
    for e in expert:
        if e.has_unknown:
            raise ValueError("expert labels must not contain UNKNOWN")

    finding_ids = list(subset) if subset is not None else list(registry.ids)
    indices = [registry.index(f) for f in finding_ids]
    accuracies = []
    for i in indices:
        matches = sum(1 for p, e in zip(predicted, expert)
                      if p.values[i] is not Label.UNKNOWN and p.values[i] is e.values[i])
        accuracies.append(matches / len(predicted))
    return LabelingAccuracy(finding_ids=finding_ids, accuracies=accuracies,
                            total=len(predicted))
