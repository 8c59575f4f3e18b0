"""Urban-node fetch gateway: resolves topic requests into response bundles.

The default article source is an offline corpus directory
(`corpus/<slug>.txt`); the simulator can use a seeded synthetic source, and a
live encyclopedia client exists behind an explicit opt-in. Jobs run strictly
in arrival order with exponential backoff on transient failures.
"""

from __future__ import annotations

import hashlib
import html
import json
import logging
import os
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .bundle import Bundle, Kind, Priority, create_bundle
from .content import DEFAULT_CONTENT_TTL_MS, encode_content_response

log = logging.getLogger(__name__)

MAX_RETRIES = 3
BACKOFF_BASE_MS = 60_000


class GatewayError(Exception):
    pass


class NotFoundTopic(GatewayError):
    pass


class TransientError(GatewayError):
    pass


class EmptyAfterNormalization(GatewayError):
    pass


class JobState(str, Enum):
    QUEUED = "queued"
    FETCHING = "fetching"
    DONE = "done"
    ERROR = "error"


@dataclass
class Article:
    title: str
    body: str


@dataclass
class FetchJob:
    request_id: str
    topic: str
    requester: str
    state: JobState = JobState.QUEUED
    attempts: int = 0
    error_reason: str = ""
    next_attempt_at: int = 0
    created_at: int = 0


def slugify(topic: str) -> str:
    """Corpus file naming: lowercase, runs of non-alphanumerics become '-'."""
    slug = re.sub(r"[^a-z0-9]+", "-", topic.strip().lower()).strip("-")
    return slug


_TAG_BLOCK = re.compile(r"<(script|style)\b[^>]*>.*?</\1>", re.IGNORECASE | re.DOTALL)
_TAG = re.compile(r"<[^>]+>")
_BLANK_RUNS = re.compile(r"\n{3,}")


def normalize_article(raw_title: str, raw_body: str) -> tuple[str, str]:
    """Trim the title and strip markup from the body; deterministic."""
    title = raw_title.strip()
    body = _TAG_BLOCK.sub("", raw_body)
    body = _TAG.sub("", body)
    body = html.unescape(body)
    body = "\n".join(line.rstrip() for line in body.split("\n"))
    body = _BLANK_RUNS.sub("\n\n", body).strip()
    if not title or not body:
        raise EmptyAfterNormalization(f"nothing left of {raw_title!r} after normalization")
    return title, body


class CorpusSource:
    """Offline backend: a pure function of (corpus directory, topic)."""

    def __init__(self, corpus_dir: str | Path):
        self.corpus_dir = Path(corpus_dir)

    def lookup(self, topic: str) -> Article:
        slug = slugify(topic)
        if not slug:
            raise NotFoundTopic(topic)
        path = self.corpus_dir / f"{slug}.txt"
        if not path.exists():
            raise NotFoundTopic(topic)
        try:
            body = path.read_text(encoding="utf-8")
        except OSError as e:
            raise TransientError(str(e)) from e
        return Article(title=topic.strip(), body=body)


class SyntheticSource:
    """Simulator backend: deterministic bodies of configured sizes."""

    def __init__(self, sizes: dict[str, int], seed: int = 0):
        self.sizes = {slugify(t): (t, n) for t, n in sizes.items()}
        self.seed = seed

    def lookup(self, topic: str) -> Article:
        entry = self.sizes.get(slugify(topic))
        if entry is None:
            raise NotFoundTopic(topic)
        title, size = entry
        return Article(title=title.strip(), body=synthetic_text(f"{self.seed}:{title}", size))


class LiveWikipediaSource:
    """Optional live client; never used by tests or the simulator."""

    API = "https://en.wikipedia.org/api/rest_v1/page/summary/{}"

    def __init__(self, enabled: bool = False):
        if not enabled:
            raise GatewayError("live source must be enabled explicitly")

    def lookup(self, topic: str) -> Article:
        import urllib.error
        import urllib.parse
        import urllib.request

        url = self.API.format(urllib.parse.quote(topic.strip().replace(" ", "_")))
        try:
            with urllib.request.urlopen(url, timeout=20) as resp:
                data = json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as e:
            if e.code == 404:
                raise NotFoundTopic(topic) from e
            raise TransientError(str(e)) from e
        except (urllib.error.URLError, TimeoutError) as e:
            raise TransientError(str(e)) from e
        body = data.get("extract", "")
        if not body:
            raise NotFoundTopic(topic)
        return Article(title=data.get("title", topic.strip()), body=body)


def synthetic_text(seed_key: str, size: int) -> str:
    """Deterministic printable filler of exactly `size` characters."""
    words = []
    h = hashlib.sha256(seed_key.encode("utf-8")).hexdigest()
    for i in range(64):
        words.append(h[(i * 3) % 48 : (i * 3) % 48 + 6])
    block = " ".join(words) + ".\n"
    reps = size // len(block) + 1
    return (block * reps)[:size]


def process_job(job: FetchJob, source, node_id: str, now: int,
                content_ttl: int = DEFAULT_CONTENT_TTL_MS) -> tuple[FetchJob, Bundle | None]:
    """Run one attempt of a fetch job; may emit the response bundle.

    Success -> Done + content bundle. Unknown topic -> Error + "not_found"
    error bundle. Transient failure -> requeued with 1 min * 2^attempts
    backoff until MAX_RETRIES, then an "unreachable" error bundle.
    """
    job.state = JobState.FETCHING
    try:
        article = source.lookup(job.topic)
        title, body = normalize_article(article.title, article.body)
    except (NotFoundTopic, EmptyAfterNormalization):
        job.state = JobState.ERROR
        job.error_reason = "not_found"
        bundle = _response_bundle(job, node_id, now, content_ttl, error="not_found")
        return job, bundle
    except TransientError as e:
        job.attempts += 1
        if job.attempts > MAX_RETRIES:
            job.state = JobState.ERROR
            job.error_reason = "unreachable"
            bundle = _response_bundle(job, node_id, now, content_ttl, error="unreachable")
            return job, bundle
        job.state = JobState.QUEUED
        job.next_attempt_at = now + BACKOFF_BASE_MS * (2 ** (job.attempts - 1))
        log.info("transient fetch failure for %r (attempt %d): %s", job.topic, job.attempts, e)
        return job, None
    job.state = JobState.DONE
    bundle = _response_bundle(job, node_id, now, content_ttl, title=title, body=body)
    return job, bundle


def _response_bundle(job: FetchJob, node_id: str, now: int, ttl: int,
                     title: str | None = None, body: str | None = None,
                     error: str | None = None) -> Bundle:
    payload = encode_content_response(job.request_id, job.topic, title, body, error=error)
    return create_bundle(
        node_id, job.requester, Kind.CONTENT_RESPONSE, Priority.CONTENT,
        payload, ttl, now,
    )


class FetchGateway:
    """Sequential job runner with a persisted queue."""

    def __init__(self, root: str | Path, node_id: str, source,
                 content_ttl: int = DEFAULT_CONTENT_TTL_MS):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.node_id = node_id
        self.source = source
        self.content_ttl = content_ttl
        self.jobs: dict[str, FetchJob] = {}
        self._jobs_path = self.root / "jobs.json"
        self._load()

    def _load(self) -> None:
        if self._jobs_path.exists():
            for rec in json.loads(self._jobs_path.read_text(encoding="utf-8")):
                job = FetchJob(
                    request_id=rec["request_id"],
                    topic=rec["topic"],
                    requester=rec["requester"],
                    state=JobState(rec["state"]),
                    attempts=rec["attempts"],
                    error_reason=rec.get("error_reason", ""),
                    next_attempt_at=rec.get("next_attempt_at", 0),
                    created_at=rec.get("created_at", 0),
                )
                if job.state == JobState.FETCHING:
                    job.state = JobState.QUEUED  # interrupted mid-fetch
                self.jobs[job.request_id] = job
        else:
            self._save()

    def _save(self) -> None:
        recs = [
            {
                "request_id": j.request_id,
                "topic": j.topic,
                "requester": j.requester,
                "state": j.state.value,
                "attempts": j.attempts,
                "error_reason": j.error_reason,
                "next_attempt_at": j.next_attempt_at,
                "created_at": j.created_at,
            }
            for j in sorted(self.jobs.values(), key=lambda j: (j.created_at, j.request_id))
        ]
        tmp = self._jobs_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(recs, sort_keys=True, indent=1), encoding="utf-8")
        os.replace(tmp, self._jobs_path)

    def enqueue(self, request_id: str, topic: str, requester: str, now: int) -> FetchJob:
        existing = self.jobs.get(request_id)
        if existing is not None:
            return existing
        job = FetchJob(request_id=request_id, topic=topic, requester=requester,
                       created_at=now, next_attempt_at=now)
        self.jobs[request_id] = job
        self._save()
        return job

    def due_jobs(self, now: int) -> list[FetchJob]:
        return [
            j for j in sorted(self.jobs.values(), key=lambda j: (j.created_at, j.request_id))
            if j.state == JobState.QUEUED and j.next_attempt_at <= now
        ]

    def next_wakeup(self) -> int | None:
        pending = [j.next_attempt_at for j in self.jobs.values() if j.state == JobState.QUEUED]
        return min(pending) if pending else None

    def process_due(self, now: int) -> list[Bundle]:
        """Run every due job once; returns response bundles to enqueue."""
        out = []
        due = self.due_jobs(now)
        for job in due:
            job, bundle = process_job(job, self.source, self.node_id, now, self.content_ttl)
            if bundle is not None:
                out.append(bundle)
        if due:
            self._save()
        return out
