"""Continuation-probability backends.

A backend answers one question: given a forced prefix, how likely is each of a
small set of candidate continuations? Two HTTP wire protocols are supported:

``openai``
    OpenAI-compatible ``/completions``. By default each candidate is appended to
    the prefix and echoed back with ``max_tokens=0``; the candidate's
    probability is the product of the echoed token probabilities from the
    prefix boundary onward. ``logprob_mode="top"`` instead reads the top-k
    next-token logprobs of a single one-token generation (cheaper, but
    candidates outside the top k get probability 0).

``score``
    A native ``POST {endpoint}/score`` taking ``{"prefix", "candidates"}`` and
    returning ``{"logprobs": [...]}`` aligned with the candidates.
"""
from __future__ import annotations

import logging
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Protocol, Sequence

import httpx

from .prompts import ApproxTokenCounter

log = logging.getLogger(__name__)

MASS_TOL = 1e-6


class BackendError(Exception):
    pass


class TransportError(BackendError):
    """Network failure or timeout that persisted through every retry."""


class CapabilityError(BackendError):
    """The endpoint does not return the logprobs needed for scoring."""


class CandidateError(BackendError):
    def __init__(self, candidate: str, reason: str):
        self.candidate = candidate
        super().__init__(f"candidate {candidate!r} not scorable: {reason}")


class ConfigurationError(BackendError):
    pass


@dataclass(frozen=True)
class ContinuationQuery:
    prefix: str
    candidates: tuple

    def __post_init__(self):
        cands = tuple(self.candidates)
        if not cands:
            raise ValueError("query needs at least one candidate")
        if len(set(cands)) != len(cands):
            raise ValueError(f"candidates must be distinct: {cands}")
        object.__setattr__(self, "candidates", cands)


@dataclass
class ContinuationResult:
    probabilities: list
    other_mass: float

    @classmethod
    def from_probs(cls, probs: Sequence[float]) -> "ContinuationResult":
        probs = [max(0.0, float(p)) for p in probs]
        total = sum(probs)
        if total > 1.0 + MASS_TOL:
            # Independent per-candidate echo scores can exceed 1 when candidates
            # share prefixes; rescale so the result stays a sub-distribution.
            probs = [p / total for p in probs]
            total = 1.0
        return cls(probs, max(0.0, 1.0 - total))


class Backend(Protocol):
    def query(self, q: ContinuationQuery) -> ContinuationResult: ...


@dataclass
class RetryPolicy:
    max_attempts: int = 4
    backoff: float = 0.5
    max_backoff: float = 30.0

    def delay(self, attempt: int) -> float:
        return min(self.max_backoff, self.backoff * (2 ** attempt))


@dataclass
class BackendConfig:
    endpoint: str = "http://localhost:8000/v1"
    protocol: str = "openai"
    model: Optional[str] = None
    auth_env: Optional[str] = "OPENAI_API_KEY"
    max_concurrency: int = 4
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    timeout: float = 60.0
    logprob_mode: str = "echo"
    top_logprobs: int = 20
    tokenize_path: Optional[str] = None

    def __post_init__(self):
        if self.max_concurrency < 1:
            raise ConfigurationError("max_concurrency must be >= 1")
        if self.protocol not in ("openai", "score"):
            raise ConfigurationError(f"unknown protocol {self.protocol!r}")
        if self.logprob_mode not in ("echo", "top"):
            raise ConfigurationError(f"unknown logprob_mode {self.logprob_mode!r}")
        if isinstance(self.retry, dict):
            self.retry = RetryPolicy(**self.retry)

    @classmethod
    def from_dict(cls, d: dict) -> "BackendConfig":
        d = dict(d)
        d.pop("kind", None)
        if "retry" in d and isinstance(d["retry"], dict):
            d["retry"] = RetryPolicy(**d["retry"])
        return cls(**d)


class InflightGauge:
    """Tracks concurrent calls; ``peak`` is the maximum ever observed."""

    def __init__(self):
        self._lock = threading.Lock()
        self.current = 0
        self.peak = 0
        self.calls = 0

    def __enter__(self):
        with self._lock:
            self.current += 1
            self.calls += 1
            self.peak = max(self.peak, self.current)
        return self

    def __exit__(self, *exc):
        with self._lock:
            self.current -= 1


class HTTPBackend:
    def __init__(self, cfg: BackendConfig, transport: Optional[httpx.BaseTransport] = None, sleep=time.sleep):
        self.cfg = cfg
        headers = {}
        token = os.environ.get(cfg.auth_env, "") if cfg.auth_env else ""
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.Client(
            base_url=cfg.endpoint.rstrip("/"), headers=headers, timeout=cfg.timeout, transport=transport
        )
        self._slots = threading.BoundedSemaphore(cfg.max_concurrency)
        self._sleep = sleep
        self.inflight = InflightGauge()
        self._approx = ApproxTokenCounter()
        self.approximate = cfg.tokenize_path is None

    def close(self):
        self._client.close()

    def _post(self, path: str, body: dict) -> dict:
        last: Optional[Exception] = None
        for attempt in range(self.cfg.retry.max_attempts):
            try:
                with self._slots, self.inflight:
                    resp = self._client.post(path, json=body)
            except httpx.TransportError as e:
                last = e
            else:
                if resp.status_code == 429 or resp.status_code >= 500:
                    last = BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                elif resp.status_code >= 400:
                    raise BackendError(f"HTTP {resp.status_code} from {path}: {resp.text[:200]}")
                else:
                    try:
                        return resp.json()
                    except ValueError:
                        raise BackendError(f"non-JSON response from {path}") from None
            if attempt + 1 < self.cfg.retry.max_attempts:
                delay = self.cfg.retry.delay(attempt)
                log.debug("retry %d/%d for %s in %.2fs: %s", attempt + 1, self.cfg.retry.max_attempts, path, delay, last)
                self._sleep(delay)
        raise TransportError(f"{self.cfg.endpoint}{path}: gave up after {self.cfg.retry.max_attempts} attempts: {last}")

    def _body(self, **kw) -> dict:
        if self.cfg.model:
            kw["model"] = self.cfg.model
        return kw

    def query(self, q: ContinuationQuery) -> ContinuationResult:
        if self.cfg.protocol == "score":
            return self._query_score(q)
        if self.cfg.logprob_mode == "top":
            return self._query_top(q)
        return self._query_echo(q)

    def _query_score(self, q: ContinuationQuery) -> ContinuationResult:
        data = self._post("/score", {"prefix": q.prefix, "candidates": list(q.candidates)})
        if "logprobs" not in data:
            raise CapabilityError("score endpoint returned no 'logprobs'")
        lps = data["logprobs"]
        if len(lps) != len(q.candidates):
            raise BackendError(f"score endpoint returned {len(lps)} values for {len(q.candidates)} candidates")
        probs = []
        for c, lp in zip(q.candidates, lps):
            if lp is None:
                raise CandidateError(c, "endpoint returned null")
            probs.append(math.exp(lp))
        return ContinuationResult.from_probs(probs)

    def _query_top(self, q: ContinuationQuery) -> ContinuationResult:
        data = self._post(
            "/completions",
            self._body(prompt=q.prefix, max_tokens=1, temperature=0, logprobs=self.cfg.top_logprobs),
        )
        try:
            top = data["choices"][0]["logprobs"]["top_logprobs"][0]
        except (KeyError, IndexError, TypeError):
            raise CapabilityError("completion response carries no top_logprobs") from None
        if top is None:
            raise CapabilityError("completion response carries no top_logprobs")
        return ContinuationResult.from_probs([math.exp(top[c]) if c in top else 0.0 for c in q.candidates])

    def _query_echo(self, q: ContinuationQuery) -> ContinuationResult:
        prompts = [q.prefix + c for c in q.candidates]
        data = self._post(
            "/completions",
            self._body(prompt=prompts, max_tokens=0, echo=True, logprobs=0, temperature=0),
        )
        choices = data.get("choices")
        if not isinstance(choices, list) or len(choices) != len(prompts):
            raise BackendError("completion response does not have one choice per candidate")
        choices = sorted(choices, key=lambda ch: ch.get("index", 0))
        boundary = len(q.prefix)
        probs = []
        for c, ch in zip(q.candidates, choices):
            lp = ch.get("logprobs")
            if not lp or "token_logprobs" not in lp or "text_offset" not in lp:
                raise CapabilityError("endpoint does not echo token logprobs with text offsets")
            offsets, tlps = lp["text_offset"], lp["token_logprobs"]
            starts = [i for i, off in enumerate(offsets) if off >= boundary]
            if not starts or offsets[starts[0]] != boundary:
                raise CandidateError(c, "tokenization of prefix+candidate does not split at the prefix boundary")
            total = 0.0
            for i in starts:
                if tlps[i] is None:
                    raise CandidateError(c, "missing token logprob")
                total += tlps[i]
            probs.append(math.exp(total))
        return ContinuationResult.from_probs(probs)

    def count_tokens(self, text: str) -> int:
        if text == "":
            return 0
        if self.cfg.tokenize_path is None:
            return self._approx(text)
        data = self._post(self.cfg.tokenize_path, self._body(prompt=text))
        if "count" in data:
            return int(data["count"])
        if "tokens" in data:
            return len(data["tokens"])
        raise CapabilityError("tokenize endpoint returned neither 'count' nor 'tokens'")

    def __call__(self, text: str) -> int:
        return self.count_tokens(text)


def count_tokens(backend, text: str) -> tuple:
    """(count, approximate) using the backend's tokenizer when it has one."""
    if text == "":
        return 0, getattr(backend, "approximate", True)
    fn = getattr(backend, "count_tokens", None)
    if fn is None:
        return ApproxTokenCounter()(text), True
    return fn(text), getattr(backend, "approximate", True)


class MockBackend:
    """Deterministic table-driven backend.

    ``table`` maps ``(key, candidate) -> probability``. A query is answered from
    the row whose key is the longest suffix of the query prefix; candidates not
    in that row get 0. Queries matching no key are answered uniformly and
    counted in ``fallbacks``. ``delay`` (seconds) makes calls overlap so
    concurrency limits can be observed via ``inflight``.
    """

    approximate = True

    def __init__(self, table: dict, delay: float = 0.0):
        rows: dict = {}
        for (key, cand), p in table.items():
            if p < 0:
                raise ConfigurationError(f"negative probability for ({key!r}, {cand!r})")
            rows.setdefault(key, {})[cand] = float(p)
        for key, row in rows.items():
            if sum(row.values()) > 1.0 + MASS_TOL:
                raise ConfigurationError(f"row {key!r} sums to {sum(row.values()):.6f} > 1")
        self.rows = rows
        self._keys = sorted(rows, key=len, reverse=True)
        self.delay = delay
        self.inflight = InflightGauge()
        self.fallbacks = 0
        self.queries: list = []
        self._lock = threading.Lock()

    def match(self, prefix: str) -> Optional[str]:
        for k in self._keys:
            if prefix.endswith(k):
                return k
        return None

    def query(self, q: ContinuationQuery) -> ContinuationResult:
        with self.inflight:
            if self.delay:
                time.sleep(self.delay)
            with self._lock:
                self.queries.append(q)
            key = self.match(q.prefix)
            if key is None:
                with self._lock:
                    self.fallbacks += 1
                n = len(q.candidates)
                return ContinuationResult([1.0 / n] * n, 0.0)
            row = self.rows[key]
            probs = [row.get(c, 0.0) for c in q.candidates]
            return ContinuationResult(probs, max(0.0, 1.0 - sum(probs)))

    def count_tokens(self, text: str) -> int:
        return ApproxTokenCounter()(text)


def mock_backend(table: dict, **kw) -> MockBackend:
    return MockBackend(table, **kw)


def run_bounded(fn, items: Iterable, max_concurrency: int):
    """Apply ``fn`` to items with at most ``max_concurrency`` in flight; yields (item, result|exception)."""
    items = list(items)
    if max_concurrency < 1:
        raise ConfigurationError("max_concurrency must be >= 1")

    def safe(x):
        try:
            return x, fn(x)
        except Exception as e:  # recorded per item, the batch continues
            return x, e

    with ThreadPoolExecutor(max_workers=max_concurrency) as pool:
        yield from pool.map(safe, items)


def make_backend(spec: dict, transport=None) -> Backend:
    """Build a backend from a config mapping with a ``kind`` key (``http`` or ``mock``)."""
    kind = spec.get("kind", "http")
    if kind == "mock":
        table = {(row["key"], row["candidate"]): row["p"] for row in spec.get("table", [])}
        return MockBackend(table)
    if kind == "http":
        return HTTPBackend(BackendConfig.from_dict(spec), transport=transport)
    raise ConfigurationError(f"unknown backend kind {kind!r}")
