"""Date-gated web search and scraping with a global URL cache.

All retrieval is scoped to a :class:`WebSession` tied to one sample, which
stamps every query with that sample's cutoff date and recency window and
feeds the per-sample interaction counters. The page cache is global: a URL
fetched once is never fetched again within a process lifetime (and, when a
cache directory is configured, across runs), while the unique/repeated
tallies stay per sample. Two bounded gates cap concurrency at 8 simultaneous
searches and 4 simultaneous fetches.
"""

from __future__ import annotations

import hashlib
import html.parser
import logging
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass, replace
from datetime import date
from pathlib import Path
from typing import Optional, Protocol, Union
from urllib.parse import urlsplit, urlunsplit

import requests

from .corpus import subtract_months

logger = logging.getLogger(__name__)

MAX_CONCURRENT_SEARCHES = 8
MAX_CONCURRENT_SCRAPES = 4


class WebToolsError(Exception):
    """Base class for retrieval failures."""


class FetchError(WebToolsError):
    """A single URL could not be fetched."""


class SearchBackendError(WebToolsError):
    """The search backend failed after retries."""


def normalize_url(url: str) -> str:
    """Lowercase scheme and host, strip the fragment, keep the query string.

    This is the definition of URL identity used by the cache and by the
    repeated-URL counters.
    """
    parts = urlsplit(url.strip())
    return urlunsplit((parts.scheme.lower(), parts.netloc.lower(), parts.path, parts.query, ""))


def is_valid_url(url: str) -> bool:
    try:
        parts = urlsplit(url)
    except ValueError:
        return False
    return parts.scheme in ("http", "https") and bool(parts.netloc)


@dataclass(frozen=True)
class SearchQuery:
    text: str
    cutoff: date
    recency_window_months: int
    max_results: int = 10

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("query text must be non-empty")
        if self.recency_window_months <= 0:
            raise ValueError("recency_window_months must be positive")
        if self.cutoff >= date.today():
            raise ValueError("cutoff must be strictly earlier than today")

    @property
    def earliest(self) -> date:
        return subtract_months(self.cutoff, self.recency_window_months)


@dataclass(frozen=True)
class SearchResult:
    url: str
    title: str
    snippet: str
    published: Optional[date]
    rank: int


@dataclass
class PageContent:
    url: str
    text: str
    fetched_from_cache: bool
    fetch_timestamp: float
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class InteractionCounters:
    search_queries: int = 0
    unique_result_urls: int = 0
    repeated_result_urls: int = 0
    unique_scraped_urls: int = 0
    repeated_scraped_urls: int = 0

    def to_dict(self) -> dict:
        return {
            "search_queries": self.search_queries,
            "unique_result_urls": self.unique_result_urls,
            "repeated_result_urls": self.repeated_result_urls,
            "unique_scraped_urls": self.unique_scraped_urls,
            "repeated_scraped_urls": self.repeated_scraped_urls,
        }


class WebBackend(Protocol):
    """A search provider plus page fetcher (live HTTP or simulated corpus)."""

    def search(self, query: SearchQuery) -> list[SearchResult]:
        ...

    def fetch(self, url: str) -> str:
        ...


class _Tally:
    def __init__(self) -> None:
        self.counters = InteractionCounters()
        self.seen_result_urls: set[str] = set()
        self.seen_scraped_urls: set[str] = set()


class UrlCache:
    """Process-global page cache with optional on-disk persistence.

    Concurrent requests for the same missing URL are deduplicated: exactly
    one caller performs the fetch while the rest wait on its result, so the
    network fetch count for any URL sequence equals the number of distinct
    URLs (absent failures, which are never cached).
    """

    def __init__(self, directory: Optional[Union[str, Path]] = None) -> None:
        self._dir = Path(directory) if directory else None
        if self._dir is not None:
            self._dir.mkdir(parents=True, exist_ok=True)
        self._store: dict[str, str] = {}
        self._inflight: dict[str, Future] = {}
        self._lock = threading.Lock()

    def _disk_path(self, url: str) -> Optional[Path]:
        if self._dir is None:
            return None
        digest = hashlib.sha256(url.encode("utf-8")).hexdigest()
        return self._dir / f"{digest}.page"

    def _read_disk(self, url: str) -> Optional[str]:
        path = self._disk_path(url)
        if path is None or not path.exists():
            return None
        raw = path.read_text(encoding="utf-8")
        header, _, body = raw.partition("\n")
        if header != url:
            logger.warning("cache file %s holds %r, expected %r; ignoring", path, header, url)
            return None
        return body

    def _write_disk(self, url: str, text: str) -> None:
        path = self._disk_path(url)
        if path is not None:
            path.write_text(f"{url}\n{text}", encoding="utf-8")

    def get_or_fetch(self, url: str, fetch_fn) -> tuple[str, bool]:
        """Return (text, came_from_cache), fetching at most once per URL."""
        while True:
            with self._lock:
                if url in self._store:
                    return self._store[url], True
                disk = self._read_disk(url)
                if disk is not None:
                    self._store[url] = disk
                    return disk, True
                pending = self._inflight.get(url)
                if pending is None:
                    pending = Future()
                    self._inflight[url] = pending
                    owner = True
                else:
                    owner = False
            if owner:
                try:
                    text = fetch_fn(url)
                except Exception as exc:
                    with self._lock:
                        self._inflight.pop(url, None)
                    pending.set_exception(exc)
                    raise
                with self._lock:
                    self._store[url] = text
                    self._inflight.pop(url, None)
                self._write_disk(url, text)
                pending.set_result(text)
                return text, False
            try:
                return pending.result(), True
            except Exception:
                # The owner failed; loop and retry as a fresh fetch.
                with self._lock:
                    if url in self._store:
                        return self._store[url], True
                raise

    def __contains__(self, url: str) -> bool:
        with self._lock:
            return url in self._store


class WebClient:
    """Shared retrieval front-end; hand out one :class:`WebSession` per sample."""

    def __init__(
        self,
        backend: WebBackend,
        *,
        cache_dir: Optional[Union[str, Path]] = None,
        strict_undated: bool = True,
        max_concurrent_searches: int = MAX_CONCURRENT_SEARCHES,
        max_concurrent_scrapes: int = MAX_CONCURRENT_SCRAPES,
    ) -> None:
        self._backend = backend
        self._cache = UrlCache(cache_dir)
        self._strict_undated = strict_undated
        self._search_gate = threading.Semaphore(max_concurrent_searches)
        self._scrape_gate = threading.Semaphore(max_concurrent_scrapes)
        self._tallies: dict[str, _Tally] = {}
        self._lock = threading.Lock()

    def session(self, sample_id: str, cutoff: date, recency_window_months: int) -> "WebSession":
        with self._lock:
            self._tallies.setdefault(sample_id, _Tally())
        return WebSession(self, sample_id, cutoff, recency_window_months)

    def counters(self, sample_id: str) -> InteractionCounters:
        with self._lock:
            tally = self._tallies.get(sample_id)
            if tally is None:
                raise LookupError(f"no web session recorded for sample {sample_id!r}")
            return replace(tally.counters)

    def _admit(self, result: SearchResult, query: SearchQuery) -> bool:
        if result.published is None:
            return not self._strict_undated
        return query.earliest <= result.published <= query.cutoff

    def _run_search(self, sample_id: str, query: SearchQuery) -> list[SearchResult]:
        with self._search_gate:
            raw = self._backend.search(query)
        kept = [r for r in sorted(raw, key=lambda r: r.rank) if self._admit(r, query)]
        results = [
            replace(r, url=normalize_url(r.url), rank=i)
            for i, r in enumerate(kept[: query.max_results], start=1)
        ]
        with self._lock:
            tally = self._tallies[sample_id]
            tally.counters.search_queries += 1
            for result in results:
                if result.url in tally.seen_result_urls:
                    tally.counters.repeated_result_urls += 1
                else:
                    tally.seen_result_urls.add(result.url)
                    tally.counters.unique_result_urls += 1
        return results

    def _gated_fetch(self, url: str) -> str:
        with self._scrape_gate:
            return self._backend.fetch(url)

    def _run_scrape(self, sample_id: str, urls: list[str]) -> list[PageContent]:
        pages: list[PageContent] = []
        for raw_url in urls:
            if not is_valid_url(raw_url):
                pages.append(PageContent(raw_url, "", False, time.time(), error="invalid URL"))
                continue
            url = normalize_url(raw_url)
            try:
                text, cached = self._cache.get_or_fetch(url, self._gated_fetch)
            except Exception as exc:
                logger.warning("fetch failed for %s: %s", url, exc)
                pages.append(PageContent(url, "", False, time.time(), error=str(exc)))
                continue
            with self._lock:
                tally = self._tallies[sample_id]
                if url in tally.seen_scraped_urls:
                    tally.counters.repeated_scraped_urls += 1
                else:
                    tally.seen_scraped_urls.add(url)
                    tally.counters.unique_scraped_urls += 1
            pages.append(PageContent(url, text, cached, time.time()))
        return pages


class WebSession:
    """Sample-scoped view over the shared client: cutoff-stamped, counted."""

    def __init__(self, client: WebClient, sample_id: str, cutoff: date, window_months: int) -> None:
        self._client = client
        self.sample_id = sample_id
        self.cutoff = cutoff
        self.recency_window_months = window_months

    def search(self, text: str, max_results: int = 10) -> list[SearchResult]:
        query = SearchQuery(
            text=text,
            cutoff=self.cutoff,
            recency_window_months=self.recency_window_months,
            max_results=max_results,
        )
        return self._client._run_search(self.sample_id, query)

    def scrape(self, urls: list[str]) -> list[PageContent]:
        return self._client._run_scrape(self.sample_id, urls)

    def counters(self) -> InteractionCounters:
        return self._client.counters(self.sample_id)


class _TextExtractor(html.parser.HTMLParser):
    _SKIP = {"script", "style", "noscript", "template"}

    def __init__(self) -> None:
        super().__init__()
        self._chunks: list[str] = []
        self._skip_depth = 0

    def handle_starttag(self, tag, attrs) -> None:
        if tag in self._SKIP:
            self._skip_depth += 1

    def handle_endtag(self, tag) -> None:
        if tag in self._SKIP and self._skip_depth:
            self._skip_depth -= 1

    def handle_data(self, data) -> None:
        if not self._skip_depth and data.strip():
            self._chunks.append(data.strip())

    def text(self) -> str:
        return "\n".join(self._chunks)


def html_to_text(markup: str) -> str:
    extractor = _TextExtractor()
    extractor.feed(markup)
    return extractor.text()


class LiveWebBackend:
    """Generic HTTP search API plus direct page fetching.

    The recency window is delegated to the provider via a configurable
    date-restrict parameter; results the provider leaves undated are kept by
    running the owning client with ``strict_undated=False`` (the provider's
    gate is trusted), while locally dated results are still checked.
    """

    def __init__(
        self,
        endpoint: str,
        *,
        api_key: Optional[str] = None,
        date_restrict_param: str = "date_restrict",
        timeout: float = 30.0,
        session: Optional[requests.Session] = None,
    ) -> None:
        self.endpoint = endpoint
        self.api_key = api_key
        self.date_restrict_param = date_restrict_param
        self.timeout = timeout
        self._session = session if session is not None else requests.Session()

    def search(self, query: SearchQuery) -> list[SearchResult]:
        params = {
            "q": query.text,
            "num": query.max_results,
            self.date_restrict_param: f"{query.earliest.isoformat()}..{query.cutoff.isoformat()}",
        }
        if self.api_key:
            params["key"] = self.api_key
        try:
            response = self._session.get(self.endpoint, params=params, timeout=self.timeout)
        except requests.RequestException as exc:
            raise SearchBackendError(f"search request failed: {exc}") from exc
        if response.status_code != 200:
            raise SearchBackendError(f"search backend returned HTTP {response.status_code}")
        results = []
        for i, item in enumerate(response.json().get("results", []), start=1):
            published = None
            if item.get("published"):
                try:
                    published = date.fromisoformat(item["published"])
                except ValueError:
                    published = None
            results.append(
                SearchResult(
                    url=item.get("url", ""),
                    title=item.get("title", ""),
                    snippet=item.get("snippet", ""),
                    published=published,
                    rank=i,
                )
            )
        return results

    def fetch(self, url: str) -> str:
        try:
            response = self._session.get(url, timeout=self.timeout)
        except requests.RequestException as exc:
            raise FetchError(f"fetch failed: {exc}") from exc
        if response.status_code != 200:
            raise FetchError(f"HTTP {response.status_code} for {url}")
        content_type = response.headers.get("Content-Type", "")
        if "html" in content_type:
            return html_to_text(response.text)
        return response.text
