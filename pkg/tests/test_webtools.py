import threading
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import date

import pytest

from webquest.simenv import SimDoc, SimWebBackend
from webquest.webtools import (
    FetchError,
    SearchQuery,
    UrlCache,
    WebClient,
    normalize_url,
)

from .conftest import sim_docs_basic

CUTOFF = date(2023, 3, 15)


def _client(docs=None, **kwargs):
    backend = SimWebBackend(docs if docs is not None else sim_docs_basic())
    return WebClient(backend, **kwargs), backend


def test_normalize_url():
    assert (
        normalize_url("HTTPS://Example.COM/Path?b=2#frag")
        == "https://example.com/Path?b=2"
    )


def test_search_date_gate_drops_post_cutoff():
    docs = sim_docs_basic() + [
        SimDoc(
            url="https://example.com/late",
            title="Late welding news",
            body="welding news published after the cutoff",
            published=date(2023, 5, 1),
            keywords=("welding",),
        )
    ]
    client, _ = _client(docs)
    session = client.session("s1", CUTOFF, 6)
    results = session.search("welding")
    assert results
    assert all(r.published <= CUTOFF for r in results)
    assert all("late" not in r.url for r in results)


def test_search_recency_window_lower_bound():
    docs = sim_docs_basic(base=date(2023, 1, 10)) + [
        SimDoc(
            url="https://example.com/ancient",
            title="Ancient welding archive",
            body="welding",
            published=date(2021, 1, 1),
            keywords=("welding",),
        )
    ]
    client, _ = _client(docs)
    session = client.session("s1", CUTOFF, 6)
    urls = [r.url for r in session.search("welding")]
    assert "https://example.com/ancient" not in urls
    # 60-month window admits it.
    session_wide = client.session("s2", CUTOFF, 60)
    urls_wide = [r.url for r in session_wide.search("welding")]
    assert "https://example.com/ancient" in urls_wide


def test_search_counters_and_repeats():
    client, _ = _client()
    session = client.session("s1", CUTOFF, 6)
    first = session.search("welding")
    second = session.search("welding")
    counters = session.counters()
    assert counters.search_queries == 2
    assert counters.unique_result_urls == len(first)
    assert counters.repeated_result_urls == len(second)


def test_search_empty_corpus_counts_query():
    client, _ = _client(docs=[])
    session = client.session("s1", CUTOFF, 6)
    assert session.search("anything") == []
    assert session.counters().search_queries == 1


def test_results_ranked_ascending():
    client, _ = _client()
    session = client.session("s1", CUTOFF, 6)
    results = session.search("welding")
    assert [r.rank for r in results] == list(range(1, len(results) + 1))


def test_scrape_caches_and_counts():
    client, backend = _client()
    session = client.session("s1", CUTOFF, 6)
    first = session.scrape(["https://example.com/a"])
    assert first[0].ok and not first[0].fetched_from_cache
    again = session.scrape(["https://example.com/a"])
    assert again[0].ok and again[0].fetched_from_cache
    assert again[0].text == first[0].text
    assert backend.fetch_count == 1
    counters = session.counters()
    assert counters.unique_scraped_urls == 1
    assert counters.repeated_scraped_urls == 1


def test_scrape_batch_with_duplicate():
    client, backend = _client()
    session = client.session("s1", CUTOFF, 6)
    pages = session.scrape(
        ["https://example.com/a", "https://example.com/b", "https://example.com/a"]
    )
    assert [p.ok for p in pages] == [True, True, True]
    assert backend.fetch_count == 2
    counters = session.counters()
    assert counters.unique_scraped_urls == 2
    assert counters.repeated_scraped_urls == 1


def test_cache_shared_across_samples_counters_are_not():
    client, backend = _client()
    one = client.session("s1", CUTOFF, 6)
    two = client.session("s2", CUTOFF, 6)
    one.scrape(["https://example.com/a"])
    two.scrape(["https://example.com/a"])
    assert backend.fetch_count == 1
    assert client.counters("s1").unique_scraped_urls == 1
    assert client.counters("s2").unique_scraped_urls == 1
    assert client.counters("s2").repeated_scraped_urls == 0


def test_scrape_error_is_per_url():
    client, backend = _client()
    session = client.session("s1", CUTOFF, 6)
    pages = session.scrape(
        ["https://example.com/a", "https://example.com/missing", "not a url"]
    )
    assert pages[0].ok
    assert not pages[1].ok and "no such document" in pages[1].error
    assert not pages[2].ok and pages[2].error == "invalid URL"
    counters = session.counters()
    assert counters.unique_scraped_urls == 1
    assert counters.repeated_scraped_urls == 0


def test_failed_fetch_not_cached_and_retried():
    class FlakyBackend:
        def __init__(self):
            self.calls = 0

        def search(self, query):
            return []

        def fetch(self, url):
            self.calls += 1
            if self.calls == 1:
                raise FetchError("transient")
            return "content"

    client = WebClient(FlakyBackend())
    session = client.session("s1", CUTOFF, 6)
    assert not session.scrape(["https://x.com/page"])[0].ok
    assert session.scrape(["https://x.com/page"])[0].ok


def test_concurrent_scrapes_fetch_each_url_once():
    client, backend = _client()
    sessions = [client.session(f"s{i}", CUTOFF, 6) for i in range(8)]
    with ThreadPoolExecutor(max_workers=8) as pool:
        list(
            pool.map(
                lambda s: s.scrape(["https://example.com/a", "https://example.com/b"]),
                sessions,
            )
        )
    assert backend.fetch_count == 2


def test_unknown_sample_counter_lookup_fails():
    client, _ = _client()
    with pytest.raises(LookupError):
        client.counters("never-registered")


def test_counters_before_any_call_are_zero():
    client, _ = _client()
    session = client.session("s1", CUTOFF, 6)
    counters = session.counters()
    assert counters.to_dict() == {
        "search_queries": 0,
        "unique_result_urls": 0,
        "repeated_result_urls": 0,
        "unique_scraped_urls": 0,
        "repeated_scraped_urls": 0,
    }


def test_scripted_trajectory_hand_counted():
    # 5 searches and 4 scrapes where exactly one scrape repeats a URL:
    # counters must read search_queries=5, unique=3, repeated=1.
    client, _ = _client()
    session = client.session("s1", CUTOFF, 6)
    for query in ("welding", "roboweld", "volt", "methodology", "research"):
        session.search(query)
    session.scrape(["https://example.com/a"])
    session.scrape(["https://example.com/b"])
    session.scrape(["https://example.com/c"])
    session.scrape(["https://example.com/a"])
    counters = session.counters()
    assert counters.search_queries == 5
    assert counters.unique_scraped_urls == 3
    assert counters.repeated_scraped_urls == 1


def test_semaphore_bounds_concurrent_backend_calls():
    active_searches = []
    active_fetches = []
    search_high = [0]
    fetch_high = [0]
    lock = threading.Lock()

    class SlowBackend:
        def search(self, query):
            with lock:
                active_searches.append(1)
                search_high[0] = max(search_high[0], len(active_searches))
            time.sleep(0.05)
            with lock:
                active_searches.pop()
            return []

        def fetch(self, url):
            with lock:
                active_fetches.append(1)
                fetch_high[0] = max(fetch_high[0], len(active_fetches))
            time.sleep(0.05)
            with lock:
                active_fetches.pop()
            return "page"

    client = WebClient(SlowBackend())
    sessions = [client.session(f"s{i}", CUTOFF, 6) for i in range(16)]

    def hammer(pair):
        index, session = pair
        session.search("q")
        session.scrape([f"https://site{index}.com/x"])

    with ThreadPoolExecutor(max_workers=16) as pool:
        list(pool.map(hammer, enumerate(sessions)))
    assert search_high[0] <= 8
    assert fetch_high[0] <= 4


def test_disk_cache_persists_across_clients(tmp_path):
    cache_dir = tmp_path / "cache"
    client_a, backend_a = _client(cache_dir=cache_dir)
    client_a.session("s1", CUTOFF, 6).scrape(["https://example.com/a"])
    assert backend_a.fetch_count == 1

    client_b, backend_b = _client(cache_dir=cache_dir)
    page = client_b.session("s1", CUTOFF, 6).scrape(["https://example.com/a"])[0]
    assert page.ok and page.fetched_from_cache
    assert backend_b.fetch_count == 0


def test_url_cache_byte_identical_within_process():
    cache = UrlCache()
    text, cached = cache.get_or_fetch("https://x.com/a", lambda url: "exact\nbytes")
    assert not cached
    text2, cached2 = cache.get_or_fetch("https://x.com/a", lambda url: "different")
    assert cached2
    assert text2 == text == "exact\nbytes"


def test_strict_undated_toggle():
    class UndatedBackend:
        def search(self, query):
            from webquest.webtools import SearchResult

            return [SearchResult("https://x.com/u", "t", "s", None, 1)]

        def fetch(self, url):
            return ""

    strict = WebClient(UndatedBackend(), strict_undated=True)
    assert strict.session("s1", CUTOFF, 6).search("q") == []
    lax = WebClient(UndatedBackend(), strict_undated=False)
    assert len(lax.session("s1", CUTOFF, 6).search("q")) == 1


def test_query_validation():
    with pytest.raises(ValueError):
        SearchQuery(text="  ", cutoff=CUTOFF, recency_window_months=6)
    with pytest.raises(ValueError):
        SearchQuery(text="x", cutoff=CUTOFF, recency_window_months=0)
    with pytest.raises(ValueError):
        SearchQuery(text="x", cutoff=date(2999, 1, 1), recency_window_months=6)
