"""
Unit tests for the Redis score cache.
"""

import threading
import time

import pytest

from config.cache import ScoreCache
from config.settings import CacheSettings


class TestClient:

    @pytest.fixture
    def enabled_cache(self):
        return ScoreCache(CacheSettings(enabled=True))

    def test_disabled_never_connects(self, mocker):
        """Test that a disabled cache creates no client and misses every lookup"""
        create = mocker.patch.object(ScoreCache, "_create_client")
        cache = ScoreCache(CacheSettings(enabled=False))
        assert cache.client is None
        assert cache.get("k") is None
        assert not cache.set("k", 0.5)
        create.assert_not_called()

    def test_concurrent_access_creates_one_client(self, enabled_cache, mocker):
        """Test that threads racing on the first access share a single client"""
        client = mocker.Mock()

        def slow_create():
            time.sleep(0.05)
            return client

        create = mocker.patch.object(ScoreCache, "_create_client", side_effect=slow_create)
        barrier = threading.Barrier(8)
        seen = []

        def worker():
            barrier.wait()
            seen.append(enabled_cache.client)

        threads = [threading.Thread(target=worker) for _ in range(8)]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()
        assert create.call_count == 1
        assert seen == [client] * 8

    def test_unavailable_server_is_remembered(self, enabled_cache, mocker):
        """Test that a failed connection is not retried on every access"""
        create = mocker.patch.object(ScoreCache, "_create_client", return_value=None)
        assert enabled_cache.client is None
        assert enabled_cache.client is None
        assert create.call_count == 1

    def test_configure_drops_connection(self, enabled_cache, mocker):
        """Test that reconfiguring forces a fresh client"""
        create = mocker.patch.object(ScoreCache, "_create_client", side_effect=[mocker.Mock(), mocker.Mock()])
        first = enabled_cache.client
        enabled_cache.configure(CacheSettings(enabled=True, port=6380))
        assert enabled_cache.client is not first
        assert create.call_count == 2


class TestKeys:

    def test_key_is_deterministic(self):
        """Test that equal parts give equal keys and bytes differ from their repr"""
        cache = ScoreCache(CacheSettings())
        assert cache.generate_cache_key(b'\x01', 3) == cache.generate_cache_key(b'\x01', 3)
        assert cache.generate_cache_key(b'\x01', 3) != cache.generate_cache_key(b'\x01', 4)
        assert cache.generate_cache_key(b'ab') != cache.generate_cache_key("b'ab'")


# Run tests with:
# pytest tests/test_cache.py -v
