"""
Redis cache for detector score queries.
Disabled by default; a missing server degrades to running without cache.
"""

import hashlib
import json
import logging
import threading
from typing import Any, Optional

import redis

from config.settings import CacheSettings, settings

logger = logging.getLogger(__name__)


class ScoreCache:
    """Memoizes detector scores keyed by model fingerprint and input bytes"""

    def __init__(self, cache_settings: Optional[CacheSettings] = None):
        self._lock = threading.Lock()
        self.configure(cache_settings or settings.cache)

    def configure(self, cache_settings: CacheSettings) -> None:
        """Adopt new settings; any open connection is dropped"""
        self.enabled = cache_settings.enabled
        self.host = cache_settings.host
        self.port = cache_settings.port
        self.password = cache_settings.password
        self.default_ttl = cache_settings.ttl_seconds

        with self._lock:
            self._client: Optional[redis.Redis] = None
            self._connected = False

    def _create_client(self) -> Optional[redis.Redis]:
        """Create Redis client with connection pooling"""
        try:
            client = redis.Redis(
                host=self.host,
                port=self.port,
                password=self.password,
                decode_responses=True,
                socket_connect_timeout=5,
                socket_timeout=5,
                retry_on_timeout=True,
                health_check_interval=30
            )

            client.ping()
            logger.info(f"Redis connection established: {self.host}:{self.port}")
            return client

        except redis.ConnectionError as e:
            logger.warning(f"Redis unavailable: {str(e)}. Running without cache.")
            return None

    @property
    def client(self) -> Optional[redis.Redis]:
        if not self.enabled:
            return None
        if not self._connected:
            with self._lock:
                if not self._connected:
                    self._client = self._create_client()
                    self._connected = True
        return self._client

    def get(self, key: str) -> Optional[Any]:
        """Get value from cache"""
        client = self.client
        if not client:
            return None

        try:
            value = client.get(key)
            if value:
                logger.debug(f"Cache HIT: {key}")
                return json.loads(value)

            logger.debug(f"Cache MISS: {key}")
            return None

        except Exception as e:
            logger.error(f"Cache get error: {str(e)}")
            return None

    def set(self, key: str, value: Any, ttl: Optional[int] = None) -> bool:
        """Set value in cache with TTL"""
        client = self.client
        if not client:
            return False

        try:
            ttl = ttl or self.default_ttl
            # repr-exact float round trip keeps cached scores bit-identical
            client.setex(key, ttl, json.dumps(value))
            logger.debug(f"Cache SET: {key} (TTL: {ttl}s)")
            return True

        except Exception as e:
            logger.error(f"Cache set error: {str(e)}")
            return False

    def generate_cache_key(self, *parts: Any) -> str:
        """Deterministic key from byte strings and scalars"""
        digest = hashlib.md5()
        for part in parts:
            if isinstance(part, (bytes, bytearray)):
                digest.update(bytes(part))
            else:
                digest.update(repr(part).encode())
            digest.update(b'\x00')
        return digest.hexdigest()


# Singleton instance
cache = ScoreCache()
