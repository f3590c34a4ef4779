"""
Base class for all attacks.
Provides: score caching, performance tracking, oracle accounting, logging.
"""

import hashlib
import logging
import random
import time
from abc import ABC, abstractmethod
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import wraps
from typing import TYPE_CHECKING, Any, Dict, Iterator, List, Optional

from config.cache import cache
from config.metrics import CANDIDATES, ORACLE_QUERIES, TRIALS
from config.settings import settings
from mbxlab.container import BinaryImage, detector_view
from mbxlab.detector import DetectorModel, Threshold, fingerprint, score_view
from mbxlab.vm import check_image_equivalence

if TYPE_CHECKING:
    from mbxlab.attack import AttackConfig


def cache_result(ttl: Optional[int] = None):
    """
    Decorator to cache detector scores.

    Keys combine the method name, the model fingerprint and the arguments;
    with the cache disabled every call goes through.

    Args:
        ttl: Time to live in seconds (defaults to the cache setting)
    """
    def decorator(func):
        @wraps(func)
        def wrapper(self, *args, **kwargs):
            cache_key = f"{func.__name__}:{cache.generate_cache_key(self.model_fingerprint, *args, **kwargs)}"

            cached_result = cache.get(cache_key)
            if cached_result is not None:
                self.logger.debug(f"Cache HIT: {cache_key}")
                return cached_result

            result = func(self, *args, **kwargs)
            cache.set(cache_key, result, ttl)
            return result
        return wrapper
    return decorator


def track_performance(func):
    """Decorator to track method execution time"""
    @wraps(func)
    def wrapper(self, *args, **kwargs):
        start_time = time.time()

        try:
            result = func(self, *args, **kwargs)
            duration = time.time() - start_time

            if duration > settings.logging.slow_threshold_seconds:
                self.logger.warning(f"SLOW: {func.__name__} took {duration:.2f}s")
            else:
                self.logger.info(f"Completed: {func.__name__} in {duration:.3f}s")

            return result

        except Exception as e:
            duration = time.time() - start_time
            self.logger.error(f"Failed: {func.__name__} after {duration:.3f}s - {str(e)}")
            raise

    return wrapper


@contextmanager
def timed(log: logging.Logger, label: str) -> Iterator[None]:
    """track_performance for a block inside a plain function"""
    start_time = time.time()
    yield
    duration = time.time() - start_time
    if duration > settings.logging.slow_threshold_seconds:
        log.warning(f"SLOW: {label} took {duration:.2f}s")
    else:
        log.debug(f"Completed: {label} in {duration:.3f}s")


def job_seed(root_seed: int, binary_id: str, repeat: int) -> int:
    """Per-trial seed derived from the root seed by fixed hashing"""
    digest = hashlib.md5(f"{root_seed}:{binary_id}:{repeat}".encode()).hexdigest()
    return int(digest[:8], 16)


# ==================== RESULTS ====================

@dataclass
class TrialResult:
    success: bool
    iterations_used: int
    initial_score: float
    final_score: float
    score_trace: List[float] = field(default_factory=list)
    accepted: int = 0
    rejected: int = 0
    queries: int = 0
    trivially_done: bool = False
    size_before: int = 0
    size_after: int = 0
    equivalent: Optional[bool] = None
    binary_id: str = ""
    repeat: int = 0
    seed: int = 0
    image: Optional[BinaryImage] = field(default=None, repr=False)

    def to_dict(self) -> Dict[str, Any]:
        """JSON-ready record (the adversarial image itself is left out)"""
        return {
            'binary_id': self.binary_id,
            'repeat': self.repeat,
            'seed': self.seed,
            'success': self.success,
            'trivially_done': self.trivially_done,
            'iterations_used': self.iterations_used,
            'initial_score': self.initial_score,
            'final_score': self.final_score,
            'score_trace': list(self.score_trace),
            'accepted': self.accepted,
            'rejected': self.rejected,
            'queries': self.queries,
            'size_before': self.size_before,
            'size_after': self.size_after,
            'equivalent': self.equivalent,
        }


@dataclass
class AttackResult:
    binary_id: str
    label: int
    trials: List[TrialResult]

    @property
    def trivial(self) -> bool:
        return bool(self.trials) and all(t.trivially_done for t in self.trials)

    @property
    def successes(self) -> int:
        return sum(t.success for t in self.trials)

    @property
    def any_success(self) -> bool:
        return self.successes > 0


class BaseAttack(ABC):
    """
    Base class that all attacks inherit from.
    Provides common functionality: oracle queries, success tests, trial loop.
    """

    # Override these in child classes
    ATTACK_NAME = "base_attack"
    ATTACK_VERSION = "0.0.0"

    def __init__(self, model: DetectorModel, threshold: Threshold, config: 'AttackConfig',
                 model_fingerprint: Optional[str] = None):
        self.logger = logging.getLogger(self.ATTACK_NAME)
        self.model = model
        self.threshold = threshold
        self.config = config
        self.model_fingerprint = model_fingerprint or fingerprint(model)
        self.queries = 0

    # ==================== ORACLE ====================

    @cache_result()
    def _score_view(self, view: bytes) -> float:
        return score_view(self.model, view)

    def score(self, image: BinaryImage) -> float:
        """Probability-malicious of the image's detector view"""
        self.queries += 1
        ORACLE_QUERIES.labels(self.ATTACK_NAME).inc()
        return self._score_view(detector_view(image, self.model.input_cap))

    def view(self, image: BinaryImage) -> bytes:
        return detector_view(image, self.model.input_cap)

    @staticmethod
    def target_probability(score: float, target: int) -> float:
        return score if target == 1 else 1.0 - score

    def label_of(self, score: float) -> int:
        return 1 if self.threshold.is_malicious(score) else 0

    def is_success(self, score: float, target: int) -> bool:
        return self.label_of(score) == target

    def target_for(self, label: int) -> int:
        return 1 - label if self.config.target is None else self.config.target

    def _record(self, accepted: bool) -> None:
        CANDIDATES.labels(self.ATTACK_NAME, 'accepted' if accepted else 'rejected').inc()

    # ==================== TRIALS ====================

    @track_performance
    def run(self, image: BinaryImage, label: int, binary_id: str = "sample") -> AttackResult:
        """
        Run config.repeats independent trials on one binary.

        Args:
            image: Original image
            label: True label of the image
            binary_id: Identifier used for per-trial seeds and reports

        Returns:
            AttackResult with one TrialResult per repeat
        """
        trials: List[TrialResult] = []
        for repeat in range(self.config.repeats):
            seed = job_seed(self.config.seed, binary_id, repeat)
            trial = self.run_trial(image, label, random.Random(seed))
            trial.binary_id, trial.repeat, trial.seed = binary_id, repeat, seed
            if self.config.verify_trials and trial.image is not None and not trial.trivially_done:
                trial.equivalent = self.verify(image, trial.image)
            outcome = 'trivial' if trial.trivially_done else ('success' if trial.success else 'failure')
            TRIALS.labels(self.ATTACK_NAME, outcome).inc()
            trials.append(trial)
        return AttackResult(binary_id, label, trials)

    def verify(self, original: BinaryImage, adversarial: BinaryImage) -> bool:
        """Every function of adversarial behaves like its original on random states"""
        verdicts = check_image_equivalence(original, adversarial, trials=self.config.verify_trials)
        failed = [index for index, verdict in verdicts.items() if not verdict]
        if failed:
            self.logger.error(f"functions {failed} are not equivalent after the attack")
        return not failed

    # ==================== ABSTRACT METHOD ====================

    @abstractmethod
    def run_trial(self, image: BinaryImage, label: int, rng: random.Random) -> TrialResult:
        """One attack trial from a fresh copy of image"""
        pass
