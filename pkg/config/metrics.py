"""
Prometheus counters for attack runs, kept in a private registry and
written to a textfile next to the run's reports.
"""

from pathlib import Path

from prometheus_client import CollectorRegistry, Counter, write_to_textfile

registry = CollectorRegistry()

ORACLE_QUERIES = Counter(
    'mbxlab_oracle_queries',
    'Detector score queries issued by attacks',
    ['mode'],
    registry=registry,
)
CANDIDATES = Counter(
    'mbxlab_candidates',
    'Candidate transformations evaluated by attacks',
    ['mode', 'decision'],
    registry=registry,
)
TRIALS = Counter(
    'mbxlab_trials',
    'Attack trials by outcome',
    ['mode', 'outcome'],
    registry=registry,
)


def write_metrics(path: Path) -> None:
    """Dump the registry in Prometheus text format"""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    write_to_textfile(str(path), registry)
