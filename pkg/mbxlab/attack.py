"""
Evasion attacks against the byte-level detector.

Whitebox: gradient-guided acceptance of random in-place and displacement
transformations. Blackbox: the same loop accepting only candidates that raise
the target-class probability. Random: undirected transformation baseline.
Append: overlay bytes pushed along the gradient sign in embedding space.
"""

import json
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, Field, model_validator

from config.metrics import write_metrics
from config.settings import AttackSettings, settings
from mbxlab.base_attack import AttackResult, BaseAttack, TrialResult
from mbxlab.container import (
    BinaryImage,
    FunctionRef,
    TransformType,
    add_overlay,
    patch_bytes,
    reanalyze,
    serialized_size,
    view_offset,
)
from mbxlab.detector import (
    MALICIOUS,
    DetectorModel,
    Objective,
    Threshold,
    embed,
    fingerprint,
    grad_wrt_embedding,
    to_tensor,
)
from mbxlab.disp import DispState, displace_all, refresh_semnops, site_view_positions, write_site
from mbxlab.ipr import apply_ipr, available_transforms
from mbxlab.semnop import set_slot_byte

logger = logging.getLogger(__name__)

RESULTS_VERSION = 1


class AttackMode(str, Enum):
    WHITEBOX = "whitebox"
    BLACKBOX = "blackbox"
    RANDOM = "random"
    APPEND = "append"


class TransformSet(str, Enum):
    IPR = "ipr"
    DISP = "disp"
    IPR_DISP = "ipr+disp"

    @property
    def ipr(self) -> bool:
        return self in (TransformSet.IPR, TransformSet.IPR_DISP)

    @property
    def disp(self) -> bool:
        return self in (TransformSet.DISP, TransformSet.IPR_DISP)


class AttackConfig(BaseModel):
    mode: AttackMode = AttackMode.WHITEBOX
    transforms: TransformSet = TransformSet.IPR_DISP
    budget_fraction: Optional[float] = Field(None, gt=0.0, le=0.10)
    niters: int = Field(200, ge=1)
    repeats: int = Field(10, ge=1)
    seed: int = 0
    target: Optional[int] = Field(None, ge=0, le=1)
    objective: Objective = Objective.BENEFIT
    slot_candidates: int = Field(16, ge=1, le=256)
    epsilon: float = Field(1.0, gt=0.0)
    verify_trials: int = Field(0, ge=0)

    @property
    def needs_budget(self) -> bool:
        return self.mode == AttackMode.APPEND or self.transforms.disp

    @model_validator(mode='after')
    def _budget_iff_needed(self) -> 'AttackConfig':
        if self.needs_budget and self.budget_fraction is None:
            raise ValueError(f"{self.mode.value}/{self.transforms.value} needs a budget fraction")
        if not self.needs_budget and self.budget_fraction is not None:
            raise ValueError("a budget fraction only applies to displacement or append attacks")
        return self

    @classmethod
    def from_settings(cls, attack_settings: Optional[AttackSettings] = None, **overrides: Any) -> 'AttackConfig':
        """Config from the [attack] settings; the budget is filled in only where it applies"""
        attack_settings = attack_settings or settings.attack
        values: Dict[str, Any] = {
            'niters': attack_settings.niters,
            'repeats': attack_settings.repeats,
            'slot_candidates': attack_settings.blackbox_slot_candidates,
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        mode = AttackMode(values.get('mode', AttackMode.WHITEBOX))
        transforms = TransformSet(values.get('transforms', TransformSet.IPR_DISP))
        if mode == AttackMode.APPEND or transforms.disp:
            values.setdefault('budget_fraction', attack_settings.budget_fraction)
        return cls(**values)

    @property
    def name(self) -> str:
        if self.mode == AttackMode.APPEND:
            return f"append-{round(self.budget_fraction * 100)}"
        suffix = f"-{round(self.budget_fraction * 100)}" if self.transforms.disp else ""
        return f"{self.mode.value}/{self.transforms.value}{suffix}"


# ==================== TRANSFORM PLUMBING ====================

def enabled_transforms(image: BinaryImage, fn: FunctionRef, state: DispState,
                       transforms: TransformSet) -> List[TransformType]:
    """Transform types that can currently change fn under the enabled set"""
    choices: List[TransformType] = []
    if transforms.ipr:
        choices.extend(available_transforms(image, fn, state.frozen_ranges(fn.index)))
    if transforms.disp and state.sites_for(fn.index):
        choices.append(TransformType.DISP)
    return choices


def apply_transform(transform: TransformType, image: BinaryImage, fn: FunctionRef, state: DispState,
                    rng: random.Random) -> Tuple[BinaryImage, DispState, bool]:
    """One random application of transform to fn; DISP refreshes fn's semantic nops"""
    if transform == TransformType.DISP:
        new_image, new_state = refresh_semnops(image, state, rng, fn.index)
        return new_image, new_state, True
    outcome = apply_ipr(transform, image, fn, rng, state.frozen_ranges(fn.index))
    return outcome.image, state, outcome.changed


def randomize_all(image: BinaryImage, transforms: TransformSet, rng: random.Random,
                  budget_fraction: Optional[float] = None,
                  state: Optional[DispState] = None) -> Tuple[BinaryImage, DispState]:
    """
    Apply one uniformly chosen enabled transform to every function.

    The first call with displacement enabled also performs the displacement
    itself (budget split plus one displaced run per function).
    """
    state = state or DispState()
    if transforms.disp and not state.plans:
        if budget_fraction is None:
            raise ValueError("displacement needs a budget fraction")
        image, state = displace_all(image, budget_fraction, rng, state)
    for index in range(len(image.functions)):
        fn = image.functions[index]
        choices = enabled_transforms(image, fn, state, transforms)
        if choices:
            image, state, _ = apply_transform(rng.choice(choices), image, fn, state, rng)
    return image, state


@dataclass
class _Step:
    accepted: bool
    image: BinaryImage
    state: DispState
    score: Optional[float] = None
    gain: Optional[float] = None


# ==================== TRANSFORMATION ATTACKS ====================

class TransformAttack(BaseAttack):
    """Shared outer loop of the whitebox and blackbox attacks"""

    def _trivial(self, image: BinaryImage, score: float) -> TrialResult:
        size = serialized_size(image)
        return TrialResult(True, 0, score, score, [score], trivially_done=True,
                           size_before=size, size_after=size, image=image)

    def _in_view(self, image: BinaryImage, fn: FunctionRef, skipped: set) -> bool:
        offset = view_offset(image, fn.vaddr)
        if offset is not None and offset < self.model.input_cap:
            return True
        if fn.index not in skipped:
            skipped.add(fn.index)
            self.logger.warning(f"function {fn.index} at {fn.vaddr:#x} lies outside the detector input; skipped")
        return False

    def run_trial(self, image: BinaryImage, label: int, rng: random.Random) -> TrialResult:
        queries_before = self.queries
        target = self.target_for(label)
        initial = self.score(image)
        if self.is_success(initial, target):
            self.logger.info(f"already classified as {target}: trivially done")
            return self._trivial(image, initial)

        x, state = randomize_all(image, self.config.transforms, rng, self.config.budget_fraction)
        score: Optional[float] = self.score(x)
        trace = [score]
        accepted = rejected = iterations = 0
        skipped: set = set()

        while not self.is_success(score, target) and iterations < self.config.niters:
            iterations += 1
            for index in range(len(x.functions)):
                fn = x.functions[index]
                choices = enabled_transforms(x, fn, state, self.config.transforms)
                if not choices or not self._in_view(x, fn, skipped):
                    continue
                step = self.step(x, state, fn, rng.choice(choices), rng, target, score)
                if step is None:
                    continue
                self._record(step.accepted)
                if step.accepted:
                    x, state, score = step.image, step.state, step.score
                    accepted += 1
                else:
                    rejected += 1
            if score is None:
                score = self.score(x)
            trace.append(score)
            self.logger.debug(f"iteration {iterations}: score {score:.6f}")

        return TrialResult(self.is_success(score, target), iterations, initial, score, trace, accepted, rejected,
                           self.queries - queries_before, size_before=serialized_size(image),
                           size_after=serialized_size(x), image=x)

    def _candidate(self, x: BinaryImage, state: DispState, fn: FunctionRef, transform: TransformType,
                   rng: random.Random) -> Optional[Tuple[BinaryImage, DispState]]:
        image, new_state, changed = apply_transform(transform, x, fn, state, rng)
        return (image, new_state) if changed else None

    def step(self, x: BinaryImage, state: DispState, fn: FunctionRef, transform: TransformType,
             rng: random.Random, target: int, score: Optional[float]) -> Optional[_Step]:
        raise NotImplementedError


class WhiteboxAttack(TransformAttack):
    """Accept a candidate iff its embedding change has positive dot product with the gradient"""

    ATTACK_NAME = "whitebox"
    ATTACK_VERSION = "1.0.0"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.embedding = self.model.embedding.weight.detach().cpu().numpy().astype(np.float64)

    def gradient(self, view: bytes, target: int) -> np.ndarray:
        e = embed(self.model, view)
        return grad_wrt_embedding(self.model, e, self.config.objective, target).cpu().numpy().astype(np.float64)

    def gain(self, before: bytes, after: bytes, g: np.ndarray) -> float:
        """g . (E(after) - E(before)) over the positions that differ in the padded input"""
        a = to_tensor([before], self.model.input_cap)[0].numpy()
        b = to_tensor([after], self.model.input_cap)[0].numpy()
        changed = np.nonzero(a != b)[0]
        if not len(changed):
            return 0.0
        delta = self.embedding[b[changed]] - self.embedding[a[changed]]
        return float(np.sum(delta * g[changed]))

    def embedded_gain(self, before: bytes, after: bytes, g: np.ndarray) -> float:
        """The same product taken over the model's own embeddings of both inputs"""
        delta = embed(self.model, after) - embed(self.model, before)
        return float(torch.sum(delta.double() * torch.from_numpy(g)))

    def tune_slots(self, image: BinaryImage, state: DispState, fn: FunctionRef, view: bytes,
                   g: np.ndarray) -> Tuple[BinaryImage, DispState]:
        """Set each free nop byte to the value whose embedding step best aligns with g"""
        current = np.frombuffer(view, dtype=np.uint8)
        for index, vaddr, position in site_view_positions(image, state, fn.index):
            offset = view_offset(image, vaddr)
            if offset is None or offset >= len(current):
                continue
            gi = g[offset]
            g_norm = np.linalg.norm(gi)
            if g_norm == 0:
                continue
            delta = self.embedding - self.embedding[current[offset]]
            denom = np.linalg.norm(delta, axis=1) * g_norm
            cosine = np.divide(delta @ gi, denom, out=np.zeros(len(delta)), where=denom > 0)
            best = int(np.argmax(cosine))
            if cosine[best] > 0:
                nop = set_slot_byte(state.sites[index].nop, position, best)
                image, state = write_site(image, state, index, nop, reanalyze_function=False)
        return reanalyze(image, [fn.index]), state

    def step(self, x, state, fn, transform, rng, target, score):
        candidate = self._candidate(x, state, fn, transform, rng)
        if candidate is None:
            return None
        view = self.view(x)
        g = self.gradient(view, target)
        image, new_state = candidate
        if transform == TransformType.DISP:
            image, new_state = self.tune_slots(image, new_state, fn, view, g)
        after = self.view(image)
        gain = self.gain(view, after, g)
        accepted = gain > 0
        if accepted:
            rechecked = self.embedded_gain(view, after, g)
            if rechecked <= 0:
                self.logger.warning(f"function {fn.index} {transform.value}: gain {gain:+.6g} "
                                    f"re-checked as {rechecked:+.6g}; rejected")
                accepted = False
        self.logger.debug(f"function {fn.index} {transform.value}: gain {gain:+.6g} "
                          f"{'accepted' if accepted else 'rejected'}")
        return _Step(accepted, image, new_state, gain=gain)


class BlackboxAttack(TransformAttack):
    """Accept a candidate iff the target-class probability strictly increases"""

    ATTACK_NAME = "blackbox"
    ATTACK_VERSION = "1.0.0"

    def search_slots(self, image: BinaryImage, state: DispState, fn: FunctionRef, rng: random.Random,
                     target: int) -> Tuple[BinaryImage, DispState, float]:
        """Coordinate search over sampled byte values for every free nop byte inside the input"""
        best_score = self.score(image)
        best_p = self.target_probability(best_score, target)
        for index, vaddr, position in site_view_positions(image, state, fn.index):
            offset = view_offset(image, vaddr)
            if offset is None or offset >= self.model.input_cap:
                continue
            for value in rng.sample(range(256), self.config.slot_candidates):
                nop = set_slot_byte(state.sites[index].nop, position, value)
                trial_image, trial_state = write_site(image, state, index, nop, reanalyze_function=False)
                trial_score = self.score(trial_image)
                trial_p = self.target_probability(trial_score, target)
                if trial_p > best_p:
                    image, state, best_score, best_p = trial_image, trial_state, trial_score, trial_p
        return reanalyze(image, [fn.index]), state, best_score

    def step(self, x, state, fn, transform, rng, target, score):
        if score is None:
            score = self.score(x)
        candidate = self._candidate(x, state, fn, transform, rng)
        if candidate is None:
            return None
        image, new_state = candidate
        if transform == TransformType.DISP:
            image, new_state, candidate_score = self.search_slots(image, new_state, fn, rng, target)
        else:
            candidate_score = self.score(image)
        accepted = self.target_probability(candidate_score, target) > self.target_probability(score, target)
        return _Step(accepted, image, new_state, candidate_score if accepted else score)


# ==================== BASELINES ====================

class RandomAttack(TransformAttack):
    """Sequential undirected variants; success if any crosses the threshold"""

    ATTACK_NAME = "random"
    ATTACK_VERSION = "1.0.0"

    def run_trial(self, image: BinaryImage, label: int, rng: random.Random) -> TrialResult:
        queries_before = self.queries
        target = self.target_for(label)
        initial = self.score(image)
        if self.is_success(initial, target):
            return self._trivial(image, initial)

        x, state, score = image, None, initial
        trace = [initial]
        iterations = 0
        while iterations < self.config.niters:
            iterations += 1
            x, state = randomize_all(x, self.config.transforms, rng, self.config.budget_fraction, state)
            score = self.score(x)
            trace.append(score)
            if self.is_success(score, target):
                break
        return TrialResult(self.is_success(score, target), iterations, initial, score, trace,
                           queries=self.queries - queries_before, size_before=serialized_size(image),
                           size_after=serialized_size(x), image=x)


class AppendAttack(BaseAttack):
    """Overlay bytes moved to the nearest embedding of E(x) + epsilon * sign(g)"""

    ATTACK_NAME = "append"
    ATTACK_VERSION = "1.0.0"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.embedding = self.model.embedding.weight.detach().cpu().numpy().astype(np.float64)

    def nearest_bytes(self, current: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Per position, the byte whose embedding is closest in L2 to E(current) + epsilon * sign(g)"""
        goal = self.embedding[current] + self.config.epsilon * np.sign(g)
        distances = ((goal[:, None, :] - self.embedding[None, :, :]) ** 2).sum(axis=2)
        return distances.argmin(axis=1).astype(np.uint8)

    def run_trial(self, image: BinaryImage, label: int, rng: random.Random) -> TrialResult:
        queries_before = self.queries
        target = self.target_for(label)
        size_before = serialized_size(image)
        initial = self.score(image)
        if self.is_success(initial, target):
            return TrialResult(True, 0, initial, initial, [initial], trivially_done=True,
                               size_before=size_before, size_after=size_before, image=image)

        length = int(self.config.budget_fraction * size_before)
        overlay = bytes(rng.getrandbits(8) for _ in range(length))
        x, vaddr = add_overlay(image, overlay)
        start = view_offset(x, vaddr)
        stop = min(start + length, self.model.input_cap) if start is not None else 0
        score = self.score(x)
        trace = [score]
        iterations = 0
        if start is None or start >= stop:
            self.logger.warning(f"overlay of {length} bytes lies outside the detector input")
        else:
            while not self.is_success(score, target) and iterations < self.config.niters:
                iterations += 1
                view = self.view(x)
                g = grad_wrt_embedding(self.model, embed(self.model, view), self.config.objective, target)
                current = np.frombuffer(view, dtype=np.uint8)[start:stop]
                chosen = self.nearest_bytes(current, g.cpu().numpy()[start:stop].astype(np.float64))
                x = patch_bytes(x, vaddr, chosen.tobytes())
                score = self.score(x)
                trace.append(score)
        return TrialResult(self.is_success(score, target), iterations, initial, score, trace,
                           queries=self.queries - queries_before, size_before=size_before,
                           size_after=serialized_size(x), image=x)

    def verify(self, original: BinaryImage, adversarial: BinaryImage) -> bool:
        """Code sections and the function table are byte-identical"""
        same = original.code_sections == adversarial.code_sections and original.functions == adversarial.functions
        if not same:
            self.logger.error("append attack touched code")
        return same


ATTACKS = {
    AttackMode.WHITEBOX: WhiteboxAttack,
    AttackMode.BLACKBOX: BlackboxAttack,
    AttackMode.RANDOM: RandomAttack,
    AttackMode.APPEND: AppendAttack,
}


def _run(mode: AttackMode, image: BinaryImage, model: DetectorModel, threshold: Threshold,
         config: AttackConfig, label: int, binary_id: str) -> AttackResult:
    config = config if config.mode == mode else config.model_copy(update={'mode': mode})
    return ATTACKS[mode](model, threshold, config).run(image, label, binary_id)


def attack_whitebox(image: BinaryImage, model: DetectorModel, threshold: Threshold, config: AttackConfig,
                    label: int = MALICIOUS, binary_id: str = "sample") -> AttackResult:
    return _run(AttackMode.WHITEBOX, image, model, threshold, config, label, binary_id)


def attack_blackbox(image: BinaryImage, model: DetectorModel, threshold: Threshold, config: AttackConfig,
                    label: int = MALICIOUS, binary_id: str = "sample") -> AttackResult:
    return _run(AttackMode.BLACKBOX, image, model, threshold, config, label, binary_id)


def attack_random(image: BinaryImage, model: DetectorModel, threshold: Threshold, config: AttackConfig,
                  label: int = MALICIOUS, binary_id: str = "sample") -> AttackResult:
    return _run(AttackMode.RANDOM, image, model, threshold, config, label, binary_id)


def attack_append(image: BinaryImage, model: DetectorModel, threshold: Threshold, config: AttackConfig,
                  label: int = MALICIOUS, binary_id: str = "sample") -> AttackResult:
    return _run(AttackMode.APPEND, image, model, threshold, config, label, binary_id)


# ==================== EVALUATION ====================

@dataclass
class EvaluationSummary:
    n_binaries: int
    n_trivial: int
    n_trials: int
    coverage: float
    potency: float
    within_ten: float
    curve: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'n_binaries': self.n_binaries,
            'n_trivial': self.n_trivial,
            'n_trials': self.n_trials,
            'coverage': self.coverage,
            'potency': self.potency,
            'within_ten': self.within_ten,
        }


def evaluate(results: Sequence[AttackResult], niters: Optional[int] = None) -> EvaluationSummary:
    """
    Coverage, potency and the per-iteration success curve.

    Binaries that were already misclassified are counted but excluded.

    Raises:
        ValueError: no attacked binary, or binaries with different repeat counts
    """
    attacked = [r for r in results if not r.trivial and r.trials]
    if not attacked:
        raise ValueError("evaluation needs at least one attacked binary with one trial")
    repeats = {len(r.trials) for r in attacked}
    if len(repeats) != 1:
        raise ValueError(f"binaries have different repeat counts: {sorted(repeats)}")

    trials = [t for r in attacked for t in r.trials]
    coverage = sum(r.any_success for r in attacked) / len(attacked)
    potency = sum(t.success for t in trials) / len(trials)
    assert coverage >= potency

    successful = [t for t in trials if t.success]
    within_ten = sum(t.iterations_used <= 10 for t in successful) / len(successful) if successful else 0.0
    horizon = niters if niters is not None else max(t.iterations_used for t in trials)
    used = np.array([t.iterations_used if t.success else horizon + 1 for t in trials])
    curve = [float(np.mean(used <= i)) for i in range(horizon + 1)]
    return EvaluationSummary(len(attacked), len(results) - len(attacked), len(trials), coverage, potency,
                             within_ten, curve)


# ==================== EXPERIMENTS ====================

def run_experiment(samples: Sequence[Tuple[str, BinaryImage, int]], model: DetectorModel, threshold: Threshold,
                   config: AttackConfig, jobs: int = 1) -> List[AttackResult]:
    """
    Attack every (binary_id, image, label) sample with config.repeats trials.

    Per-trial seeds are hashed from (config.seed, binary_id, repeat), so the
    results do not depend on jobs.
    """
    model_fingerprint = fingerprint(model)
    attack_class = ATTACKS[config.mode]

    def job(sample: Tuple[str, BinaryImage, int]) -> AttackResult:
        binary_id, image, label = sample
        try:
            return attack_class(model, threshold, config, model_fingerprint).run(image, label, binary_id)
        except Exception as e:
            logger.error(f"attack job {binary_id} failed: {str(e)}")
            raise

    logger.info(f"Running {config.name} on {len(samples)} binaries x {config.repeats} repeats ({jobs} jobs)")
    with ThreadPoolExecutor(max_workers=max(jobs, 1)) as pool:
        return list(pool.map(job, samples))


def write_reports(results: Sequence[AttackResult], summary: EvaluationSummary, config: AttackConfig,
                  out_dir: Path) -> Dict[str, Path]:
    """trials.json, summary.csv, curve.csv and metrics.prom under out_dir"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {name: out_dir / name for name in ('trials.json', 'summary.csv', 'curve.csv', 'metrics.prom')}

    payload = {
        'version': RESULTS_VERSION,
        'attack': config.name,
        'config': config.model_dump(mode='json'),
        'trials': [t.to_dict() for r in results for t in r.trials],
    }
    paths['trials.json'].write_text(json.dumps(payload, indent=2, sort_keys=True))

    row = {'attack': config.name, 'mode': config.mode.value, 'transforms': config.transforms.value,
           'budget_fraction': config.budget_fraction, 'niters': config.niters, 'repeats': config.repeats,
           **summary.to_dict()}
    pd.DataFrame([row]).to_csv(paths['summary.csv'], index=False)
    pd.DataFrame({'iteration': range(len(summary.curve)), 'success_fraction': summary.curve}) \
        .to_csv(paths['curve.csv'], index=False)
    write_metrics(paths['metrics.prom'])
    logger.info(f"{config.name}: coverage {summary.coverage:.2%}, potency {summary.potency:.2%}")
    return paths
