"""
Defenses evaluated against the attacks:

  sanitize_noncode         zero every data and overlay section before scoring
  normalize                map IPR variants to their lexicographically smallest form
  mask_random_instructions zero a random fraction of instruction bytes in the view
  jmp_ratio                share of jmp instructions, a displacement tell
"""

import itertools
import logging
import random
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Set, Tuple

import networkx as nx
import numpy as np

from config.settings import DefenseSettings, settings
from mbxlab.base_attack import timed
from mbxlab.container import (
    IPR_TRANSFORMS,
    BinaryImage,
    FunctionRef,
    SectionKind,
    TransformType,
    detector_view,
    map_sections,
    preservation_pattern,
    section_offsets,
)
from mbxlab.detector import BENIGN, MALICIOUS, Classification, DetectorModel, Threshold, classify, score_view
from mbxlab.ipr import (
    FunctionCode,
    Liveness,
    apply_ipr,
    block_graphs,
    eligible_pairs,
    lay_out,
    load_function,
    permute_preservation,
    rename_registers,
    store_function,
    substitution_choices,
)
from mbxlab.isa import Form, Instruction, decode_instruction, encode_all

logger = logging.getLogger(__name__)

JMP_FORMS = frozenset({Form.JMP_REL8, Form.JMP_REL32})


class DefenseName(str, Enum):
    NONE = "none"
    SANITIZE = "sanitize"
    NORMALIZE = "normalize"
    MASK = "mask"


# ==================== SANITIZATION ====================

def sanitize_noncode(image: BinaryImage) -> BinaryImage:
    """Copy of image with data and overlay sections zeroed; for scoring only"""
    return map_sections(image, (SectionKind.DATA, SectionKind.OVERLAY), fill=0)


# ==================== NORMALIZATION STEPS ====================

def code_key(image: BinaryImage) -> bytes:
    """Lexicographic key: code sections concatenated in vaddr order"""
    return image.code_bytes


def _apply_if_lower(image: BinaryImage, code: FunctionCode,
                    new: List[Instruction]) -> Tuple[BinaryImage, bool]:
    if encode_all(new) < code.encoded():
        return store_function(image, code, new), True
    return image, False


def normalize_step_eqv(image: BinaryImage, fn: FunctionRef) -> Tuple[BinaryImage, bool]:
    """Replace each instruction by its lowest-encoding table equivalent"""
    code = load_function(image, fn)
    if code is None or not fn.allows(TransformType.EQV):
        return image, False
    new = list(code.instructions)
    for i, alternatives in substitution_choices(code).items():
        new[i] = min([new[i]] + alternatives, key=lambda inst: inst.raw)
    return _apply_if_lower(image, code, new)


def normalize_step_regs(image: BinaryImage, fn: FunctionRef) -> Tuple[BinaryImage, bool]:
    """Apply the register swap whose first affected instruction gets the lowest bytes"""
    code = load_function(image, fn)
    if code is None or not fn.allows(TransformType.REGS):
        return image, False
    variants = [rename_registers(code.instructions, a, b) for a, b in eligible_pairs(code)]
    if not variants:
        return image, False
    return _apply_if_lower(image, code, min(variants, key=encode_all))


def normalize_step_ord1(image: BinaryImage, fn: FunctionRef) -> Tuple[BinaryImage, bool]:
    """Per block, repeatedly emit the ready instruction with the lowest encoding (ties by index)"""
    code = load_function(image, fn)
    if code is None or not fn.allows(TransformType.ORD1):
        return image, False
    new = list(code.instructions)
    for start, end, graph in block_graphs(code):
        block = code.instructions[start:end]
        order = list(nx.lexicographical_topological_sort(graph.graph, key=lambda node: (block[node].raw, node)))
        new[start:end] = lay_out([block[k] for k in order], block[0].vaddr)
    return _apply_if_lower(image, code, new)


def normalize_step_ord2(image: BinaryImage, fn: FunctionRef) -> Tuple[BinaryImage, bool]:
    """Sort the saved registers ascending; pops follow in mirrored order"""
    code = load_function(image, fn)
    if code is None or not fn.allows(TransformType.ORD2):
        return image, False
    pattern = preservation_pattern(code.instructions)
    if pattern is None:
        return image, False
    pushes, _ = pattern
    regs = [code.instructions[i].operands[0].reg for i in pushes]
    permutation = sorted(range(len(regs)), key=lambda k: int(regs[k]))
    return _apply_if_lower(image, code, permute_preservation(code.instructions, permutation))


NORMALIZATION_STEPS: Dict[TransformType, Callable[[BinaryImage, FunctionRef], Tuple[BinaryImage, bool]]] = {
    TransformType.EQV: normalize_step_eqv,
    TransformType.REGS: normalize_step_regs,
    TransformType.ORD1: normalize_step_ord1,
    TransformType.ORD2: normalize_step_ord2,
}


# ==================== NORMALIZATION ====================

@dataclass
class NormalizationState:
    image: BinaryImage
    niters: int
    last_improvement: Dict[TransformType, int] = field(default_factory=lambda: {t: 0 for t in IPR_TRANSFORMS})
    restarts: int = 0
    epoch_keys: List[List[bytes]] = field(default_factory=lambda: [[]])


@dataclass
class NormalizationResult:
    image: BinaryImage
    key: bytes
    state: NormalizationState


def randomize_ipr(image: BinaryImage, rng: random.Random) -> BinaryImage:
    """Apply every IPR transformation type, in random order, to every function"""
    for index in range(len(image.functions)):
        for transform in rng.sample(IPR_TRANSFORMS, len(IPR_TRANSFORMS)):
            image = apply_ipr(transform, image, image.functions[index], rng).image
    return image


def normalization_pass(image: BinaryImage) -> Tuple[BinaryImage, Set[TransformType]]:
    """All four steps over every function once; returns the steps that improved something"""
    improved: Set[TransformType] = set()
    for index in range(len(image.functions)):
        for transform, step in NORMALIZATION_STEPS.items():
            image, changed = step(image, image.functions[index])
            if changed:
                improved.add(transform)
    return image, improved


def normalize(image: BinaryImage, niters: Optional[int] = None, seed: int = 0,
              defense_settings: Optional[DefenseSettings] = None) -> NormalizationResult:
    """
    Stochastic-restart lexicographic normalization.

    Draws a random IPR variant, then applies the greedy steps until none of
    them changes any function, at which point a new random variant is drawn.

    Args:
        image: Image to normalize
        niters: Number of passes (defaults to settings)
        seed: Seed for the random draws

    Returns:
        NormalizationResult with the lowest-key image seen
    """
    if niters is None:
        niters = (defense_settings or settings.defense).normalize_niters
    if niters < 1:
        raise ValueError("niters must be at least 1")
    rng = random.Random(seed)
    state = NormalizationState(image, niters)
    best, best_key = image, code_key(image)

    with timed(logger, f"normalize({niters} passes)"):
        current = randomize_ipr(image, rng)
        for iteration in range(1, niters + 1):
            current, improved = normalization_pass(current)
            for transform in improved:
                state.last_improvement[transform] = iteration
            key = code_key(current)
            state.epoch_keys[-1].append(key)
            if key < best_key:
                best, best_key = current, key
            if not improved and iteration < niters:
                state.restarts += 1
                state.epoch_keys.append([])
                current = randomize_ipr(current, rng)

    state.image = best
    logger.debug(f"normalized in {niters} passes with {state.restarts} restarts")
    return NormalizationResult(best, best_key, state)


# ==================== EXHAUSTIVE CLASS ====================

def _neighbours(image: BinaryImage, fn: FunctionRef) -> List[BinaryImage]:
    """Every image one IPR application away from image, restricted to fn"""
    code = load_function(image, fn)
    if code is None:
        return []
    liveness = Liveness(code)
    variants: List[List[Instruction]] = []
    if fn.allows(TransformType.EQV):
        for i, alternatives in substitution_choices(code, (), liveness).items():
            for alt in alternatives:
                variants.append(code.instructions[:i] + [alt] + code.instructions[i + 1:])
    if fn.allows(TransformType.REGS):
        variants.extend(rename_registers(code.instructions, a, b) for a, b in eligible_pairs(code, liveness))
    if fn.allows(TransformType.ORD1):
        for start, end, graph in block_graphs(code, liveness):
            block = code.instructions[start:end]
            for order in graph.orders():
                variants.append(code.instructions[:start] + lay_out([block[k] for k in order], block[0].vaddr)
                                + code.instructions[end:])
    if fn.allows(TransformType.ORD2):
        pattern = preservation_pattern(code.instructions)
        if pattern is not None:
            for permutation in itertools.permutations(range(len(pattern[0]))):
                variants.append(permute_preservation(code.instructions, permutation))
    return [store_function(image, code, v) for v in variants if encode_all(v) != code.encoded()]


def enumerate_ipr_class(image: BinaryImage, fn: FunctionRef, limit: int = 20000) -> Dict[bytes, BinaryImage]:
    """
    Closure of fn's bytes under the IPR operations (breadth-first).

    Raises:
        ValueError: the class exceeds limit variants
    """
    seen: Dict[bytes, BinaryImage] = {image.function_bytes(fn): image}
    queue = deque([image])
    while queue:
        current = queue.popleft()
        for variant in _neighbours(current, current.functions[fn.index]):
            raw = variant.function_bytes(variant.functions[fn.index])
            if raw not in seen:
                seen[raw] = variant
                if len(seen) > limit:
                    raise ValueError(f"function {fn.index}: IPR class exceeds {limit} variants")
                queue.append(variant)
    return seen


def exact_normal_form(image: BinaryImage, fn: FunctionRef, limit: int = 20000) -> bytes:
    """Lowest bytes in fn's IPR class; the brute-force reference for normalize"""
    return min(enumerate_ipr_class(image, fn, limit))


# ==================== MASKING ====================

def _sweep(data: bytes, vaddr: int) -> List[Instruction]:
    """Linear sweep that skips one byte past anything undecodable"""
    out: List[Instruction] = []
    pos = 0
    while pos < len(data):
        inst = decode_instruction(data[pos:pos + 16], vaddr + pos)
        if isinstance(inst, Instruction):
            out.append(inst)
            pos += inst.length
        else:
            pos += 1
    return out


def code_instructions(image: BinaryImage) -> List[Instruction]:
    return [inst for section in image.code_sections for inst in _sweep(section.data, section.vaddr)]


def instruction_byte_positions(image: BinaryImage) -> np.ndarray:
    """Detector-view positions of every byte belonging to a decoded instruction"""
    offsets = section_offsets(image)
    positions = []
    for section in image.code_sections:
        base = offsets[section.vaddr] - section.vaddr
        for inst in _sweep(section.data, section.vaddr):
            positions.extend(range(base + inst.vaddr, base + inst.end))
    return np.asarray(positions, dtype=np.int64)


def mask_random_instructions(image: BinaryImage, fraction: Optional[float] = None, seed: int = 0,
                             cap: Optional[int] = None) -> bytes:
    """
    Detector view with a uniform random fraction of instruction bytes zeroed.

    Args:
        image: Image to view (never modified)
        fraction: Share of instruction bytes to mask (defaults to settings)
        seed: Seed for the position draw
        cap: Optional view truncation

    Returns:
        Masked view bytes
    """
    fraction = settings.defense.mask_fraction if fraction is None else fraction
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"mask fraction must be in [0, 1], got {fraction}")
    view = np.frombuffer(detector_view(image), dtype=np.uint8).copy()
    positions = instruction_byte_positions(image)
    count = int(round(fraction * len(positions)))
    if count:
        chosen = np.random.default_rng(seed).choice(positions, size=count, replace=False)
        view[chosen] = 0
    masked = view.tobytes()
    return masked if cap is None else masked[:cap]


# ==================== STATISTICS ====================

def jmp_ratio(image: BinaryImage) -> float:
    """jmp instructions over all decoded instructions in code sections"""
    instructions = code_instructions(image)
    if not instructions:
        return 0.0
    return sum(inst.form in JMP_FORMS for inst in instructions) / len(instructions)


# ==================== DEFENDED CLASSIFICATION ====================

def classify_defended(model: DetectorModel, image: BinaryImage, threshold: Threshold, defense: DefenseName,
                      seed: int = 0, defense_settings: Optional[DefenseSettings] = None) -> Classification:
    """Apply the named defense, then score with the calibrated cutoff"""
    defense_settings = defense_settings or settings.defense
    if defense == DefenseName.SANITIZE:
        return classify(model, sanitize_noncode(image), threshold)
    if defense == DefenseName.NORMALIZE:
        return classify(model, normalize(image, defense_settings.normalize_niters, seed).image, threshold)
    if defense == DefenseName.MASK:
        view = mask_random_instructions(image, defense_settings.mask_fraction, seed, model.input_cap)
        score = score_view(model, view)
        return Classification(MALICIOUS if threshold.is_malicious(score) else BENIGN, score)
    return classify(model, image, threshold)
