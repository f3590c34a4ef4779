"""
Code displacement: move a short instruction run out of a function into a
shared code section, jump there and back, and fill both the vacated bytes
and the rest of the per-function budget with semantic nops.

Source after displacement:   jmp rel32 -> displaced | backfill nop (len - 5)
Displaced section entry:     fixed-up run | appended nop (budget - len) | jmp rel32 -> source + len
"""

import logging
import random
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

from config.settings import SemNopSettings
from mbxlab.container import (
    MIN_DISP_RUN,
    BinaryImage,
    FunctionRef,
    SectionKind,
    TransformType,
    add_overlay_code_section,
    append_to_section,
    eligible_runs,
    extract_blocks,
    patch_bytes,
    reanalyze,
    serialized_size,
)
from mbxlab.isa import EncodingError, Form, Instruction, Rel, disassemble_range, encode_all
from mbxlab.semnop import SemNop, generate_semnop_exact

logger = logging.getLogger(__name__)

JMP_REL32_LENGTH = 5
MAX_BUDGET_FRACTION = 0.10

_WIDER = {Form.JMP_REL8: Form.JMP_REL32, Form.JCC_REL8: Form.JCC_REL32}


@dataclass(frozen=True)
class SemNopSite:
    """A registered semantic nop: where it lives and what it currently is"""
    vaddr: int
    nop: SemNop
    fn_index: int
    role: str  # "backfill" or "appended"

    @property
    def end(self) -> int:
        return self.vaddr + self.nop.length


@dataclass(frozen=True)
class DisplacementPlan:
    fn_index: int
    source_vaddr: int
    source_length: int
    target_vaddr: int
    displaced_length: int
    budget: int
    jmp_out: bytes
    jmp_back: bytes


@dataclass(frozen=True)
class DispState:
    plans: Tuple[DisplacementPlan, ...] = ()
    sites: Tuple[SemNopSite, ...] = ()
    section_vaddr: Optional[int] = None

    def displaced(self, fn_index: int) -> bool:
        return any(plan.fn_index == fn_index for plan in self.plans)

    def plan_for(self, fn_index: int) -> Optional[DisplacementPlan]:
        return next((plan for plan in self.plans if plan.fn_index == fn_index), None)

    def sites_for(self, fn_index: Optional[int] = None) -> List[Tuple[int, SemNopSite]]:
        """(registry index, site) pairs, optionally for one function"""
        return [(i, site) for i, site in enumerate(self.sites) if fn_index is None or site.fn_index == fn_index]

    def frozen_ranges(self, fn_index: Optional[int] = None) -> List[Tuple[int, int]]:
        return [(site.vaddr, site.end) for _, site in self.sites_for(fn_index) if site.nop.length]

    def with_site(self, index: int, site: SemNopSite) -> 'DispState':
        sites = list(self.sites)
        sites[index] = site
        return replace(self, sites=tuple(sites))


# ==================== BUDGET ====================

def plan_budget(image: BinaryImage, budget_fraction: float) -> Dict[int, int]:
    """
    Split fraction x file size evenly over displaceable functions.

    Functions without a run of at least five bytes are skipped; if the
    share would drop below five bytes, fewer functions get a budget.

    Returns:
        Function index -> byte budget (remainder goes to the first functions)
    """
    if not 0 < budget_fraction <= MAX_BUDGET_FRACTION:
        raise ValueError(f"budget fraction must be in (0, {MAX_BUDGET_FRACTION}], got {budget_fraction}")
    total = int(budget_fraction * serialized_size(image))
    eligible = [fn.index for fn in image.functions if fn.allows(TransformType.DISP)]
    skipped = len(image.functions) - len(eligible)
    if skipped:
        logger.debug(f"{skipped} functions have no displaceable run")

    n = len(eligible)
    while n and total // n < MIN_DISP_RUN:
        n -= 1
    if not n:
        return {}
    share, remainder = divmod(total, n)
    return {index: share + (1 if k < remainder else 0) for k, index in enumerate(eligible[:n])}


# ==================== FIXUPS ====================

def fixup_ip_relative(inst: Instruction, old_vaddr: int, new_vaddr: int) -> Instruction:
    """
    Move inst from old_vaddr to new_vaddr keeping its absolute target.

    rel8 branches that no longer reach are widened to rel32.
    """
    if inst.vaddr != old_vaddr:
        inst = inst.at(old_vaddr)
    if inst.rel is None:
        return inst.at(new_vaddr)
    try:
        return inst.at(new_vaddr)
    except EncodingError:
        wider = _WIDER.get(inst.form)
        if wider is None:
            raise
        return Instruction.create(inst.mnemonic, wider, (Rel(inst.rel.target, 4),), new_vaddr)


def jmp_rel32(source: int, target: int) -> Instruction:
    return Instruction.create('jmp', Form.JMP_REL32, (Rel(target, 4),), source)


# ==================== DISPLACEMENT ====================

def _choose_run(image: BinaryImage, fn: FunctionRef, budget: int,
                rng: random.Random) -> Optional[List[Instruction]]:
    candidates = []
    for block in extract_blocks(image, fn):
        for i, j in eligible_runs(block):
            run = list(block.instructions[i:j])
            if sum(inst.length for inst in run) <= budget:
                candidates.append(run)
    return rng.choice(candidates) if candidates else None


def _target_vaddr(image: BinaryImage, state: DispState) -> int:
    if state.section_vaddr is not None:
        section = image.section_at(state.section_vaddr)
        return section.end if section else state.section_vaddr
    _, vaddr = add_overlay_code_section(image, b'')
    return vaddr


def displace_function(image: BinaryImage, fn: FunctionRef, budget: int, rng: random.Random,
                      state: Optional[DispState] = None,
                      semnop_settings: Optional[SemNopSettings] = None) -> Tuple[BinaryImage, DispState]:
    """
    Displace one random eligible run of fn.

    Args:
        image: Image to rewrite
        fn: Function to displace from (once per run)
        budget: Bytes of displaced code plus appended semantic nop
        rng: Source of randomness
        state: Displacement state so far (a fresh one if None)

    Returns:
        (image', state'); both unchanged when fn has no eligible run
    """
    state = state or DispState()
    if budget < MIN_DISP_RUN or state.displaced(fn.index):
        return image, state
    run = _choose_run(image, fn, budget, rng)
    if run is None:
        logger.warning(f"function {fn.index} at {fn.vaddr:#x}: no displaceable run within {budget} bytes")
        return image, state

    source = run[0].vaddr
    length = sum(inst.length for inst in run)
    target = _target_vaddr(image, state)

    displaced: List[Instruction] = []
    cursor = target
    for inst in run:
        moved = fixup_ip_relative(inst, inst.vaddr, cursor)
        displaced.append(moved)
        cursor += moved.length
    appended = generate_semnop_exact(rng, budget - length, semnop_settings=semnop_settings)
    appended_vaddr = cursor
    back = jmp_rel32(appended_vaddr + appended.length, source + length)
    chunk = encode_all(displaced) + appended.encoded + back.raw

    if state.section_vaddr is None:
        image, section_vaddr = add_overlay_code_section(image, chunk, name_hint='.disp')
        assert section_vaddr == target
    else:
        image, at = append_to_section(image, state.section_vaddr, chunk)
        assert at == target
        section_vaddr = state.section_vaddr

    out = jmp_rel32(source, target)
    backfill = generate_semnop_exact(rng, length - JMP_REL32_LENGTH, semnop_settings=semnop_settings)
    image = reanalyze(patch_bytes(image, source, out.raw + backfill.encoded))

    plan = DisplacementPlan(fn.index, source, length, target, cursor - target, budget, out.raw, back.raw)
    sites = (SemNopSite(source + JMP_REL32_LENGTH, backfill, fn.index, 'backfill'),
             SemNopSite(appended_vaddr, appended, fn.index, 'appended'))
    logger.debug(f"function {fn.index}: displaced {length} bytes {source:#x} -> {target:#x} (budget {budget})")
    return image, DispState(state.plans + (plan,), state.sites + sites, section_vaddr)


def displace_all(image: BinaryImage, budget_fraction: float, rng: random.Random,
                 state: Optional[DispState] = None,
                 semnop_settings: Optional[SemNopSettings] = None) -> Tuple[BinaryImage, DispState]:
    """plan_budget followed by displace_function on every budgeted function"""
    state = state or DispState()
    for index, budget in plan_budget(image, budget_fraction).items():
        image, state = displace_function(image, image.functions[index], budget, rng, state, semnop_settings)
    return image, state


# ==================== REFRESH ====================

def write_site(image: BinaryImage, state: DispState, index: int, nop: SemNop,
               reanalyze_function: bool = True) -> Tuple[BinaryImage, DispState]:
    """Replace the nop at registry index with a same-length nop"""
    site = state.sites[index]
    if nop.length != site.nop.length:
        raise ValueError(f"site {index} holds {site.nop.length} bytes, got {nop.length}")
    image = patch_bytes(image, site.vaddr, nop.encoded)
    if reanalyze_function and site.role == 'backfill':
        image = reanalyze(image, [site.fn_index])
    return image, state.with_site(index, replace(site, nop=nop))


def refresh_semnops(image: BinaryImage, state: DispState, rng: random.Random, fn_index: Optional[int] = None,
                    semnop_settings: Optional[SemNopSettings] = None) -> Tuple[BinaryImage, DispState]:
    """Regenerate registered nops (optionally of one function) at their exact lengths"""
    touched = set()
    for index, site in state.sites_for(fn_index):
        fresh = generate_semnop_exact(rng, site.nop.length, semnop_settings=semnop_settings)
        image, state = write_site(image, state, index, fresh, reanalyze_function=False)
        if site.role == 'backfill':
            touched.add(site.fn_index)
    if touched:
        image = reanalyze(image, touched)
    return image, state


def site_view_positions(image: BinaryImage, state: DispState, fn_index: int) -> List[Tuple[int, int, int]]:
    """(registry index, slot byte vaddr, slot byte position within its nop) for fn's free bytes"""
    out = []
    for index, site in state.sites_for(fn_index):
        for slot in site.nop.int_slots:
            for k in range(slot.width):
                out.append((index, site.vaddr + slot.offset + k, slot.offset + k))
    return out


def displaced_section(image: BinaryImage, state: DispState):
    if state.section_vaddr is None:
        return None
    section = image.section_at(state.section_vaddr)
    return section if section is not None and section.kind == SectionKind.CODE else None


def site_bytes_intact(image: BinaryImage, state: DispState) -> bool:
    """Every registered site still holds exactly its recorded nop"""
    return all(image.read(site.vaddr, site.nop.length) == site.nop.encoded
               for site in state.sites if site.nop.length)


def sites_decode(image: BinaryImage, state: DispState) -> bool:
    for site in state.sites:
        if site.nop.length and not disassemble_range(image.read(site.vaddr, site.nop.length), site.vaddr).ok:
            return False
    return True
