"""
MBX: the simplified executable container.

Layout (little-endian, see docs/mbx_format.md):

    "MBX1" | version u32 | entry u32 | section_count u32
    section_count x {kind u8, pad[3], vaddr u32, length u32}
    function_count u32 | function_count x {vaddr u32, length u32}
    section payloads in table order

Per-function blocks and transformability are derived on parse; they are not
part of the wire format.
"""

import logging
import struct
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from functools import lru_cache
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple

from mbxlab.isa import Disassembly, Form, Instruction, disassemble_range

logger = logging.getLogger(__name__)

MAGIC = b'MBX1'
VERSION = 1
SECTION_ALIGN = 16
DEFAULT_BASE_VADDR = 0x1000
MIN_DISP_RUN = 5

_HEADER = struct.Struct('<4sIII')
_SECTION = struct.Struct('<B3xII')
_COUNT = struct.Struct('<I')
_FUNCTION = struct.Struct('<II')


class MbxParseError(ValueError):
    """Malformed MBX bytes; offset points at the offending field"""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class SectionKind(IntEnum):
    CODE = 0
    DATA = 1
    OVERLAY = 2


class TransformType(str, Enum):
    EQV = "eqv"
    REGS = "regs"
    ORD1 = "ord1"
    ORD2 = "ord2"
    DISP = "disp"


IPR_TRANSFORMS = (TransformType.EQV, TransformType.REGS, TransformType.ORD1, TransformType.ORD2)


@dataclass(frozen=True)
class Section:
    kind: SectionKind
    vaddr: int
    data: bytes

    @property
    def end(self) -> int:
        return self.vaddr + len(self.data)

    def contains(self, vaddr: int) -> bool:
        return self.vaddr <= vaddr < self.end


@dataclass(frozen=True)
class Block:
    start: int
    end: int
    instructions: Tuple[Instruction, ...]


@dataclass(frozen=True)
class FunctionRef:
    index: int
    vaddr: int
    length: int
    blocks: Tuple[Tuple[int, int], ...] = ()
    transformable: FrozenSet[TransformType] = frozenset()

    @property
    def end(self) -> int:
        return self.vaddr + self.length

    @property
    def is_transformable(self) -> bool:
        return bool(self.transformable)

    def allows(self, transform: TransformType) -> bool:
        return transform in self.transformable


@dataclass(frozen=True)
class BinaryImage:
    sections: Tuple[Section, ...] = ()
    functions: Tuple[FunctionRef, ...] = ()
    entry: int = 0
    version: int = VERSION

    @property
    def code_sections(self) -> Tuple[Section, ...]:
        return tuple(s for s in self.sections if s.kind == SectionKind.CODE)

    def section_at(self, vaddr: int) -> Optional[Section]:
        for section in self.sections:
            if section.contains(vaddr):
                return section
        return None

    def read(self, vaddr: int, length: int) -> bytes:
        section = self.section_at(vaddr)
        if section is None or vaddr + length > section.end:
            raise ValueError(f"range {vaddr:#x}+{length} not inside one section")
        start = vaddr - section.vaddr
        return section.data[start:start + length]

    def function_bytes(self, fn: FunctionRef) -> bytes:
        return self.read(fn.vaddr, fn.length)

    @property
    def code_bytes(self) -> bytes:
        """Concatenated code sections in vaddr order (the normalization key)"""
        return b''.join(s.data for s in self.code_sections)

    @property
    def total_section_bytes(self) -> int:
        return sum(len(s.data) for s in self.sections)


# ==================== PARSE / SERIALIZE ====================

def _take(data: bytes, fmt: struct.Struct, offset: int, what: str) -> tuple:
    if offset + fmt.size > len(data):
        raise MbxParseError(f"truncated {what}", offset)
    return fmt.unpack_from(data, offset)


def parse_mbx(data: bytes) -> BinaryImage:
    """
    Parse and bounds-check an MBX file.

    Args:
        data: Raw file bytes

    Returns:
        BinaryImage with every function analyzed

    Raises:
        MbxParseError: Bad magic/version, truncated tables, overlapping or
            unsorted sections, functions outside code, trailing bytes
    """
    magic, version, entry, section_count = _take(data, _HEADER, 0, "header")
    if magic != MAGIC:
        raise MbxParseError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise MbxParseError(f"unsupported version {version}", 4)

    offset = _HEADER.size
    table: List[Tuple[int, int, int, int]] = []
    for _ in range(section_count):
        if offset + _SECTION.size > len(data):
            raise MbxParseError("truncated section table", offset)
        if data[offset + 1:offset + 4] != b'\x00\x00\x00':
            raise MbxParseError("nonzero section padding", offset + 1)
        kind, vaddr, length = _SECTION.unpack_from(data, offset)
        if kind not in SectionKind._value2member_map_:
            raise MbxParseError(f"unknown section kind {kind}", offset)
        table.append((offset, kind, vaddr, length))
        offset += _SECTION.size

    (function_count,) = _take(data, _COUNT, offset, "function count")
    offset += _COUNT.size
    raw_functions: List[Tuple[int, int, int]] = []
    for _ in range(function_count):
        fn_vaddr, fn_length = _take(data, _FUNCTION, offset, "function table")
        raw_functions.append((offset, fn_vaddr, fn_length))
        offset += _FUNCTION.size

    sections: List[Section] = []
    previous_end = -1
    for entry_offset, kind, vaddr, length in table:
        if offset + length > len(data):
            raise MbxParseError(f"section payload at {vaddr:#x} runs past end of file", offset)
        if vaddr < previous_end or vaddr + length > 0xFFFFFFFF:
            raise MbxParseError(f"section {vaddr:#x} overlaps or is out of order", entry_offset)
        sections.append(Section(SectionKind(kind), vaddr, bytes(data[offset:offset + length])))
        previous_end = vaddr + length
        offset += length
    if offset != len(data):
        raise MbxParseError(f"{len(data) - offset} trailing bytes", offset)

    image = BinaryImage(tuple(sections), (), entry, version)
    functions = []
    for index, (entry_offset, fn_vaddr, fn_length) in enumerate(raw_functions):
        section = image.section_at(fn_vaddr)
        if (section is None or section.kind != SectionKind.CODE or fn_length == 0
                or fn_vaddr + fn_length > section.end):
            raise MbxParseError(f"function {index} at {fn_vaddr:#x} not inside a code section", entry_offset)
        functions.append(FunctionRef(index, fn_vaddr, fn_length))
    return reanalyze(replace(image, functions=tuple(functions)))


def validate_image(image: BinaryImage) -> None:
    """Raise ValueError when container invariants do not hold"""
    previous_end = -1
    for section in image.sections:
        if section.vaddr < previous_end:
            raise ValueError(f"section {section.vaddr:#x} overlaps or is out of order")
        previous_end = section.end
    for fn in image.functions:
        section = image.section_at(fn.vaddr)
        if section is None or section.kind != SectionKind.CODE or fn.end > section.end:
            raise ValueError(f"function {fn.index} at {fn.vaddr:#x} not inside a code section")


def serialize_mbx(image: BinaryImage) -> bytes:
    """Canonical MBX bytes; deterministic for a given image"""
    validate_image(image)
    parts = [_HEADER.pack(MAGIC, image.version, image.entry, len(image.sections))]
    parts.extend(_SECTION.pack(s.kind, s.vaddr, len(s.data)) for s in image.sections)
    parts.append(_COUNT.pack(len(image.functions)))
    parts.extend(_FUNCTION.pack(fn.vaddr, fn.length) for fn in image.functions)
    parts.extend(s.data for s in image.sections)
    return b''.join(parts)


def serialized_size(image: BinaryImage) -> int:
    return (_HEADER.size + _SECTION.size * len(image.sections) + _COUNT.size
            + _FUNCTION.size * len(image.functions) + image.total_section_bytes)


# ==================== ANALYSIS ====================

def function_instructions(image: BinaryImage, fn: FunctionRef) -> Disassembly:
    return disassemble_range(image.function_bytes(fn), fn.vaddr)


@lru_cache(maxsize=256)
def _section_rel_targets(section: Section) -> FrozenSet[int]:
    return frozenset(inst.rel.target for inst in disassemble_range(section.data, section.vaddr).instructions
                     if inst.rel is not None and inst.form != Form.CALL_REL32)


def foreign_targets(image: BinaryImage) -> FrozenSet[int]:
    """Branch targets from code sections that hold no function (displaced code)"""
    owned = {image.section_at(fn.vaddr) for fn in image.functions}
    targets: Set[int] = set()
    for section in image.code_sections:
        if section not in owned:
            targets |= _section_rel_targets(section)
    return frozenset(targets)


def preservation_pattern(instructions: Sequence[Instruction],
                         min_pairs: int = 2) -> Optional[Tuple[List[int], List[int]]]:
    """
    Indices of a push prologue (at least min_pairs long) and its mirrored
    pop epilogue.

    The pushes must open the function, the pops must sit directly before
    the function's single ret and restore the same registers in reverse.
    """
    pushes: List[int] = []
    for i, inst in enumerate(instructions):
        if inst.form != Form.PUSH_R:
            break
        pushes.append(i)
    if not pushes or len(pushes) < min_pairs:
        return None
    rets = [i for i, inst in enumerate(instructions) if inst.form == Form.RET]
    if len(rets) != 1:
        return None
    ret = rets[0]
    k = len(pushes)
    pops = list(range(ret - k, ret))
    if pops and pops[0] <= pushes[-1]:
        return None
    pushed = [instructions[i].operands[0] for i in pushes]
    for j, i in enumerate(pops):
        inst = instructions[i]
        if inst.form != Form.POP_R or inst.operands[0] != pushed[k - 1 - j]:
            return None
    return pushes, pops


def eligible_runs(block: Block, min_length: int = MIN_DISP_RUN) -> List[Tuple[int, int]]:
    """
    Shortest displaceable runs [i, j) of a block, one per start index.

    A run holds no control flow except an optional trailing call and is at
    least min_length bytes long.
    """
    insts = block.instructions
    runs = []
    for i in range(len(insts)):
        total = 0
        for j in range(i, len(insts)):
            inst = insts[j]
            if inst.is_control_flow and inst.form != Form.CALL_REL32:
                break
            total += inst.length
            if total >= min_length:
                runs.append((i, j + 1))
                break
            if inst.form == Form.CALL_REL32:
                break
    return runs


@dataclass
class FunctionAnalysis:
    blocks: List[Block] = field(default_factory=list)
    transformable: FrozenSet[TransformType] = frozenset()
    reason: str = ""


def analyze_function(image: BinaryImage, fn: FunctionRef,
                     extra_targets: Optional[Iterable[int]] = None) -> FunctionAnalysis:
    """Split fn into basic blocks and decide which transforms apply"""
    listing = function_instructions(image, fn)
    if not listing.ok:
        return FunctionAnalysis(reason=f"undecodable at +{listing.error.offset:#x}: {listing.error.reason}")

    instructions = listing.instructions
    starts = {inst.vaddr for inst in instructions}
    leaders = {fn.vaddr}
    leaves_function = False
    targets = set(extra_targets or ())
    for inst in instructions:
        if inst.is_control_flow:
            leaders.add(inst.end)
        rel = inst.rel
        if rel is not None and inst.form != Form.CALL_REL32:
            if fn.vaddr <= rel.target < fn.end:
                targets.add(rel.target)
            else:
                leaves_function = True
    for target in targets:
        if fn.vaddr <= target < fn.end:
            if target not in starts:
                return FunctionAnalysis(reason=f"branch into the middle of an instruction at {target:#x}")
            leaders.add(target)

    blocks: List[Block] = []
    current: List[Instruction] = []
    for inst in instructions:
        if inst.vaddr in leaders and current:
            blocks.append(Block(current[0].vaddr, inst.vaddr, tuple(current)))
            current = []
        current.append(inst)
    if current:
        blocks.append(Block(current[0].vaddr, current[-1].end, tuple(current)))

    allowed = {TransformType.EQV, TransformType.ORD1}
    if not leaves_function:
        allowed.add(TransformType.REGS)
    if preservation_pattern(instructions) is not None:
        allowed.add(TransformType.ORD2)
    if any(eligible_runs(block) for block in blocks):
        allowed.add(TransformType.DISP)
    return FunctionAnalysis(blocks, frozenset(allowed))


def extract_blocks(image: BinaryImage, fn: FunctionRef) -> List[Block]:
    """Basic blocks of fn; empty when fn is not decodable as a whole"""
    return analyze_function(image, fn, foreign_targets(image)).blocks


def reanalyze(image: BinaryImage, indices: Optional[Iterable[int]] = None) -> BinaryImage:
    """Refresh blocks and transformability of the given functions (all by default)"""
    extra = foreign_targets(image)
    wanted = set(range(len(image.functions)) if indices is None else indices)
    functions = []
    for fn in image.functions:
        if fn.index in wanted:
            analysis = analyze_function(image, fn, extra)
            if analysis.reason:
                logger.debug(f"function {fn.index} at {fn.vaddr:#x} not transformable: {analysis.reason}")
            fn = replace(fn, blocks=tuple((b.start, b.end) for b in analysis.blocks),
                         transformable=analysis.transformable)
        functions.append(fn)
    return replace(image, functions=tuple(functions))


# ==================== EDITING ====================

def _next_free_vaddr(image: BinaryImage) -> int:
    if not image.sections:
        return DEFAULT_BASE_VADDR
    end = max(s.end for s in image.sections)
    return (end + SECTION_ALIGN - 1) // SECTION_ALIGN * SECTION_ALIGN


def add_section(image: BinaryImage, data: bytes, kind: SectionKind) -> Tuple[BinaryImage, int]:
    vaddr = _next_free_vaddr(image)
    sections = image.sections + (Section(kind, vaddr, bytes(data)),)
    return replace(image, sections=sections), vaddr


def add_overlay_code_section(image: BinaryImage, data: bytes, name_hint: str = "") -> Tuple[BinaryImage, int]:
    """Append a code section at the next 16-aligned free vaddr; functions untouched"""
    new_image, vaddr = add_section(image, data, SectionKind.CODE)
    logger.debug(f"added code section {name_hint or '-'} at {vaddr:#x} ({len(data)} bytes)")
    return new_image, vaddr


def add_overlay(image: BinaryImage, data: bytes) -> Tuple[BinaryImage, int]:
    """Append a never-executed overlay section"""
    return add_section(image, data, SectionKind.OVERLAY)


def append_to_section(image: BinaryImage, section_vaddr: int, data: bytes) -> Tuple[BinaryImage, int]:
    """Grow the section starting at section_vaddr; returns the vaddr of the appended bytes"""
    sections = list(image.sections)
    for i, section in enumerate(sections):
        if section.vaddr == section_vaddr:
            at = section.end
            if i + 1 < len(sections) and at + len(data) > sections[i + 1].vaddr:
                raise ValueError(f"section {section_vaddr:#x} cannot grow into {sections[i + 1].vaddr:#x}")
            sections[i] = replace(section, data=section.data + bytes(data))
            return replace(image, sections=tuple(sections)), at
    raise ValueError(f"no section starts at {section_vaddr:#x}")


def patch_bytes(image: BinaryImage, vaddr: int, data: bytes) -> BinaryImage:
    """Overwrite bytes in place (length-preserving); does not reanalyze"""
    if not data:
        return image
    sections = list(image.sections)
    for i, section in enumerate(sections):
        if section.contains(vaddr):
            start = vaddr - section.vaddr
            if start + len(data) > len(section.data):
                raise ValueError(f"patch at {vaddr:#x}+{len(data)} crosses section end")
            payload = section.data[:start] + bytes(data) + section.data[start + len(data):]
            sections[i] = replace(section, data=payload)
            return replace(image, sections=tuple(sections))
    raise ValueError(f"no section contains {vaddr:#x}")


def replace_function_code(image: BinaryImage, fn: FunctionRef, code: bytes) -> BinaryImage:
    """Swap fn's bytes for same-length code and re-analyze fn only"""
    if len(code) != fn.length:
        raise ValueError(f"function {fn.index}: replacement is {len(code)} bytes, expected {fn.length}")
    return reanalyze(patch_bytes(image, fn.vaddr, code), [fn.index])


def map_sections(image: BinaryImage, kinds: Iterable[SectionKind], fill: int = 0) -> BinaryImage:
    """Image whose sections of the given kinds are overwritten with fill bytes"""
    kinds = set(kinds)
    sections = tuple(replace(s, data=bytes([fill]) * len(s.data)) if s.kind in kinds else s
                     for s in image.sections)
    return replace(image, sections=sections)


# ==================== DETECTOR VIEW ====================

def detector_view(image: BinaryImage, cap: Optional[int] = None) -> bytes:
    """Section payloads in vaddr order, headers and tables excluded, truncated to cap"""
    view = b''.join(s.data for s in image.sections)
    return view if cap is None else view[:cap]


def view_offset(image: BinaryImage, vaddr: int) -> Optional[int]:
    """Position of vaddr inside the (untruncated) detector view"""
    offset = 0
    for section in image.sections:
        if section.contains(vaddr):
            return offset + vaddr - section.vaddr
        offset += len(section.data)
    return None


def view_span(image: BinaryImage, vaddr: int, length: int) -> Optional[Tuple[int, int]]:
    start = view_offset(image, vaddr)
    return None if start is None else (start, start + length)


def section_offsets(image: BinaryImage) -> Dict[int, int]:
    """Section vaddr -> its first position in the detector view"""
    offsets, position = {}, 0
    for section in image.sections:
        offsets[section.vaddr] = position
        position += len(section.data)
    return offsets


def build_image(code: bytes, function_spans: Sequence[Tuple[int, int]], base_vaddr: int = DEFAULT_BASE_VADDR,
                data_sections: Sequence[bytes] = ()) -> BinaryImage:
    """
    Assemble an image from one code blob plus optional data sections.

    Args:
        code: Code section payload placed at base_vaddr
        function_spans: (offset within code, length) per function
        base_vaddr: Code section vaddr
        data_sections: Payloads appended as data sections

    Returns:
        Analyzed BinaryImage with entry at the first function
    """
    image = BinaryImage((Section(SectionKind.CODE, base_vaddr, bytes(code)),))
    for payload in data_sections:
        image, _ = add_section(image, payload, SectionKind.DATA)
    functions = tuple(FunctionRef(i, base_vaddr + off, length) for i, (off, length) in enumerate(function_spans))
    entry = functions[0].vaddr if functions else base_vaddr
    image = replace(image, functions=functions, entry=entry)
    validate_image(image)
    return reanalyze(image)
