"""
Semantic nop generator.

Sequences are drawn from a context-free grammar with four nonterminals:

    S       -> Atom | S S | bswap r S bswap r | xchg rh,rl S xchg rh,rl
             | push r S_r pop r | pushfd S_ef popfd
    Atom    -> (empty) | nop | mov r, r
    S_r     -> S | S_r S_r | pushfd S_ef,r popfd
    S_ef    -> S | S_ef S_ef | arth r,v S_ef invarth r,v | push r S_ef,r pop r
    S_ef,r  -> S | S_r | S_ef | S_ef,r S_ef,r | arth r,v S_ef,r | logic r,v S_ef,r

S_r may disturb its bound register r, S_ef may disturb flags, S_ef,r both.
Bracketing arth/invarth pairs are add/sub with the same v; adc and sbb only
appear in the unpaired production where r and flags are sacrificial.
"""

import logging
import random
from dataclasses import dataclass, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

from config.settings import SemNopSettings, settings
from mbxlab.isa import (
    Form,
    Imm,
    Instruction,
    Reg8,
    Reg8Op,
    Reg32,
    RegOp,
    disassemble_range,
    encode_all,
    relocate,
)
from mbxlab.vm import MachineState, exec_sequence

logger = logging.getLogger(__name__)

NOP_BYTE = 0x90

# esp is never touched; the stack is the scratch space
NOP_REGS = tuple(r for r in Reg32 if r != Reg32.ESP)
HIGH_LOW_REGS = (Reg32.EAX, Reg32.ECX, Reg32.EDX, Reg32.EBX)
BRACKET_ARTH = {'add': 'sub', 'sub': 'add'}
ARTH = ('add', 'sub', 'adc', 'sbb')
LOGIC = ('and', 'or', 'xor')


class ClobberClass(str, Enum):
    """Resources a derivation may leave changed (its start symbol)"""
    NONE = "none"            # S
    FLAGS = "flags"          # S_ef
    REG = "reg"              # S_r
    FLAGS_REG = "flags_reg"  # S_ef,r

    @property
    def binds_register(self) -> bool:
        return self in (ClobberClass.REG, ClobberClass.FLAGS_REG)


@dataclass(frozen=True)
class IntSlot:
    """Free immediate field; partner is the paired invarth field, if any"""
    offset: int
    width: int
    partner: Optional[int] = None


@dataclass(frozen=True)
class SemNop:
    instructions: Tuple[Instruction, ...]
    encoded: bytes
    int_slots: Tuple[IntSlot, ...] = ()
    clobber_class: ClobberClass = ClobberClass.NONE
    register: Optional[Reg32] = None

    @property
    def length(self) -> int:
        return len(self.encoded)

    def placed(self, vaddr: int) -> Tuple[Instruction, ...]:
        """Instructions laid out at vaddr"""
        return tuple(relocate(self.instructions, vaddr))


# Pieces of a derivation: (instruction, slot role) where role is None,
# ('free',) or ('pair', key) with both halves of a bracket sharing key
_Piece = Tuple[Instruction, Optional[tuple]]


class _Deriver:
    def __init__(self, rng: random.Random, max_depth: int, cfg: SemNopSettings):
        self.rng = rng
        self.max_depth = max_depth
        self.cfg = cfg
        self._pair_keys = 0

    # ---------- terminals ----------

    def _reg(self) -> Reg32:
        return self.rng.choice(NOP_REGS)

    def _imm(self) -> Imm:
        if self.rng.random() < self.cfg.imm32_p:
            return Imm(self.rng.getrandbits(32), 4)
        return Imm(self.rng.getrandbits(8), 1)

    @staticmethod
    def _alu(mnemonic: str, reg: Reg32, imm: Imm) -> Instruction:
        form = Form.ALU_RI8 if imm.width == 1 else Form.ALU_RI32
        return Instruction.create(mnemonic, form, (RegOp(reg), imm))

    def atom(self) -> List[_Piece]:
        choice = self.rng.randrange(3)
        if choice == 0:
            return []
        if choice == 1:
            return [(Instruction.create('nop', Form.NOP), None)]
        reg = RegOp(self._reg())
        form = self.rng.choice((Form.MOV_RM_R, Form.MOV_R_RM))
        return [(Instruction.create('mov', form, (reg, reg)), None)]

    def _recurse(self, depth: int) -> bool:
        return depth < self.max_depth and self.rng.random() < self.cfg.recursion_p

    # ---------- nonterminals ----------

    def s(self, depth: int) -> List[_Piece]:
        if not self._recurse(depth):
            return self.atom()
        d = depth + 1
        choice = self.rng.randrange(5)
        if choice == 0:
            return self.s(d) + self.s(d)
        if choice == 1:
            r = RegOp(self._reg())
            bswap = Instruction.create('bswap', Form.BSWAP, (r,))
            return [(bswap, None)] + self.s(d) + [(bswap, None)]
        if choice == 2:
            low = Reg8(self.rng.choice(HIGH_LOW_REGS))
            high = Reg8(low + 4)
            pair = (Reg8Op(high), Reg8Op(low)) if self.rng.random() < 0.5 else (Reg8Op(low), Reg8Op(high))
            xchg = Instruction.create('xchg', Form.XCHG_HL, pair)
            return [(xchg, None)] + self.s(d) + [(xchg, None)]
        if choice == 3:
            r = self._reg()
            return self._push(r) + self.s_r(d, r) + self._pop(r)
        return self._pushfd() + self.s_ef(d) + self._popfd()

    def s_r(self, depth: int, r: Reg32) -> List[_Piece]:
        if not self._recurse(depth):
            return self.atom()
        d = depth + 1
        choice = self.rng.randrange(3)
        if choice == 0:
            return self.s(d)
        if choice == 1:
            return self.s_r(d, r) + self.s_r(d, r)
        return self._pushfd() + self.s_ef_r(d, r) + self._popfd()

    def s_ef(self, depth: int) -> List[_Piece]:
        if not self._recurse(depth):
            return self.atom()
        d = depth + 1
        choice = self.rng.randrange(4)
        if choice == 0:
            return self.s(d)
        if choice == 1:
            return self.s_ef(d) + self.s_ef(d)
        if choice == 2:
            r = self._reg()
            op = self.rng.choice(tuple(BRACKET_ARTH))
            imm = self._imm()
            self._pair_keys += 1
            key = ('pair', self._pair_keys)
            return ([(self._alu(op, r, imm), key)] + self.s_ef(d)
                    + [(self._alu(BRACKET_ARTH[op], r, imm), key)])
        r = self._reg()
        return self._push(r) + self.s_ef_r(d, r) + self._pop(r)

    def s_ef_r(self, depth: int, r: Reg32) -> List[_Piece]:
        if not self._recurse(depth):
            return self.atom()
        d = depth + 1
        choice = self.rng.randrange(6)
        if choice == 0:
            return self.s(d)
        if choice == 1:
            return self.s_r(d, r)
        if choice == 2:
            return self.s_ef(d)
        if choice == 3:
            return self.s_ef_r(d, r) + self.s_ef_r(d, r)
        mnemonic = self.rng.choice(ARTH if choice == 4 else LOGIC)
        return [(self._alu(mnemonic, r, self._imm()), ('free',))] + self.s_ef_r(d, r)

    # ---------- brackets ----------

    @staticmethod
    def _push(r: Reg32) -> List[_Piece]:
        return [(Instruction.create('push', Form.PUSH_R, (RegOp(r),)), None)]

    @staticmethod
    def _pop(r: Reg32) -> List[_Piece]:
        return [(Instruction.create('pop', Form.POP_R, (RegOp(r),)), None)]

    @staticmethod
    def _pushfd() -> List[_Piece]:
        return [(Instruction.create('pushfd', Form.PUSHFD), None)]

    @staticmethod
    def _popfd() -> List[_Piece]:
        return [(Instruction.create('popfd', Form.POPFD), None)]

    def start(self, clobber_class: ClobberClass, register: Optional[Reg32]) -> List[_Piece]:
        if clobber_class == ClobberClass.NONE:
            return self.s(0)
        if clobber_class == ClobberClass.FLAGS:
            return self.s_ef(0)
        if clobber_class == ClobberClass.REG:
            return self.s_r(0, register)
        return self.s_ef_r(0, register)


def _assemble(pieces: Sequence[_Piece], clobber_class: ClobberClass, register: Optional[Reg32]) -> SemNop:
    instructions = tuple(relocate([inst for inst, _ in pieces], 0))
    slots: List[IntSlot] = []
    pair_first: dict = {}
    for (_, role), inst in zip(pieces, instructions):
        if role is None:
            continue
        imm = inst.operands[1]
        offset = inst.vaddr + inst.length - imm.width
        if role[0] == 'free':
            slots.append(IntSlot(offset, imm.width))
        elif role in pair_first:
            slots.append(IntSlot(pair_first.pop(role), imm.width, offset))
        else:
            pair_first[role] = offset
    slots.sort(key=lambda slot: slot.offset)
    return SemNop(instructions, encode_all(instructions), tuple(slots), clobber_class, register)


def _resolve(clobber_class: ClobberClass, register: Optional[Reg32], rng: random.Random) -> Optional[Reg32]:
    if not clobber_class.binds_register:
        return None
    return register if register is not None else rng.choice(NOP_REGS)


def generate_semnop(rng: random.Random, max_depth: Optional[int] = None,
                    clobber_class: ClobberClass = ClobberClass.NONE, register: Optional[Reg32] = None,
                    semnop_settings: Optional[SemNopSettings] = None) -> SemNop:
    """
    Sample one derivation of the grammar.

    Args:
        rng: Source of randomness
        max_depth: Recursion depth cap; exhaustion forces Atom
        clobber_class: Start symbol (S, S_ef, S_r or S_ef,r)
        register: Bound register for the S_r / S_ef,r start symbols (random if None)
        semnop_settings: Weights and immediate-width mix

    Returns:
        SemNop with int_slots for every free immediate
    """
    cfg = semnop_settings or settings.semnop
    max_depth = cfg.max_depth if max_depth is None else max_depth
    if max_depth < 1:
        raise ValueError("max_depth must be at least 1")
    register = _resolve(clobber_class, register, rng)
    pieces = _Deriver(rng, max_depth, cfg).start(clobber_class, register)
    return _assemble(pieces, clobber_class, register)


def concat(parts: Sequence[SemNop]) -> SemNop:
    """Sequential composition; all parts must share one clobber class"""
    if not parts:
        return SemNop((), b'')
    instructions: List[Instruction] = []
    slots: List[IntSlot] = []
    offset = 0
    for part in parts:
        instructions.extend(part.instructions)
        for slot in part.int_slots:
            partner = None if slot.partner is None else slot.partner + offset
            slots.append(IntSlot(slot.offset + offset, slot.width, partner))
        offset += part.length
    placed = tuple(relocate(instructions, 0))
    return SemNop(placed, encode_all(placed), tuple(slots), parts[0].clobber_class, parts[0].register)


def nop_padding(length: int) -> SemNop:
    insts = tuple(relocate([Instruction.create('nop', Form.NOP)] * length, 0))
    return SemNop(insts, bytes([NOP_BYTE]) * length)


def generate_semnop_exact(rng: random.Random, target_len: int, max_depth: Optional[int] = None,
                          semnop_settings: Optional[SemNopSettings] = None) -> SemNop:
    """
    Class-none semantic nop of exactly target_len bytes.

    Derivations that still fit are concatenated; whatever remains after
    the sampling budget is filled with single-byte nops.
    """
    if target_len < 0:
        raise ValueError("target_len must be non-negative")
    cfg = semnop_settings or settings.semnop
    parts: List[SemNop] = []
    remaining = target_len
    for _ in range(cfg.exact_tries):
        if remaining <= 0:
            break
        candidate = generate_semnop(rng, max_depth, semnop_settings=cfg)
        if 0 < candidate.length <= remaining:
            parts.append(candidate)
            remaining -= candidate.length
    if remaining:
        parts.append(nop_padding(remaining))
    result = concat(parts)
    assert result.length == target_len
    return result


def _slot_bytes(value: Union[int, bytes], width: int) -> bytes:
    if isinstance(value, (bytes, bytearray)):
        if len(value) != width:
            raise ValueError(f"slot takes {width} bytes, got {len(value)}")
        return bytes(value)
    if not 0 <= value < 1 << (8 * width):
        raise ValueError(f"value {value:#x} does not fit a {width}-byte slot")
    return value.to_bytes(width, 'little')


def set_int_slot(nop: SemNop, slot: int, value: Union[int, bytes]) -> SemNop:
    """
    Overwrite a free immediate (and its bracket partner).

    Raises:
        IndexError: slot out of range
        ValueError: value wider than the slot
    """
    if not 0 <= slot < len(nop.int_slots):
        raise IndexError(f"slot {slot} out of range ({len(nop.int_slots)} slots)")
    info = nop.int_slots[slot]
    raw = _slot_bytes(value, info.width)
    encoded = bytearray(nop.encoded)
    encoded[info.offset:info.offset + info.width] = raw
    if info.partner is not None:
        encoded[info.partner:info.partner + info.width] = raw
    listing = disassemble_range(bytes(encoded), 0)
    return replace(nop, instructions=tuple(listing.instructions), encoded=bytes(encoded))


def set_slot_byte(nop: SemNop, position: int, value: int) -> SemNop:
    """Set one byte of whichever slot covers encoded[position]"""
    for index, info in enumerate(nop.int_slots):
        if info.offset <= position < info.offset + info.width:
            current = bytearray(nop.encoded[info.offset:info.offset + info.width])
            current[position - info.offset] = value
            return set_int_slot(nop, index, bytes(current))
    raise IndexError(f"byte {position} is not part of an int slot")


def slot_byte_positions(nop: SemNop) -> List[int]:
    """Every free byte position (primary side of each slot)"""
    return [slot.offset + i for slot in nop.int_slots for i in range(slot.width)]


def preserves_protected(nop: SemNop, state: MachineState) -> bool:
    """Run nop from state and check the resources its class protects"""
    after = exec_sequence(state, nop.instructions)
    sacrificial = {nop.register} if nop.clobber_class.binds_register else set()
    for reg in Reg32:
        if reg not in sacrificial and after.regs[reg] != state.regs[reg]:
            return False
    if nop.clobber_class in (ClobberClass.NONE, ClobberClass.REG) and after.flags != state.flags:
        return False
    return after.live_memory() == state.live_memory()
