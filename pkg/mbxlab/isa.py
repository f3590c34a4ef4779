"""
Bit-exact encoder/decoder for the x86-32 instruction subset, with the
def/use metadata every transformation relies on.

The subset is closed (see docs/isa_subset.md). Anything outside it decodes
to an Undecodable value, which callers treat as "leave this code alone".
"""

import random
import re
import struct
from dataclasses import dataclass, field
from enum import Enum, IntEnum, IntFlag
from functools import cached_property, lru_cache
from typing import FrozenSet, List, Optional, Sequence, Tuple, Union

MASK32 = 0xFFFFFFFF


class EncodingError(ValueError):
    """Operand shape outside the subset (a programming error)"""


class Reg32(IntEnum):
    EAX = 0
    ECX = 1
    EDX = 2
    EBX = 3
    ESP = 4
    EBP = 5
    ESI = 6
    EDI = 7

    def __str__(self) -> str:
        return self.name.lower()


class Reg8(IntEnum):
    AL = 0
    CL = 1
    DL = 2
    BL = 3
    AH = 4
    CH = 5
    DH = 6
    BH = 7

    @property
    def parent(self) -> Reg32:
        return Reg32(self.value & 3)

    @property
    def is_high(self) -> bool:
        return self.value >= 4

    def __str__(self) -> str:
        return self.name.lower()


# Never eligible for reassignment
STRUCTURAL = frozenset({Reg32.ESP, Reg32.EBP})


class Flag(IntFlag):
    """EFLAGS bits at their architectural positions"""
    CF = 0x001
    PF = 0x004
    AF = 0x010
    ZF = 0x040
    SF = 0x080
    OF = 0x800


NO_FLAGS = Flag(0)
ALL_FLAGS = Flag.CF | Flag.PF | Flag.AF | Flag.ZF | Flag.SF | Flag.OF


def to_signed(value: int, bits: int) -> int:
    value &= (1 << bits) - 1
    return value - (1 << bits) if value >> (bits - 1) else value


# ==================== OPERANDS ====================

@dataclass(frozen=True)
class RegOp:
    reg: Reg32

    def __str__(self) -> str:
        return str(self.reg)


@dataclass(frozen=True)
class Reg8Op:
    reg: Reg8

    def __str__(self) -> str:
        return str(self.reg)


@dataclass(frozen=True)
class Imm:
    """Immediate stored as its raw unsigned field value"""
    value: int
    width: int

    def __post_init__(self):
        if self.width not in (1, 4):
            raise EncodingError(f"immediate width {self.width} not in subset")
        object.__setattr__(self, 'value', self.value & ((1 << (8 * self.width)) - 1))

    @property
    def signed(self) -> int:
        return to_signed(self.value, 8 * self.width)

    @property
    def extended(self) -> int:
        """Value after sign extension to 32 bits"""
        return self.signed & MASK32

    def __str__(self) -> str:
        return hex(self.signed)


@dataclass(frozen=True)
class Mem:
    """[base + disp]; disp_width records which ModRM form carries it"""
    base: Reg32
    disp: int = 0
    disp_width: int = -1

    def __post_init__(self):
        if self.base == Reg32.ESP:
            raise EncodingError("esp-based memory operands need a SIB byte")
        disp = to_signed(self.disp, 32)
        object.__setattr__(self, 'disp', disp)
        width = self.disp_width
        if width == -1:
            if disp == 0 and self.base != Reg32.EBP:
                width = 0
            elif -128 <= disp <= 127:
                width = 1
            else:
                width = 4
        if width == 0 and (disp != 0 or self.base == Reg32.EBP):
            raise EncodingError(f"[{self.base}{disp:+#x}] needs a displacement field")
        if width == 1 and not -128 <= disp <= 127:
            raise EncodingError(f"displacement {disp:#x} does not fit disp8")
        object.__setattr__(self, 'disp_width', width)

    def __str__(self) -> str:
        if self.disp == 0 and self.disp_width == 0:
            return f"[{self.base}]"
        sign = '-' if self.disp < 0 else '+'
        return f"[{self.base}{sign}{abs(self.disp):#x}]"


@dataclass(frozen=True)
class Rel:
    """Branch target as an absolute address plus the displacement width"""
    target: int
    width: int

    def __post_init__(self):
        if self.width not in (1, 4):
            raise EncodingError(f"rel width {self.width} not in subset")
        object.__setattr__(self, 'target', self.target & MASK32)

    def __str__(self) -> str:
        return hex(self.target)


Operand = Union[RegOp, Reg8Op, Imm, Mem, Rel]


# ==================== FORMS ====================

class Form(str, Enum):
    """Encoding shapes of the subset"""
    NOP = "nop"
    MOV_RM_R = "mov_rm_r"          # 89 /r
    MOV_R_RM = "mov_r_rm"          # 8B /r
    MOV_R_IMM = "mov_r_imm"        # B8+r id
    LEA = "lea"                    # 8D /r
    XCHG_RR = "xchg_rr"            # 87 /r, mod=11
    XCHG_HL = "xchg_hl"            # 86 /r, high/low halves of one register
    BSWAP = "bswap"                # 0F C8+r
    PUSH_R = "push_r"              # 50+r
    PUSH_IMM = "push_imm"          # 68 id
    POP_R = "pop_r"                # 58+r
    PUSHFD = "pushfd"              # 9C
    POPFD = "popfd"                # 9D
    ALU_RR = "alu_rr"              # 01/09/11/19/21/29/31/39 /r, mod=11
    ALU_RI8 = "alu_ri8"            # 83 /ext ib
    ALU_RI32 = "alu_ri32"          # 81 /ext id
    INC = "inc"                    # 40+r
    DEC = "dec"                    # 48+r
    NEG = "neg"                    # F7 /3
    NOT = "not"                    # F7 /2
    TEST_RR = "test_rr"            # 85 /r, mod=11
    SHIFT_RI8 = "shift_ri8"        # C1 /4,/5,/7 ib
    JMP_REL8 = "jmp_rel8"          # EB cb
    JMP_REL32 = "jmp_rel32"        # E9 cd
    JCC_REL8 = "jcc_rel8"          # 7x cb
    JCC_REL32 = "jcc_rel32"        # 0F 8x cd
    CALL_REL32 = "call_rel32"      # E8 cd
    RET = "ret"                    # C3


ALU_EXT = {'add': 0, 'or': 1, 'adc': 2, 'sbb': 3, 'and': 4, 'sub': 5, 'xor': 6, 'cmp': 7}
ALU_BY_EXT = {v: k for k, v in ALU_EXT.items()}
SHIFT_EXT = {'shl': 4, 'shr': 5, 'sar': 7}
SHIFT_BY_EXT = {v: k for k, v in SHIFT_EXT.items()}
JCC_CODE = {'je': 0x4, 'jne': 0x5, 'jl': 0xC, 'jge': 0xD}
JCC_BY_CODE = {v: k for k, v in JCC_CODE.items()}

REL_LENGTH = {
    Form.JMP_REL8: 2,
    Form.JMP_REL32: 5,
    Form.JCC_REL8: 2,
    Form.JCC_REL32: 6,
    Form.CALL_REL32: 5,
}

CONTROL_FLOW_FORMS = frozenset(REL_LENGTH) | {Form.RET}

# Mnemonic -> forms it can take; the closed subset
MNEMONIC_FORMS = {
    'nop': (Form.NOP,),
    'mov': (Form.MOV_RM_R, Form.MOV_R_RM, Form.MOV_R_IMM),
    'lea': (Form.LEA,),
    'xchg': (Form.XCHG_RR, Form.XCHG_HL),
    'bswap': (Form.BSWAP,),
    'push': (Form.PUSH_R, Form.PUSH_IMM),
    'pop': (Form.POP_R,),
    'pushfd': (Form.PUSHFD,),
    'popfd': (Form.POPFD,),
    **{m: (Form.ALU_RR, Form.ALU_RI8, Form.ALU_RI32) for m in ALU_EXT},
    'inc': (Form.INC,),
    'dec': (Form.DEC,),
    'neg': (Form.NEG,),
    'not': (Form.NOT,),
    'test': (Form.TEST_RR,),
    **{m: (Form.SHIFT_RI8,) for m in SHIFT_EXT},
    'jmp': (Form.JMP_REL8, Form.JMP_REL32),
    **{m: (Form.JCC_REL8, Form.JCC_REL32) for m in JCC_CODE},
    'call': (Form.CALL_REL32,),
    'ret': (Form.RET,),
}


# ==================== SEMANTICS ====================

@dataclass(frozen=True)
class Semantics:
    """Def/use record of one instruction"""
    regs_read: FrozenSet[Reg32] = frozenset()
    regs_written: FrozenSet[Reg32] = frozenset()
    flags_read: Flag = NO_FLAGS
    flags_written: Flag = NO_FLAGS
    mem_read: bool = False
    mem_written: bool = False
    is_control_flow: bool = False

    @property
    def touches_memory(self) -> bool:
        return self.mem_read or self.mem_written


# ==================== INSTRUCTION ====================

@dataclass(frozen=True)
class Instruction:
    mnemonic: str
    form: Form
    operands: Tuple[Operand, ...]
    vaddr: int = 0
    raw: bytes = field(default=b'', compare=False)

    @classmethod
    def create(cls, mnemonic: str, form: Form, operands: Sequence[Operand] = (), vaddr: int = 0) -> 'Instruction':
        """Build and encode an instruction"""
        operands = tuple(operands)
        raw = _encode(mnemonic, form, operands, vaddr)
        return cls(mnemonic, form, operands, vaddr & MASK32, raw)

    @property
    def length(self) -> int:
        return len(self.raw)

    @property
    def end(self) -> int:
        return self.vaddr + len(self.raw)

    @cached_property
    def semantics(self) -> Semantics:
        return instruction_semantics(self)

    @property
    def rel(self) -> Optional[Rel]:
        for op in self.operands:
            if isinstance(op, Rel):
                return op
        return None

    @property
    def is_control_flow(self) -> bool:
        return self.form in CONTROL_FLOW_FORMS

    @property
    def is_unconditional_exit(self) -> bool:
        """No fall-through successor"""
        return self.form in (Form.JMP_REL8, Form.JMP_REL32, Form.RET)

    def at(self, vaddr: int) -> 'Instruction':
        """Same instruction placed at vaddr; rel targets stay absolute"""
        return Instruction.create(self.mnemonic, self.form, self.operands, vaddr)

    def with_operands(self, operands: Sequence[Operand], mnemonic: Optional[str] = None,
                      form: Optional[Form] = None) -> 'Instruction':
        return Instruction.create(mnemonic or self.mnemonic, form or self.form, operands, self.vaddr)

    def __str__(self) -> str:
        return format_instruction(self)


@dataclass(frozen=True)
class Undecodable:
    """Bytes at offset match no subset encoding"""
    offset: int
    reason: str = "no subset encoding"


@dataclass
class Disassembly:
    instructions: List[Instruction]
    error: Optional[Undecodable] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def consumed(self) -> int:
        return sum(inst.length for inst in self.instructions)


# ==================== ENCODER ====================

def _modrm_reg(rm: int, reg: int) -> bytes:
    return bytes([0xC0 | (reg & 7) << 3 | (rm & 7)])


def _modrm_mem(mem: Mem, reg: int) -> bytes:
    base = int(mem.base)
    if mem.disp_width == 0:
        return bytes([(reg & 7) << 3 | base])
    if mem.disp_width == 1:
        return bytes([0x40 | (reg & 7) << 3 | base]) + struct.pack('<b', mem.disp)
    return bytes([0x80 | (reg & 7) << 3 | base]) + struct.pack('<i', mem.disp)


def _modrm_any(rm: Operand, reg: int) -> bytes:
    if isinstance(rm, RegOp):
        return _modrm_reg(rm.reg, reg)
    if isinstance(rm, Mem):
        return _modrm_mem(rm, reg)
    raise EncodingError(f"operand {rm!r} cannot occupy r/m")


def _expect(operands: Tuple[Operand, ...], *types) -> None:
    if len(operands) != len(types) or not all(isinstance(o, t) for o, t in zip(operands, types)):
        shape = ', '.join(type(o).__name__ for o in operands)
        raise EncodingError(f"operand shape ({shape}) outside the subset")


def _imm_bytes(imm: Imm, width: int) -> bytes:
    if imm.width != width:
        raise EncodingError(f"expected imm{8 * width}, got imm{8 * imm.width}")
    return struct.pack('<B' if width == 1 else '<I', imm.value)


def _rel_bytes(form: Form, rel: Rel, vaddr: int) -> bytes:
    length = REL_LENGTH[form]
    disp = to_signed(rel.target - (vaddr + length), 32)
    if rel.width == 1:
        if not -128 <= disp <= 127:
            raise EncodingError(f"target {rel.target:#x} out of rel8 range from {vaddr:#x}")
        return struct.pack('<b', disp)
    return struct.pack('<i', disp)


def _encode(mnemonic: str, form: Form, ops: Tuple[Operand, ...], vaddr: int) -> bytes:
    if form not in MNEMONIC_FORMS.get(mnemonic, ()):
        raise EncodingError(f"{mnemonic} has no {form.value} form")

    if form == Form.NOP:
        _expect(ops)
        return b'\x90'
    if form == Form.MOV_RM_R:
        if len(ops) != 2 or not isinstance(ops[1], RegOp):
            _expect(ops, (RegOp, Mem), RegOp)
        return b'\x89' + _modrm_any(ops[0], ops[1].reg)
    if form == Form.MOV_R_RM:
        if len(ops) != 2 or not isinstance(ops[0], RegOp):
            _expect(ops, RegOp, (RegOp, Mem))
        return b'\x8b' + _modrm_any(ops[1], ops[0].reg)
    if form == Form.MOV_R_IMM:
        _expect(ops, RegOp, Imm)
        return bytes([0xB8 + ops[0].reg]) + _imm_bytes(ops[1], 4)
    if form == Form.LEA:
        _expect(ops, RegOp, Mem)
        return b'\x8d' + _modrm_mem(ops[1], ops[0].reg)
    if form == Form.XCHG_RR:
        _expect(ops, RegOp, RegOp)
        return b'\x87' + _modrm_reg(ops[0].reg, ops[1].reg)
    if form == Form.XCHG_HL:
        _expect(ops, Reg8Op, Reg8Op)
        a, b = ops[0].reg, ops[1].reg
        if a.parent != b.parent or a.is_high == b.is_high:
            raise EncodingError("xchg of 8-bit registers must pair the high and low half of one register")
        return b'\x86' + _modrm_reg(a, b)
    if form == Form.BSWAP:
        _expect(ops, RegOp)
        return bytes([0x0F, 0xC8 + ops[0].reg])
    if form == Form.PUSH_R:
        _expect(ops, RegOp)
        return bytes([0x50 + ops[0].reg])
    if form == Form.PUSH_IMM:
        _expect(ops, Imm)
        return b'\x68' + _imm_bytes(ops[0], 4)
    if form == Form.POP_R:
        _expect(ops, RegOp)
        return bytes([0x58 + ops[0].reg])
    if form == Form.PUSHFD:
        _expect(ops)
        return b'\x9c'
    if form == Form.POPFD:
        _expect(ops)
        return b'\x9d'
    if form == Form.ALU_RR:
        _expect(ops, RegOp, RegOp)
        return bytes([ALU_EXT[mnemonic] * 8 + 1]) + _modrm_reg(ops[0].reg, ops[1].reg)
    if form == Form.ALU_RI8:
        _expect(ops, RegOp, Imm)
        return b'\x83' + _modrm_reg(ops[0].reg, ALU_EXT[mnemonic]) + _imm_bytes(ops[1], 1)
    if form == Form.ALU_RI32:
        _expect(ops, RegOp, Imm)
        return b'\x81' + _modrm_reg(ops[0].reg, ALU_EXT[mnemonic]) + _imm_bytes(ops[1], 4)
    if form == Form.INC:
        _expect(ops, RegOp)
        return bytes([0x40 + ops[0].reg])
    if form == Form.DEC:
        _expect(ops, RegOp)
        return bytes([0x48 + ops[0].reg])
    if form == Form.NEG:
        _expect(ops, RegOp)
        return b'\xf7' + _modrm_reg(ops[0].reg, 3)
    if form == Form.NOT:
        _expect(ops, RegOp)
        return b'\xf7' + _modrm_reg(ops[0].reg, 2)
    if form == Form.TEST_RR:
        _expect(ops, RegOp, RegOp)
        return b'\x85' + _modrm_reg(ops[0].reg, ops[1].reg)
    if form == Form.SHIFT_RI8:
        _expect(ops, RegOp, Imm)
        return b'\xc1' + _modrm_reg(ops[0].reg, SHIFT_EXT[mnemonic]) + _imm_bytes(ops[1], 1)
    if form == Form.JMP_REL8:
        _expect(ops, Rel)
        return b'\xeb' + _rel_bytes(form, ops[0], vaddr)
    if form == Form.JMP_REL32:
        _expect(ops, Rel)
        return b'\xe9' + _rel_bytes(form, ops[0], vaddr)
    if form == Form.JCC_REL8:
        _expect(ops, Rel)
        return bytes([0x70 + JCC_CODE[mnemonic]]) + _rel_bytes(form, ops[0], vaddr)
    if form == Form.JCC_REL32:
        _expect(ops, Rel)
        return bytes([0x0F, 0x80 + JCC_CODE[mnemonic]]) + _rel_bytes(form, ops[0], vaddr)
    if form == Form.CALL_REL32:
        _expect(ops, Rel)
        return b'\xe8' + _rel_bytes(form, ops[0], vaddr)
    if form == Form.RET:
        _expect(ops)
        return b'\xc3'

    raise EncodingError(f"unknown form {form}")


def encode_instruction(inst: Instruction) -> bytes:
    """Canonical encoding for the instruction's form and operands"""
    return _encode(inst.mnemonic, inst.form, inst.operands, inst.vaddr)


# ==================== DECODER ====================

class _Truncated(Exception):
    pass


class _NotInSubset(Exception):
    pass


def _need(data: bytes, n: int) -> None:
    if len(data) < n:
        raise _Truncated()


def _parse_modrm(data: bytes, pos: int) -> Tuple[int, int, Operand, int]:
    """Returns (mod, reg, rm operand, bytes consumed including ModRM)"""
    _need(data, pos + 1)
    modrm = data[pos]
    mod, reg, rm = modrm >> 6, (modrm >> 3) & 7, modrm & 7
    if mod == 3:
        return mod, reg, RegOp(Reg32(rm)), 1
    if rm == 4:
        raise _NotInSubset("SIB addressing")
    if mod == 0:
        if rm == 5:
            raise _NotInSubset("absolute disp32 addressing")
        return mod, reg, Mem(Reg32(rm), 0, 0), 1
    if mod == 1:
        _need(data, pos + 2)
        return mod, reg, Mem(Reg32(rm), struct.unpack_from('<b', data, pos + 1)[0], 1), 2
    _need(data, pos + 5)
    return mod, reg, Mem(Reg32(rm), struct.unpack_from('<i', data, pos + 1)[0], 4), 5


def _imm(data: bytes, pos: int, width: int) -> Imm:
    _need(data, pos + width)
    return Imm(struct.unpack_from('<B' if width == 1 else '<I', data, pos)[0], width)


def _rel(data: bytes, pos: int, width: int, vaddr: int, length: int) -> Rel:
    _need(data, pos + width)
    disp = struct.unpack_from('<b' if width == 1 else '<i', data, pos)[0]
    return Rel((vaddr + length + disp) & MASK32, width)


_ALU_RR_OPCODES = {ext * 8 + 1: name for name, ext in ALU_EXT.items()}


def _decode(data: bytes, vaddr: int) -> Tuple[str, Form, Tuple[Operand, ...]]:
    _need(data, 1)
    op = data[0]

    if op == 0x90:
        return 'nop', Form.NOP, ()
    if op in (0x89, 0x8B):
        mod, reg, rm, _ = _parse_modrm(data, 1)
        if op == 0x89:
            return 'mov', Form.MOV_RM_R, (rm, RegOp(Reg32(reg)))
        return 'mov', Form.MOV_R_RM, (RegOp(Reg32(reg)), rm)
    if 0xB8 <= op <= 0xBF:
        return 'mov', Form.MOV_R_IMM, (RegOp(Reg32(op - 0xB8)), _imm(data, 1, 4))
    if op == 0x8D:
        mod, reg, rm, _ = _parse_modrm(data, 1)
        if mod == 3:
            raise _NotInSubset("lea with register operand")
        return 'lea', Form.LEA, (RegOp(Reg32(reg)), rm)
    if op == 0x87:
        mod, reg, rm, _ = _parse_modrm(data, 1)
        if mod != 3:
            raise _NotInSubset("xchg with memory")
        return 'xchg', Form.XCHG_RR, (rm, RegOp(Reg32(reg)))
    if op == 0x86:
        _need(data, 2)
        modrm = data[1]
        if modrm >> 6 != 3:
            raise _NotInSubset("xchg r/m8 with memory")
        a, b = Reg8(modrm & 7), Reg8((modrm >> 3) & 7)
        if a.parent != b.parent or a.is_high == b.is_high:
            raise _NotInSubset("xchg of unrelated 8-bit registers")
        return 'xchg', Form.XCHG_HL, (Reg8Op(a), Reg8Op(b))
    if op == 0x0F:
        _need(data, 2)
        op2 = data[1]
        if 0xC8 <= op2 <= 0xCF:
            return 'bswap', Form.BSWAP, (RegOp(Reg32(op2 - 0xC8)),)
        if op2 - 0x80 in JCC_BY_CODE:
            return JCC_BY_CODE[op2 - 0x80], Form.JCC_REL32, (_rel(data, 2, 4, vaddr, 6),)
        raise _NotInSubset(f"0f {op2:02x}")
    if 0x50 <= op <= 0x57:
        return 'push', Form.PUSH_R, (RegOp(Reg32(op - 0x50)),)
    if op == 0x68:
        return 'push', Form.PUSH_IMM, (_imm(data, 1, 4),)
    if 0x58 <= op <= 0x5F:
        return 'pop', Form.POP_R, (RegOp(Reg32(op - 0x58)),)
    if op == 0x9C:
        return 'pushfd', Form.PUSHFD, ()
    if op == 0x9D:
        return 'popfd', Form.POPFD, ()
    if op in _ALU_RR_OPCODES:
        mod, reg, rm, _ = _parse_modrm(data, 1)
        if mod != 3:
            raise _NotInSubset("ALU with memory")
        return _ALU_RR_OPCODES[op], Form.ALU_RR, (rm, RegOp(Reg32(reg)))
    if op in (0x83, 0x81):
        mod, reg, rm, _ = _parse_modrm(data, 1)
        if mod != 3:
            raise _NotInSubset("ALU immediate with memory")
        if op == 0x83:
            return ALU_BY_EXT[reg], Form.ALU_RI8, (rm, _imm(data, 2, 1))
        return ALU_BY_EXT[reg], Form.ALU_RI32, (rm, _imm(data, 2, 4))
    if 0x40 <= op <= 0x47:
        return 'inc', Form.INC, (RegOp(Reg32(op - 0x40)),)
    if 0x48 <= op <= 0x4F:
        return 'dec', Form.DEC, (RegOp(Reg32(op - 0x48)),)
    if op == 0xF7:
        mod, reg, rm, _ = _parse_modrm(data, 1)
        if mod != 3 or reg not in (2, 3):
            raise _NotInSubset(f"f7 /{reg}")
        return ('not', Form.NOT, (rm,)) if reg == 2 else ('neg', Form.NEG, (rm,))
    if op == 0x85:
        mod, reg, rm, _ = _parse_modrm(data, 1)
        if mod != 3:
            raise _NotInSubset("test with memory")
        return 'test', Form.TEST_RR, (rm, RegOp(Reg32(reg)))
    if op == 0xC1:
        mod, reg, rm, _ = _parse_modrm(data, 1)
        if mod != 3 or reg not in SHIFT_BY_EXT:
            raise _NotInSubset(f"c1 /{reg}")
        return SHIFT_BY_EXT[reg], Form.SHIFT_RI8, (rm, _imm(data, 2, 1))
    if op == 0xEB:
        return 'jmp', Form.JMP_REL8, (_rel(data, 1, 1, vaddr, 2),)
    if op == 0xE9:
        return 'jmp', Form.JMP_REL32, (_rel(data, 1, 4, vaddr, 5),)
    if op - 0x70 in JCC_BY_CODE:
        return JCC_BY_CODE[op - 0x70], Form.JCC_REL8, (_rel(data, 1, 1, vaddr, 2),)
    if op == 0xE8:
        return 'call', Form.CALL_REL32, (_rel(data, 1, 4, vaddr, 5),)
    if op == 0xC3:
        return 'ret', Form.RET, ()

    raise _NotInSubset(f"opcode {op:02x}")


def decode_instruction(data: bytes, vaddr: int = 0) -> Union[Instruction, Undecodable]:
    """
    Decode the single subset instruction at the start of data.

    Args:
        data: Byte sequence (only the matched prefix is consumed)
        vaddr: Virtual address of data[0]

    Returns:
        Instruction, or Undecodable(offset=0) when no subset encoding matches
    """
    if not data:
        return Undecodable(0, "empty input")
    return _decode_window(bytes(data[:8]), vaddr & MASK32)


@lru_cache(maxsize=1 << 16)
def _decode_window(window: bytes, vaddr: int) -> Union[Instruction, Undecodable]:
    try:
        mnemonic, form, operands = _decode(window, vaddr)
    except _Truncated:
        return Undecodable(0, "truncated")
    except _NotInSubset as e:
        return Undecodable(0, str(e))
    return Instruction.create(mnemonic, form, operands, vaddr)


def disassemble_range(data: bytes, base_vaddr: int = 0) -> Disassembly:
    """Linear sweep from offset 0; stops at the first undecodable offset"""
    instructions: List[Instruction] = []
    offset = 0
    while offset < len(data):
        result = decode_instruction(data[offset:offset + 8], base_vaddr + offset)
        if isinstance(result, Undecodable):
            return Disassembly(instructions, Undecodable(offset, result.reason))
        instructions.append(result)
        offset += result.length
    return Disassembly(instructions)


# ==================== SEMANTICS TABLE ====================

def operand_registers(op: Operand) -> FrozenSet[Reg32]:
    if isinstance(op, RegOp):
        return frozenset({op.reg})
    if isinstance(op, Mem):
        return frozenset({op.base})
    if isinstance(op, Reg8Op):
        return frozenset({op.reg.parent})
    return frozenset()


_ESP = frozenset({Reg32.ESP})
_CALL_CLOBBERS = frozenset({Reg32.EAX, Reg32.ECX, Reg32.EDX})


def instruction_semantics(inst: Instruction) -> Semantics:
    """
    Complete def/use record of an instruction.

    Zeroing idioms (xor r,r / sub r,r) report no register read: their
    result does not depend on the register's value.
    """
    form, ops, m = inst.form, inst.operands, inst.mnemonic

    if form == Form.NOP:
        return Semantics()
    if form == Form.MOV_RM_R:
        dst, src = ops
        if isinstance(dst, Mem):
            return Semantics(regs_read=frozenset({src.reg, dst.base}), mem_written=True)
        return Semantics(regs_read=frozenset({src.reg}), regs_written=frozenset({dst.reg}))
    if form == Form.MOV_R_RM:
        dst, src = ops
        if isinstance(src, Mem):
            return Semantics(regs_read=frozenset({src.base}), regs_written=frozenset({dst.reg}), mem_read=True)
        return Semantics(regs_read=frozenset({src.reg}), regs_written=frozenset({dst.reg}))
    if form == Form.MOV_R_IMM:
        return Semantics(regs_written=frozenset({ops[0].reg}))
    if form == Form.LEA:
        return Semantics(regs_read=frozenset({ops[1].base}), regs_written=frozenset({ops[0].reg}))
    if form in (Form.XCHG_RR, Form.XCHG_HL):
        regs = operand_registers(ops[0]) | operand_registers(ops[1])
        return Semantics(regs_read=regs, regs_written=regs)
    if form in (Form.BSWAP, Form.NOT):
        regs = frozenset({ops[0].reg})
        return Semantics(regs_read=regs, regs_written=regs)
    if form == Form.PUSH_R:
        return Semantics(regs_read=frozenset({ops[0].reg}) | _ESP, regs_written=_ESP, mem_written=True)
    if form == Form.PUSH_IMM:
        return Semantics(regs_read=_ESP, regs_written=_ESP, mem_written=True)
    if form == Form.POP_R:
        return Semantics(regs_read=_ESP, regs_written=frozenset({ops[0].reg}) | _ESP, mem_read=True)
    if form == Form.PUSHFD:
        return Semantics(regs_read=_ESP, regs_written=_ESP, flags_read=ALL_FLAGS, mem_written=True)
    if form == Form.POPFD:
        return Semantics(regs_read=_ESP, regs_written=_ESP, flags_written=ALL_FLAGS, mem_read=True)
    if form in (Form.ALU_RR, Form.ALU_RI8, Form.ALU_RI32):
        dst = ops[0].reg
        read = {dst}
        if form == Form.ALU_RR:
            read.add(ops[1].reg)
            if m in ('xor', 'sub') and ops[1].reg == dst:
                read = set()
        written = frozenset() if m == 'cmp' else frozenset({dst})
        flags_read = Flag.CF if m in ('adc', 'sbb') else NO_FLAGS
        return Semantics(regs_read=frozenset(read), regs_written=written,
                         flags_read=flags_read, flags_written=ALL_FLAGS)
    if form in (Form.INC, Form.DEC):
        regs = frozenset({ops[0].reg})
        return Semantics(regs_read=regs, regs_written=regs, flags_written=ALL_FLAGS & ~Flag.CF)
    if form == Form.NEG:
        regs = frozenset({ops[0].reg})
        return Semantics(regs_read=regs, regs_written=regs, flags_written=ALL_FLAGS)
    if form == Form.TEST_RR:
        return Semantics(regs_read=frozenset({ops[0].reg, ops[1].reg}), flags_written=ALL_FLAGS)
    if form == Form.SHIFT_RI8:
        regs = frozenset({ops[0].reg})
        count = ops[1].value & 31
        return Semantics(regs_read=regs, regs_written=regs, flags_written=ALL_FLAGS if count else NO_FLAGS)
    if form in (Form.JMP_REL8, Form.JMP_REL32):
        return Semantics(is_control_flow=True)
    if form in (Form.JCC_REL8, Form.JCC_REL32):
        flags = Flag.ZF if m in ('je', 'jne') else Flag.SF | Flag.OF
        return Semantics(flags_read=flags, is_control_flow=True)
    if form == Form.CALL_REL32:
        return Semantics(regs_read=_ESP, regs_written=_CALL_CLOBBERS | _ESP, flags_written=ALL_FLAGS,
                         mem_read=True, mem_written=True, is_control_flow=True)
    if form == Form.RET:
        return Semantics(regs_read=frozenset({Reg32.EAX}) | _ESP, regs_written=_ESP,
                         mem_read=True, is_control_flow=True)

    raise EncodingError(f"no semantics for {form}")


# ==================== TEXT FORM ====================

def format_instruction(inst: Instruction) -> str:
    if not inst.operands:
        return inst.mnemonic
    return f"{inst.mnemonic} {', '.join(str(op) for op in inst.operands)}"


_REG32_NAMES = {r.name.lower(): r for r in Reg32}
_REG8_NAMES = {r.name.lower(): r for r in Reg8}
_MEM_RE = re.compile(r'^\[\s*(\w+)\s*(?:([+-])\s*(\w+))?\s*\]$')


def _parse_int(token: str) -> int:
    return int(token, 0)


def _parse_operand(token: str) -> Operand:
    token = token.strip().lower()
    if token in _REG32_NAMES:
        return RegOp(_REG32_NAMES[token])
    if token in _REG8_NAMES:
        return Reg8Op(_REG8_NAMES[token])
    match = _MEM_RE.match(token)
    if match:
        base, sign, disp = match.groups()
        if base not in _REG32_NAMES:
            raise EncodingError(f"bad memory base in {token!r}")
        value = _parse_int(disp) if disp else 0
        return Mem(_REG32_NAMES[base], -value if sign == '-' else value)
    return Imm(_parse_int(token) & MASK32, 4)


def assemble(text: str, vaddr: int = 0) -> Instruction:
    """
    Assemble one line of Intel-syntax subset assembly.

    Branch operands are absolute targets. `short`/`near` pick rel8/rel32;
    `dword` forces the imm32 form of an ALU instruction.
    """
    text = text.split(';')[0].strip().lower()
    mnemonic, _, rest = text.partition(' ')
    rest = rest.strip()

    size_hint = None
    for hint in ('short', 'near', 'dword'):
        if rest.startswith(hint + ' ') or f', {hint} ' in rest:
            size_hint = hint
            rest = rest.replace(hint + ' ', '')
    ops = [_parse_operand(t) for t in rest.split(',')] if rest else []

    if mnemonic not in MNEMONIC_FORMS:
        raise EncodingError(f"unknown mnemonic {mnemonic!r}")

    if mnemonic == 'jmp' or mnemonic in JCC_CODE or mnemonic == 'call':
        target = ops[0].value
        short_form, near_form = ((Form.JMP_REL8, Form.JMP_REL32) if mnemonic == 'jmp'
                                 else (Form.JCC_REL8, Form.JCC_REL32))
        if mnemonic == 'call':
            return Instruction.create('call', Form.CALL_REL32, (Rel(target, 4),), vaddr)
        disp = to_signed(target - (vaddr + 2), 32)
        if size_hint == 'short' or (size_hint is None and -128 <= disp <= 127):
            return Instruction.create(mnemonic, short_form, (Rel(target, 1),), vaddr)
        return Instruction.create(mnemonic, near_form, (Rel(target, 4),), vaddr)

    if mnemonic == 'mov':
        dst, src = ops
        if isinstance(src, Imm):
            return Instruction.create('mov', Form.MOV_R_IMM, (dst, src), vaddr)
        if isinstance(src, Mem):
            return Instruction.create('mov', Form.MOV_R_RM, (dst, src), vaddr)
        return Instruction.create('mov', Form.MOV_RM_R, (dst, src), vaddr)
    if mnemonic in ALU_EXT:
        dst, src = ops
        if isinstance(src, RegOp):
            return Instruction.create(mnemonic, Form.ALU_RR, (dst, src), vaddr)
        if size_hint != 'dword' and -128 <= src.signed <= 127:
            return Instruction.create(mnemonic, Form.ALU_RI8, (dst, Imm(src.signed, 1)), vaddr)
        return Instruction.create(mnemonic, Form.ALU_RI32, (dst, src), vaddr)
    if mnemonic in SHIFT_EXT:
        return Instruction.create(mnemonic, Form.SHIFT_RI8, (ops[0], Imm(ops[1].value, 1)), vaddr)
    if mnemonic == 'xchg':
        form = Form.XCHG_HL if isinstance(ops[0], Reg8Op) else Form.XCHG_RR
        return Instruction.create('xchg', form, tuple(ops), vaddr)
    if mnemonic == 'push':
        form = Form.PUSH_IMM if isinstance(ops[0], Imm) else Form.PUSH_R
        return Instruction.create('push', form, tuple(ops), vaddr)

    return Instruction.create(mnemonic, MNEMONIC_FORMS[mnemonic][0], tuple(ops), vaddr)


def assemble_many(lines: Sequence[str], vaddr: int = 0) -> List[Instruction]:
    """Assemble consecutive lines starting at vaddr"""
    out: List[Instruction] = []
    for line in lines:
        if not line.split(';')[0].strip():
            continue
        inst = assemble(line, vaddr)
        out.append(inst)
        vaddr += inst.length
    return out


def encode_all(instructions: Sequence[Instruction]) -> bytes:
    return b''.join(inst.raw for inst in instructions)


def relocate(instructions: Sequence[Instruction], vaddr: int) -> List[Instruction]:
    """Lay instructions out consecutively from vaddr, keeping rel targets"""
    out: List[Instruction] = []
    for inst in instructions:
        placed = inst.at(vaddr)
        out.append(placed)
        vaddr += placed.length
    return out


# ==================== FUZZING ====================

GENERAL_REGS = tuple(r for r in Reg32 if r != Reg32.ESP)


def random_instruction(rng: random.Random, vaddr: int = 0) -> Instruction:
    """Uniformly pick a subset form and fill it with random operands"""
    mnemonic = rng.choice(sorted(MNEMONIC_FORMS))
    form = rng.choice(MNEMONIC_FORMS[mnemonic])

    def reg() -> RegOp:
        return RegOp(Reg32(rng.randrange(8)))

    def mem() -> Mem:
        base = rng.choice(GENERAL_REGS)
        width = rng.choice((0, 1, 4)) if base != Reg32.EBP else rng.choice((1, 4))
        disp = 0 if width == 0 else (rng.randrange(-128, 128) if width == 1 else rng.getrandbits(32))
        return Mem(base, disp, width)

    def rel(width: int) -> Rel:
        length = REL_LENGTH[form]
        disp = rng.randrange(-128, 128) if width == 1 else to_signed(rng.getrandbits(32), 32)
        return Rel(vaddr + length + disp, width)

    if form in (Form.MOV_RM_R,):
        ops: Tuple[Operand, ...] = (rng.choice((reg(), mem())), reg())
    elif form == Form.MOV_R_RM:
        ops = (reg(), rng.choice((reg(), mem())))
    elif form == Form.LEA:
        ops = (reg(), mem())
    elif form in (Form.MOV_R_IMM, Form.ALU_RI32):
        ops = (reg(), Imm(rng.getrandbits(32), 4))
    elif form in (Form.ALU_RI8, Form.SHIFT_RI8):
        ops = (reg(), Imm(rng.getrandbits(8), 1))
    elif form in (Form.XCHG_RR, Form.ALU_RR, Form.TEST_RR):
        ops = (reg(), reg())
    elif form == Form.XCHG_HL:
        low = Reg8(rng.randrange(4))
        pair = (Reg8Op(low), Reg8Op(Reg8(low + 4)))
        ops = pair if rng.random() < 0.5 else pair[::-1]
    elif form in (Form.BSWAP, Form.PUSH_R, Form.POP_R, Form.INC, Form.DEC, Form.NEG, Form.NOT):
        ops = (reg(),)
    elif form == Form.PUSH_IMM:
        ops = (Imm(rng.getrandbits(32), 4),)
    elif form in REL_LENGTH:
        ops = (rel(1 if form in (Form.JMP_REL8, Form.JCC_REL8) else 4),)
    else:
        ops = ()
    return Instruction.create(mnemonic, form, ops, vaddr)
