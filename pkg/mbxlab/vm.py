"""
Deterministic interpreter for the instruction subset.

Serves as the functionality oracle: two images are equivalent on a
function when, from identical random states, they terminate the same way,
issue the same calls in the same order and leave the same registers and
live memory behind. Exit flags are not compared.
"""

import hashlib
import logging
import random
import struct
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple, Union

from config.settings import VMSettings, settings
from mbxlab.container import BinaryImage, FunctionRef, SectionKind
from mbxlab.isa import (
    ALL_FLAGS,
    MASK32,
    NO_FLAGS,
    Flag,
    Form,
    Instruction,
    Mem,
    Reg32,
    RegOp,
    Undecodable,
    decode_instruction,
    to_signed,
)

logger = logging.getLogger(__name__)

SIGN32 = 0x80000000
EFLAGS_RESERVED = 0x2


class Termination(str, Enum):
    RET = "ret"
    TRAP = "trap"
    STEP_LIMIT = "step_limit"


class TrapReason(str, Enum):
    STACK_OVERFLOW = "stack_overflow"
    STACK_UNDERFLOW = "stack_underflow"
    MISALIGNED_STACK = "misaligned_stack"
    BAD_JUMP = "bad_jump"
    UNDECODABLE = "undecodable"
    BAD_RETURN = "bad_return"
    STEP_LIMIT = "step_limit"


class VMTrap(Exception):
    def __init__(self, reason: TrapReason, detail: str = ""):
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)
        self.reason = reason
        self.detail = detail


@dataclass
class MachineState:
    regs: List[int]
    flags: Flag
    memory: Dict[int, int]
    stack_base: int
    stack_limit: int
    call_trace: List[Tuple[int, int]] = field(default_factory=list)
    step_count: int = 0
    eip: int = 0

    def copy(self) -> 'MachineState':
        return MachineState(list(self.regs), self.flags, dict(self.memory), self.stack_base,
                            self.stack_limit, list(self.call_trace), self.step_count, self.eip)

    @property
    def esp(self) -> int:
        return self.regs[Reg32.ESP]

    def reg(self, reg: Reg32) -> int:
        return self.regs[reg]

    def set_reg(self, reg: Reg32, value: int) -> None:
        self.regs[reg] = value & MASK32

    def read32(self, address: int) -> int:
        mem = self.memory
        return (mem.get(address & MASK32, 0) | mem.get((address + 1) & MASK32, 0) << 8
                | mem.get((address + 2) & MASK32, 0) << 16 | mem.get((address + 3) & MASK32, 0) << 24)

    def write32(self, address: int, value: int) -> None:
        for i in range(4):
            self.memory[(address + i) & MASK32] = (value >> (8 * i)) & 0xFF

    def in_stack(self, address: int) -> bool:
        return self.stack_base <= address < self.stack_limit

    def live_memory(self) -> Dict[int, int]:
        """Nonzero bytes outside the dead stack below esp"""
        esp = self.esp
        return {a: v for a, v in self.memory.items() if v and not (self.stack_base <= a < esp)}


@dataclass
class RunOutcome:
    final_state: MachineState
    termination: Termination
    trap_reason: Optional[TrapReason] = None
    detail: str = ""


@dataclass
class EquivalenceVerdict:
    equivalent: bool
    trials: int
    witness: Optional[MachineState] = None
    detail: str = ""

    def __bool__(self) -> bool:
        return self.equivalent


# ==================== FLAGS ====================

@lru_cache(maxsize=256)
def _parity_even(low_byte: int) -> bool:
    return bin(low_byte).count('1') % 2 == 0


def _szp(result: int) -> Flag:
    flags = NO_FLAGS
    if result == 0:
        flags |= Flag.ZF
    if result & SIGN32:
        flags |= Flag.SF
    if _parity_even(result & 0xFF):
        flags |= Flag.PF
    return flags


def _add(a: int, b: int, carry: int = 0) -> Tuple[int, Flag]:
    full = a + b + carry
    r = full & MASK32
    flags = _szp(r)
    if full > MASK32:
        flags |= Flag.CF
    if (a ^ b ^ r) & 0x10:
        flags |= Flag.AF
    if (a ^ r) & (b ^ r) & SIGN32:
        flags |= Flag.OF
    return r, flags


def _sub(a: int, b: int, borrow: int = 0) -> Tuple[int, Flag]:
    r = (a - b - borrow) & MASK32
    flags = _szp(r)
    if a < b + borrow:
        flags |= Flag.CF
    if (a ^ b ^ r) & 0x10:
        flags |= Flag.AF
    if (a ^ b) & (a ^ r) & SIGN32:
        flags |= Flag.OF
    return r, flags


def _alu(op: str, a: int, b: int, flags: Flag) -> Tuple[int, Flag]:
    """Result and the full new flag set of a two-operand ALU op"""
    carry = 1 if flags & Flag.CF else 0
    if op in ('add', 'adc'):
        return _add(a, b, carry if op == 'adc' else 0)
    if op in ('sub', 'sbb', 'cmp'):
        return _sub(a, b, carry if op == 'sbb' else 0)
    if op == 'and':
        r = a & b
    elif op == 'or':
        r = a | b
    else:
        r = a ^ b
    return r, _szp(r)


def _shift(op: str, a: int, count: int) -> Tuple[int, Optional[Flag]]:
    """Result and flags; flags None when the masked count is zero"""
    count &= 31
    if count == 0:
        return a, None
    if op == 'shl':
        r = (a << count) & MASK32
        cf = (a >> (32 - count)) & 1
        of = bool(r & SIGN32) != bool(cf)
    elif op == 'shr':
        r = a >> count
        cf = (a >> (count - 1)) & 1
        of = bool(a & SIGN32)
    else:
        signed = to_signed(a, 32)
        r = (signed >> count) & MASK32
        cf = (signed >> (count - 1)) & 1
        of = False
    flags = _szp(r)
    if cf:
        flags |= Flag.CF
    if of:
        flags |= Flag.OF
    return r, flags


def _condition(mnemonic: str, flags: Flag) -> bool:
    if mnemonic == 'je':
        return bool(flags & Flag.ZF)
    if mnemonic == 'jne':
        return not flags & Flag.ZF
    less = bool(flags & Flag.SF) != bool(flags & Flag.OF)
    return less if mnemonic == 'jl' else not less


@lru_cache(maxsize=4096)
def canned_call_effect(callee: int) -> Tuple[int, int, int]:
    """Deterministic (eax, ecx, edx) left behind by an external call"""
    digest = hashlib.md5(struct.pack('<I', callee & MASK32)).digest()
    return struct.unpack('<III', digest[:12])


# ==================== EXECUTION ====================

def _address(state: MachineState, mem: Mem) -> int:
    return (state.regs[mem.base] + mem.disp) & MASK32


def _push(state: MachineState, value: int) -> None:
    esp = (state.regs[Reg32.ESP] - 4) & MASK32
    if esp < state.stack_base or esp + 4 > state.stack_limit:
        raise VMTrap(TrapReason.STACK_OVERFLOW, f"esp={esp:#x}")
    state.regs[Reg32.ESP] = esp
    state.write32(esp, value)


def _pop(state: MachineState) -> int:
    esp = state.regs[Reg32.ESP]
    if esp + 4 > state.stack_limit or esp < state.stack_base:
        raise VMTrap(TrapReason.STACK_UNDERFLOW, f"esp={esp:#x}")
    value = state.read32(esp)
    state.regs[Reg32.ESP] = (esp + 4) & MASK32
    return value


def _check_aligned(state: MachineState) -> None:
    if state.regs[Reg32.ESP] & 3:
        raise VMTrap(TrapReason.MISALIGNED_STACK, f"esp={state.regs[Reg32.ESP]:#x}")


def step(state: MachineState, inst: Instruction) -> Optional[int]:
    """
    Apply one non-call instruction to state in place.

    Returns:
        The next eip for taken branches, None to fall through
    """
    form, ops, m, regs = inst.form, inst.operands, inst.mnemonic, state.regs

    if form == Form.NOP:
        pass
    elif form in (Form.MOV_RM_R, Form.MOV_R_RM):
        dst, src = ops
        if isinstance(src, Mem):
            value = state.read32(_address(state, src))
        else:
            value = regs[src.reg]
        if isinstance(dst, Mem):
            state.write32(_address(state, dst), value)
        else:
            regs[dst.reg] = value
    elif form == Form.MOV_R_IMM:
        regs[ops[0].reg] = ops[1].value
    elif form == Form.LEA:
        regs[ops[0].reg] = _address(state, ops[1])
    elif form == Form.XCHG_RR:
        a, b = ops[0].reg, ops[1].reg
        regs[a], regs[b] = regs[b], regs[a]
    elif form == Form.XCHG_HL:
        r = ops[0].reg.parent
        v = regs[r]
        regs[r] = (v & 0xFFFF0000) | ((v & 0xFF) << 8) | ((v >> 8) & 0xFF)
    elif form == Form.BSWAP:
        r = ops[0].reg
        regs[r] = int.from_bytes(regs[r].to_bytes(4, 'little'), 'big')
    elif form == Form.PUSH_R:
        _push(state, regs[ops[0].reg])
    elif form == Form.PUSH_IMM:
        _push(state, ops[0].value)
    elif form == Form.POP_R:
        regs[ops[0].reg] = _pop(state)
    elif form == Form.PUSHFD:
        _check_aligned(state)
        _push(state, int(state.flags) | EFLAGS_RESERVED)
    elif form == Form.POPFD:
        _check_aligned(state)
        state.flags = Flag(_pop(state) & int(ALL_FLAGS))
    elif form in (Form.ALU_RR, Form.ALU_RI8, Form.ALU_RI32):
        dst = ops[0].reg
        src = ops[1]
        b = regs[src.reg] if isinstance(src, RegOp) else src.extended
        result, flags = _alu(m, regs[dst], b, state.flags)
        state.flags = flags
        if m != 'cmp':
            regs[dst] = result
    elif form in (Form.INC, Form.DEC):
        r = ops[0].reg
        result, flags = (_add if form == Form.INC else _sub)(regs[r], 1)
        state.flags = (flags & ~Flag.CF) | (state.flags & Flag.CF)
        regs[r] = result
    elif form == Form.NEG:
        r = ops[0].reg
        result, flags = _sub(0, regs[r])
        state.flags = flags
        regs[r] = result
    elif form == Form.NOT:
        r = ops[0].reg
        regs[r] = ~regs[r] & MASK32
    elif form == Form.TEST_RR:
        state.flags = _szp(regs[ops[0].reg] & regs[ops[1].reg])
    elif form == Form.SHIFT_RI8:
        r = ops[0].reg
        result, flags = _shift(m, regs[r], ops[1].value)
        if flags is not None:
            state.flags = flags
            regs[r] = result
    elif form in (Form.JMP_REL8, Form.JMP_REL32):
        return ops[0].target
    elif form in (Form.JCC_REL8, Form.JCC_REL32):
        return ops[0].target if _condition(m, state.flags) else None
    else:
        raise ValueError(f"step() does not handle {form.value}")
    return None


def exec_instruction(state: MachineState, inst: Instruction) -> MachineState:
    """
    Pure single-instruction step; branches set eip, everything else advances it.

    Raises:
        VMTrap: Stack overflow/underflow or misaligned flag push/pop
    """
    new = state.copy()
    new.step_count += 1
    if inst.form == Form.CALL_REL32:
        new.call_trace.append((inst.rel.target, new.esp))
        _push(new, inst.end)
        new.eip = inst.rel.target
        return new
    if inst.form == Form.RET:
        new.eip = _pop(new)
        return new
    target = step(new, inst)
    new.eip = inst.end if target is None else target
    return new


def exec_sequence(state: MachineState, instructions: Sequence[Instruction]) -> MachineState:
    """Run straight-line code (no branches or calls) from a copy of state"""
    new = state.copy()
    for inst in instructions:
        if step(new, inst) is not None:
            raise ValueError(f"branch taken inside straight-line code: {inst}")
        new.step_count += 1
    return new


def _executable(image: BinaryImage) -> List[Tuple[int, int, bytes]]:
    return [(s.vaddr, s.end, s.data) for s in image.sections if s.kind == SectionKind.CODE]


def _fetch(code: List[Tuple[int, int, bytes]], eip: int) -> Union[Instruction, Undecodable, None]:
    for start, end, data in code:
        if start <= eip < end:
            offset = eip - start
            return decode_instruction(data[offset:min(offset + 8, end - start)], eip)
    return None


def run_function(image: BinaryImage, fn: FunctionRef, state: MachineState,
                 step_limit: Optional[int] = None, vm_settings: Optional[VMSettings] = None) -> RunOutcome:
    """
    Execute fn from state until it returns to the synthetic caller.

    Args:
        image: Image holding fn
        fn: Function to run
        state: Entry state (not modified)
        step_limit: Instruction budget; defaults to settings.vm.step_limit
        vm_settings: Overrides for the return sentinel and limits

    Returns:
        RunOutcome with the final state and how the run ended
    """
    vm_settings = vm_settings or settings.vm
    step_limit = step_limit or vm_settings.step_limit
    sentinel = vm_settings.return_sentinel
    code = _executable(image)
    st = state.copy()

    try:
        _push(st, sentinel)
    except VMTrap as trap:
        return RunOutcome(st, Termination.TRAP, trap.reason, trap.detail)

    eip = fn.vaddr
    regs = st.regs
    try:
        while True:
            if st.step_count >= step_limit:
                st.eip = eip
                return RunOutcome(st, Termination.STEP_LIMIT, TrapReason.STEP_LIMIT, f"after {step_limit} steps")
            inst = _fetch(code, eip)
            if inst is None:
                raise VMTrap(TrapReason.BAD_JUMP, f"eip={eip:#x} outside code")
            if isinstance(inst, Undecodable):
                raise VMTrap(TrapReason.UNDECODABLE, f"eip={eip:#x}: {inst.reason}")
            st.step_count += 1

            form = inst.form
            if form == Form.CALL_REL32:
                target = inst.rel.target
                st.call_trace.append((target, regs[Reg32.ESP]))
                if _fetch(code, target) is not None:
                    _push(st, inst.end)
                    eip = target
                else:
                    regs[Reg32.EAX], regs[Reg32.ECX], regs[Reg32.EDX] = canned_call_effect(target)
                    st.flags = NO_FLAGS
                    eip = inst.end
            elif form == Form.RET:
                address = _pop(st)
                if address == sentinel:
                    st.eip = address
                    return RunOutcome(st, Termination.RET)
                if _fetch(code, address) is None:
                    raise VMTrap(TrapReason.BAD_RETURN, f"return to {address:#x}")
                eip = address
            else:
                target = step(st, inst)
                eip = inst.end if target is None else target
    except VMTrap as trap:
        st.eip = eip
        return RunOutcome(st, Termination.TRAP, trap.reason, trap.detail)


def random_state(seed: int, vm_settings: Optional[VMSettings] = None) -> MachineState:
    """Pseudorandom registers, flags and stack contents; esp near mid-stack"""
    vm_settings = vm_settings or settings.vm
    rng = random.Random(seed)
    base, limit = vm_settings.stack_base, vm_settings.stack_limit
    regs = [rng.getrandbits(32) for _ in range(8)]
    middle = (base + limit) // 2 & ~3
    esp = middle + 4 * rng.randrange(-64, 64)
    regs[Reg32.ESP] = esp
    flags = Flag(rng.getrandbits(12) & int(ALL_FLAGS))
    memory = {a: rng.getrandbits(8) for a in range(esp - 256, esp + 256)}
    return MachineState(regs, flags, memory, base, limit)


def _compare(a: RunOutcome, b: RunOutcome) -> str:
    """Empty string when outcomes match, else a description of the first difference"""
    if a.termination != b.termination or a.trap_reason != b.trap_reason:
        return f"termination {a.termination.value}/{a.trap_reason} vs {b.termination.value}/{b.trap_reason}"
    sa, sb = a.final_state, b.final_state
    if sa.call_trace != sb.call_trace:
        return f"call trace {sa.call_trace} vs {sb.call_trace}"
    for reg in Reg32:
        if sa.regs[reg] != sb.regs[reg]:
            return f"{reg} = {sa.regs[reg]:#x} vs {sb.regs[reg]:#x}"
    ma, mb = sa.live_memory(), sb.live_memory()
    if ma != mb:
        diff = sorted(set(ma.items()) ^ set(mb.items()))
        return f"memory differs at {diff[0][0]:#x}"
    return ""


def check_equivalence(image_a: BinaryImage, image_b: BinaryImage, fn: Union[FunctionRef, int],
                      trials: Optional[int] = None, seed: int = 0,
                      vm_settings: Optional[VMSettings] = None) -> EquivalenceVerdict:
    """
    Run fn in both images from the same random states.

    Args:
        image_a: Reference image
        image_b: Candidate image
        fn: Function (or function-table index) present in both
        trials: Number of random states; defaults to settings.vm.equivalence_trials
        seed: Root seed; trial i uses seed + i

    Returns:
        EquivalenceVerdict, divergent with the first witness entry state
    """
    vm_settings = vm_settings or settings.vm
    trials = trials or vm_settings.equivalence_trials
    index = fn.index if isinstance(fn, FunctionRef) else fn
    fn_a, fn_b = image_a.functions[index], image_b.functions[index]

    for trial in range(trials):
        entry = random_state(seed + trial, vm_settings)
        difference = _compare(run_function(image_a, fn_a, entry, vm_settings=vm_settings),
                              run_function(image_b, fn_b, entry, vm_settings=vm_settings))
        if difference:
            logger.debug(f"function {index} diverges on trial {trial}: {difference}")
            return EquivalenceVerdict(False, trial + 1, entry, difference)
    return EquivalenceVerdict(True, trials)


def check_image_equivalence(image_a: BinaryImage, image_b: BinaryImage, trials: Optional[int] = None,
                            seed: int = 0) -> Dict[int, EquivalenceVerdict]:
    """Verdict per function index"""
    return {fn.index: check_equivalence(image_a, image_b, fn.index, trials, seed) for fn in image_a.functions}
