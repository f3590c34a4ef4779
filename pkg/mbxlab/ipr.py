"""
In-place randomization: length-preserving rewrites of a single function.

Four operations are provided: equivalent-instruction substitution, register
reassignment, instruction reordering inside basic blocks, and reordering of
the register save/restore sequence. All of them are guarded by
intra-function liveness and leave registered semantic-nop sites (the
``frozen`` vaddr ranges) untouched.
"""

import itertools
import logging
import random
from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, Iterable, Iterator, List, Optional, Sequence, Set, Tuple

import networkx as nx

from mbxlab.container import (
    BinaryImage,
    FunctionRef,
    IPR_TRANSFORMS,
    SectionKind,
    TransformType,
    function_instructions,
    preservation_pattern,
    replace_function_code,
)
from mbxlab.isa import (
    ALL_FLAGS,
    NO_FLAGS,
    Flag,
    Form,
    Imm,
    Instruction,
    Mem,
    Reg8Op,
    Reg32,
    RegOp,
    Semantics,
    encode_all,
)

logger = logging.getLogger(__name__)

FrozenRanges = Sequence[Tuple[int, int]]

ALL_REGS = frozenset(Reg32)
REASSIGNABLE = (Reg32.EBX, Reg32.ECX, Reg32.EDX, Reg32.ESI, Reg32.EDI)
CALL_CLOBBERED = frozenset({Reg32.ECX, Reg32.EDX})
UNIFORM_ORDER_CAP = 256


@dataclass
class TransformOutcome:
    image: BinaryImage
    changed: bool
    touched: Optional[Tuple[int, int]] = None
    transform: Optional[TransformType] = None


# ==================== FUNCTION CODE ====================

@dataclass
class FunctionCode:
    """Decoded function with block boundaries as instruction-index ranges"""
    fn: FunctionRef
    instructions: List[Instruction]
    blocks: List[Tuple[int, int]]
    internal: Callable[[int], bool] = field(default=lambda target: False, repr=False)

    @property
    def has_calls(self) -> bool:
        return any(inst.form == Form.CALL_REL32 for inst in self.instructions)

    @property
    def has_internal_calls(self) -> bool:
        return any(inst.form == Form.CALL_REL32 and self.internal(inst.rel.target) for inst in self.instructions)

    def encoded(self) -> bytes:
        return encode_all(self.instructions)


def load_function(image: BinaryImage, fn: FunctionRef) -> Optional[FunctionCode]:
    """Decode fn; None when it is not transformable"""
    if not fn.is_transformable:
        return None
    listing = function_instructions(image, fn)
    if not listing.ok:
        return None
    instructions = listing.instructions
    index_of = {inst.vaddr: i for i, inst in enumerate(instructions)}
    blocks = [(index_of[start], index_of.get(end, len(instructions))) for start, end in fn.blocks]

    def internal(target: int) -> bool:
        section = image.section_at(target)
        return section is not None and section.kind == SectionKind.CODE

    return FunctionCode(fn, list(instructions), blocks, internal)


def store_function(image: BinaryImage, code: FunctionCode, instructions: Sequence[Instruction]) -> BinaryImage:
    return replace_function_code(image, code.fn, encode_all(instructions))


def is_frozen(inst: Instruction, frozen: FrozenRanges) -> bool:
    return any(inst.vaddr < end and start < inst.end for start, end in frozen)


def _outcome(image: BinaryImage, code: FunctionCode, new: Sequence[Instruction],
             transform: TransformType) -> TransformOutcome:
    old_bytes, new_bytes = code.encoded(), encode_all(new)
    if old_bytes == new_bytes:
        return TransformOutcome(image, False, None, transform)
    first = next(i for i, (a, b) in enumerate(zip(old_bytes, new_bytes)) if a != b)
    last = max(i for i, (a, b) in enumerate(zip(old_bytes, new_bytes)) if a != b)
    touched = (code.fn.vaddr + first, code.fn.vaddr + last + 1)
    return TransformOutcome(store_function(image, code, new), True, touched, transform)


# ==================== LIVENESS ====================

def effective_semantics(inst: Instruction, internal: Callable[[int], bool]) -> Semantics:
    """Semantics with calls into the image treated as reading everything"""
    sem = inst.semantics
    if inst.form == Form.CALL_REL32 and internal(inst.rel.target):
        return Semantics(ALL_REGS, sem.regs_written, ALL_FLAGS, sem.flags_written, True, True, True)
    return sem


class Liveness:
    """
    Backward register/flag liveness over the function's instructions.

    Exits by ret keep every register live (all are compared after return)
    and no flags; unknown successors keep everything live.
    """

    def __init__(self, code: FunctionCode):
        self.code = code
        insts = code.instructions
        n = len(insts)
        index_of = {inst.vaddr: i for i, inst in enumerate(insts)}
        self._sems = [effective_semantics(inst, code.internal) for inst in insts]

        self.successors: List[List[int]] = []
        self.exit_regs: List[FrozenSet[Reg32]] = []
        self.exit_flags: List[Flag] = []
        for i, inst in enumerate(insts):
            succ: List[int] = []
            regs: Set[Reg32] = set()
            flags = NO_FLAGS
            if inst.form == Form.RET:
                regs = set(ALL_REGS)
            else:
                targets: List[int] = []
                if inst.form in (Form.JMP_REL8, Form.JMP_REL32, Form.JCC_REL8, Form.JCC_REL32):
                    targets.append(inst.rel.target)
                if not inst.is_unconditional_exit:
                    targets.append(inst.end)
                for target in targets:
                    if target in index_of:
                        succ.append(index_of[target])
                    else:
                        regs = set(ALL_REGS)
                        flags = ALL_FLAGS
            self.successors.append(succ)
            self.exit_regs.append(frozenset(regs))
            self.exit_flags.append(flags)

        self.live_in_regs: List[FrozenSet[Reg32]] = [frozenset()] * n
        self.live_in_flags: List[Flag] = [NO_FLAGS] * n
        self.live_out_regs: List[FrozenSet[Reg32]] = [frozenset()] * n
        self.live_out_flags: List[Flag] = [NO_FLAGS] * n
        self._solve()

    def _solve(self) -> None:
        n = len(self.code.instructions)
        predecessors: Dict[int, List[int]] = {i: [] for i in range(n)}
        for i, succ in enumerate(self.successors):
            for j in succ:
                predecessors[j].append(i)
        worklist = list(range(n))
        queued = set(worklist)
        while worklist:
            i = worklist.pop()
            queued.discard(i)
            out_regs = set(self.exit_regs[i])
            out_flags = self.exit_flags[i]
            for j in self.successors[i]:
                out_regs |= self.live_in_regs[j]
                out_flags |= self.live_in_flags[j]
            sem = self._sems[i]
            in_regs = frozenset(sem.regs_read | (out_regs - sem.regs_written))
            in_flags = sem.flags_read | (out_flags & ~sem.flags_written)
            self.live_out_regs[i] = frozenset(out_regs)
            self.live_out_flags[i] = out_flags
            if in_regs != self.live_in_regs[i] or in_flags != self.live_in_flags[i]:
                self.live_in_regs[i] = in_regs
                self.live_in_flags[i] = in_flags
                for p in predecessors[i]:
                    if p not in queued:
                        queued.add(p)
                        worklist.append(p)

    def flags_live_after(self, i: int) -> Flag:
        return self.live_out_flags[i]

    def regs_live_before(self, i: int) -> FrozenSet[Reg32]:
        return self.live_in_regs[i]


# ==================== DEPENDENCE GRAPH ====================

class DependenceGraph:
    """Per-block ordering constraints; nodes are instruction indices within the block"""

    def __init__(self, block: Sequence[Instruction], flags_live_out: Flag = ALL_FLAGS,
                 internal: Callable[[int], bool] = lambda target: False):
        self.block = list(block)
        self.graph = nx.DiGraph()
        self.graph.add_nodes_from(range(len(self.block)))
        sems = [effective_semantics(inst, internal) for inst in self.block]
        n = len(self.block)

        for i in range(n):
            for j in range(i + 1, n):
                a, b = sems[i], sems[j]
                for reason, regs in (('reg RAW', a.regs_written & b.regs_read),
                                     ('reg WAR', a.regs_read & b.regs_written),
                                     ('reg WAW', a.regs_written & b.regs_written)):
                    if regs:
                        self._edge(i, j, 'stack-order' if regs == {Reg32.ESP} else reason)
                if a.touches_memory and b.touches_memory and (a.mem_written or b.mem_written):
                    self._edge(i, j, 'mem-order')

        self._flag_edges(sems, flags_live_out)

        if n and self.block[-1].is_control_flow:
            self.terminator: Optional[int] = n - 1
            for i in range(n - 1):
                self._edge(i, n - 1, 'control')
        else:
            self.terminator = None

    def _edge(self, i: int, j: int, reason: str) -> None:
        if self.graph.has_edge(i, j):
            self.graph[i][j]['reasons'].add(reason)
        else:
            self.graph.add_edge(i, j, reasons={reason})

    def _flag_edges(self, sems: Sequence[Semantics], flags_live_out: Flag) -> None:
        """
        Per flag bit: each reader stays after its reaching writer and before
        later writers; earlier writers stay before any live writer; the
        final writer of a live-out flag stays last among writers.
        """
        for bit in Flag:
            writers = [i for i, s in enumerate(sems) if s.flags_written & bit]
            readers = [i for i, s in enumerate(sems) if s.flags_read & bit]
            live_defs: Set[int] = set()
            for r in readers:
                reaching = [w for w in writers if w < r]
                if reaching:
                    d = reaching[-1]
                    live_defs.add(d)
                    self._edge(d, r, 'flag RAW')
                for w in writers:
                    if w > r:
                        self._edge(r, w, 'flag WAR')
            if writers and flags_live_out & bit:
                last_reader = max(readers, default=-1)
                if writers[-1] > last_reader:
                    live_defs.add(writers[-1])
            for d in live_defs:
                for w in writers:
                    if w < d:
                        self._edge(w, d, 'flag WAW')

    def reasons(self, i: int, j: int) -> Set[str]:
        return set(self.graph[i][j]['reasons']) if self.graph.has_edge(i, j) else set()

    def is_topological(self, order: Sequence[int]) -> bool:
        position = {node: k for k, node in enumerate(order)}
        if sorted(order) != list(range(len(self.block))):
            return False
        return all(position[i] < position[j] for i, j in self.graph.edges)

    def orders(self, limit: Optional[int] = None) -> Iterator[List[int]]:
        sorts = nx.all_topological_sorts(self.graph)
        return itertools.islice(sorts, limit) if limit else sorts

    def random_order(self, rng: random.Random) -> List[int]:
        """
        A uniformly random topological order when the orders fit under the
        enumeration cap; random ready-list extraction otherwise.
        """
        candidates = list(self.orders(UNIFORM_ORDER_CAP + 1))
        if len(candidates) <= UNIFORM_ORDER_CAP:
            return list(rng.choice(candidates))

        indegree = {node: self.graph.in_degree(node) for node in self.graph}
        ready = sorted(node for node, deg in indegree.items() if deg == 0)
        order: List[int] = []
        while ready:
            node = ready.pop(rng.randrange(len(ready)))
            order.append(node)
            for succ in self.graph.successors(node):
                indegree[succ] -= 1
                if indegree[succ] == 0:
                    ready.append(succ)
            ready.sort()
        return order


def build_dependence_graph(block: Sequence[Instruction], flags_live_out: Flag = ALL_FLAGS,
                           internal: Callable[[int], bool] = lambda target: False) -> DependenceGraph:
    return DependenceGraph(block, flags_live_out, internal)


def block_graphs(code: FunctionCode, liveness: Optional[Liveness] = None) -> List[Tuple[int, int, DependenceGraph]]:
    liveness = liveness or Liveness(code)
    graphs = []
    for start, end in code.blocks:
        if end <= start:
            continue
        block = code.instructions[start:end]
        graphs.append((start, end, DependenceGraph(block, liveness.flags_live_after(end - 1), code.internal)))
    return graphs


def lay_out(instructions: Sequence[Instruction], start_vaddr: int) -> List[Instruction]:
    out, vaddr = [], start_vaddr
    for inst in instructions:
        placed = inst if inst.vaddr == vaddr else inst.at(vaddr)
        out.append(placed)
        vaddr += placed.length
    return out


# ==================== EQUIVALENCE TABLE ====================

@dataclass(frozen=True)
class EquivalenceRule:
    name: str
    matches: Callable[[Instruction], bool]
    rewrite: Callable[[Instruction], List[Instruction]]
    flag_divergence: Flag


def _same_reg_pair(inst: Instruction) -> bool:
    return len(inst.operands) == 2 and inst.operands[0] == inst.operands[1]


def _add_sub(inst: Instruction) -> List[Instruction]:
    imm: Imm = inst.operands[1]
    if imm.width == 1 and imm.value == 0x80:
        return []
    other = 'sub' if inst.mnemonic == 'add' else 'add'
    return [inst.with_operands((inst.operands[0], Imm(-imm.signed, imm.width)), mnemonic=other)]


def _zeroing(inst: Instruction) -> List[Instruction]:
    return [inst.with_operands(inst.operands, mnemonic='sub' if inst.mnemonic == 'xor' else 'xor')]


def _self_test(inst: Instruction) -> List[Instruction]:
    out = []
    for mnemonic, form in (('test', Form.TEST_RR), ('or', Form.ALU_RR), ('and', Form.ALU_RR)):
        if mnemonic != inst.mnemonic:
            out.append(inst.with_operands(inst.operands, mnemonic=mnemonic, form=form))
    return out


def _mov_direction(inst: Instruction) -> List[Instruction]:
    form = Form.MOV_R_RM if inst.form == Form.MOV_RM_R else Form.MOV_RM_R
    return [inst.with_operands(inst.operands, form=form)]


EQUIVALENCE_TABLE: Tuple[EquivalenceRule, ...] = (
    EquivalenceRule(
        'add/sub imm8',
        lambda i: i.form == Form.ALU_RI8 and i.mnemonic in ('add', 'sub'),
        _add_sub, Flag.CF | Flag.OF | Flag.AF),
    EquivalenceRule(
        'add/sub imm32',
        lambda i: i.form == Form.ALU_RI32 and i.mnemonic in ('add', 'sub'),
        _add_sub, Flag.CF | Flag.OF | Flag.AF),
    EquivalenceRule(
        'xor/sub zeroing',
        lambda i: i.form == Form.ALU_RR and i.mnemonic in ('xor', 'sub') and _same_reg_pair(i),
        _zeroing, Flag.AF | Flag.PF),
    EquivalenceRule(
        'test/or/and self',
        lambda i: ((i.form == Form.TEST_RR or (i.form == Form.ALU_RR and i.mnemonic in ('or', 'and')))
                   and _same_reg_pair(i)),
        _self_test, Flag.AF),
    EquivalenceRule(
        'mov direction',
        lambda i: i.form in (Form.MOV_RM_R, Form.MOV_R_RM) and all(isinstance(o, RegOp) for o in i.operands),
        _mov_direction, NO_FLAGS),
)


def _table_samples() -> List[Instruction]:
    eax, ebx = RegOp(Reg32.EAX), RegOp(Reg32.EBX)
    return [
        Instruction.create('sub', Form.ALU_RI8, (eax, Imm(4, 1))),
        Instruction.create('add', Form.ALU_RI32, (eax, Imm(0x12345678, 4))),
        Instruction.create('xor', Form.ALU_RR, (ebx, ebx)),
        Instruction.create('test', Form.TEST_RR, (ebx, ebx)),
        Instruction.create('mov', Form.MOV_RM_R, (eax, ebx)),
    ]


def check_table_lengths() -> None:
    """Every rewrite in the table keeps the instruction length"""
    for sample in _table_samples():
        for rule in EQUIVALENCE_TABLE:
            if rule.matches(sample):
                for alt in rule.rewrite(sample):
                    if alt.length != sample.length:
                        raise AssertionError(f"{rule.name}: {sample} -> {alt} changes length")


check_table_lengths()


def equivalents(inst: Instruction) -> List[Tuple[Instruction, Flag]]:
    """Same-length alternatives of inst with the flags they may change"""
    out = []
    for rule in EQUIVALENCE_TABLE:
        if rule.matches(inst):
            out.extend((alt, rule.flag_divergence) for alt in rule.rewrite(inst) if alt.length == inst.length)
    return out


def substitution_choices(code: FunctionCode, frozen: FrozenRanges = (),
                         liveness: Optional[Liveness] = None) -> Dict[int, List[Instruction]]:
    """Index -> alternatives whose flag divergence is dead at that point"""
    liveness = liveness or Liveness(code)
    choices: Dict[int, List[Instruction]] = {}
    for i, inst in enumerate(code.instructions):
        if is_frozen(inst, frozen):
            continue
        live = liveness.flags_live_after(i)
        allowed = [alt for alt, divergence in equivalents(inst) if not divergence & live]
        if allowed:
            choices[i] = allowed
    return choices


# ==================== REGISTER REASSIGNMENT ====================

def save_restore(instructions: Sequence[Instruction]) -> Tuple[int, Set[Reg32]]:
    """(prologue length, registers saved by the prologue and restored before the ret)"""
    pattern = preservation_pattern(instructions, min_pairs=1)
    if pattern is None:
        return 0, set()
    pushes, _ = pattern
    return len(pushes), {instructions[i].operands[0].reg for i in pushes}


def referenced_registers(instructions: Sequence[Instruction]) -> Set[Reg32]:
    regs: Set[Reg32] = set()
    for inst in instructions:
        for op in inst.operands:
            if isinstance(op, RegOp):
                regs.add(op.reg)
            elif isinstance(op, Mem):
                regs.add(op.base)
            elif isinstance(op, Reg8Op):
                regs.add(op.reg.parent)
    return regs


def eligible_registers(code: FunctionCode, liveness: Optional[Liveness] = None) -> List[Reg32]:
    """
    Registers that may take part in a swap: unreferenced, or saved by the
    prologue, restored by the epilogue and dead where the body starts.

    None when the function calls into the image: the callee reads and
    writes registers under their original names.
    """
    if code.has_internal_calls:
        return []
    insts = code.instructions
    candidates = [r for r in REASSIGNABLE if not (code.has_calls and r in CALL_CLOBBERED)]
    byte_regs = {op.reg.parent for inst in insts for op in inst.operands if isinstance(op, Reg8Op)}
    referenced = referenced_registers(insts)
    k, saved = save_restore(insts)
    liveness = liveness or Liveness(code)
    live_at_body = liveness.regs_live_before(k) if k < len(insts) else frozenset()

    eligible = []
    for r in candidates:
        if r in byte_regs:
            continue
        if r not in referenced or (r in saved and r not in live_at_body):
            eligible.append(r)
    return eligible


def eligible_pairs(code: FunctionCode, liveness: Optional[Liveness] = None) -> List[Tuple[Reg32, Reg32]]:
    eligible = eligible_registers(code, liveness)
    referenced = referenced_registers(code.instructions)
    return [(a, b) for a, b in itertools.combinations(eligible, 2) if a in referenced or b in referenced]


def rename_registers(instructions: Sequence[Instruction], a: Reg32, b: Reg32) -> List[Instruction]:
    """Swap every occurrence of a and b in register fields and memory bases"""
    mapping = {a: b, b: a}

    def swap(op):
        if isinstance(op, RegOp) and op.reg in mapping:
            return RegOp(mapping[op.reg])
        if isinstance(op, Mem) and op.base in mapping:
            return Mem(mapping[op.base], op.disp, op.disp_width)
        return op

    out = []
    for inst in instructions:
        operands = tuple(swap(op) for op in inst.operands)
        out.append(inst if operands == inst.operands else inst.with_operands(operands))
    return out


# ==================== OPERATIONS ====================

def substitute_equivalent(image: BinaryImage, fn: FunctionRef, rng: random.Random,
                          frozen: FrozenRanges = ()) -> TransformOutcome:
    """
    Replace each table-matching instruction with probability 1/2, only when
    the flags the replacement may change are dead afterwards.
    """
    code = load_function(image, fn)
    if code is None or not fn.allows(TransformType.EQV):
        return TransformOutcome(image, False, transform=TransformType.EQV)
    new = list(code.instructions)
    for i, alternatives in substitution_choices(code, frozen).items():
        if rng.random() < 0.5:
            new[i] = rng.choice(alternatives)
    return _outcome(image, code, new, TransformType.EQV)


def reassign_registers(image: BinaryImage, fn: FunctionRef, rng: random.Random,
                       frozen: FrozenRanges = ()) -> TransformOutcome:
    """Swap a random eligible register pair throughout the function"""
    code = load_function(image, fn)
    if code is None or not fn.allows(TransformType.REGS):
        return TransformOutcome(image, False, transform=TransformType.REGS)
    if any(is_frozen(inst, frozen) for inst in code.instructions):
        return TransformOutcome(image, False, transform=TransformType.REGS)
    pairs = eligible_pairs(code)
    if not pairs:
        return TransformOutcome(image, False, transform=TransformType.REGS)
    a, b = rng.choice(pairs)
    logger.debug(f"function {fn.index}: swapping {a} and {b}")
    return _outcome(image, code, rename_registers(code.instructions, a, b), TransformType.REGS)


def reorder_instructions(image: BinaryImage, fn: FunctionRef, rng: random.Random,
                         frozen: FrozenRanges = ()) -> TransformOutcome:
    """Emit each block in a random topological order of its dependence graph"""
    code = load_function(image, fn)
    if code is None or not fn.allows(TransformType.ORD1):
        return TransformOutcome(image, False, transform=TransformType.ORD1)
    new = list(code.instructions)
    for start, end, graph in block_graphs(code):
        block = code.instructions[start:end]
        if any(is_frozen(inst, frozen) for inst in block):
            continue
        order = graph.random_order(rng)
        new[start:end] = lay_out([block[k] for k in order], block[0].vaddr)
    return _outcome(image, code, new, TransformType.ORD1)


def permute_preservation(instructions: Sequence[Instruction], permutation: Sequence[int]) -> List[Instruction]:
    """Apply permutation to the prologue pushes and the mirrored order to the pops"""
    pattern = preservation_pattern(instructions)
    if pattern is None:
        return list(instructions)
    pushes, pops = pattern
    regs = [instructions[i].operands[0] for i in pushes]
    order = [regs[p] for p in permutation]
    new = list(instructions)
    for slot, reg in zip(pushes, order):
        new[slot] = Instruction.create('push', Form.PUSH_R, (reg,), instructions[slot].vaddr)
    for slot, reg in zip(pops, reversed(order)):
        new[slot] = Instruction.create('pop', Form.POP_R, (reg,), instructions[slot].vaddr)
    return new


def reorder_preservation(image: BinaryImage, fn: FunctionRef, rng: random.Random,
                         frozen: FrozenRanges = ()) -> TransformOutcome:
    """Permute the register save sequence, keeping pops in the mirrored order"""
    code = load_function(image, fn)
    if code is None or not fn.allows(TransformType.ORD2):
        return TransformOutcome(image, False, transform=TransformType.ORD2)
    pattern = preservation_pattern(code.instructions)
    if pattern is None:
        return TransformOutcome(image, False, transform=TransformType.ORD2)
    pushes, pops = pattern
    if any(is_frozen(code.instructions[i], frozen) for i in pushes + pops):
        return TransformOutcome(image, False, transform=TransformType.ORD2)
    k = len(pushes)
    permutation = list(range(k))
    while permutation == list(range(k)):
        rng.shuffle(permutation)
    return _outcome(image, code, permute_preservation(code.instructions, permutation), TransformType.ORD2)


IPR_OPERATIONS = {
    TransformType.EQV: substitute_equivalent,
    TransformType.REGS: reassign_registers,
    TransformType.ORD1: reorder_instructions,
    TransformType.ORD2: reorder_preservation,
}


def apply_ipr(transform: TransformType, image: BinaryImage, fn: FunctionRef, rng: random.Random,
              frozen: FrozenRanges = ()) -> TransformOutcome:
    return IPR_OPERATIONS[transform](image, fn, rng, frozen)


def apply_random_ipr(image: BinaryImage, fn: FunctionRef, rng: random.Random,
                     frozen: FrozenRanges = ()) -> TransformOutcome:
    """Uniformly pick one of the four IPR operations and apply it"""
    transform = rng.choice(IPR_TRANSFORMS)
    return apply_ipr(transform, image, fn, rng, frozen)


def available_transforms(image: BinaryImage, fn: FunctionRef, frozen: FrozenRanges = ()) -> List[TransformType]:
    """IPR operations that can change fn's bytes right now"""
    code = load_function(image, fn)
    if code is None:
        return []
    liveness = Liveness(code)
    available = []
    if fn.allows(TransformType.EQV) and substitution_choices(code, frozen, liveness):
        available.append(TransformType.EQV)
    if (fn.allows(TransformType.REGS) and not any(is_frozen(i, frozen) for i in code.instructions)
            and eligible_pairs(code, liveness)):
        available.append(TransformType.REGS)
    if fn.allows(TransformType.ORD1):
        for start, end, graph in block_graphs(code, liveness):
            if not any(is_frozen(i, frozen) for i in code.instructions[start:end]) and \
                    len(list(graph.orders(2))) > 1:
                available.append(TransformType.ORD1)
                break
    if fn.allows(TransformType.ORD2):
        available.append(TransformType.ORD2)
    return available


def frozen_in(frozen: Iterable[Tuple[int, int]], fn: FunctionRef) -> List[Tuple[int, int]]:
    return [(s, e) for s, e in frozen if s < fn.end and fn.vaddr < e]
