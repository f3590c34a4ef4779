"""
Unit tests for the in-place randomization transforms.
"""

import random

import pytest

from mbxlab.container import TransformType
from mbxlab.ipr import (
    DependenceGraph,
    Liveness,
    apply_ipr,
    apply_random_ipr,
    available_transforms,
    eligible_pairs,
    equivalents,
    load_function,
    permute_preservation,
    rename_registers,
    substitution_choices,
)
from mbxlab.isa import Flag, Reg32, assemble, assemble_many
from mbxlab.vm import check_equivalence

from tests.conftest import SAVER_LINES, assemble_image

IPR = (TransformType.EQV, TransformType.REGS, TransformType.ORD1, TransformType.ORD2)


class TestTransformsPreserveBehaviour:

    @pytest.mark.parametrize("transform", IPR)
    def test_saver_function(self, saver_image, transform):
        """Test that each transform type keeps the function equivalent"""
        fn = saver_image.functions[0]
        changed = 0
        for seed in range(10):
            outcome = apply_ipr(transform, saver_image, fn, random.Random(seed))
            assert outcome.image.functions[0].length == fn.length
            if outcome.changed:
                changed += 1
                assert check_equivalence(saver_image, outcome.image, 0, trials=20)
        assert changed

    def test_generated_image_random_walk(self, generated_image):
        """Test that chained random IPR applications keep every function equivalent"""
        rng = random.Random(5)
        image = generated_image
        for _ in range(3):
            for index in range(len(image.functions)):
                image = apply_random_ipr(image, image.functions[index], rng).image
        assert image.code_bytes != generated_image.code_bytes
        for fn in generated_image.functions:
            assert check_equivalence(generated_image, image, fn.index, trials=10), f"function {fn.index}"

    def test_sizes_unchanged(self, generated_image):
        """Test that IPR never changes section or function sizes"""
        rng = random.Random(8)
        image = generated_image
        for index in range(len(image.functions)):
            image = apply_random_ipr(image, image.functions[index], rng).image
        assert [len(s.data) for s in image.sections] == [len(s.data) for s in generated_image.sections]
        assert [fn.length for fn in image.functions] == [fn.length for fn in generated_image.functions]


class TestSubstitution:

    def test_add_sub_equivalent(self):
        """Test that add r, imm8 maps to sub r, -imm8 of the same length"""
        alternatives = equivalents(assemble("add eax, 4"))
        assert [alt.raw.hex() for alt, _ in alternatives] == ["83e8fc"]

    def test_minus_128_has_no_mirror(self):
        """Test that -128 cannot be negated within imm8"""
        assert equivalents(assemble("add eax, -128")) == []

    def test_flag_divergence_blocks_substitution(self):
        """Test that a live CF prevents add/sub substitution"""
        image = assemble_image(["add eax, 4", "adc ebx, 0", "ret"])
        code = load_function(image, image.functions[0])
        assert 0 not in substitution_choices(code)

    def test_dead_flags_allow_substitution(self):
        """Test that flags overwritten later allow add/sub substitution"""
        image = assemble_image(["add eax, 4", "xor ebx, ecx", "ret"])
        code = load_function(image, image.functions[0])
        assert 0 in substitution_choices(code)

    def test_frozen_instructions_untouched(self):
        """Test that frozen ranges are excluded from substitution"""
        image = assemble_image(["add eax, 4", "ret"])
        code = load_function(image, image.functions[0])
        assert substitution_choices(code, frozen=[(0x1000, 0x1003)]) == {}

    def test_zeroing_idiom_pair(self):
        """Test that xor r, r and sub r, r substitute for each other"""
        alternatives = equivalents(assemble("xor ecx, ecx"))
        assert [alt.mnemonic for alt, _ in alternatives] == ['sub']


class TestRegisterReassignment:

    def test_eligible_pairs_include_saved_registers(self, saver_image):
        """Test that saved-and-dead registers pair with unreferenced ones"""
        code = load_function(saver_image, saver_image.functions[0])
        pairs = eligible_pairs(code)
        assert (Reg32.EBX, Reg32.EDI) in pairs
        assert all(Reg32.EAX not in pair for pair in pairs)

    def test_calls_exclude_scratch_registers(self):
        """Test that ecx and edx are not reassigned around calls"""
        image = assemble_image(["push ebx", "mov ebx, 1", "call 0x70000000", "pop ebx", "ret"])
        code = load_function(image, image.functions[0])
        for pair in eligible_pairs(code):
            assert Reg32.ECX not in pair and Reg32.EDX not in pair

    def test_internal_call_blocks_reassignment(self):
        """Test that a function calling into the image keeps its register names"""
        # caller is 13 bytes, so the callee starts at 0x100d
        image = assemble_image(["push ebx", "mov ebx, 5", "call 0x100d", "pop ebx", "ret"],
                               ["mov eax, ebx", "ret"])
        caller = image.functions[0]
        assert caller.allows(TransformType.REGS)
        assert eligible_pairs(load_function(image, caller)) == []
        assert TransformType.REGS not in available_transforms(image, caller)
        for seed in range(10):
            outcome = apply_ipr(TransformType.REGS, image, caller, random.Random(seed))
            assert not outcome.changed
            assert check_equivalence(image, outcome.image, caller, trials=20)

    def test_rename_swaps_both_ways(self):
        """Test that renaming swaps register fields and memory bases"""
        insts = assemble_many(["mov ebx, [esi+4]", "add esi, ebx"])
        renamed = rename_registers(insts, Reg32.EBX, Reg32.ESI)
        assert [str(i) for i in renamed] == ["mov esi, [ebx+0x4]", "add ebx, esi"]


class TestReordering:

    def test_independent_instructions_commute(self):
        """Test that instructions without shared resources have no edge"""
        block = assemble_many(["mov ebx, 1", "mov esi, 2", "add ebx, esi"])
        graph = DependenceGraph(block)
        assert not graph.graph.has_edge(0, 1)
        assert graph.graph.has_edge(0, 2) and graph.graph.has_edge(1, 2)
        assert len(list(graph.orders())) == 2

    def test_flag_reader_stays_after_writer(self):
        """Test that a conditional branch follows its flag producer"""
        block = assemble_many(["cmp eax, 1", "mov ebx, 2", "je 0x40"], 0)
        graph = DependenceGraph(block)
        assert 'flag RAW' in graph.reasons(0, 2)
        assert graph.terminator == 2

    def test_memory_accesses_ordered(self):
        """Test that a store and a later load stay in order"""
        block = assemble_many(["mov [ebp-4], eax", "mov ebx, [ebp-8]"])
        assert 'mem-order' in DependenceGraph(block).reasons(0, 1)

    def test_dead_flags_do_not_constrain(self):
        """Test that writers of dead flags may be reordered"""
        block = assemble_many(["add eax, 1", "add ebx, 1"])
        graph = DependenceGraph(block, flags_live_out=Flag(0))
        assert len(list(graph.orders())) == 2

    def test_random_order_is_topological(self, saver_image):
        """Test that random orders respect the dependence graph"""
        code = load_function(saver_image, saver_image.functions[0])
        graph = DependenceGraph(code.instructions)
        rng = random.Random(0)
        for _ in range(20):
            assert graph.is_topological(graph.random_order(rng))


class TestPreservationReordering:

    def test_pops_mirror_pushes(self):
        """Test that permuting pushes reverses the pops accordingly"""
        insts = assemble_many(SAVER_LINES, 0x1000)
        permuted = permute_preservation(insts, [1, 0])
        assert [str(i) for i in permuted[:2]] == ["push esi", "push ebx"]
        assert [str(i) for i in permuted[6:8]] == ["pop ebx", "pop esi"]

    def test_available_transforms(self, saver_image):
        """Test that the reference function offers all four IPR types"""
        assert set(available_transforms(saver_image, saver_image.functions[0])) == set(IPR)

    def test_liveness_at_ret(self, saver_image):
        """Test that every register is live before ret and no flag after it"""
        code = load_function(saver_image, saver_image.functions[0])
        liveness = Liveness(code)
        last = len(code.instructions) - 1
        assert Reg32.EAX in liveness.regs_live_before(last)
        assert liveness.flags_live_after(last) == Flag(0)


# Run tests with:
# pytest tests/test_ipr.py -v
