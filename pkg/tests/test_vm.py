"""
Unit tests for the interpreter and the equivalence oracle.
"""

import pytest

from config.settings import VMSettings
from mbxlab.container import build_image
from mbxlab.isa import Flag, Reg32, assemble, assemble_many
from mbxlab.vm import (
    Termination,
    TrapReason,
    canned_call_effect,
    check_equivalence,
    check_image_equivalence,
    exec_instruction,
    exec_sequence,
    random_state,
    run_function,
)

from tests.conftest import assemble_image


class TestFlags:

    @pytest.fixture
    def zero_eax(self):
        state = random_state(0)
        state.set_reg(Reg32.EAX, 0)
        return state

    def test_add_negative_immediate(self, zero_eax):
        """Test that add eax, -4 from zero clears CF and AF and sets SF"""
        after = exec_sequence(zero_eax, [assemble("add eax, -4")])
        assert after.reg(Reg32.EAX) == 0xFFFFFFFC
        assert not after.flags & Flag.CF
        assert not after.flags & Flag.AF
        assert after.flags & Flag.SF
        assert not after.flags & Flag.ZF
        assert not after.flags & Flag.OF

    def test_sub_positive_immediate(self, zero_eax):
        """Test that sub eax, 4 from zero gives the same value but sets CF and AF"""
        after = exec_sequence(zero_eax, [assemble("sub eax, 4")])
        assert after.reg(Reg32.EAX) == 0xFFFFFFFC
        assert after.flags & Flag.CF
        assert after.flags & Flag.AF
        assert after.flags & Flag.SF

    def test_parity_of_low_byte(self, zero_eax):
        """Test that PF reflects the low byte only"""
        after = exec_sequence(zero_eax, [assemble("add eax, 0x103")])
        assert after.flags & Flag.PF

    def test_inc_keeps_carry(self, zero_eax):
        """Test that inc leaves CF as it was"""
        carried = exec_sequence(zero_eax, [assemble("sub eax, 4"), assemble("inc eax")])
        assert carried.flags & Flag.CF

    def test_xor_clears_carry_and_overflow(self, zero_eax):
        """Test that logic operations zero CF and OF"""
        after = exec_sequence(zero_eax, [assemble("sub eax, 4"), assemble("xor eax, 1")])
        assert not after.flags & (Flag.CF | Flag.OF)


class TestExecution:

    def test_push_pop_round_trip(self):
        """Test that push then pop restores esp and the value"""
        state = random_state(5)
        after = exec_sequence(state, assemble_many(["push ebx", "pop ecx"]))
        assert after.esp == state.esp
        assert after.reg(Reg32.ECX) == state.reg(Reg32.EBX)

    def test_xchg_halves(self):
        """Test that xchg ah, al swaps the two low bytes"""
        state = random_state(6)
        state.set_reg(Reg32.EAX, 0x11223344)
        after = exec_sequence(state, [assemble("xchg ah, al")])
        assert after.reg(Reg32.EAX) == 0x11224433

    def test_bswap(self):
        """Test that bswap reverses the byte order"""
        state = random_state(6)
        state.set_reg(Reg32.EDX, 0x11223344)
        after = exec_sequence(state, [assemble("bswap edx")])
        assert after.reg(Reg32.EDX) == 0x44332211

    def test_memory_store_and_load(self):
        """Test that a store through ebp can be read back"""
        state = random_state(7)
        state.set_reg(Reg32.EBP, state.esp)
        after = exec_sequence(state, assemble_many(["mov [ebp-8], ebx", "mov eax, [ebp-8]"]))
        assert after.reg(Reg32.EAX) == state.reg(Reg32.EBX)

    def test_sequence_rejects_taken_branch(self):
        """Test that straight-line execution refuses branches"""
        with pytest.raises(ValueError):
            exec_sequence(random_state(1), [assemble("jmp 0x20", 0)])

    def test_exec_instruction_is_pure(self):
        """Test that single-stepping leaves the input state untouched"""
        state = random_state(2)
        before = list(state.regs)
        after = exec_instruction(state, assemble("inc eax", 0x1000))
        assert state.regs == before
        assert after.eip == 0x1001

    def test_random_state_is_deterministic(self):
        """Test that equal seeds give equal states with an aligned esp"""
        a, b = random_state(42), random_state(42)
        assert a.regs == b.regs and a.memory == b.memory
        assert a.esp % 4 == 0
        assert random_state(43).regs != a.regs


class TestRunFunction:

    def test_returns_to_caller(self):
        """Test that a balanced function terminates by ret"""
        image = assemble_image(["push ebx", "mov ebx, 5", "add eax, ebx", "pop ebx", "ret"])
        state = random_state(3)
        outcome = run_function(image, image.functions[0], state)
        assert outcome.termination == Termination.RET
        assert outcome.final_state.reg(Reg32.EAX) == (state.reg(Reg32.EAX) + 5) & 0xFFFFFFFF
        assert outcome.final_state.reg(Reg32.EBX) == state.reg(Reg32.EBX)
        assert outcome.final_state.esp == state.esp

    def test_infinite_loop_hits_step_limit(self):
        """Test that a self-jump stops at the step limit"""
        image = assemble_image(["jmp short 0x1000"])
        outcome = run_function(image, image.functions[0], random_state(0), step_limit=100)
        assert outcome.termination == Termination.STEP_LIMIT

    def test_undecodable_bytes_trap(self):
        """Test that executing an island traps"""
        image = build_image(b'\x90\xcc\x90', [(0, 3)])
        outcome = run_function(image, image.functions[0], random_state(0))
        assert outcome.termination == Termination.TRAP
        assert outcome.trap_reason == TrapReason.UNDECODABLE

    def test_jump_outside_code_traps(self):
        """Test that leaving the code sections is a bad jump"""
        image = assemble_image(["jmp 0x9000"])
        outcome = run_function(image, image.functions[0], random_state(0))
        assert outcome.trap_reason == TrapReason.BAD_JUMP

    def test_stack_overflow_traps(self):
        """Test that pushing past the stack base traps"""
        vm = VMSettings(stack_size=0x400)
        image = assemble_image(["push eax", "jmp short 0x1000"])
        outcome = run_function(image, image.functions[0], random_state(0, vm), vm_settings=vm)
        assert outcome.trap_reason == TrapReason.STACK_OVERFLOW

    def test_external_call_is_canned(self):
        """Test that calls leaving the image set eax, ecx and edx deterministically"""
        image = assemble_image(["call 0x70000010", "ret"])
        state = random_state(4)
        outcome = run_function(image, image.functions[0], state)
        final = outcome.final_state
        expected = canned_call_effect(0x70000010)
        assert (final.reg(Reg32.EAX), final.reg(Reg32.ECX), final.reg(Reg32.EDX)) == expected
        assert [target for target, _ in final.call_trace] == [0x70000010]

    def test_internal_call_runs_callee(self):
        """Test that calls inside the image execute the callee"""
        image = assemble_image(["call 0x1006", "ret"], ["mov eax, 9", "ret"])
        outcome = run_function(image, image.functions[0], random_state(4))
        assert outcome.termination == Termination.RET
        assert outcome.final_state.reg(Reg32.EAX) == 9


class TestEquivalence:

    def test_equivalent_idioms(self):
        """Test that mov eax, 0 and xor eax, eax agree on registers"""
        a = assemble_image(["mov eax, 0", "ret"])
        b = assemble_image(["xor eax, eax", "ret"])
        verdict = check_equivalence(a, b, 0, trials=20)
        assert verdict
        assert verdict.trials == 20

    def test_divergence_has_witness(self):
        """Test that differing results yield a witness state"""
        a = assemble_image(["mov eax, 1", "ret"])
        b = assemble_image(["mov eax, 2", "ret"])
        verdict = check_equivalence(a, b, 0, trials=5)
        assert not verdict
        assert verdict.witness is not None
        assert verdict.trials == 1
        assert verdict.detail

    def test_dead_stack_is_ignored(self):
        """Test that scratch writes below the final esp are not compared"""
        a = assemble_image(["push eax", "pop eax", "ret"])
        b = assemble_image(["push ebx", "pop ebx", "ret"])
        assert check_equivalence(a, b, 0, trials=10)

    def test_image_verdicts_per_function(self, saver_image):
        """Test that every function gets a verdict"""
        verdicts = check_image_equivalence(saver_image, saver_image, trials=3)
        assert list(verdicts) == [0]
        assert all(verdicts.values())


# Run tests with:
# pytest tests/test_vm.py -v
