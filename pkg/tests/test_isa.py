"""
Unit tests for the instruction subset codec.
"""

import random

import pytest

from mbxlab.isa import (
    ALL_FLAGS,
    EncodingError,
    Flag,
    Form,
    Imm,
    Instruction,
    Mem,
    Reg32,
    RegOp,
    Undecodable,
    assemble,
    assemble_many,
    decode_instruction,
    disassemble_range,
    encode_all,
    random_instruction,
    relocate,
)


class TestEncoding:

    @pytest.mark.parametrize("text, expected", [
        ("nop", "90"),
        ("mov eax, ebx", "89d8"),
        ("mov ecx, [ebp-4]", "8b4dfc"),
        ("mov [ebp-8], edx", "8955f8"),
        ("mov esi, 0x12345678", "be78563412"),
        ("add eax, 1", "83c001"),
        ("sub esp, 16", "83ec10"),
        ("xor ebx, ebx", "31db"),
        ("add eax, dword 1", "81c001000000"),
        ("push ebp", "55"),
        ("pop edi", "5f"),
        ("push 0x6e6f6f4c", "684c6f6f6e"),
        ("bswap eax", "0fc8"),
        ("xchg ah, al", "86c4"),
        ("shl ecx, 3", "c1e103"),
        ("neg edx", "f7da"),
        ("not edx", "f7d2"),
        ("test eax, eax", "85c0"),
        ("lea eax, [ebx+0x10]", "8d4310"),
        ("pushfd", "9c"),
        ("popfd", "9d"),
        ("ret", "c3"),
    ])
    def test_known_encodings(self, text, expected):
        """Test that assembled lines match the reference machine code"""
        assert assemble(text, 0x1000).raw.hex() == expected

    def test_call_is_relative_to_next_instruction(self):
        """Test that call encodes target minus end of instruction"""
        inst = assemble("call 0x2000", 0x1000)
        assert inst.raw == bytes.fromhex("e8fb0f0000")
        assert inst.rel.target == 0x2000

    def test_short_and_near_jumps(self):
        """Test that jumps pick rel8 when in range and honour size hints"""
        assert assemble("jmp 0x1010", 0x1000).form == Form.JMP_REL8
        assert assemble("jmp near 0x1010", 0x1000).form == Form.JMP_REL32
        assert assemble("jne 0x5000", 0x1000).form == Form.JCC_REL32

    def test_rel8_out_of_range_raises(self):
        """Test that a forced short jump beyond 127 bytes is rejected"""
        with pytest.raises(EncodingError):
            assemble("jmp short 0x2000", 0x1000)

    def test_esp_memory_base_rejected(self):
        """Test that esp-based memory operands are outside the subset"""
        with pytest.raises(EncodingError):
            Mem(Reg32.ESP, 4)

    def test_unknown_mnemonic_rejected(self):
        """Test that mnemonics outside the subset raise"""
        with pytest.raises(EncodingError):
            assemble("imul eax, ebx")

    def test_ebp_memory_gets_disp8(self):
        """Test that [ebp] is encoded with an explicit zero displacement"""
        assert Mem(Reg32.EBP).disp_width == 1
        assert assemble("mov eax, [ebp]").raw.hex() == "8b4500"

    def test_assemble_many_lays_out_consecutively(self):
        """Test that consecutive lines get consecutive addresses"""
        insts = assemble_many(["push ebx", "mov ebx, 1", "ret"], 0x4000)
        assert [i.vaddr for i in insts] == [0x4000, 0x4001, 0x4006]


class TestDecoding:

    def test_random_round_trip(self):
        """Test that decode(encode(i)) == i over random subset instructions"""
        rng = random.Random(1234)
        for _ in range(3000):
            inst = random_instruction(rng, 0x10000)
            decoded = decode_instruction(inst.raw + b'\x90' * 4, 0x10000)
            assert decoded == inst, f"{inst} decoded as {decoded}"
            assert decoded.raw == inst.raw

    def test_out_of_subset_bytes(self):
        """Test that int3, ud2 and SIB forms are undecodable"""
        for raw in (b'\xcc', b'\x0f\x0b', b'\x8b\x04\x24'):
            assert isinstance(decode_instruction(raw), Undecodable)

    def test_truncated_instruction(self):
        """Test that a cut-off immediate reports truncation"""
        result = decode_instruction(b'\xb8\x01', 0)
        assert isinstance(result, Undecodable)
        assert result.reason == "truncated"

    def test_empty_input(self):
        """Test that empty input is undecodable"""
        assert isinstance(decode_instruction(b''), Undecodable)

    def test_disassemble_stops_at_first_undecodable(self):
        """Test that the linear sweep reports the failing offset"""
        listing = disassemble_range(bytes.fromhex("9090cc90"), 0x1000)
        assert not listing.ok
        assert listing.error.offset == 2
        assert len(listing.instructions) == 2

    def test_decode_mem_forms(self):
        """Test that disp8 and disp32 memory operands keep their width"""
        short = decode_instruction(bytes.fromhex("8b4dfc"))
        wide = decode_instruction(bytes.fromhex("8b8d00010000"))
        assert short.operands[1] == Mem(Reg32.EBP, -4, 1)
        assert wide.operands[1] == Mem(Reg32.EBP, 0x100, 4)

    def test_relocate_keeps_absolute_targets(self):
        """Test that moving code re-encodes branches to the same target"""
        insts = assemble_many(["nop", "call 0x3000"], 0x1000)
        moved = relocate(insts, 0x2000)
        assert moved[1].rel.target == 0x3000
        assert moved[1].raw != insts[1].raw


class TestSemantics:

    def test_zeroing_reads_nothing(self):
        """Test that xor r, r and sub r, r have no register inputs"""
        for text in ("xor eax, eax", "sub ecx, ecx"):
            assert not assemble(text).semantics.regs_read

    def test_inc_preserves_carry(self):
        """Test that inc writes every arithmetic flag except CF"""
        written = assemble("inc eax").semantics.flags_written
        assert not written & Flag.CF
        assert written & Flag.ZF

    def test_jcc_reads_condition_flags(self):
        """Test that je reads ZF and jl reads SF and OF"""
        assert assemble("je 0x10", 0).semantics.flags_read == Flag.ZF
        assert assemble("jl 0x10", 0).semantics.flags_read == Flag.SF | Flag.OF

    def test_call_clobbers_scratch_registers(self):
        """Test that an external call writes eax, ecx and edx"""
        written = assemble("call 0x70000000", 0x1000).semantics.regs_written
        assert {Reg32.EAX, Reg32.ECX, Reg32.EDX} <= written

    def test_pushfd_reads_all_flags(self):
        """Test that pushfd depends on every tracked flag"""
        assert assemble("pushfd").semantics.flags_read == ALL_FLAGS

    def test_adc_reads_carry(self):
        """Test that adc consumes CF"""
        assert assemble("adc eax, 1").semantics.flags_read & Flag.CF


class TestCapstoneCrossCheck:

    @pytest.fixture
    def cs(self):
        capstone = pytest.importorskip("capstone")
        return capstone.Cs(capstone.CS_ARCH_X86, capstone.CS_MODE_32)

    @pytest.mark.parametrize("text", [
        "mov eax, ebx", "mov ecx, [ebp-4]", "add eax, 1", "sub esp, 16", "xor ebx, ebx",
        "push ebp", "pop edi", "bswap eax", "shl ecx, 3", "sar edx, 1", "neg edx", "not edx",
        "test eax, eax", "lea eax, [ebx+0x10]", "inc esi", "dec edi", "ret", "nop",
    ])
    def test_mnemonics_agree(self, cs, text):
        """Test that capstone decodes our encodings to the same mnemonic and length"""
        inst = assemble(text, 0x1000)
        decoded = list(cs.disasm(inst.raw, 0x1000))
        assert len(decoded) == 1
        assert decoded[0].mnemonic == inst.mnemonic
        assert decoded[0].size == inst.length

    def test_random_lengths_agree(self, cs):
        """Test that capstone agrees on the length of random subset instructions"""
        rng = random.Random(99)
        for _ in range(500):
            inst = random_instruction(rng, 0x10000)
            decoded = list(cs.disasm(inst.raw, 0x10000))
            assert decoded and decoded[0].size == inst.length


class TestInstruction:

    def test_with_operands_reencodes(self):
        """Test that replacing operands produces fresh bytes"""
        inst = assemble("add eax, 4")
        alt = inst.with_operands((RegOp(Reg32.EAX), Imm(-4, 1)), mnemonic='sub')
        assert alt.raw.hex() == "83e8fc"
        assert alt.length == inst.length

    def test_encode_all_concatenates(self):
        """Test that encode_all joins raw bytes in order"""
        insts = assemble_many(["push ebx", "pop ebx"])
        assert encode_all(insts) == b'\x53\x5b'

    def test_create_validates_form(self):
        """Test that a mnemonic cannot take a foreign form"""
        with pytest.raises(EncodingError):
            Instruction.create('push', Form.ALU_RR, (RegOp(Reg32.EAX), RegOp(Reg32.EBX)))


# Run tests with:
# pytest tests/test_isa.py -v
