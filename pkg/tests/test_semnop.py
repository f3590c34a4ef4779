"""
Unit tests for semantic nop generation.
"""

import random

import pytest

from mbxlab.isa import Reg32, disassemble_range
from mbxlab.semnop import (
    ClobberClass,
    concat,
    generate_semnop,
    generate_semnop_exact,
    nop_padding,
    preserves_protected,
    set_int_slot,
    set_slot_byte,
    slot_byte_positions,
)
from mbxlab.vm import random_state


class TestGrammar:

    @pytest.mark.parametrize("clobber_class", list(ClobberClass))
    def test_protected_resources_preserved(self, clobber_class):
        """Test that sampled nops leave every protected resource unchanged"""
        rng = random.Random(len(clobber_class.value))
        states = [random_state(seed) for seed in range(5)]
        for _ in range(200):
            nop = generate_semnop(rng, clobber_class=clobber_class)
            for state in states:
                assert preserves_protected(nop, state), [str(i) for i in nop.instructions]

    def test_bound_register_is_recorded(self):
        """Test that register classes carry the sacrificial register"""
        nop = generate_semnop(random.Random(1), clobber_class=ClobberClass.REG, register=Reg32.EDX)
        assert nop.register == Reg32.EDX
        assert generate_semnop(random.Random(1)).register is None

    def test_esp_never_referenced(self):
        """Test that nops never name esp explicitly"""
        rng = random.Random(2)
        for _ in range(200):
            nop = generate_semnop(rng, clobber_class=ClobberClass.FLAGS_REG)
            assert nop.register != Reg32.ESP
            for inst in nop.instructions:
                assert 'esp' not in str(inst)

    def test_depth_must_be_positive(self):
        """Test that a zero depth cap is rejected"""
        with pytest.raises(ValueError):
            generate_semnop(random.Random(0), max_depth=0)

    def test_encoding_decodes(self):
        """Test that the encoded bytes disassemble to the recorded instructions"""
        rng = random.Random(3)
        for _ in range(100):
            nop = generate_semnop(rng)
            listing = disassemble_range(nop.encoded, 0)
            assert listing.ok
            assert listing.instructions == list(nop.placed(0))


class TestExactLength:

    def test_every_length(self):
        """Test that exact generation hits each requested length"""
        rng = random.Random(4)
        for n in range(0, 64):
            nop = generate_semnop_exact(rng, n)
            assert nop.length == n
            assert disassemble_range(nop.encoded, 0).ok

    def test_exact_nops_preserve_everything(self):
        """Test that exact-length nops are class-none nops"""
        rng = random.Random(5)
        state = random_state(9)
        for n in (5, 13, 40):
            nop = generate_semnop_exact(rng, n)
            assert nop.clobber_class == ClobberClass.NONE
            assert preserves_protected(nop, state)

    def test_negative_length_rejected(self):
        """Test that a negative length raises"""
        with pytest.raises(ValueError):
            generate_semnop_exact(random.Random(0), -1)

    def test_padding_and_concat(self):
        """Test that padding is plain nops and concat adds lengths"""
        pad = nop_padding(3)
        assert pad.encoded == b'\x90\x90\x90'
        joined = concat([pad, nop_padding(2)])
        assert joined.length == 5


class TestSlots:

    @pytest.fixture
    def slotted(self):
        rng = random.Random(6)
        for _ in range(500):
            nop = generate_semnop(rng)
            if nop.int_slots:
                return nop
        pytest.fail("no nop with free immediates in 500 samples")

    def test_any_slot_value_preserves(self, slotted):
        """Test that overwriting a free immediate keeps the nop a nop"""
        state = random_state(1)
        for value in (0, 1, 0x7F, 0x80, 0xFF):
            nop = set_int_slot(slotted, 0, value)
            assert preserves_protected(nop, state)
            assert nop.length == slotted.length

    def test_slot_byte_positions_writable(self, slotted):
        """Test that every reported free byte can be set"""
        for position in slot_byte_positions(slotted):
            nop = set_slot_byte(slotted, position, 0xA5)
            assert nop.encoded[position] == 0xA5
            assert disassemble_range(nop.encoded, 0).ok

    def test_non_slot_byte_rejected(self, slotted):
        """Test that opcode bytes are not writable"""
        free = set(slot_byte_positions(slotted))
        fixed = next(p for p in range(slotted.length) if p not in free
                     and not any(s.partner is not None and s.partner <= p < s.partner + s.width
                                 for s in slotted.int_slots))
        with pytest.raises(IndexError):
            set_slot_byte(slotted, fixed, 0)

    def test_slot_index_checked(self, slotted):
        """Test that out-of-range slots raise"""
        with pytest.raises(IndexError):
            set_int_slot(slotted, len(slotted.int_slots), 0)

    def test_oversized_value_rejected(self, slotted):
        """Test that values wider than the slot raise"""
        with pytest.raises(ValueError):
            set_int_slot(slotted, 0, 1 << (8 * slotted.int_slots[0].width))


# Run tests with:
# pytest tests/test_semnop.py -v
