"""
Unit tests for code displacement.
"""

import random

import pytest

from mbxlab.container import SectionKind, serialized_size
from mbxlab.disp import (
    JMP_REL32_LENGTH,
    displace_all,
    displace_function,
    fixup_ip_relative,
    jmp_rel32,
    plan_budget,
    refresh_semnops,
    site_bytes_intact,
    sites_decode,
    write_site,
)
from mbxlab.isa import Form, assemble
from mbxlab.semnop import nop_padding
from mbxlab.vm import check_image_equivalence


@pytest.fixture
def displaced(generated_image):
    image, state = displace_all(generated_image, 0.05, random.Random(21))
    return generated_image, image, state


class TestBudget:

    @pytest.mark.parametrize("fraction", [0, -0.01, 0.11, 1.0])
    def test_fraction_out_of_range(self, generated_image, fraction):
        """Test that fractions outside (0, 0.1] are rejected"""
        with pytest.raises(ValueError):
            plan_budget(generated_image, fraction)

    def test_budget_sums_to_fraction_of_size(self, generated_image):
        """Test that the shares add up to fraction x file size"""
        budgets = plan_budget(generated_image, 0.05)
        assert budgets
        assert sum(budgets.values()) == int(0.05 * serialized_size(generated_image))
        assert all(b >= 5 for b in budgets.values())
        assert max(budgets.values()) - min(budgets.values()) <= 1

    def test_tiny_budget_gives_nothing(self, saver_image):
        """Test that shares below one jump are not handed out"""
        assert plan_budget(saver_image, 0.001) == {}


class TestDisplacement:

    def test_behaviour_preserved(self, displaced):
        """Test that displacing every function keeps each one equivalent"""
        original, image, state = displaced
        assert state.plans
        verdicts = check_image_equivalence(original, image, trials=10)
        assert all(verdicts.values()), {i: v.detail for i, v in verdicts.items() if not v}

    def test_function_sizes_unchanged(self, displaced):
        """Test that functions keep their boundaries"""
        original, image, _ = displaced
        assert [(fn.vaddr, fn.length) for fn in image.functions] == \
               [(fn.vaddr, fn.length) for fn in original.functions]

    def test_displaced_section_size(self, displaced):
        """Test that each function adds its budget plus the jump back"""
        original, image, state = displaced
        section = image.section_at(state.section_vaddr)
        assert section.kind == SectionKind.CODE
        assert len(image.sections) == len(original.sections) + 1
        assert len(section.data) == sum(plan.budget + JMP_REL32_LENGTH for plan in state.plans)

    def test_source_starts_with_jump(self, displaced):
        """Test that every vacated run begins with a jmp to its displaced copy"""
        _, image, state = displaced
        for plan in state.plans:
            assert image.read(plan.source_vaddr, JMP_REL32_LENGTH) == plan.jmp_out
            assert jmp_rel32(plan.source_vaddr, plan.target_vaddr).raw == plan.jmp_out

    def test_registry_matches_image(self, displaced):
        """Test that registered nop sites hold their bytes and decode"""
        _, image, state = displaced
        assert len(state.sites) == 2 * len(state.plans)
        assert site_bytes_intact(image, state)
        assert sites_decode(image, state)

    def test_function_displaced_once(self, displaced):
        """Test that a second displacement of the same function is a no-op"""
        _, image, state = displaced
        fn = image.functions[state.plans[0].fn_index]
        again_image, again_state = displace_function(image, fn, 10, random.Random(0), state)
        assert again_image is image and again_state is state


class TestRefresh:

    def test_refresh_keeps_behaviour(self, displaced):
        """Test that regenerating every nop keeps the image equivalent"""
        original, image, state = displaced
        refreshed, new_state = refresh_semnops(image, state, random.Random(33))
        assert site_bytes_intact(refreshed, new_state)
        assert [s.nop.length for s in new_state.sites] == [s.nop.length for s in state.sites]
        assert all(check_image_equivalence(original, refreshed, trials=10).values())

    def test_refresh_one_function(self, displaced):
        """Test that a per-function refresh leaves other sites alone"""
        _, image, state = displaced
        target = state.plans[0].fn_index
        _, new_state = refresh_semnops(image, state, random.Random(1), fn_index=target)
        for old, new in zip(state.sites, new_state.sites):
            if old.fn_index != target:
                assert old == new

    def test_write_site_checks_length(self, displaced):
        """Test that a nop of another length is refused"""
        _, image, state = displaced
        with pytest.raises(ValueError):
            write_site(image, state, 0, nop_padding(state.sites[0].nop.length + 1))

    def test_write_site_patches_bytes(self, displaced):
        """Test that writing plain nops lands in the image and registry"""
        _, image, state = displaced
        length = state.sites[0].nop.length
        patched, new_state = write_site(image, state, 0, nop_padding(length))
        assert patched.read(state.sites[0].vaddr, length) == b'\x90' * length
        assert site_bytes_intact(patched, new_state)


class TestFixups:

    def test_short_branch_widened(self):
        """Test that a rel8 branch moved far away becomes rel32 with the same target"""
        inst = assemble("je short 0x1010", 0x1000)
        moved = fixup_ip_relative(inst, 0x1000, 0x9000)
        assert moved.form == Form.JCC_REL32
        assert moved.rel.target == 0x1010
        assert moved.vaddr == 0x9000

    def test_non_branch_moves_unchanged(self):
        """Test that instructions without relative operands keep their bytes"""
        inst = assemble("mov eax, [ebp-4]", 0x1000)
        moved = fixup_ip_relative(inst, 0x1000, 0x9000)
        assert moved.raw == inst.raw and moved.vaddr == 0x9000

    def test_jmp_rel32_is_five_bytes(self):
        """Test that the trampoline jump is always the near form"""
        jump = jmp_rel32(0x1000, 0x1002)
        assert jump.length == JMP_REL32_LENGTH
        assert jump.raw[0] == 0xE9


# Run tests with:
# pytest tests/test_disp.py -v
