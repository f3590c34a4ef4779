"""
Unit tests for the defenses: sanitization, normalization, masking and jmp statistics.
"""

import logging
import random

import pytest

from mbxlab.container import add_overlay, detector_view
from mbxlab.defense import (
    DefenseName,
    classify_defended,
    code_key,
    enumerate_ipr_class,
    exact_normal_form,
    instruction_byte_positions,
    jmp_ratio,
    mask_random_instructions,
    normalize,
    normalize_step_eqv,
    normalize_step_ord1,
    normalize_step_ord2,
    normalize_step_regs,
    randomize_ipr,
    sanitize_noncode,
)
from mbxlab.detector import classify
from mbxlab.vm import check_image_equivalence

from tests.conftest import SAVER_LINES, assemble_image

# two commuting instructions and an add/sub pair: four variants
CANONICAL_LINES = ["mov ebp, 7", "add eax, 4", "ret"]
CANONICAL_MIN = bytes.fromhex("83c004" "bd07000000" "c3")

# every single step is stuck here; swapping ebx/esi and re-sorting the pushes is lower
STUCK_LINES = ["push ebx", "push esi", "mov esi, 1", "mov ebx, esi", "call 0x70000000", "mov eax, esi",
               "pop esi", "pop ebx", "ret"]
STUCK_MIN_LINES = ["push ebx", "push esi", "mov ebx, 1", "mov esi, ebx", "call 0x70000000", "mov eax, ebx",
                   "pop esi", "pop ebx", "ret"]

SMALL_FUNCTIONS = [
    CANONICAL_LINES,
    ["push ebx", "mov ebx, 1", "mov eax, ebx", "pop ebx", "ret"],
    ["sub ecx, -4", "xor edx, edx", "mov eax, ecx", "ret"],
    ["push edi", "mov edi, 1", "mov eax, edi", "pop edi", "ret"],
]


class TestSanitize:

    def test_noncode_zeroed(self):
        """Test that data and overlay bytes are zeroed and code is kept"""
        image = assemble_image(SAVER_LINES, data=[b'\xff' * 8])
        image, _ = add_overlay(image, b'\xee' * 4)
        clean = sanitize_noncode(image)
        assert clean.sections[0].data == image.sections[0].data
        assert clean.sections[1].data == b'\x00' * 8
        assert clean.sections[2].data == b'\x00' * 4

    def test_original_untouched(self):
        """Test that sanitizing returns a copy"""
        image = assemble_image(["ret"], data=[b'\xff'])
        sanitize_noncode(image)
        assert image.sections[1].data == b'\xff'


class TestNormalizationSteps:

    def test_eqv_picks_lowest(self):
        """Test that sub r, -imm becomes add r, imm"""
        image = assemble_image(["sub eax, -4", "ret"])
        normalized, improved = normalize_step_eqv(image, image.functions[0])
        assert improved
        assert normalized.sections[0].data[:3] == bytes.fromhex("83c004")

    def test_ord1_sorts_ready_instructions(self):
        """Test that independent instructions are emitted lowest bytes first"""
        image = assemble_image(CANONICAL_LINES)
        normalized, improved = normalize_step_ord1(image, image.functions[0])
        assert improved
        assert normalized.sections[0].data == CANONICAL_MIN

    def test_ord2_sorts_saved_registers(self):
        """Test that pushes are sorted ascending with mirrored pops"""
        lines = ["push esi", "push ebx", "mov ebx, 1", "mov esi, 2", "add ebx, esi", "mov eax, ebx",
                 "pop ebx", "pop esi", "ret"]
        image = assemble_image(lines)
        normalized, improved = normalize_step_ord2(image, image.functions[0])
        assert improved
        assert normalized.sections[0].data == assemble_image(SAVER_LINES).sections[0].data

    def test_regs_picks_lowest_swap(self):
        """Test that the saved register is renamed to the lowest eligible one"""
        image = assemble_image(["push edi", "mov edi, 1", "mov eax, edi", "pop edi", "ret"])
        normalized, improved = normalize_step_regs(image, image.functions[0])
        assert improved
        expected = assemble_image(["push ecx", "mov ecx, 1", "mov eax, ecx", "pop ecx", "ret"])
        assert normalized.sections[0].data == expected.sections[0].data
        assert all(check_image_equivalence(image, normalized, trials=10).values())

    def test_regs_leaves_internal_callers(self):
        """Test that functions calling into the image are not renamed"""
        image = assemble_image(["push ebx", "mov ebx, 5", "call 0x100d", "pop ebx", "ret"],
                               ["mov eax, ebx", "ret"])
        normalized, improved = normalize_step_regs(image, image.functions[0])
        assert not improved
        assert normalized is image

    def test_stuck_function_is_fixpoint_of_every_step(self):
        """Test that no single step lowers a function sitting in a local minimum"""
        image = assemble_image(STUCK_LINES)
        fn = image.functions[0]
        for step in (normalize_step_eqv, normalize_step_regs, normalize_step_ord1, normalize_step_ord2):
            assert step(image, fn) == (image, False)
        assert exact_normal_form(image, fn) == assemble_image(STUCK_MIN_LINES).sections[0].data
        assert exact_normal_form(image, fn) < code_key(image)

    def test_steps_never_raise_key(self, generated_image):
        """Test that a step either lowers the bytes or leaves them alone"""
        for step in (normalize_step_eqv, normalize_step_regs, normalize_step_ord1, normalize_step_ord2):
            for fn in generated_image.functions:
                normalized, improved = step(generated_image, fn)
                if improved:
                    assert code_key(normalized) < code_key(generated_image)
                else:
                    assert normalized is generated_image


class TestNormalize:

    def test_reaches_exact_normal_form(self):
        """Test that normalization finds the smallest member of a small class"""
        image = assemble_image(["add eax, 4", "mov ebp, 7", "ret"])
        result = normalize(image, niters=3, seed=0)
        assert result.key == CANONICAL_MIN
        assert exact_normal_form(image, image.functions[0]) == CANONICAL_MIN

    def test_class_enumeration(self):
        """Test that the IPR class of the reference function has four members"""
        image = assemble_image(CANONICAL_LINES)
        variants = enumerate_ipr_class(image, image.functions[0])
        assert len(variants) == 4
        assert min(variants) == CANONICAL_MIN

    def test_class_limit(self, saver_image):
        """Test that oversized classes raise"""
        with pytest.raises(ValueError):
            enumerate_ipr_class(saver_image, saver_image.functions[0], limit=2)

    def test_variants_share_normal_form(self):
        """Test that two members of one class normalize to the same key"""
        a = normalize(assemble_image(["add eax, 4", "mov ebp, 7", "ret"]), niters=2, seed=3)
        b = normalize(assemble_image(["mov ebp, 7", "sub eax, -4", "ret"]), niters=2, seed=4)
        assert a.key == b.key

    @pytest.mark.parametrize("lines", SMALL_FUNCTIONS)
    def test_random_variants_reach_exact_normal_form(self, lines):
        """Test that randomized members of a small class all normalize to its minimum"""
        image = assemble_image(lines)
        minimum = exact_normal_form(image, image.functions[0])
        for seed in range(20):
            variant = randomize_ipr(image, random.Random(seed))
            assert normalize(variant, niters=100, seed=seed).key == minimum

    def test_restarts_escape_local_minimum(self):
        """Test that random restarts find the minimum no single step reaches"""
        image = assemble_image(STUCK_LINES)
        result = normalize(image, niters=200, seed=0)
        assert result.key == assemble_image(STUCK_MIN_LINES).sections[0].data
        assert result.state.restarts > 0
        assert all(check_image_equivalence(image, result.image, trials=10).values())

    def test_keeps_behaviour(self, generated_image):
        """Test that the normalized image is equivalent and no larger in key"""
        result = normalize(generated_image, niters=3, seed=1)
        assert result.key <= code_key(generated_image)
        assert all(check_image_equivalence(generated_image, result.image, trials=10).values())
        assert result.state.niters == 3

    def test_run_is_timed(self, saver_image, caplog):
        """Test that a normalization run logs its duration"""
        with caplog.at_level(logging.DEBUG, logger="mbxlab.defense"):
            normalize(saver_image, niters=2, seed=0)
        assert any("normalize(2 passes)" in message for message in caplog.messages)

    def test_niters_must_be_positive(self, saver_image):
        """Test that zero passes are rejected"""
        with pytest.raises(ValueError):
            normalize(saver_image, niters=0)


class TestMasking:

    @pytest.fixture
    def image(self):
        return assemble_image(SAVER_LINES, data=[b'\xff' * 8])

    def test_zero_fraction_is_identity(self, image):
        """Test that masking nothing returns the plain view"""
        assert mask_random_instructions(image, 0.0) == detector_view(image)

    def test_full_fraction_zeroes_code_only(self, image):
        """Test that masking everything zeroes instruction bytes and keeps data"""
        code_length = len(image.sections[0].data)
        masked = mask_random_instructions(image, 1.0)
        assert masked[:code_length] == b'\x00' * code_length
        assert masked[code_length:] == b'\xff' * 8

    def test_partial_fraction_count(self, image):
        """Test that the masked byte count matches the fraction"""
        positions = instruction_byte_positions(image)
        masked = mask_random_instructions(image, 0.5, seed=3)
        view = detector_view(image)
        changed = sum(a != b for a, b in zip(masked, view))
        assert changed <= round(0.5 * len(positions))
        assert masked == mask_random_instructions(image, 0.5, seed=3)

    def test_positions_cover_code(self, image):
        """Test that every code byte of a fully decodable section is an instruction byte"""
        assert list(instruction_byte_positions(image)) == list(range(len(image.sections[0].data)))

    @pytest.mark.parametrize("fraction", [-0.1, 1.5])
    def test_fraction_range(self, image, fraction):
        """Test that fractions outside [0, 1] raise"""
        with pytest.raises(ValueError):
            mask_random_instructions(image, fraction)


class TestStatistics:

    def test_jmp_ratio(self):
        """Test that one jmp among four instructions gives 0.25"""
        image = assemble_image(["nop", "jmp 0x1004", "nop", "ret"])
        assert jmp_ratio(image) == 0.25

    def test_no_jumps(self, saver_image):
        """Test that straight-line code has ratio zero"""
        assert jmp_ratio(saver_image) == 0.0


class TestDefendedClassification:

    def test_none_matches_plain(self, tiny_model, generated_image, half_threshold):
        """Test that no defense is plain classification"""
        assert classify_defended(tiny_model, generated_image, half_threshold, DefenseName.NONE) == \
               classify(tiny_model, generated_image, half_threshold)

    def test_sanitize_scores_clean_copy(self, tiny_model, generated_image, half_threshold):
        """Test that the sanitize defense scores the sanitized image"""
        assert classify_defended(tiny_model, generated_image, half_threshold, DefenseName.SANITIZE) == \
               classify(tiny_model, sanitize_noncode(generated_image), half_threshold)

    def test_mask_is_seeded(self, tiny_model, generated_image, half_threshold):
        """Test that masked classification is reproducible per seed"""
        a = classify_defended(tiny_model, generated_image, half_threshold, DefenseName.MASK, seed=5)
        b = classify_defended(tiny_model, generated_image, half_threshold, DefenseName.MASK, seed=5)
        assert a == b
        assert 0.0 <= a.score <= 1.0


# Run tests with:
# pytest tests/test_defense.py -v
