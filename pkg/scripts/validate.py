#!/usr/bin/env python3
"""
Validate the lab before running experiments.
Checks: codec round trip, substitution table, semantic nops, weight files,
transform equivalence on generated samples.
"""

import random
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

from config.settings import CorpusSettings, DetectorHyperparams  # noqa: E402
from mbxlab.container import parse_mbx, serialize_mbx  # noqa: E402
from mbxlab.corpus import MOTIFS, contains_motif, generate_image, trapping_functions  # noqa: E402
from mbxlab.detector import MALICIOUS, fingerprint, init_model, weights_from_bytes, weights_to_bytes  # noqa: E402
from mbxlab.disp import displace_all, site_bytes_intact  # noqa: E402
from mbxlab.ipr import apply_random_ipr, equivalents  # noqa: E402
from mbxlab.isa import decode_instruction, random_instruction  # noqa: E402
from mbxlab.semnop import ClobberClass, generate_semnop, preserves_protected  # noqa: E402
from mbxlab.vm import check_image_equivalence, exec_sequence, random_state  # noqa: E402

SAMPLE_SETTINGS = CorpusSettings(n_benign=1, n_malicious=1, min_size=1024, max_size=2048, min_functions=4,
                                 max_functions=8, transformable_ratio=1.0, seed=0)


class LabValidator:
    def __init__(self, samples: int = 3, trials: int = 20):
        self.samples = samples
        self.trials = trials
        self.errors = []
        self.warnings = []

    def check(self, name: str, passed: bool, detail: str = "") -> bool:
        if passed:
            print(f"   ✅ {name}")
        else:
            self.errors.append(f"{name}{': ' + detail if detail else ''}")
            print(f"   ❌ {name} {detail}")
        return passed

    def validate_codec(self) -> bool:
        print("\n🔍 Instruction codec")
        rng = random.Random(0)
        for _ in range(2000):
            inst = random_instruction(rng, 0x1000)
            if decode_instruction(inst.raw + b'\x90' * 4, 0x1000) != inst:
                return self.check("decode(encode(i)) == i", False, str(inst))
        return self.check("decode(encode(i)) == i over 2000 instructions", True)

    def validate_equivalence_table(self) -> bool:
        print("\n🔍 Substitution table")
        rng = random.Random(1)
        states = [random_state(seed) for seed in range(4)]
        checked = 0
        for _ in range(3000):
            inst = random_instruction(rng, 0x1000)
            if inst.is_control_flow:
                continue
            for alt, divergence in equivalents(inst):
                checked += 1
                for state in states:
                    a, b = exec_sequence(state, [inst]), exec_sequence(state, [alt])
                    flags_differ = (int(a.flags) ^ int(b.flags)) & ~int(divergence)
                    if a.regs != b.regs or a.memory != b.memory or flags_differ:
                        return self.check("alternatives behave alike", False, f"{inst} -> {alt}")
        return self.check(f"{checked} alternatives behave alike outside their flag divergence", True)

    def validate_semnops(self) -> bool:
        print("\n🔍 Semantic nops")
        rng = random.Random(2)
        state = random_state(0)
        for clobber_class in ClobberClass:
            for _ in range(100):
                nop = generate_semnop(rng, clobber_class=clobber_class)
                if not preserves_protected(nop, state):
                    return self.check(f"{clobber_class.value} nops preserve their resources", False,
                                      ' ; '.join(str(i) for i in nop.instructions))
        return self.check("every clobber class preserves its resources", True)

    def validate_sample(self, index: int) -> bool:
        print(f"\n🔍 Generated sample {index}")
        image = generate_image(random.Random(index), MALICIOUS, SAMPLE_SETTINGS)
        ok = self.check("MBX round trip", parse_mbx(serialize_mbx(image)) == image)
        ok &= self.check("functions return", not trapping_functions(image, states=5))
        if MOTIFS:
            ok &= self.check("motif present", contains_motif(image))
        else:
            self.warnings.append("motif catalogue is empty")

        rng = random.Random(100 + index)
        transformed = image
        for fn_index in range(len(image.functions)):
            transformed = apply_random_ipr(transformed, transformed.functions[fn_index], rng).image
        verdicts = check_image_equivalence(image, transformed, self.trials)
        failed = [i for i, v in verdicts.items() if not v]
        ok &= self.check("IPR keeps every function equivalent", not failed, f"functions {failed}")

        displaced, state = displace_all(image, 0.05, rng)
        if not state.plans:
            self.warnings.append(f"sample {index}: nothing displaced")
        verdicts = check_image_equivalence(image, displaced, self.trials)
        failed = [i for i, v in verdicts.items() if not v]
        ok &= self.check("displacement keeps every function equivalent", not failed, f"functions {failed}")
        ok &= self.check("semantic nop sites intact", site_bytes_intact(displaced, state))
        return ok

    def validate_weights(self) -> bool:
        print("\n🔍 Detector weight file")
        model = init_model(0, DetectorHyperparams(filters=8, input_cap=1024))
        restored = weights_from_bytes(weights_to_bytes(model))
        return self.check("weights round trip", fingerprint(restored) == fingerprint(model))

    def validate_all(self) -> bool:
        results = [self.validate_codec(), self.validate_equivalence_table(), self.validate_semnops(),
                   self.validate_weights()]
        results.extend(self.validate_sample(i) for i in range(self.samples))

        # Print summary
        print(f"\n{'='*50}")
        if self.errors:
            print("❌ ERRORS:")
            for error in self.errors:
                print(f"   - {error}")

        if self.warnings:
            print("\n⚠️  WARNINGS:")
            for warning in self.warnings:
                print(f"   - {warning}")

        if all(results) and not self.errors:
            print("\n✅ All validations passed!")
            print(f"{'='*50}\n")
            return True
        else:
            print("\n❌ Validation failed")
            print(f"{'='*50}\n")
            return False


def main():
    validator = LabValidator()
    success = validator.validate_all()
    sys.exit(0 if success else 1)


if __name__ == "__main__":
    main()
