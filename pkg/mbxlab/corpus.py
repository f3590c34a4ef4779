"""
Synthetic benign/malicious MBX corpus.

Functions are assembled from templates: a push prologue that saves ebp and
one to three callee-saved registers, a 16-byte frame addressed as [ebp-x],
a body drawn from a class-weighted instruction mix with forward branches and
external calls, and the mirrored epilogue. Malicious samples additionally
carry instruction-idiom motifs from json/motifs.json inside transformable
functions. A share of functions get an undecodable data island after their
ret, which makes them non-transformable.
"""

import json
import logging
import os
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd
from sklearn.model_selection import train_test_split

from config.settings import CorpusSettings, settings
from mbxlab.base_attack import job_seed, timed
from mbxlab.container import (
    DEFAULT_BASE_VADDR,
    BinaryImage,
    FunctionRef,
    build_image,
    parse_mbx,
    serialize_mbx,
)
from mbxlab.detector import BENIGN, LABEL_NAMES, MALICIOUS
from mbxlab.isa import Instruction, Reg32, assemble, encode_all
from mbxlab.vm import Termination, random_state, run_function

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
SPLITS = ('train', 'val', 'test')
EXTERNAL_BASE = 0x70000000
FRAME_SLOTS = (4, 8, 12, 16)
ISLAND_OPCODE = 0xCC
CALLEE_SAVED = (Reg32.EBX, Reg32.ESI, Reg32.EDI)
MIN_FUNCTION_BUDGET = 48


def load_motifs() -> Dict[str, Any]:
    """Load the motif catalogue from the JSON file next to this module"""
    current_dir = os.path.dirname(os.path.abspath(__file__))
    motif_file = os.path.join(current_dir, 'json', 'motifs.json')

    try:
        with open(motif_file, 'r') as f:
            return json.load(f)['motifs']
    except FileNotFoundError:
        logger.warning(f"Motif file not found at {motif_file}")
        return {}
    except json.JSONDecodeError as e:
        logger.warning(f"Invalid JSON in motif file: {e}")
        return {}


# Load motifs at module level (once on import)
MOTIFS = load_motifs()

# Instruction-kind weights of the motif-free mix, and the direction the
# malicious mix is pulled towards.
BASE_KIND_WEIGHTS = {
    'mov_imm': 14, 'load': 10, 'store': 10, 'alu_rr': 12, 'alu_ri': 12, 'incdec': 6,
    'lea': 5, 'shift': 4, 'unary': 2, 'bswap': 1, 'call': 4, 'branch': 8, 'jump': 2,
}
MALICIOUS_KIND_WEIGHTS = {
    'mov_imm': 8, 'load': 8, 'store': 8, 'alu_rr': 20, 'alu_ri': 14, 'incdec': 4,
    'lea': 2, 'shift': 12, 'unary': 7, 'bswap': 6, 'call': 3, 'branch': 6, 'jump': 2,
}
BASE_ALU_WEIGHTS = {'add': 8, 'sub': 6, 'and': 4, 'or': 4, 'xor': 2, 'cmp': 3, 'adc': 1, 'sbb': 1}
MALICIOUS_ALU_WEIGHTS = {'add': 4, 'sub': 3, 'and': 3, 'or': 3, 'xor': 12, 'cmp': 1, 'adc': 2, 'sbb': 2}
SKIPPABLE_KINDS = ('mov_imm', 'load', 'store', 'alu_rr', 'alu_ri', 'incdec', 'lea', 'shift', 'unary')


@dataclass
class CorpusSample:
    sample_id: str
    label: int
    seed: int
    image: BinaryImage

    @property
    def label_name(self) -> str:
        return LABEL_NAMES[self.label]


def _blend(base: Dict[str, float], bias: Dict[str, float], skew: float) -> Dict[str, float]:
    return {k: (1.0 - skew) * base[k] + skew * bias.get(k, 0.0) for k in base}


def _pick(rng: random.Random, weights: Dict[str, float]) -> str:
    keys = list(weights)
    return rng.choices(keys, weights=[weights[k] for k in keys])[0]


def _name(reg: Reg32) -> str:
    return reg.name.lower()


# ==================== FUNCTION GENERATION ====================

class _FunctionBuilder:
    """Assembles lines at a running vaddr; forward branches skip pre-sized blocks"""

    def __init__(self, vaddr: int):
        self.start = vaddr
        self.vaddr = vaddr
        self.instructions: List[Instruction] = []

    @property
    def length(self) -> int:
        return self.vaddr - self.start

    def emit(self, line: str) -> None:
        inst = assemble(line, self.vaddr)
        self.instructions.append(inst)
        self.vaddr += inst.length

    def emit_all(self, lines: Sequence[str]) -> None:
        for line in lines:
            self.emit(line)

    def skip_over(self, mnemonic: str, lines: Sequence[str]) -> None:
        """mnemonic (a jcc or jmp) jumping just past lines, which follow it"""
        size = sum(assemble(line, 0).length for line in lines)
        self.emit(f"{mnemonic} short {self.vaddr + 2 + size:#x}")
        self.emit_all(lines)


class _FunctionShape:
    """Register plan and instruction mix of one function"""

    def __init__(self, rng: random.Random, label: int, skew: float, has_calls: bool):
        self.rng = rng
        self.has_calls = has_calls
        saved = rng.sample(CALLEE_SAVED, rng.randint(1, len(CALLEE_SAVED)))
        self.pushes = saved + [Reg32.EBP]
        rng.shuffle(self.pushes)
        self.working = [Reg32.EAX] + saved
        if not has_calls:
            self.working += [r for r in (Reg32.ECX, Reg32.EDX) if rng.random() < 0.3]
        skew = skew if label == MALICIOUS else 0.0
        self.kinds = _blend(BASE_KIND_WEIGHTS, MALICIOUS_KIND_WEIGHTS, skew)
        if not has_calls:
            self.kinds['call'] = 0.0
        self.alu = _blend(BASE_ALU_WEIGHTS, MALICIOUS_ALU_WEIGHTS, skew)

    def reg(self) -> str:
        return _name(self.rng.choice(self.working))

    def slot(self) -> str:
        return f"[ebp-{self.rng.choice(FRAME_SLOTS)}]"

    def imm(self) -> int:
        return self.rng.randrange(0x10, 0x1000)

    def external(self) -> str:
        return f"{EXTERNAL_BASE + 16 * self.rng.randrange(256):#x}"

    def prologue(self) -> List[str]:
        lines = [f"push {_name(r)}" for r in self.pushes]
        lines += ["mov ebp, esp", "sub esp, 16"]
        for r in self.working:
            lines.append(f"mov {_name(r)}, {self.slot()}" if self.rng.random() < 0.5
                         else f"mov {_name(r)}, {self.imm():#x}")
        return lines

    def epilogue(self) -> List[str]:
        return ["mov esp, ebp"] + [f"pop {_name(r)}" for r in reversed(self.pushes)] + ["ret"]

    def simple(self, kind: str) -> str:
        rng = self.rng
        if kind == 'mov_imm':
            return f"mov {self.reg()}, {self.imm():#x}"
        if kind == 'load':
            return f"mov {self.reg()}, {self.slot()}"
        if kind == 'store':
            return f"mov {self.slot()}, {self.reg()}"
        if kind == 'alu_rr':
            return f"{_pick(rng, self.alu)} {self.reg()}, {self.reg()}"
        if kind == 'alu_ri':
            value = rng.randrange(1, 0x80) if rng.random() < 0.7 else self.imm()
            return f"{_pick(rng, self.alu)} {self.reg()}, {value:#x}"
        if kind == 'incdec':
            return f"{rng.choice(('inc', 'dec'))} {self.reg()}"
        if kind == 'lea':
            return f"lea {self.reg()}, [{self.reg()}+{rng.randrange(1, 0x40):#x}]"
        if kind == 'shift':
            return f"{rng.choice(('shl', 'shr', 'sar'))} {self.reg()}, {rng.randrange(1, 8)}"
        if kind == 'unary':
            return f"{rng.choice(('neg', 'not'))} {self.reg()}"
        if kind == 'bswap':
            return f"bswap {self.reg()}"
        raise ValueError(f"not a straight-line kind: {kind}")

    def skipped_block(self) -> List[str]:
        return [self.simple(self.rng.choice(SKIPPABLE_KINDS)) for _ in range(self.rng.randint(1, 4))]

    def motif_lines(self, motif: Dict[str, Any]) -> List[str]:
        a, b = self.rng.sample(self.working, 2)
        return [line.format(a=_name(a), b=_name(b), ext=self.external()) for line in motif['lines']]


def generate_function(rng: random.Random, length_budget: int, vaddr: int = DEFAULT_BASE_VADDR, index: int = 0,
                      label: int = BENIGN, skew: Optional[float] = None, motifs: Sequence[str] = (),
                      island: bool = False) -> Tuple[bytes, FunctionRef]:
    """
    Assemble one trap-free function of roughly length_budget bytes.

    Args:
        rng: Random source
        length_budget: Target size in bytes (the body stops before exceeding it)
        vaddr: Address of the first instruction
        index: Index recorded in the FunctionRef
        label: Class whose instruction mix to draw from
        skew: Pull of the malicious mix (defaults to settings)
        motifs: Motif names to plant in the body
        island: Append an undecodable data island after the ret

    Returns:
        (function bytes, FunctionRef without blocks; build_image analyzes it)
    """
    skew = settings.corpus.skew if skew is None else skew
    planted = [MOTIFS[name] for name in motifs]
    has_calls = rng.random() < 0.4 or any('{ext}' in line for m in planted for line in m['lines'])
    shape = _FunctionShape(rng, label, skew, has_calls)

    builder = _FunctionBuilder(vaddr)
    builder.emit_all(shape.prologue())
    epilogue_size = sum(assemble(line, 0).length for line in shape.epilogue())

    motif_at = sorted(rng.randrange(8) for _ in planted)
    pending = list(zip(motif_at, planted))
    step = 0
    while True:
        while pending and pending[0][0] <= step:
            builder.emit_all(shape.motif_lines(pending.pop(0)[1]))
        if builder.length + epilogue_size + 32 > length_budget and not pending:
            break
        kind = _pick(rng, shape.kinds)
        if kind == 'call':
            builder.emit(f"call {shape.external()}")
        elif kind == 'branch':
            r = shape.reg()
            builder.emit(f"test {r}, {r}" if rng.random() < 0.5 else f"cmp {r}, {rng.randrange(0x80):#x}")
            builder.skip_over(rng.choice(('je', 'jne', 'jl', 'jge')), shape.skipped_block())
        elif kind == 'jump':
            builder.skip_over('jmp', shape.skipped_block())
        else:
            builder.emit(shape.simple(kind))
        step += 1

    builder.emit_all(shape.epilogue())
    code = encode_all(builder.instructions)
    if island:
        code += bytes([ISLAND_OPCODE]) + bytes(rng.getrandbits(8) for _ in range(rng.randint(3, 15)))
    return code, FunctionRef(index, vaddr, len(code))


# ==================== IMAGE GENERATION ====================

def _data_section(rng: random.Random, size: int) -> bytes:
    """String-table-like filler: lowercase words separated by NULs"""
    out = bytearray()
    while len(out) < size:
        out += bytes(rng.randrange(0x61, 0x7B) for _ in range(rng.randint(3, 12))) + b'\x00'
    return bytes(out[:size])


def generate_image(rng: random.Random, label: int, corpus_settings: Optional[CorpusSettings] = None,
                   base_vaddr: int = DEFAULT_BASE_VADDR) -> BinaryImage:
    """One sample: a code section of generated functions plus a data section"""
    spec = corpus_settings or settings.corpus
    target = rng.randint(spec.min_size, spec.max_size)
    n_functions = rng.randint(spec.min_functions, spec.max_functions)
    data_size = int(target * rng.uniform(0.10, 0.20))
    per_function = max(MIN_FUNCTION_BUDGET, (target - data_size) // n_functions)

    islands = [rng.random() >= spec.transformable_ratio for _ in range(n_functions)]
    motifs: List[List[str]] = [[] for _ in range(n_functions)]
    if label == MALICIOUS and MOTIFS:
        hosts = [i for i, has_island in enumerate(islands) if not has_island]
        if not hosts:
            islands[0] = False
            hosts = [0]
        names = sorted(MOTIFS)
        motifs[rng.choice(hosts)].append(rng.choice(names))
        for i in hosts:
            if rng.random() < spec.motif_rate:
                motifs[i].append(rng.choice(names))

    code = b''
    spans: List[Tuple[int, int]] = []
    for i in range(n_functions):
        budget = max(MIN_FUNCTION_BUDGET, int(per_function * rng.uniform(0.75, 1.25)))
        raw, fn = generate_function(rng, budget, base_vaddr + len(code), i, label, spec.skew,
                                    motifs[i], islands[i])
        spans.append((len(code), fn.length))
        code += raw
    return build_image(code, spans, base_vaddr, [_data_section(rng, data_size)])


def _generate_sample(root_seed: int, label: int, number: int,
                     corpus_settings: CorpusSettings) -> CorpusSample:
    sample_id = f"{LABEL_NAMES[label]}-{number:05d}"
    seed = job_seed(root_seed, sample_id, 0)
    return CorpusSample(sample_id, label, seed, generate_image(random.Random(seed), label, corpus_settings))


def generate_corpus(corpus_settings: Optional[CorpusSettings] = None, jobs: int = 1) -> List[CorpusSample]:
    """
    Generate the labeled corpus: benign samples first, then malicious.

    Per-sample seeds are hashed from (seed, sample id), so the output does
    not depend on jobs.
    """
    spec = corpus_settings or settings.corpus
    wanted = [(BENIGN, i) for i in range(spec.n_benign)] + [(MALICIOUS, i) for i in range(spec.n_malicious)]

    def job(item: Tuple[int, int]) -> CorpusSample:
        return _generate_sample(spec.seed, item[0], item[1], spec)

    with timed(logger, f"generate_corpus({len(wanted)} samples)"):
        with ThreadPoolExecutor(max_workers=max(jobs, 1)) as pool:
            samples = list(pool.map(job, wanted))

    functions = [fn for s in samples for fn in s.image.functions]
    if functions:
        ratio = sum(fn.is_transformable for fn in functions) / len(functions)
        logger.info(f"Generated {len(samples)} samples, {len(functions)} functions, {ratio:.1%} transformable")
    return samples


def motif_markers() -> Dict[str, bytes]:
    return {name: bytes.fromhex(motif['marker']) for name, motif in MOTIFS.items()}


def contains_motif(image: BinaryImage) -> bool:
    """Byte-scan of the code sections for any motif marker"""
    code = image.code_bytes
    return any(marker in code for marker in motif_markers().values())


def trapping_functions(image: BinaryImage, states: int = 10, seed: int = 0) -> List[int]:
    """Indices of transformable functions that trap or hit the step limit from random states"""
    failed = []
    for fn in image.functions:
        if not fn.is_transformable:
            continue
        for k in range(states):
            outcome = run_function(image, fn, random_state(seed + k))
            if outcome.termination != Termination.RET:
                failed.append(fn.index)
                break
    return failed


# ==================== SPLITS / MANIFEST ====================

def split(samples: Sequence[CorpusSample], seed: int = 0) -> Dict[str, List[CorpusSample]]:
    """Stratified 80/10/10 train/val/test split"""
    labels = [s.label for s in samples]
    train, rest = train_test_split(list(samples), test_size=0.2, stratify=labels, random_state=seed)
    val, test = train_test_split(rest, test_size=0.5, stratify=[s.label for s in rest], random_state=seed)
    return {'train': list(train), 'val': list(val), 'test': list(test)}


def write_corpus(splits: Dict[str, List[CorpusSample]], out_dir: Path) -> Path:
    """
    Write one .mbx file per sample and manifest.csv (path, label, split, seed).

    Paths in the manifest are relative to its directory.
    """
    out_dir = Path(out_dir)
    (out_dir / 'samples').mkdir(parents=True, exist_ok=True)
    rows = []
    for split_name in SPLITS:
        for sample in splits.get(split_name, []):
            relative = Path('samples') / f"{sample.sample_id}.mbx"
            (out_dir / relative).write_bytes(serialize_mbx(sample.image))
            rows.append({'path': relative.as_posix(), 'label': sample.label, 'split': split_name,
                         'seed': sample.seed})
    manifest = out_dir / 'manifest.csv'
    pd.DataFrame(rows, columns=['path', 'label', 'split', 'seed']).to_csv(manifest, index=False)
    logger.info(f"Wrote {len(rows)} samples to {out_dir}")
    return manifest


def read_manifest(path: Path) -> pd.DataFrame:
    frame = pd.read_csv(path)
    missing = {'path', 'label', 'split', 'seed'} - set(frame.columns)
    if missing:
        raise ValueError(f"manifest {path} lacks columns {sorted(missing)}")
    return frame


def load_samples(manifest_path: Path, split_name: Optional[str] = None) -> List[CorpusSample]:
    """Parse the samples listed in a manifest, optionally one split only"""
    manifest_path = Path(manifest_path)
    frame = read_manifest(manifest_path)
    if split_name is not None:
        frame = frame[frame['split'] == split_name]
    samples = []
    for row in frame.itertuples(index=False):
        image = parse_mbx((manifest_path.parent / row.path).read_bytes())
        samples.append(CorpusSample(Path(row.path).stem, int(row.label), int(row.seed), image))
    return samples
