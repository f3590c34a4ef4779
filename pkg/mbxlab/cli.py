"""
Command-line surface: corpus generation, training, calibration, scoring,
attacks, defenses, equivalence checks and the markdown report.

Every command writes its outputs plus run.json (resolved settings and seed)
under --out. Failures print one JSON line to stderr and exit 1 (runtime) or
2 (usage or configuration).
"""

import argparse
import json
import logging
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import pandas as pd
from pydantic import ValidationError

from config.cache import cache
from config.settings import (
    ConfigError,
    CorpusSettings,
    DefenseSettings,
    DetectorHyperparams,
    apply_settings,
    configure_logging,
    load_settings,
    settings,
)
from mbxlab.attack import AttackConfig, AttackMode, TransformSet, evaluate, run_experiment, write_reports
from mbxlab.container import detector_view, parse_mbx, serialize_mbx
from mbxlab.corpus import CorpusSample, generate_corpus, load_samples, split, write_corpus
from mbxlab.defense import DefenseName, classify_defended, jmp_ratio
from mbxlab.detector import (
    BENIGN,
    LABEL_NAMES,
    MALICIOUS,
    DetectorModel,
    Objective,
    Threshold,
    calibrate_threshold,
    fingerprint,
    init_model,
    load_model,
    save_model,
    score_views,
    train,
    true_positive_rate,
)
from mbxlab.vm import check_image_equivalence

logger = logging.getLogger(__name__)

RUN_VERSION = 1
LABELS_BY_NAME = {name: label for label, name in LABEL_NAMES.items()}


class UsageError(Exception):
    """Bad command line"""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


# ==================== HELPERS ====================

def _read_toml_table(path: Path, table: str) -> Dict[str, Any]:
    """The named table of a TOML file, or the whole file when it has no such table"""
    try:
        with open(path, 'rb') as f:
            data = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"file not found: {path}")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Invalid TOML in {path}: {e}")
    return data.get(table, data)


def _views(samples: Sequence[CorpusSample], cap: int) -> List[bytes]:
    return [detector_view(s.image, cap) for s in samples]


def _load_threshold(path: Path) -> Threshold:
    return Threshold.from_dict(json.loads(Path(path).read_text()))


def _write_json(path: Path, payload: Dict[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def _seed(args: argparse.Namespace, fallback: int = 0) -> int:
    return fallback if args.seed is None else args.seed


def _markdown_table(frame: pd.DataFrame) -> str:
    header = '| ' + ' | '.join(str(c) for c in frame.columns) + ' |'
    rule = '|' + '|'.join('---' for _ in frame.columns) + '|'
    rows = ['| ' + ' | '.join(_cell(v) for v in row) + ' |' for row in frame.itertuples(index=False)]
    return '\n'.join([header, rule] + rows)


def _cell(value: Any) -> str:
    return f"{value:.4f}" if isinstance(value, float) else str(value)


# ==================== COMMANDS ====================

def cmd_corpus_gen(args: argparse.Namespace) -> Dict[str, Any]:
    values = settings.corpus.model_dump()
    if args.spec:
        values.update(_read_toml_table(args.spec, 'corpus'))
    overrides = {'n_benign': args.n_benign, 'n_malicious': args.n_malicious, 'seed': args.seed}
    values.update({k: v for k, v in overrides.items() if v is not None})
    corpus_settings = CorpusSettings.model_validate(values)

    samples = generate_corpus(corpus_settings, args.jobs)
    splits = split(samples, corpus_settings.seed)
    manifest = write_corpus(splits, args.out)
    return {'seed': corpus_settings.seed, 'outputs': {'manifest': manifest},
            'counts': {name: len(part) for name, part in splits.items()}}


def cmd_train(args: argparse.Namespace) -> Dict[str, Any]:
    seed = _seed(args)
    hyperparams = settings.detector.hyperparams
    if args.hparams:
        hyperparams = DetectorHyperparams.model_validate(
            {**hyperparams.model_dump(), **_read_toml_table(args.hparams, 'hyperparams')})

    train_samples = load_samples(args.corpus, 'train')
    val_samples = load_samples(args.corpus, 'val')
    model = init_model(seed, hyperparams)
    report = train(model, _views(train_samples, model.input_cap), [s.label for s in train_samples], seed,
                   settings.detector.train, args.epochs,
                   val=(_views(val_samples, model.input_cap), [s.label for s in val_samples]))

    weights = args.out / 'detector.mbxd'
    save_model(model, weights)
    metrics = _write_json(args.out / 'train_metrics.json', {
        'epochs': report.epochs,
        'final_val_accuracy': report.final_val_accuracy,
        'parameters': model.parameter_count(),
        'fingerprint': fingerprint(model),
        'hyperparams': hyperparams.model_dump(),
    })
    return {'seed': seed, 'outputs': {'model': weights, 'metrics': metrics}}


def cmd_calibrate(args: argparse.Namespace) -> Dict[str, Any]:
    model = load_model(args.model)
    samples = load_samples(args.corpus, args.split)
    benign = [s for s in samples if s.label == BENIGN]
    malicious = [s for s in samples if s.label == MALICIOUS]
    threshold = calibrate_threshold(model, _views(benign, model.input_cap), args.fpr)
    payload = {**threshold.to_dict(), 'model': fingerprint(model), 'split': args.split,
               'tpr': true_positive_rate(model, _views(malicious, model.input_cap), threshold)}
    path = _write_json(args.out / 'threshold.json', payload)
    return {'seed': _seed(args), 'outputs': {'threshold': path}}


def _score_files(args: argparse.Namespace, defense: DefenseName,
                 defense_settings: Optional[DefenseSettings] = None) -> pd.DataFrame:
    model = load_model(args.model)
    threshold = _load_threshold(args.threshold)
    seed = _seed(args)
    rows = []
    for path in args.files:
        image = parse_mbx(Path(path).read_bytes())
        clean = classify_defended(model, image, threshold, DefenseName.NONE, seed)
        row = {'path': str(path), 'score': clean.score, 'label': clean.label_name}
        if defense != DefenseName.NONE:
            defended = classify_defended(model, image, threshold, defense, seed, defense_settings)
            row.update({'defense': defense.value, 'defended_score': defended.score,
                        'defended_label': defended.label_name, 'jmp_ratio': jmp_ratio(image)})
        rows.append(row)
    return pd.DataFrame(rows)


def cmd_classify(args: argparse.Namespace) -> Dict[str, Any]:
    frame = _score_files(args, DefenseName.NONE)
    path = args.out / 'scores.csv'
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    return {'seed': _seed(args), 'outputs': {'scores': path}}


def cmd_defend(args: argparse.Namespace) -> Dict[str, Any]:
    overrides = {'mask_fraction': args.fraction, 'normalize_niters': args.niters}
    defense_settings = DefenseSettings.model_validate(
        {**settings.defense.model_dump(), **{k: v for k, v in overrides.items() if v is not None}})
    frame = _score_files(args, DefenseName(args.defense), defense_settings)
    path = args.out / 'defended_scores.csv'
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    logger.info(f"{args.defense}: {int((frame['label'] == 'malicious').sum())} -> "
                f"{int((frame['defended_label'] == 'malicious').sum())} of {len(frame)} labeled malicious")
    return {'seed': _seed(args), 'outputs': {'defended_scores': path}}


def _select_samples(samples: List[CorpusSample], model: DetectorModel, threshold: Threshold, label: int,
                    limit: Optional[int]) -> List[CorpusSample]:
    """Correctly classified samples of label, most confident first"""
    chosen = [s for s in samples if s.label == label]
    scores = score_views(model, _views(chosen, model.input_cap)) if chosen else []
    ranked = [(float(score), s) for score, s in zip(scores, chosen)
              if (threshold.is_malicious(float(score)) == (label == MALICIOUS))]
    ranked.sort(key=lambda item: (-item[0] if label == MALICIOUS else item[0], item[1].sample_id))
    logger.info(f"{len(ranked)} of {len(chosen)} {LABEL_NAMES[label]} samples classified correctly")
    picked = [s for _, s in ranked]
    return picked[:limit] if limit else picked


def cmd_attack(args: argparse.Namespace) -> Dict[str, Any]:
    seed = _seed(args)
    config = AttackConfig.from_settings(
        settings.attack, mode=args.mode, transforms=args.transforms, budget_fraction=args.budget,
        niters=args.niters, repeats=args.repeats, seed=seed, objective=args.objective,
        target=LABELS_BY_NAME[args.target] if args.target else None, verify_trials=args.verify_trials)
    model = load_model(args.model)
    threshold = _load_threshold(args.threshold)
    label = LABELS_BY_NAME[args.label]
    samples = _select_samples(load_samples(args.corpus, args.split), model, threshold, label, args.limit)
    if not samples:
        raise ValueError(f"no correctly classified {args.label} samples in split {args.split!r}")

    results = run_experiment([(s.sample_id, s.image, s.label) for s in samples], model, threshold, config,
                             args.jobs or settings.attack.jobs)
    summary = evaluate(results, config.niters)
    outputs: Dict[str, Any] = dict(write_reports(results, summary, config, args.out))

    originals = {s.sample_id: s.image for s in samples}
    adversarial_dir = args.out / 'adversarial'
    adversarial_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for result in results:
        original = originals[result.binary_id]
        (adversarial_dir / f"{result.binary_id}.orig.mbx").write_bytes(serialize_mbx(original))
        for trial in result.trials:
            if trial.image is None or trial.trivially_done:
                continue
            path = adversarial_dir / f"{result.binary_id}.r{trial.repeat}.mbx"
            path.write_bytes(serialize_mbx(trial.image))
            rows.append({'binary_id': result.binary_id, 'repeat': trial.repeat, 'success': trial.success,
                         'final_score': trial.final_score, 'jmp_ratio_before': jmp_ratio(original),
                         'jmp_ratio_after': jmp_ratio(trial.image), 'path': path.relative_to(args.out).as_posix()})
    adversarial_csv = args.out / 'adversarial.csv'
    pd.DataFrame(rows, columns=['binary_id', 'repeat', 'success', 'final_score', 'jmp_ratio_before',
                                'jmp_ratio_after', 'path']).to_csv(adversarial_csv, index=False)
    outputs['adversarial.csv'] = adversarial_csv
    return {'seed': seed, 'outputs': outputs, 'summary': summary.to_dict()}


def cmd_verify(args: argparse.Namespace) -> Dict[str, Any]:
    original = parse_mbx(Path(args.original).read_bytes())
    transformed = parse_mbx(Path(args.transformed).read_bytes())
    if len(original.functions) != len(transformed.functions):
        raise ValueError(f"function tables differ: {len(original.functions)} vs {len(transformed.functions)}")
    seed = _seed(args)
    verdicts = check_image_equivalence(original, transformed, args.trials, seed)
    all_equivalent = all(verdicts.values())
    path = _write_json(args.out / 'verdicts.json', {
        'all_equivalent': all_equivalent,
        'functions': {str(i): {'equivalent': v.equivalent, 'trials': v.trials, 'detail': v.detail}
                      for i, v in verdicts.items()},
    })
    if not all_equivalent:
        logger.error(f"functions {[i for i, v in verdicts.items() if not v]} are not equivalent")
    return {'seed': seed, 'outputs': {'verdicts': path}, 'exit_code': 0 if all_equivalent else 1}


def cmd_report(args: argparse.Namespace) -> Dict[str, Any]:
    roots = [Path(p) for p in args.inputs]
    sections = ["# Experiment report", ""]

    summaries = sorted(p for root in roots for p in root.rglob('summary.csv'))
    if summaries:
        frame = pd.concat([pd.read_csv(p) for p in summaries], ignore_index=True)
        columns = [c for c in ('attack', 'n_binaries', 'n_trivial', 'n_trials', 'coverage', 'potency',
                               'within_ten') if c in frame.columns]
        sections += ["## Attacks", "", _markdown_table(frame[columns]), ""]

    adversarial = sorted(p for root in roots for p in root.rglob('adversarial.csv'))
    frames = [pd.read_csv(p) for p in adversarial]
    frames = [f for f in frames if len(f)]
    if frames:
        frame = pd.concat(frames, ignore_index=True)
        increase = (frame['jmp_ratio_after'] - frame['jmp_ratio_before']) / frame['jmp_ratio_before'].where(
            frame['jmp_ratio_before'] > 0)
        stats = pd.DataFrame([{'trials': len(frame), 'median_jmp_before': float(frame['jmp_ratio_before'].median()),
                               'median_jmp_after': float(frame['jmp_ratio_after'].median()),
                               'median_relative_increase': float(increase.median())}])
        sections += ["## jmp ratio", "", _markdown_table(stats), ""]

    defended = sorted(p for root in roots for p in root.rglob('defended_scores.csv'))
    rows = []
    for p in defended:
        frame = pd.read_csv(p)
        if not len(frame):
            continue
        rows.append({'run': p.parent.name, 'defense': frame['defense'].iloc[0], 'files': len(frame),
                     'malicious_before': float((frame['label'] == 'malicious').mean()),
                     'malicious_after': float((frame['defended_label'] == 'malicious').mean())})
    if rows:
        sections += ["## Defenses", "", _markdown_table(pd.DataFrame(rows)), ""]

    if len(sections) == 2:
        sections.append("No results found.")
    path = args.out / 'report.md'
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text('\n'.join(sections) + '\n')
    return {'seed': _seed(args), 'outputs': {'report': path}}


COMMANDS: Dict[str, Callable[[argparse.Namespace], Dict[str, Any]]] = {
    'corpus gen': cmd_corpus_gen,
    'train': cmd_train,
    'calibrate': cmd_calibrate,
    'classify': cmd_classify,
    'attack': cmd_attack,
    'defend': cmd_defend,
    'verify': cmd_verify,
    'report': cmd_report,
}


# ==================== PARSER ====================

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument('--config', type=Path, help="settings TOML merged over the defaults")
    common.add_argument('--seed', type=int, help="root seed")
    common.add_argument('--out', type=Path, help="output directory (default runs/<command>)")
    common.add_argument('--log-level', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    common.add_argument('--jobs', type=int, default=1)

    parser = _Parser(prog='mbxlab', description="Evasion attacks and defenses for byte-level malware detectors")
    commands = parser.add_subparsers(dest='command', required=True)

    corpus = commands.add_parser('corpus', help="synthetic corpus")
    corpus_actions = corpus.add_subparsers(dest='action', required=True)
    gen = corpus_actions.add_parser('gen', parents=[common], help="generate MBX files and manifest.csv")
    gen.add_argument('--spec', type=Path, help="TOML with [corpus] overrides")
    gen.add_argument('--n-benign', type=int)
    gen.add_argument('--n-malicious', type=int)

    p = commands.add_parser('train', parents=[common], help="train the detector")
    p.add_argument('--corpus', type=Path, required=True, help="manifest.csv")
    p.add_argument('--epochs', type=int)
    p.add_argument('--hparams', type=Path, help="TOML with [hyperparams] overrides")

    p = commands.add_parser('calibrate', parents=[common], help="cutoff at a target FPR")
    p.add_argument('--model', type=Path, required=True)
    p.add_argument('--corpus', type=Path, required=True)
    p.add_argument('--split', default='val', choices=['train', 'val', 'test'])
    p.add_argument('--fpr', type=float)

    p = commands.add_parser('classify', parents=[common], help="score MBX files")
    p.add_argument('--model', type=Path, required=True)
    p.add_argument('--threshold', type=Path, required=True)
    p.add_argument('files', nargs='+', type=Path)

    p = commands.add_parser('attack', parents=[common], help="attack corpus samples")
    p.add_argument('--model', type=Path, required=True)
    p.add_argument('--threshold', type=Path, required=True)
    p.add_argument('--corpus', type=Path, required=True)
    p.add_argument('--split', default='test', choices=['train', 'val', 'test'])
    p.add_argument('--label', default='malicious', choices=sorted(LABELS_BY_NAME))
    p.add_argument('--limit', type=int, default=50, help="most confident samples to attack (0: all)")
    p.add_argument('--mode', default=AttackMode.WHITEBOX.value, choices=[m.value for m in AttackMode])
    p.add_argument('--transforms', default=TransformSet.IPR_DISP.value, choices=[t.value for t in TransformSet])
    p.add_argument('--budget', type=float, help="displacement/append budget as a fraction of file size")
    p.add_argument('--niters', type=int)
    p.add_argument('--repeats', type=int)
    p.add_argument('--objective', default=Objective.BENEFIT.value, choices=[o.value for o in Objective])
    p.add_argument('--target', choices=sorted(LABELS_BY_NAME), help="target class (default: flip)")
    p.add_argument('--verify-trials', type=int, default=0)

    p = commands.add_parser('defend', parents=[common], help="score MBX files behind a defense")
    p.add_argument('defense', choices=[d.value for d in DefenseName if d != DefenseName.NONE])
    p.add_argument('--model', type=Path, required=True)
    p.add_argument('--threshold', type=Path, required=True)
    p.add_argument('--fraction', type=float, help="mask fraction")
    p.add_argument('--niters', type=int, help="normalization passes")
    p.add_argument('files', nargs='+', type=Path)

    p = commands.add_parser('verify', parents=[common], help="VM equivalence of two images")
    p.add_argument('--trials', type=int)
    p.add_argument('original', type=Path)
    p.add_argument('transformed', type=Path)

    p = commands.add_parser('report', parents=[common], help="markdown summary of result directories")
    p.add_argument('inputs', nargs='*', default=['runs'])
    return parser


def _command_name(args: argparse.Namespace) -> str:
    return f"{args.command} {args.action}" if args.command == 'corpus' else args.command


def _fail(error: BaseException, command: Optional[str], code: int) -> int:
    sys.stderr.write(json.dumps({'error': type(error).__name__, 'message': str(error), 'command': command}) + '\n')
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    command: Optional[str] = None
    try:
        args = build_parser().parse_args(argv)
        command = _command_name(args)
        apply_settings(load_settings(args.config))
        cache.configure(settings.cache)
        configure_logging(args.log_level)
        if args.out is None:
            args.out = Path('runs') / command.replace(' ', '-')

        outcome = COMMANDS[command](args)
        _write_json(args.out / 'run.json', {
            'version': RUN_VERSION,
            'command': command,
            'argv': argv,
            'seed': outcome.get('seed'),
            'settings': settings.model_dump(mode='json'),
            'outputs': {k: str(v) for k, v in outcome.get('outputs', {}).items()},
        })
        return outcome.get('exit_code', 0)

    except (UsageError, ConfigError, ValidationError) as e:
        return _fail(e, command, 2)
    except Exception as e:
        logger.exception(f"{command} failed: {str(e)}")
        return _fail(e, command, 1)
