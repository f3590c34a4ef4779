"""
Tests for the command-line entry point.
"""

import json

import pandas as pd
import pytest

from mbxlab.cli import build_parser, main
from mbxlab.container import serialize_mbx
from mbxlab.detector import save_model

from tests.conftest import SAVER_LINES, assemble_image


def _last_error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


class TestErrors:

    def test_unknown_command(self, capsys):
        """Test that a bad command line exits 2 with a JSON error line"""
        assert main(['explode']) == 2
        error = _last_error(capsys)
        assert error['error'] == 'UsageError'
        assert error['command'] is None

    def test_missing_required_flag(self, capsys):
        """Test that a missing required flag is a usage error"""
        assert main(['train']) == 2
        assert _last_error(capsys)['error'] == 'UsageError'

    def test_missing_config_file(self, tmp_path, capsys):
        """Test that an unreadable settings file exits 2"""
        code = main(['report', '--config', str(tmp_path / 'missing.toml'), '--out', str(tmp_path)])
        assert code == 2
        error = _last_error(capsys)
        assert error['error'] == 'ConfigError'
        assert error['command'] == 'report'

    def test_runtime_failure(self, tmp_path, capsys):
        """Test that a failing command exits 1 and names itself"""
        code = main(['verify', str(tmp_path / 'a.mbx'), str(tmp_path / 'b.mbx'), '--out', str(tmp_path)])
        assert code == 1
        assert _last_error(capsys)['command'] == 'verify'


class TestParser:

    def test_leaf_flags_everywhere(self):
        """Test that every command takes the shared flags"""
        args = build_parser().parse_args(['corpus', 'gen', '--seed', '4', '--jobs', '2', '--log-level', 'DEBUG'])
        assert (args.command, args.action, args.seed, args.jobs, args.log_level) == ('corpus', 'gen', 4, 2, 'DEBUG')

    def test_attack_defaults(self):
        """Test the attack command defaults"""
        args = build_parser().parse_args(['attack', '--model', 'm', '--threshold', 't', '--corpus', 'c'])
        assert (args.mode, args.transforms, args.label, args.split) == ('whitebox', 'ipr+disp', 'malicious', 'test')


class TestCommands:

    def test_corpus_gen(self, tmp_path):
        """Test that corpus gen writes the manifest, samples and run.json"""
        spec = tmp_path / 'corpus.toml'
        spec.write_text("[corpus]\nmin_size = 512\nmax_size = 768\nmin_functions = 3\nmax_functions = 4\n")
        out = tmp_path / 'corpus'
        code = main(['corpus', 'gen', '--spec', str(spec), '--n-benign', '10', '--n-malicious', '10',
                     '--seed', '3', '--out', str(out)])
        assert code == 0

        manifest = pd.read_csv(out / 'manifest.csv')
        assert len(manifest) == 20
        assert manifest['split'].value_counts().to_dict() == {'train': 16, 'val': 2, 'test': 2}
        assert all((out / path).exists() for path in manifest['path'])

        run = json.loads((out / 'run.json').read_text())
        assert run['command'] == 'corpus gen'
        assert run['seed'] == 3
        assert 'manifest' in run['outputs']

    def test_verify_equivalent(self, tmp_path):
        """Test that identical behaviour exits 0 and records verdicts"""
        a, b = tmp_path / 'a.mbx', tmp_path / 'b.mbx'
        a.write_bytes(serialize_mbx(assemble_image(["mov eax, 0", "ret"])))
        b.write_bytes(serialize_mbx(assemble_image(["xor eax, eax", "ret"])))
        assert main(['verify', '--trials', '5', str(a), str(b), '--out', str(tmp_path / 'v')]) == 0
        verdicts = json.loads((tmp_path / 'v' / 'verdicts.json').read_text())
        assert verdicts['all_equivalent'] is True

    def test_verify_divergent(self, tmp_path):
        """Test that a behavioural difference exits 1"""
        a, b = tmp_path / 'a.mbx', tmp_path / 'b.mbx'
        a.write_bytes(serialize_mbx(assemble_image(["mov eax, 1", "ret"])))
        b.write_bytes(serialize_mbx(assemble_image(["mov eax, 2", "ret"])))
        assert main(['verify', '--trials', '5', str(a), str(b), '--out', str(tmp_path / 'v')]) == 1
        verdicts = json.loads((tmp_path / 'v' / 'verdicts.json').read_text())
        assert verdicts['functions']['0']['equivalent'] is False

    @pytest.mark.parametrize("command", [['classify'], ['defend', 'sanitize'], ['defend', 'mask']])
    def test_scoring_commands(self, tmp_path, tiny_model, half_threshold, command):
        """Test that classify and defend write one row per file"""
        model_path, threshold_path = tmp_path / 'detector.mbxd', tmp_path / 'threshold.json'
        save_model(tiny_model, model_path)
        threshold_path.write_text(json.dumps(half_threshold.to_dict()))
        sample = tmp_path / 'saver.mbx'
        sample.write_bytes(serialize_mbx(assemble_image(SAVER_LINES, data=[b'\x01' * 16])))

        out = tmp_path / 'out'
        code = main(command + ['--model', str(model_path), '--threshold', str(threshold_path),
                               '--out', str(out), str(sample)])
        assert code == 0
        name = 'scores.csv' if command[0] == 'classify' else 'defended_scores.csv'
        frame = pd.read_csv(out / name)
        assert len(frame) == 1
        assert frame['label'].iloc[0] in ('benign', 'malicious')

    def test_report_without_results(self, tmp_path):
        """Test that an empty results tree still yields a report"""
        out = tmp_path / 'report'
        assert main(['report', str(tmp_path / 'nothing'), '--out', str(out)]) == 0
        assert "No results found." in (out / 'report.md').read_text()


# Run tests with:
# pytest tests/test_cli.py -v
