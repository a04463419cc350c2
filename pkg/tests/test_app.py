import json
import os

import pytest
import yaml
from click.testing import CliRunner

from app import EXIT_CONFIG, EXIT_OK, cli
from config import SCENARIO_DIR
from services.codec_service import decode_transaction
from services.storage_service import FlatStore
from tests.test_codec_service import VECTORS


@pytest.fixture
def runner():
    return CliRunner()


def invoke(runner, *args):
    return runner.invoke(cli, ['--log-level', 'ERROR', *args])


@pytest.mark.parametrize('vector', VECTORS, ids=[v['name'] for v in VECTORS])
def test_tx_decode_prints_field_table(runner, vector):
    result = invoke(runner, 'tx', 'decode', vector['hex'])
    assert result.exit_code == EXIT_OK
    printed = dict(line.split(': ', 1) for line in result.output.splitlines())
    for name, value in vector.items():
        if name not in ('name', 'hex'):
            assert printed[name] == value
    assert len(printed['digest']) == 64


def test_tx_decode_rejects_truncated_payload(runner):
    result = invoke(runner, 'tx', 'decode', VECTORS[0]['hex'][:40])
    assert result.exit_code == EXIT_CONFIG
    assert 'offset' in result.output


def test_tx_decode_rejects_non_hex(runner):
    assert invoke(runner, 'tx', 'decode', 'zz').exit_code == EXIT_CONFIG


def test_tx_encode_from_field_file(runner, tmp_path):
    vector = VECTORS[1]
    fields = decode_transaction(bytes.fromhex(vector['hex'])).to_dict()
    path = tmp_path / 'tx.yaml'
    path.write_text(yaml.safe_dump(fields))
    result = invoke(runner, 'tx', 'encode', str(path))
    assert result.exit_code == EXIT_OK
    assert result.output.strip() == vector['hex']


def test_tx_encode_rejects_bad_fields(runner, tmp_path):
    path = tmp_path / 'tx.yaml'
    path.write_text('chain_id: 1\n')
    assert invoke(runner, 'tx', 'encode', str(path)).exit_code == EXIT_CONFIG
    path.write_text('tx_type: 2\nchain_id: 1\nsender: nothex\n')
    assert invoke(runner, 'tx', 'encode', str(path)).exit_code == EXIT_CONFIG


def test_run_missing_scenario(runner, tmp_path):
    result = invoke(runner, 'run', '--scenario', str(tmp_path / 'absent.yaml'))
    assert result.exit_code == EXIT_CONFIG


def test_run_bad_scenario(runner, tmp_path):
    path = tmp_path / 'bad.yaml'
    path.write_text('net: {n: 5, f: 1}\n')
    result = invoke(runner, 'run', '--scenario', str(path))
    assert result.exit_code == EXIT_CONFIG
    assert 'config error' in result.output


def test_run_writes_outputs(runner, tmp_path):
    path = tmp_path / 'small.yaml'
    path.write_text(yaml.safe_dump({
        'name': 'small',
        'net': {'n': 4, 'f': 1, 'seed': 2, 'delay': {'kind': 'fixed', 'min_ms': 50, 'max_ms': 50}},
        'genesis': os.path.join(os.path.dirname(SCENARIO_DIR), 'genesis', 'genesis.yaml'),
        'workload': {'rate_per_lane': 5, 'duration_ms': 1500},
    }))
    out = tmp_path / 'out'
    result = invoke(runner, 'run', '--scenario', str(path), '--out', str(out), '--trace', '--seed', '4')
    assert result.exit_code == EXIT_OK, result.output
    metrics = {m['metric']: m['value'] for m in map(json.loads, (out / 'metrics.jsonl').read_text().splitlines())}
    assert metrics['seed'] == 4
    assert metrics['scenario'] == 'small'
    assert metrics['committed_cuts'] > 0
    assert (out / 'trace.jsonl').exists()
    assert 'committed_cuts' in result.output


def test_wal_dump(runner, tmp_path):
    wal = tmp_path / 'wal.log'
    store = FlatStore(str(wal))
    store.apply_block(0, {})
    store.apply_block(1, {})
    store.close()
    result = invoke(runner, 'wal-dump', str(wal))
    assert result.exit_code == EXIT_OK
    assert '== height 1' in result.output


def test_wal_dump_reports_corruption(runner, tmp_path):
    wal = tmp_path / 'wal.log'
    store = FlatStore(str(wal))
    store.apply_block(0, {})
    store.apply_block(1, {})
    store.close()
    data = bytearray(wal.read_bytes())
    data[6] ^= 0xFF
    wal.write_bytes(bytes(data))
    result = invoke(runner, 'wal-dump', str(wal))
    assert result.exit_code == EXIT_CONFIG
