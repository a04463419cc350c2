import sys

import click
import yaml
from loguru import logger

from config import LOG_LEVEL, OUT_DIR, configure_logging
from exceptions import DecodeError, EncodingError, ScenarioError, WalCorruptionError
from models import Transaction
from services.codec_service import decode_transaction, encode_transaction, tx_digest
from services.metrics_service import format_table
from services.scenario_service import load_scenario, minimize, run_scenario, sweep, write_outputs
from services.storage_service import dump_wal

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_VIOLATION = 2


def transaction_fields(tx: Transaction):
    """(name, text) pairs in wire order; the format tx decode prints and the vector file uses"""
    rows = [
        ('tx_type', f"0x{tx.tx_type:02x}"),
        ('chain_id', str(tx.chain_id)),
        ('sender', tx.sender.hex()),
        ('to', tx.to.hex() if tx.to is not None else 'create'),
        ('value', str(tx.value)),
        ('nonce', str(tx.nonce)),
        ('gas_limit', str(tx.gas_limit)),
        ('gas_price', str(tx.gas_price)),
        ('signature', tx.signature.hex()),
        ('access_list', str(len(tx.access_list))),
    ]
    for i, entry in enumerate(tx.access_list):
        rows.append((f"access_list[{i}].address", entry.address.hex()))
        rows.append((f"access_list[{i}].storage_keys", ','.join(k.hex() for k in entry.storage_keys) or '-'))
    rows.append(('input', tx.input.hex() or '-'))
    return rows


@click.group()
@click.option('--log-level', envvar='TIPCUT_LOG_LEVEL', default=LOG_LEVEL, show_default=True)
def cli(log_level):
    """Tip-cut consensus desk simulator"""
    configure_logging(log_level)


@cli.command()
@click.option('--scenario', 'scenario_path', required=True, type=click.Path(dir_okay=False))
@click.option('--seed', type=int, envvar='TIPCUT_SEED', default=None, help='Overrides the scenario seed')
@click.option('--out', 'out_dir', envvar='TIPCUT_OUT_DIR', default=None, type=click.Path(file_okay=False))
@click.option('--trace', is_flag=True, help='Also write trace.jsonl')
@click.option('--sweep', 'sweep_count', type=int, default=0, help='Run this many consecutive seeds')
def run(scenario_path, seed, out_dir, trace, sweep_count):
    """Run a scenario and write its metrics"""
    try:
        scenario = load_scenario(scenario_path)
    except ScenarioError as e:
        logger.error(f"Scenario error: {e}")
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    if seed is not None:
        scenario = scenario.with_seed(seed)

    if sweep_count:
        results = sweep(scenario_path, scenario.net.seed, sweep_count)
        failed = [(s, v) for s, _, v in results if v is not None]
        for s, metrics, violation in results:
            status = 'VIOLATION' if violation else 'ok'
            click.echo(f"seed={s} {status} cuts={metrics['committed_cuts']} "
                       f"latency_rt={metrics['latency_rt_mean']} halted={metrics['halted']}")
        for s, (message, at_ms) in failed:
            click.echo(f"invariant violation with seed {s} at {at_ms:.1f} ms: {message}", err=True)
        sys.exit(EXIT_VIOLATION if failed else EXIT_OK)

    result = run_scenario(scenario)
    target = out_dir or scenario.out_dir or OUT_DIR
    try:
        write_outputs(result, target, trace or scenario.trace)
    except OSError as e:
        logger.error(f"Could not write outputs to {target}: {e}")
        click.echo(f"config error: cannot write to {target}: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    click.echo(format_table(result.metrics))

    if result.violation is not None:
        shortest = minimize(scenario, result.violation.at_ms)
        click.echo(f"invariant violation: {result.violation}", err=True)
        click.echo(f"reproduce with --seed {result.violation.seed} "
                   f"(still fails with duration {shortest:.1f} ms)", err=True)
        sys.exit(EXIT_VIOLATION)
    sys.exit(EXIT_OK)


@cli.group()
def tx():
    """Transaction codec utilities"""


@tx.command('decode')
@click.argument('payload_hex')
def tx_decode(payload_hex):
    try:
        payload = bytes.fromhex(payload_hex.strip().removeprefix('0x'))
    except ValueError as e:
        click.echo(f"error: not hex: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        decoded = decode_transaction(payload)
    except DecodeError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    for name, text in transaction_fields(decoded):
        click.echo(f"{name}: {text}")
    click.echo(f"digest: {tx_digest(decoded).hex()}")


@tx.command('encode')
@click.argument('field_file', type=click.Path(exists=True, dir_okay=False))
def tx_encode(field_file):
    """Encode a YAML field file (keys as in Transaction.to_dict)"""
    try:
        with open(field_file) as fh:
            data = yaml.safe_load(fh) or {}
        tx_obj = Transaction.from_dict(data)
        click.echo(encode_transaction(tx_obj).hex())
    except (KeyError, TypeError, ValueError, yaml.YAMLError, EncodingError) as e:
        click.echo(f"error: {type(e).__name__}: {e}", err=True)
        sys.exit(EXIT_CONFIG)


@cli.command('wal-dump')
@click.argument('wal_file', type=click.Path(exists=True, dir_okay=False))
def wal_dump(wal_file):
    """Print every WAL record, grouped by height marker"""
    with open(wal_file, 'rb') as fh:
        data = fh.read()
    try:
        lines = dump_wal(data)
    except WalCorruptionError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    for line in lines:
        click.echo(line)


if __name__ == '__main__':
    cli()
