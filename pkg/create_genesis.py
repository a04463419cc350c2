# create_genesis.py

import click
import yaml
from loguru import logger

from config import GENESIS_PATH
from services.execution_service import load_genesis


def create_genesis_file(path, chain_id=1, seed=7, count=32, balance=1_000_000, reserve=0):
    """Write a genesis file with `count` derived client accounts"""
    data = {
        'chain_id': chain_id,
        'clients': {'seed': seed, 'count': count, 'balance': balance},
    }
    if reserve:
        data['accounts'] = [{'address': 'ee' + '00' * 18 + '01', 'balance': reserve}]
    try:
        with open(path, 'w') as fh:
            yaml.safe_dump(data, fh, sort_keys=False)
        genesis = load_genesis(path)
        logger.info(f"Genesis written to {path}: commitment {genesis.state.commitment.hex()}")
        return genesis
    except OSError as e:
        logger.error(f"Error writing genesis file: {e}")
        raise


@click.command()
@click.option('--out', default=GENESIS_PATH, show_default=True)
@click.option('--chain-id', default=1, show_default=True)
@click.option('--seed', default=7, show_default=True)
@click.option('--count', default=32, show_default=True)
@click.option('--balance', default=1_000_000, show_default=True)
@click.option('--reserve', default=50_000_000, show_default=True)
def main(out, chain_id, seed, count, balance, reserve):
    genesis = create_genesis_file(out, chain_id, seed, count, balance, reserve)
    click.echo(f"{len(genesis.clients)} clients, total balance {genesis.state.total_balance()}")


if __name__ == '__main__':
    main()
