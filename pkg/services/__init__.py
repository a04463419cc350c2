# services/__init__.py

# Import modules
from . import (codec_service, commitment_service, consensus_service, crypto_service, execution_service,
               journal_service, lane_service, metrics_service, network_service, parallel_executor, replica,
               scenario_service, storage_service, workload_service)

# Export modules
__all__ = [
    'codec_service',
    'commitment_service',
    'consensus_service',
    'crypto_service',
    'execution_service',
    'journal_service',
    'lane_service',
    'metrics_service',
    'network_service',
    'parallel_executor',
    'replica',
    'scenario_service',
    'storage_service',
    'workload_service',
]
