# services/scenario_service.py
"""Scenario files: loading, validation and running.

A scenario is a YAML document:

    name: fault-free
    net:
      n: 4
      f: 1
      seed: 1
      stakes: [1, 1, 1, 1]                      # optional, default all 1
      delay: {kind: fixed, min_ms: 50, max_ms: 50}
      pre_gst_delay: {kind: uniform, min_ms: 50, max_ms: 500}   # optional
      gst_ms: 0
      allow_excess_faults: false
    faults:
      - {replica: 3, behavior: silent_leader, views: [0, 1], window: [0, null]}
      - {replica: 2, behavior: crash, at_ms: 4000}
      - {replica: 1, behavior: wrong_state_root, bias: 1}
    genesis: ../genesis/genesis.yaml             # path, relative to this file, or an inline mapping
    workload: {rate_per_lane: 20, duration_ms: 12000, duplicate_fraction: 0.1,
               mix: {transfer: 0.6, store: 0.2, counter: 0.15, create: 0.05}}
    toggles: {pipelining: true, exec_workers: 1, timeout_ms: 2000}
    output: {trace: false, dir: out}

Unknown keys anywhere in the document are rejected.
"""

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import yaml
from loguru import logger
from tqdm import tqdm

from config import BASE_DIR, DEFAULT_SEED, DUPLICATE_FRACTION, GENESIS_PATH
from exceptions import ScenarioError
from models import Behavior, DelayModel, FaultSpec, NetConfig, Toggles
from services import network_service, workload_service
from services.execution_service import Genesis, load_genesis
from services.journal_service import CommitJournal
from services.metrics_service import format_table, metric_lines

TOP_KEYS = {'name', 'net', 'faults', 'genesis', 'workload', 'toggles', 'output'}
NET_KEYS = {'n', 'f', 'seed', 'stakes', 'delay', 'pre_gst_delay', 'gst_ms', 'allow_excess_faults'}
DELAY_KEYS = {'kind', 'min_ms', 'max_ms'}
FAULT_KEYS = {'replica', 'behavior', 'at_ms', 'views', 'bias', 'window'}
WORKLOAD_KEYS = {'rate_per_lane', 'mix', 'duplicate_fraction', 'duration_ms'}
OUTPUT_KEYS = {'trace', 'dir'}
TOGGLE_KEYS = {f.name for f in fields(Toggles)}
MINIMIZE_STEPS = 8


@dataclass
class Scenario:
    name: str
    net: NetConfig
    genesis: Genesis
    duration_ms: float = 10_000.0
    rate_per_lane: float = 0.0
    mix: dict = field(default_factory=dict)
    duplicate_fraction: float = DUPLICATE_FRACTION
    toggles: Toggles = field(default_factory=Toggles)
    trace: bool = False
    out_dir: Optional[str] = None
    source: Optional[str] = None

    def with_seed(self, seed: int) -> 'Scenario':
        return replace(self, net=replace(self.net, seed=seed))


def _check_keys(data, allowed, where):
    if not isinstance(data, dict):
        raise ScenarioError(f"{where} must be a mapping, got {type(data).__name__}")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ScenarioError(f"unknown key(s) {unknown} in {where}; allowed: {sorted(allowed)}")


def _delay(data, where) -> DelayModel:
    _check_keys(data, DELAY_KEYS, where)
    kind = data.get('kind', 'fixed')
    if kind not in ('fixed', 'uniform'):
        raise ScenarioError(f"{where}.kind must be fixed or uniform, got {kind!r}")
    min_ms = float(data.get('min_ms', 50.0))
    max_ms = float(data.get('max_ms', min_ms))
    if min_ms < 0 or max_ms < min_ms:
        raise ScenarioError(f"{where} needs 0 <= min_ms <= max_ms")
    return DelayModel(kind, min_ms, max_ms)


def _fault(data, i) -> FaultSpec:
    where = f"faults[{i}]"
    _check_keys(data, FAULT_KEYS, where)
    if 'replica' not in data or 'behavior' not in data:
        raise ScenarioError(f"{where} needs replica and behavior")
    try:
        behavior = Behavior(data['behavior'])
    except ValueError:
        raise ScenarioError(f"{where}.behavior {data['behavior']!r} is not one of {[b.value for b in Behavior]}")
    start, end = (data.get('window') or [0, None])
    at_ms = float(data.get('at_ms', 0.0))
    if behavior != Behavior.CRASH and 'at_ms' in data and 'window' not in data:
        start = at_ms
    window = (float(start or 0.0), float('inf') if end is None else float(end))
    return FaultSpec(int(data['replica']), behavior, at_ms, tuple(int(v) for v in data.get('views', ())),
                     int(data.get('bias', 1)), window)


def _genesis(value, base_dir) -> Genesis:
    if value is None:
        return load_genesis(GENESIS_PATH)
    if isinstance(value, dict):
        return load_genesis(value)
    for candidate in (os.path.join(base_dir, value), os.path.join(BASE_DIR, value)):
        if os.path.exists(candidate):
            return load_genesis(candidate)
    raise ScenarioError(f"genesis file {value!r} not found")


def parse_scenario(data: dict, base_dir: str = BASE_DIR, source=None) -> Scenario:
    _check_keys(data, TOP_KEYS, 'scenario')
    net = data.get('net') or {}
    _check_keys(net, NET_KEYS, 'net')
    try:
        n, f = int(net['n']), int(net['f'])
    except KeyError as e:
        raise ScenarioError(f"net.{e.args[0]} is required")
    faults = tuple(_fault(item, i) for i, item in enumerate(data.get('faults') or []))
    config = NetConfig(
        n=n, f=f, seed=int(net.get('seed', DEFAULT_SEED)),
        delay=_delay(net.get('delay') or {}, 'net.delay'),
        pre_gst_delay=_delay(net['pre_gst_delay'], 'net.pre_gst_delay') if net.get('pre_gst_delay') else None,
        gst_ms=float(net.get('gst_ms', 0.0)),
        faults=faults,
        stakes=tuple(int(s) for s in net.get('stakes') or ()),
        allow_excess_faults=bool(net.get('allow_excess_faults', False)),
    )
    network_service.validate_config(config)

    workload = data.get('workload') or {}
    _check_keys(workload, WORKLOAD_KEYS, 'workload')
    mix = dict(workload.get('mix') or workload_service.DEFAULT_MIX)
    unknown = sorted(set(mix) - set(workload_service.TX_KINDS))
    if unknown:
        raise ScenarioError(f"unknown transaction kind(s) {unknown} in workload.mix")

    toggle_data = data.get('toggles') or {}
    _check_keys(toggle_data, TOGGLE_KEYS, 'toggles')
    try:
        toggles = Toggles(**{k: type(getattr(Toggles, k))(v) for k, v in toggle_data.items()})
    except (TypeError, ValueError) as e:
        raise ScenarioError(f"bad toggle value: {e}")
    if toggles.exec_workers < 1:
        raise ScenarioError("toggles.exec_workers must be >= 1")

    output = data.get('output') or {}
    _check_keys(output, OUTPUT_KEYS, 'output')

    return Scenario(
        name=str(data.get('name', 'unnamed')),
        net=config,
        genesis=_genesis(data.get('genesis'), base_dir),
        duration_ms=float(workload.get('duration_ms', 10_000.0)),
        rate_per_lane=float(workload.get('rate_per_lane', 0.0)),
        mix=mix,
        duplicate_fraction=float(workload.get('duplicate_fraction', DUPLICATE_FRACTION)),
        toggles=toggles,
        trace=bool(output.get('trace', False)),
        out_dir=output.get('dir'),
        source=source,
    )


def load_scenario(path) -> Scenario:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as e:
        raise ScenarioError(f"cannot read scenario {path}: {e}")
    except yaml.YAMLError as e:
        raise ScenarioError(f"scenario {path} is not valid YAML: {e}")
    if data is None:
        raise ScenarioError(f"scenario {path} is empty")
    return parse_scenario(data, os.path.dirname(os.path.abspath(path)), source=str(path))


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------

def run_scenario(scenario: Scenario, duration_ms: Optional[float] = None, close=True):
    duration = scenario.duration_ms if duration_ms is None else duration_ms
    config = scenario.net
    workload = workload_service.generate(scenario.genesis, config.n, config.seed, duration,
                                         scenario.rate_per_lane, scenario.mix, scenario.duplicate_fraction)
    replicas = network_service.build_replicas(config, scenario.genesis, scenario.toggles)
    logger.info(f"Running scenario {scenario.name!r} seed={config.seed} n={config.n} for {duration:.0f} ms")
    result = network_service.run(config, replicas, workload, duration, scenario.toggles,
                                 scenario.genesis.state.total_balance())
    result.metrics['scenario'] = scenario.name
    if close:
        result.close()
    return result


def minimize(scenario: Scenario, at_ms: float, steps: int = MINIMIZE_STEPS) -> float:
    """Shortest run duration (to bisection precision) that still violates an invariant"""
    lo, hi = 0.0, float(at_ms)
    for _ in range(steps):
        mid = (lo + hi) / 2
        if run_scenario(scenario, mid).violation is not None:
            hi = mid
        else:
            lo = mid
    return hi


def write_outputs(result, out_dir: str, trace: bool = False):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, 'metrics.jsonl'), 'w') as fh:
        for line in metric_lines(result.metrics):
            fh.write(line + '\n')
    with open(os.path.join(out_dir, 'metrics.txt'), 'w') as fh:
        fh.write(format_table(result.metrics) + '\n')
    if trace:
        result.trace.write(os.path.join(out_dir, 'trace.jsonl'))
    journal_path = os.path.join(out_dir, 'journal.sqlite')
    if os.path.exists(journal_path):
        os.remove(journal_path)
    journal = CommitJournal(f"sqlite:///{journal_path}")
    try:
        journal.ingest(result.trace.records)
    finally:
        journal.close()
    logger.info(f"Wrote metrics{' and trace' if trace else ''} to {out_dir}")


def _sweep_one(args):
    path, seed = args
    result = run_scenario(load_scenario(path).with_seed(seed))
    violation = result.violation
    return seed, result.metrics, (str(violation), violation.at_ms) if violation is not None else None


def sweep(path, first_seed: int, count: int, workers: Optional[int] = None):
    """Run count consecutive seeds in separate processes; returns [(seed, metrics, violation)] by seed"""
    jobs = [(path, first_seed + i) for i in range(count)]
    results = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for item in tqdm(pool.map(_sweep_one, jobs), total=count, desc='seeds', unit='run'):
            results.append(item)
    return sorted(results, key=lambda r: r[0])
