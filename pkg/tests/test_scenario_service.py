import math
import os
from types import SimpleNamespace

import pytest

from config import SCENARIO_DIR
from exceptions import ScenarioError
from models import Behavior
from services import scenario_service
from services.journal_service import CommitJournal
from services.scenario_service import load_scenario, minimize, parse_scenario, run_scenario, write_outputs

GENESIS = {'chain_id': 1, 'clients': {'seed': 7, 'count': 8, 'balance': 1_000_000}}


def document(**overrides):
    data = {'name': 'doc', 'net': {'n': 4, 'f': 1}, 'genesis': dict(GENESIS)}
    data.update(overrides)
    return data


@pytest.mark.parametrize('name', sorted(os.listdir(SCENARIO_DIR)))
def test_bundled_scenarios_load(name):
    scenario = load_scenario(os.path.join(SCENARIO_DIR, name))
    assert scenario.net.n == 3 * scenario.net.f + 1
    assert scenario.duration_ms > 0
    assert scenario.genesis.clients


def test_defaults():
    scenario = parse_scenario(document())
    assert scenario.name == 'doc'
    assert scenario.net.seed == 1
    assert scenario.net.delay.kind == 'fixed'
    assert scenario.toggles.pipelining
    assert scenario.toggles.exec_workers == 1
    assert scenario.rate_per_lane == 0.0
    assert not scenario.trace


def test_fault_fields():
    scenario = parse_scenario(document(faults=[
        {'replica': 1, 'behavior': 'silent_leader', 'views': [0, 1], 'window': [100, None]},
        {'replica': 2, 'behavior': 'crash', 'at_ms': 4000},
        {'replica': 3, 'behavior': 'wrong_state_root', 'at_ms': 500},
    ], net={'n': 4, 'f': 1, 'allow_excess_faults': True}))
    silent, crashed, wrong = scenario.net.faults
    assert silent.behavior == Behavior.SILENT_LEADER
    assert silent.views == (0, 1)
    assert silent.window == (100.0, math.inf)
    assert crashed.at_ms == 4000.0 and crashed.window == (0.0, math.inf)
    assert wrong.window == (500.0, math.inf)


def test_toggles_are_coerced():
    scenario = parse_scenario(document(toggles={'pipelining': False, 'timeout_ms': 1500, 'exec_workers': 4}))
    assert scenario.toggles.pipelining is False
    assert scenario.toggles.timeout_ms == 1500.0
    assert scenario.toggles.exec_workers == 4


@pytest.mark.parametrize('overrides', [
    {'colour': 'blue'},
    {'net': {'n': 4, 'f': 1, 'latency': 5}},
    {'net': {'n': 5, 'f': 1}},
    {'net': {'f': 1}},
    {'net': {'n': 4, 'f': 1, 'delay': {'kind': 'gaussian'}}},
    {'net': {'n': 4, 'f': 1, 'delay': {'kind': 'uniform', 'min_ms': 80, 'max_ms': 20}}},
    {'faults': [{'replica': 1, 'behavior': 'teleport'}]},
    {'faults': [{'replica': 1}]},
    {'faults': [{'replica': 1, 'behavior': 'crash'}, {'replica': 2, 'behavior': 'crash'}]},
    {'workload': {'rate_per_lane': 5, 'mix': {'swap': 1.0}}},
    {'toggles': {'exec_workers': 0}},
    {'toggles': {'turbo': True}},
    {'output': {'format': 'csv'}},
    {'genesis': 'nowhere/genesis.yaml'},
])
def test_rejects_bad_documents(overrides):
    with pytest.raises(ScenarioError):
        parse_scenario(document(**overrides))


def test_load_scenario_errors(tmp_path):
    with pytest.raises(ScenarioError):
        load_scenario(tmp_path / 'missing.yaml')
    empty = tmp_path / 'empty.yaml'
    empty.write_text('')
    with pytest.raises(ScenarioError):
        load_scenario(empty)
    broken = tmp_path / 'broken.yaml'
    broken.write_text('net: {n: 4\n')
    with pytest.raises(ScenarioError):
        load_scenario(broken)


def test_with_seed_leaves_original(make_scenario):
    scenario = make_scenario(seed=3)
    assert scenario.with_seed(9).net.seed == 9
    assert scenario.net.seed == 3


def test_write_outputs(tmp_path, make_scenario):
    result = run_scenario(make_scenario(duration_ms=1500.0))
    write_outputs(result, str(tmp_path), trace=True)
    assert {p.name for p in tmp_path.iterdir()} == {'metrics.jsonl', 'metrics.txt', 'trace.jsonl', 'journal.sqlite'}
    assert 'committed_cuts' in (tmp_path / 'metrics.txt').read_text()
    journal = CommitJournal(f"sqlite:///{tmp_path / 'journal.sqlite'}")
    try:
        assert len(journal) == len(result.trace.of_kind('commit')) > 0
        assert journal.conflicting_slots() == []
    finally:
        journal.close()

    write_outputs(result, str(tmp_path))
    journal = CommitJournal(f"sqlite:///{tmp_path / 'journal.sqlite'}")
    try:
        assert len(journal) == len(result.trace.of_kind('commit'))
    finally:
        journal.close()


def test_minimize_bisects_to_first_failing_duration(monkeypatch, make_scenario):
    calls = []

    def fake_run(scenario, duration_ms=None, close=True):
        calls.append(duration_ms)
        return SimpleNamespace(violation=object() if duration_ms >= 300.0 else None)

    monkeypatch.setattr(scenario_service, 'run_scenario', fake_run)
    shortest = minimize(make_scenario(), 1000.0, steps=10)
    assert len(calls) == 10
    assert 300.0 <= shortest <= 300.0 + 1000.0 / 2 ** 10
