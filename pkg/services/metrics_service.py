# services/metrics_service.py
"""Run summary computed from trace records alone, so a saved trace can be re-summarized offline"""

import json
from collections import defaultdict

import numpy as np

WARMUP_SLOTS = 10


def _stats(values):
    if not values:
        return {'mean': None, 'median': None, 'p90': None, 'max': None}
    arr = np.asarray(values, dtype=float)
    return {
        'mean': float(np.mean(arr)),
        'median': float(np.median(arr)),
        'p90': float(np.percentile(arr, 90)),
        'max': float(np.max(arr)),
    }


def slot_latencies(records, faulty=()):
    """Per committed slot: (slot, view, proposal_ms, median commit latency over correct replicas)"""
    faulty = set(faulty)
    by_slot = defaultdict(list)
    for rec in records:
        if rec['kind'] == 'commit' and rec['replica'] not in faulty:
            by_slot[rec['slot']].append(rec)
    out = []
    for slot in sorted(by_slot):
        commits = by_slot[slot]
        proposal = next((c['proposal_ms'] for c in commits if c.get('proposal_ms') is not None), None)
        if proposal is None:
            continue
        latency = float(np.median([c['t'] - proposal for c in commits]))
        out.append((slot, commits[0]['view'], proposal, latency))
    return out


def summarize(records, config, toggles=None, duration_ms=None) -> dict:
    faulty = set(config.faulty())
    rt = config.round_trip_ms
    latencies = slot_latencies(records, faulty)
    all_ms = [lat for _, _, _, lat in latencies]
    steady_ms = [lat for slot, view, _, lat in latencies if view == 0 and slot >= WARMUP_SLOTS]
    commits = [r for r in records if r['kind'] == 'commit']

    counts = defaultdict(int)
    view_changes = set()
    halted_at = None
    lags = []
    heights = defaultdict(int)
    occ = defaultdict(int)
    duplicates = defaultdict(int)
    diverged = set()
    for rec in records:
        kind = rec['kind']
        counts[kind] += 1
        if kind == 'view_change':
            view_changes.add((rec['slot'], rec['view']))
        elif kind == 'halted' and rec['replica'] not in faulty:
            halted_at = rec['height'] if halted_at is None else min(halted_at, rec['height'])
        elif kind == 'diverged':
            diverged.add(rec['replica'])
        elif kind == 'exec' and rec['replica'] not in faulty:
            heights[rec['replica']] = max(heights[rec['replica']], rec['height'])
            for key in ('aborts', 'executions', 'fallbacks'):
                occ[key] += rec.get(key, 0)
            occ['max_incarnation'] = max(occ['max_incarnation'], rec.get('max_incarnation', 0))
            duplicates[rec['replica']] += len(rec['duplicates'])
            if rec['replica'] == min(set(range(config.n)) - faulty, default=0) and rec['lag'] is not None:
                lags.append(rec['lag'])

    committed_slots = sorted({r['slot'] for r in commits})
    summary = {
        'seed': config.seed,
        'n': config.n,
        'f': config.f,
        'duration_ms': duration_ms,
        'pipelining': toggles.pipelining if toggles is not None else None,
        'round_trip_ms': rt,
        'committed_cuts': len(committed_slots),
        'first_commit_ms': min((r['t'] for r in commits), default=None),
        'latency_ms': _stats(all_ms),
        'steady_latency_ms': _stats(steady_ms),
        'latency_rt_mean': float(np.mean(all_ms)) / rt if all_ms else None,
        'latency_rt_median': float(np.median(all_ms)) / rt if all_ms else None,
        'steady_latency_rt_mean': float(np.mean(steady_ms)) / rt if steady_ms else None,
        'steady_slots': len(steady_ms),
        'view_changes': len(view_changes),
        'timeouts': counts['timeout'],
        'fetches': counts['fetch'],
        'occ_aborts': occ['aborts'],
        'occ_executions': occ['executions'],
        'occ_fallbacks': occ['fallbacks'],
        'occ_max_incarnation': occ['max_incarnation'],
        'state_lag': _stats(lags),
        'state_lag_max': max(lags, default=0),
        'halted': halted_at is not None,
        'halted_height': halted_at,
        'diverged_replicas': sorted(diverged),
        'omitted_tip_flags': counts['omitted_tip'],
        'rejected_prepares': counts['prepare_rejected'],
        'confirm_rounds': counts['confirm'],
        'confirm_certs': counts['confirm_cert'],
        'confirm_timeouts': counts['confirm_timeout'],
        'lane_equivocations': counts['lane_equivocation'],
        'missed_slots': counts['missed_slot'],
        'executed_height': min(heights.values(), default=0),
        'duplicates_skipped': max(duplicates.values(), default=0),
    }
    return summary


def metric_lines(summary: dict):
    """One JSON object per metric"""
    for key in sorted(summary):
        yield json.dumps({'metric': key, 'value': summary[key]}, sort_keys=True)


def format_table(summary: dict) -> str:
    rows = []
    for key in sorted(summary):
        value = summary[key]
        if isinstance(value, dict):
            value = '  '.join(f"{k}={_fmt(v)}" for k, v in value.items())
        else:
            value = _fmt(value)
        rows.append((key, value))
    width = max(len(k) for k, _ in rows)
    return '\n'.join(f"{k:<{width}}  {v}" for k, v in rows)


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.3f}"
    return str(value)
