# services/journal_service.py
"""Committed-cut journal backed by SQLAlchemy.

One row per (replica, slot) commit. The audits run as SQL over the table so a
journal written by one run can be checked later without the trace.
"""

import json

from loguru import logger
from sqlalchemy import create_engine, func, select
from sqlalchemy.orm import Session

from models import Base, CommittedCutRecord


class CommitJournal:
    def __init__(self, url: str = 'sqlite://'):
        self.url = url
        self.engine = create_engine(url)
        Base.metadata.create_all(self.engine)

    def ingest(self, records) -> int:
        """Append commit rows from trace records; confirm certificates fill in confirm_signers"""
        confirms = {(r['slot'], r['view'], r['cut']): r['confirm'] for r in records if r['kind'] == 'confirm_cert'}
        rows = []
        for rec in records:
            if rec['kind'] != 'commit':
                continue
            rows.append(CommittedCutRecord(
                replica=rec['replica'],
                slot=rec['slot'],
                view=rec['view'],
                cut_digest=rec['cut'],
                tips=json.dumps(rec['positions']),
                prepare_signers=format(rec['prepare'], 'x'),
                commit_signers=format(rec['commit'], 'x'),
                confirm_signers=format(confirms.get((rec['slot'], rec['view'], rec['cut']), 0), 'x'),
                committed_at_ms=rec['t'],
            ))
        with Session(self.engine) as session:
            session.add_all(rows)
            session.commit()
        logger.info(f"Journaled {len(rows)} commits to {self.url}")
        return len(rows)

    def __len__(self):
        with Session(self.engine) as session:
            return session.scalar(select(func.count()).select_from(CommittedCutRecord))

    def rows(self, replica=None):
        with Session(self.engine) as session:
            stmt = select(CommittedCutRecord).order_by(CommittedCutRecord.replica, CommittedCutRecord.slot)
            if replica is not None:
                stmt = stmt.where(CommittedCutRecord.replica == replica)
            return [row.to_dict() for row in session.scalars(stmt)]

    def conflicting_slots(self):
        """Slots for which more than one cut digest was committed"""
        with Session(self.engine) as session:
            stmt = (select(CommittedCutRecord.slot)
                    .group_by(CommittedCutRecord.slot)
                    .having(func.count(func.distinct(CommittedCutRecord.cut_digest)) > 1)
                    .order_by(CommittedCutRecord.slot))
            return list(session.scalars(stmt))

    def stale_tip_count(self, replica=0):
        """Lane entries in a committed cut that sit below that lane's position in an earlier slot"""
        stale = 0
        high = None
        for row in self.rows(replica):
            positions = json.loads(row['tips'])
            if high is not None:
                stale += sum(1 for p, h in zip(positions, high) if p < h)
                high = [max(p, h) for p, h in zip(positions, high)]
            else:
                high = positions
        return stale

    def close(self):
        self.engine.dispose()
