"""Service layer for the run registry."""

import logging
from typing import List, Optional

from sqlmodel import select

from app.database import create_tables, get_session
from app.models import Command, Report, ReportRecord

logger = logging.getLogger(__name__)


class RunRegistryService:
    """Persist reports so identical inputs can be looked up by digest."""

    @staticmethod
    def record(report: Report) -> ReportRecord:
        """Store a finished report."""
        create_tables()
        with get_session() as session:
            record = ReportRecord(
                command=report.command,
                inputs_digest=report.inputs_digest,
                seed=report.seed,
                version=report.version,
                payload=report.model_dump(mode="json"),
            )
            session.add(record)
            session.commit()
            session.refresh(record)
            logger.info(f"Recorded {report.command.value} run {record.id} ({report.inputs_digest[:12]})")
            return record

    @staticmethod
    def latest(command: Optional[Command] = None) -> Optional[ReportRecord]:
        """Most recent record, optionally for one command."""
        create_tables()
        with get_session() as session:
            query = select(ReportRecord)
            if command is not None:
                query = query.where(ReportRecord.command == command)
            query = query.order_by(ReportRecord.created_at.desc(), ReportRecord.id.desc())  # type: ignore[union-attr]
            return session.exec(query).first()

    @staticmethod
    def find_by_digest(inputs_digest: str) -> List[ReportRecord]:
        """All records produced from the same inputs, oldest first."""
        create_tables()
        with get_session() as session:
            query = (
                select(ReportRecord)
                .where(ReportRecord.inputs_digest == inputs_digest)
                .order_by(ReportRecord.id)  # type: ignore[arg-type]
            )
            return list(session.exec(query))
