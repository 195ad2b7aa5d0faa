"""Transcript storage: every request/response pair of a run, in SQLite."""

import logging
from datetime import datetime, timezone
from typing import List, Optional

from sqlmodel import Field, Session, SQLModel, create_engine, func, select

logger = logging.getLogger(__name__)


class TranscriptEntry(SQLModel, table=True):
    """One completed backend call, keyed by its request sequence number."""

    __tablename__ = "transcript"

    id: Optional[int] = Field(default=None, primary_key=True)
    sequence: int = Field(index=True, unique=True)
    tag: str = Field(index=True)
    messages: str  # JSON list of {role, content}
    temperature: float
    max_tokens: int
    prompt_sha256: str
    response: str
    latency_ms: float
    backend_id: str
    recorded_at: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))


class TranscriptStore:
    """SQLite connection for one run's transcript."""

    def __init__(self, database_url: str = "sqlite:///./transcript.sqlite"):
        self.database_url = database_url
        self.engine = create_engine(database_url, echo=False)
        self.create_tables()

    @classmethod
    def for_run(cls, run_dir) -> "TranscriptStore":
        return cls(f"sqlite:///{run_dir}/transcript.sqlite")

    def create_tables(self):
        """Create all tables."""
        SQLModel.metadata.create_all(self.engine)

    def get_session(self):
        """Get database session."""
        return Session(self.engine)

    def add_entries(self, entries: List[TranscriptEntry]):
        """Append a batch of entries in one transaction."""
        if not entries:
            return
        with self.get_session() as session:
            session.add_all(entries)
            session.commit()
        logger.debug(f"Flushed {len(entries)} transcript entries")

    def get_entries(self) -> List[TranscriptEntry]:
        """All entries in sequence order."""
        with self.get_session() as session:
            statement = select(TranscriptEntry).order_by(TranscriptEntry.sequence)
            return list(session.exec(statement))

    def count(self) -> int:
        with self.get_session() as session:
            return session.exec(select(func.count()).select_from(TranscriptEntry)).one()

    def truncate(self, length: int):
        """Drop every entry with sequence >= length."""
        with self.get_session() as session:
            statement = select(TranscriptEntry).where(TranscriptEntry.sequence >= length)
            for entry in session.exec(statement).all():
                session.delete(entry)
            session.commit()

    def close(self):
        self.engine.dispose()
