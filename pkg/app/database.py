import os
from pathlib import Path
from typing import Optional

from sqlalchemy.engine import Engine
from sqlmodel import SQLModel, create_engine, Session

from app.models import ReportRecord  # noqa: F401

DEFAULT_DATABASE_URL = f"sqlite:///{Path.cwd() / 'cone_infer_runs.db'}"
DATABASE_URL = os.environ.get("CONE_INFER_DATABASE_URL", DEFAULT_DATABASE_URL)
ENGINE: Optional[Engine] = None


def make_engine(url: str) -> Engine:
    connect_args = {"check_same_thread": False} if url.startswith("sqlite") else {"connect_timeout": 15}
    return create_engine(url, connect_args=connect_args)


def configure(url: Optional[str] = None) -> Engine:
    """Point the registry at a database URL; the environment default is used otherwise."""
    global ENGINE
    ENGINE = make_engine(url or DATABASE_URL)
    return ENGINE


def get_engine() -> Engine:
    return ENGINE if ENGINE is not None else configure()


def create_tables():
    SQLModel.metadata.create_all(get_engine())


def get_session():
    return Session(get_engine())


def reset_db():
    """Wipe all tables in the database. Use with caution - for testing only!"""
    SQLModel.metadata.drop_all(get_engine())
    SQLModel.metadata.create_all(get_engine())
