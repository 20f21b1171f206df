# crisiskit/app/db.py
from __future__ import annotations

from pathlib import Path
from typing import Dict, Iterator

from contextlib import contextmanager
from sqlalchemy import create_engine
from sqlalchemy.orm import Session, sessionmaker

from .models import Base

LEDGER_FILE = "runs.db"

# cache of SessionLocal per output directory
_SESSIONS: Dict[str, sessionmaker] = {}

def _session_for_out(out_dir: Path) -> sessionmaker:
    key = str(Path(out_dir).resolve())
    if key in _SESSIONS:
        return _SESSIONS[key]
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    db_path = Path(key) / LEDGER_FILE
    engine = create_engine(f"sqlite:///{db_path}", connect_args={"check_same_thread": False}, future=True)
    # ledger table is created lazily on first use of each output dir
    Base.metadata.create_all(bind=engine)
    SessionLocal = sessionmaker(bind=engine, autoflush=False, autocommit=False, future=True)
    _SESSIONS[key] = SessionLocal
    return SessionLocal

@contextmanager
def ledger_session(out_dir: Path) -> Iterator[Session]:
    """Yield a session on the run ledger that lives inside `out_dir`."""
    db = _session_for_out(out_dir)()
    try:
        yield db
    finally:
        db.close()
