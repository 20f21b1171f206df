from __future__ import annotations

from datetime import datetime

from sqlalchemy import Column, DateTime, Float, Integer, String, Text
from sqlalchemy.orm import declarative_base

Base = declarative_base()

# --- Run ledger ---------------------------------------------------------------
class RunLog(Base):
    __tablename__ = "run_logs"
    id = Column(Integer, primary_key=True)
    created_at = Column(DateTime, default=datetime.utcnow, nullable=False)
    actor = Column(String(120), nullable=False)
    stage = Column(String(64), nullable=False)       # subcommand name
    action = Column(String(32), nullable=False)      # "ok" | "error"
    seed = Column(Integer, nullable=True)
    summary = Column(Text, nullable=True)
    manifest_hash = Column(String(64), nullable=True)
    duration_s = Column(Float, nullable=True)
