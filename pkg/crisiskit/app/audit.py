from __future__ import annotations
from typing import List, Optional
from sqlalchemy.orm import Session
from sqlalchemy import select, desc
from .models import RunLog

def write_log(
    db: Session,
    actor: str,
    stage: str,
    action: str,
    summary: str = "",
    *,
    seed: Optional[int] = None,
    manifest_hash: Optional[str] = None,
    duration_s: Optional[float] = None,
) -> RunLog:
    row = RunLog(
        actor=actor, stage=stage, action=action, summary=summary,
        seed=seed, manifest_hash=manifest_hash, duration_s=duration_s,
    )
    db.add(row)
    db.commit()
    return row

def recent_logs(db: Session, limit: int = 10, stage: Optional[str] = None) -> List[RunLog]:
    q = select(RunLog)
    if stage:
        q = q.where(RunLog.stage == stage)
    return db.scalars(q.order_by(desc(RunLog.created_at), desc(RunLog.id)).limit(limit)).all()

def as_dict(row: RunLog) -> dict:
    return {
        "id": row.id,
        "when": row.created_at.isoformat(timespec="seconds"),
        "actor": row.actor,
        "stage": row.stage,
        "action": row.action,
        "seed": row.seed,
        "manifest_hash": row.manifest_hash,
        "duration_s": row.duration_s,
        "summary": row.summary,
    }
