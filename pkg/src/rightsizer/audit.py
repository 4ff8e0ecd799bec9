"""Append-only event log shared by a whole optimization run."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field


@dataclass
class AuditLog:
    """Collects structured events; serialized as JSON lines.

    Sequence numbers are deterministic for a given run; wall-clock
    timestamps are informational only and never feed into reports.
    """

    events: list[dict] = field(default_factory=list)

    def emit(self, event: str, **fields) -> None:
        record = {"seq": len(self.events), "ts": time.time(), "event": event}
        record.update(fields)
        self.events.append(record)

    def of_type(self, event: str) -> list[dict]:
        return [e for e in self.events if e["event"] == event]

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(e, sort_keys=True) for e in self.events)
