"""
Canonical event model of the engine and the JSONL event log every other module consumes.

One line per event: {"ts": ..., "user": ..., "pharmacy": ..., "kind": ..., "payload": {...}}
"""
import bisect
import json
import logging
import math
from collections import defaultdict
from datetime import datetime, timezone
from enum import Enum
from typing import Iterable, Iterator, List, Optional, Union

from jsonschema import Draft7Validator
from jsonschema.exceptions import best_match
from pydantic import BaseModel, Field, ValidationError, root_validator, validator

from schemas import event_schema
from utils import NudgeEngineError

logger = logging.getLogger(__name__)

TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M:%SZ"

_event_validator = Draft7Validator(event_schema)


class MalformedLine(NudgeEngineError):
    def __init__(self, line_no: int, reason: str = ""):
        self.line_no = line_no
        super().__init__(f"line {line_no}: malformed JSON ({reason})")


class SchemaViolation(NudgeEngineError):
    def __init__(self, line_no: int, field: str, reason: str = ""):
        self.line_no = line_no
        self.field = field
        super().__init__(f"line {line_no}: invalid field '{field}' ({reason})")


class EventKind(str, Enum):
    LOGIN = "login"
    ORDER = "order"
    NUDGE_SENT = "nudge_sent"
    NUDGE_OPENED = "nudge_opened"
    NUDGE_CLOSED = "nudge_closed"
    NUDGE_EXPIRED = "nudge_expired"


NUDGE_LIFECYCLE = (EventKind.NUDGE_SENT, EventKind.NUDGE_OPENED, EventKind.NUDGE_CLOSED, EventKind.NUDGE_EXPIRED)


class _Immutable(BaseModel):
    class Config:
        allow_mutation = False
        extra = "forbid"
        allow_population_by_field_name = True


class OrderLine(_Immutable):
    sku: str = Field(..., min_length=1)
    quantity: int = Field(..., alias="qty", gt=0)
    unit_price: float = Field(..., alias="price", ge=0)

    @validator("unit_price")
    def _finite_price(cls, v):
        if not math.isfinite(v):
            raise ValueError("price must be finite")
        return v

    @property
    def revenue(self) -> float:
        return self.quantity * self.unit_price


class OrderPayload(_Immutable):
    lines: List[OrderLine]

    @validator("lines")
    def _at_least_one_line(cls, v):
        if len(v) == 0:
            raise ValueError("an order needs at least one line")
        return v

    @property
    def expenditure(self) -> float:
        return sum(line.revenue for line in self.lines)

    @property
    def skus(self) -> set:
        return {line.sku for line in self.lines}


class NudgePayload(_Immutable):
    decision_id: str = Field(..., alias="decision", min_length=1)
    anchor_sku: str = Field(..., alias="anchor", min_length=1)
    target_sku: str = Field(..., alias="target", min_length=1)

    @root_validator(skip_on_failure=True)
    def _distinct_items(cls, values):
        if values["anchor_sku"] == values["target_sku"]:
            raise ValueError("anchor and target must be different skus")
        return values


class LoginPayload(_Immutable):
    lang: Optional[str] = None
    region: Optional[str] = None
    session_seconds: Optional[float] = Field(None, ge=0)


PAYLOAD_TYPES = {
    EventKind.LOGIN: LoginPayload,
    EventKind.ORDER: OrderPayload,
    EventKind.NUDGE_SENT: NudgePayload,
    EventKind.NUDGE_OPENED: NudgePayload,
    EventKind.NUDGE_CLOSED: NudgePayload,
    EventKind.NUDGE_EXPIRED: NudgePayload,
}


class EventRecord(_Immutable):
    timestamp: datetime = Field(..., alias="ts")
    user_id: str = Field(..., alias="user", min_length=1)
    pharmacy_id: str = Field(..., alias="pharmacy", min_length=1)
    kind: EventKind
    payload: Union[OrderPayload, NudgePayload, LoginPayload]

    @root_validator(pre=True)
    def _payload_for_kind(cls, values):
        kind = values.get("kind")
        payload = values.get("payload")
        if isinstance(payload, dict) and kind is not None:
            try:
                payload_type = PAYLOAD_TYPES[EventKind(kind)]
            except ValueError:
                return values
            values["payload"] = payload_type.parse_obj(payload)
        return values

    @validator("timestamp")
    def _utc_seconds(cls, v):
        # Naive timestamps are read as UTC; second resolution
        if v.tzinfo is None:
            v = v.replace(tzinfo=timezone.utc)
        return v.astimezone(timezone.utc).replace(microsecond=0)

    @root_validator(skip_on_failure=True)
    def _payload_matches_kind(cls, values):
        expected = PAYLOAD_TYPES[values["kind"]]
        if not isinstance(values["payload"], expected):
            raise ValueError(f"payload of a {values['kind'].value} event must be {expected.__name__}")
        return values

    @property
    def is_nudge(self) -> bool:
        return self.kind in NUDGE_LIFECYCLE

    def to_wire(self) -> dict:
        if self.kind == EventKind.ORDER:
            payload = {"lines": [{"sku": l.sku, "qty": l.quantity, "price": l.unit_price} for l in self.payload.lines]}
        else:
            payload = self.payload.dict(by_alias=True, exclude_none=True)
        return {
            "ts": self.timestamp.strftime(TIMESTAMP_FORMAT),
            "user": self.user_id,
            "pharmacy": self.pharmacy_id,
            "kind": self.kind.value,
            "payload": payload,
        }


def _violated_field(error) -> str:
    path = [str(p) for p in error.absolute_path]
    if error.validator == "required" and isinstance(error.instance, dict):
        missing = [name for name in error.validator_value if name not in error.instance]
        if missing:
            path.append(missing[0])
    return ".".join(path) or "<root>"


def parse_event_log(lines: Iterable[str]) -> List[EventRecord]:
    """
    Parse JSONL lines into records sorted by timestamp (stable for ties).
    Blank lines are skipped; line numbers are 1-based.
    """
    records = []
    for line_no, line in enumerate(lines, start=1):
        text = line.strip()
        if not text:
            continue
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as e:
            raise MalformedLine(line_no, e.msg) from e
        if not isinstance(obj, dict):
            raise MalformedLine(line_no, "not a JSON object")

        error = best_match(_event_validator.iter_errors(obj))
        if error is not None:
            raise SchemaViolation(line_no, _violated_field(error), error.message)
        try:
            records.append(EventRecord.parse_obj(obj))
        except ValidationError as e:
            first = e.errors()[0]
            field = ".".join(str(p) for p in first["loc"] if p != "__root__") or "payload"
            raise SchemaViolation(line_no, field, first["msg"]) from e
    return sort_events(records)


def write_event_log(records: Iterable[EventRecord]) -> Iterator[str]:
    for record in records:
        yield json.dumps(record.to_wire(), separators=(",", ":")) + "\n"


def sort_events(records: Iterable[EventRecord]) -> List[EventRecord]:
    return sorted(records, key=lambda r: r.timestamp)


def merge_events(*logs: Iterable[EventRecord]) -> List[EventRecord]:
    return sort_events(record for log in logs for record in log)


def read_event_log(path) -> List[EventRecord]:
    with open(path, "r") as file:
        return parse_event_log(file)


def save_event_log(path, records: Iterable[EventRecord]) -> None:
    with open(path, "w") as file:
        file.writelines(write_event_log(records))


def _timestamp(record: EventRecord) -> datetime:
    return record.timestamp


def between(records: List[EventRecord], start: Optional[datetime] = None, end: Optional[datetime] = None, closed: str = "left") -> List[EventRecord]:
    """
    Slice of a timestamp-sorted list. closed="left" keeps start <= ts < end,
    closed="right" keeps start < ts <= end. Missing bounds are open.
    """
    if closed == "left":
        lo = 0 if start is None else bisect.bisect_left(records, start, key=_timestamp)
        hi = len(records) if end is None else bisect.bisect_left(records, end, key=_timestamp)
    elif closed == "right":
        lo = 0 if start is None else bisect.bisect_right(records, start, key=_timestamp)
        hi = len(records) if end is None else bisect.bisect_right(records, end, key=_timestamp)
    else:
        raise ValueError(f"closed must be 'left' or 'right', got {closed!r}")
    return records[lo:hi]


class EventIndex:
    """Read-only lookup structure over a sorted event log."""

    def __init__(self, records: Iterable[EventRecord]):
        self.records = sort_events(records)
        self.by_user = defaultdict(list)
        self.orders = []
        self.pharmacy_orders = defaultdict(list)
        self.by_decision = defaultdict(list)
        self.first_seen = defaultdict(dict)

        for record in self.records:
            self.by_user[record.user_id].append(record)
            self.first_seen[record.pharmacy_id].setdefault(record.user_id, record.timestamp)
            if record.kind == EventKind.ORDER:
                self.orders.append(record)
                self.pharmacy_orders[record.pharmacy_id].append(record)
            elif record.is_nudge:
                self.by_decision[record.payload.decision_id].append(record)

    def __len__(self):
        return len(self.records)

    @property
    def end(self) -> Optional[datetime]:
        return self.records[-1].timestamp if self.records else None

    def users_before(self, as_of: datetime) -> set:
        return {r.user_id for r in between(self.records, end=as_of)}

    def pharmacies_before(self, as_of: datetime) -> set:
        return {r.pharmacy_id for r in between(self.records, end=as_of)}

    def pharmacy_of(self, user: str, as_of: Optional[datetime] = None) -> Optional[str]:
        events = between(self.by_user.get(user, []), end=as_of)
        return events[-1].pharmacy_id if events else None

    def pharmacy_users(self, pharmacy: str, as_of: datetime) -> set:
        return {u for u, ts in self.first_seen.get(pharmacy, {}).items() if ts < as_of}

    def user_events(self, user: str, start=None, end=None, kinds=None, closed: str = "left") -> List[EventRecord]:
        events = between(self.by_user.get(user, []), start, end, closed)
        if kinds is not None:
            events = [e for e in events if e.kind in kinds]
        return events

    def pharmacy_spend(self, pharmacy: str, start=None, end=None, closed: str = "left") -> float:
        return sum(e.payload.expenditure for e in between(self.pharmacy_orders.get(pharmacy, []), start, end, closed))

    def decision_events(self, decision_id: str) -> List[EventRecord]:
        return self.by_decision.get(decision_id, [])


def as_index(events) -> EventIndex:
    return events if isinstance(events, EventIndex) else EventIndex(events)
