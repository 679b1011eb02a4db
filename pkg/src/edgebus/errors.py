"""Error hierarchy shared across the stack.

Every error carries a stable machine-readable ``code`` string that survives the
wire (binary protocol error bodies and gateway JSON error bodies use the same
codes), plus an ``extra`` dict for structured hints such as the current leader
or the earliest retained offset.
"""

from __future__ import annotations


class EdgebusError(Exception):
    code = "internal"

    def __init__(self, detail: str = "", **extra):
        super().__init__(detail or self.code)
        self.detail = detail
        self.extra = extra

    def to_dict(self) -> dict:
        d = {"error": self.code, "detail": self.detail}
        d.update(self.extra)
        return d


def from_dict(d: dict) -> "EdgebusError":
    """Rebuild a typed error from a wire-level error body."""
    code = d.get("error", "internal")
    cls = _BY_CODE.get(code, EdgebusError)
    extra = {k: v for k, v in d.items() if k not in ("error", "detail")}
    err = cls(d.get("detail", ""), **extra)
    err.code = code
    return err


# storage
class StorageFull(EdgebusError):
    code = "storage_full"


class LogClosed(EdgebusError):
    code = "log_closed"


class OffsetOutOfRange(EdgebusError):
    code = "offset_out_of_range"


class CorruptRecord(EdgebusError):
    code = "corrupt_record"


class UnrecoverableLog(EdgebusError):
    code = "unrecoverable_log"


# topics / metadata
class UnknownTopic(EdgebusError):
    code = "unknown_topic"


class UnknownPartition(EdgebusError):
    code = "unknown_partition"


class TopicExists(EdgebusError):
    code = "topic_exists"


class InvalidConfig(EdgebusError):
    code = "invalid_config"


class InsufficientBrokers(EdgebusError):
    code = "insufficient_brokers"


# replication / broker
class NotLeader(EdgebusError):
    code = "not_leader"


class FencedEpoch(EdgebusError):
    code = "fenced_epoch"


class RequestTimeout(EdgebusError):
    code = "request_timeout"


class NoViableLeader(EdgebusError):
    code = "no_viable_leader"


class MessageTooLarge(EdgebusError):
    code = "message_too_large"


class DataDirLocked(EdgebusError):
    code = "data_dir_locked"


class BindFailed(EdgebusError):
    code = "bind_failed"


class BrokerUnavailable(EdgebusError):
    code = "broker_unavailable"


class BadRequest(EdgebusError):
    code = "bad_request"


class BadBase64(BadRequest):
    code = "bad_base64"


# sink
class UnknownSeries(EdgebusError):
    code = "unknown_series"


class DecodeError(EdgebusError):
    code = "decode_error"


# harness
class ConfigError(EdgebusError):
    code = "config_error"


class ScenarioError(EdgebusError):
    code = "scenario_error"


_BY_CODE = {
    cls.code: cls
    for cls in list(globals().values())
    if isinstance(cls, type) and issubclass(cls, EdgebusError)
}
