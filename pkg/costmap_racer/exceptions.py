from typing import Any


class ServiceError(Exception):
    """Base exception for service layer errors."""

    def __init__(
        self,
        message: str,
        context: dict[str, Any] | None = None,
    ) -> None:
        self.message = message
        self.context = context or {}
        super().__init__(message)


class EntityNotFoundError(ServiceError):
    """Raised when a required entity is not found."""

    def __init__(
        self,
        entity_type: str,
        identifier: str | None = None,
    ) -> None:
        self.entity_type = entity_type
        self.identifier = identifier

        message = f"{entity_type} not found"
        if identifier:
            message += f": {identifier}"

        context = {"entity_type": entity_type}
        if identifier:
            context["identifier"] = identifier

        super().__init__(message, context)


class InvalidInputError(ServiceError):
    """Raised when an operation's precondition is violated."""

    def __init__(
        self,
        message: str,
        field: str | None = None,
    ) -> None:
        self.field = field
        context = {}
        if field:
            context["field"] = field
        super().__init__(message, context)


class ConfigError(ServiceError):
    """Raised when a scenario document fails validation."""

    def __init__(
        self,
        message: str,
        field: str | None = None,
    ) -> None:
        self.field = field
        context = {}
        if field:
            context["field"] = field
        if field and field not in message:
            message = f"{field}: {message}"
        super().__init__(message, context)


class MapFormatError(ServiceError):
    """Raised when a schematic map file cannot be decoded."""

    def __init__(
        self,
        message: str,
        offset: int | None = None,
    ) -> None:
        self.offset = offset
        context = {}
        if offset is not None:
            context["offset"] = offset
        super().__init__(message, context)


class TruncatedPayloadError(MapFormatError):
    """Raised when a map payload is shorter than its header declares."""

    def __init__(self, expected: int, actual: int) -> None:
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"Map payload truncated: expected {expected} bytes, got {actual}",
            offset=actual,
        )
        self.context.update({"expected": expected, "actual": actual})


class CalibrationError(ServiceError):
    """Raised when a degradation accuracy target cannot be reached."""

    def __init__(
        self,
        target: float,
        achieved: float | None = None,
    ) -> None:
        self.target = target
        self.achieved = achieved

        message = f"Cannot reach target accuracy {target:.4f}"
        if achieved is not None:
            message += f" (closest achievable {achieved:.4f})"

        context: dict[str, Any] = {"target": target}
        if achieved is not None:
            context["achieved"] = achieved

        super().__init__(message, context)


class DegenerateWeightsError(ServiceError):
    """Raised when every particle weight collapses to zero."""

    def __init__(self, message: str = "Particle weights degenerated", timestamp: float | None = None) -> None:
        self.timestamp = timestamp
        context = {}
        if timestamp is not None:
            context["timestamp"] = timestamp
        super().__init__(message, context)


class InvalidMapError(ServiceError):
    """Raised when a map has no drivable cell to initialize particles on."""

    def __init__(self, message: str = "Map has no cell with cost below 0.5") -> None:
        super().__init__(message)


class EndOfStream(ServiceError):
    """Raised when a replayed sensor stream is exhausted."""

    def __init__(self, source: str = "replay") -> None:
        self.source = source
        super().__init__(f"End of stream: {source}", {"source": source})


class ProtocolError(ServiceError):
    """Raised when an external cost-map stream carries a malformed record."""

    def __init__(
        self,
        message: str,
        offset: int | None = None,
    ) -> None:
        self.offset = offset
        context = {}
        if offset is not None:
            context["offset"] = offset
        super().__init__(message, context)


class RecordParseError(ServiceError):
    """Raised when a RunLog record cannot be parsed."""

    def __init__(
        self,
        message: str,
        offset: int,
    ) -> None:
        self.offset = offset
        super().__init__(f"{message} at byte offset {offset}", {"offset": offset})


class UnsupportedReplayError(ServiceError):
    """Raised when a log cannot be replayed off-policy."""

    def __init__(self, message: str = "Log has no ground-truth records") -> None:
        super().__init__(message)
