"""Exception taxonomy shared by the codec, broker, service, and clients.

Every error that can cross the wire carries a stable ``code`` string (the
class name) so the service can serialize it into an error reply and the
client can re-raise the matching class.
"""

from __future__ import annotations


class MdmlError(Exception):
    """Base class for all errors raised by this package."""

    @property
    def code(self) -> str:
        return type(self).__name__


# -- wire protocol ----------------------------------------------------------

class BadMagic(MdmlError):
    pass


class UnsupportedVersion(MdmlError):
    pass


class MalformedHeader(MdmlError):
    pass


class OversizedPayload(MdmlError):
    pass


class ChecksumMismatch(MdmlError):
    pass


class ChunkConflict(MdmlError):
    pass


class IncompleteTimeout(MdmlError):
    pass


# -- broker core ------------------------------------------------------------

class TopicExists(MdmlError):
    pass


class InvalidName(MdmlError):
    pass


class UnknownTopic(MdmlError):
    pass


class UnknownPartition(MdmlError):
    pass


class OffsetOutOfRange(MdmlError):
    pass


class StaleGeneration(MdmlError):
    pass


class NotAssigned(MdmlError):
    pass


# -- service ----------------------------------------------------------------

class AlreadyRegistered(MdmlError):
    pass


class InvalidSchema(MdmlError):
    pass


class SchemaViolation(MdmlError):
    pass


class InvalidArgument(MdmlError):
    pass


class AuthFailed(MdmlError):
    pass


# -- agents -----------------------------------------------------------------

class NotConnected(MdmlError):
    pass


class NotJson(MdmlError):
    pass


class BrokerUnreachable(MdmlError):
    pass


# -- experiments ------------------------------------------------------------

class TopicBusy(MdmlError):
    pass


class NotRunning(MdmlError):
    pass


class UnknownExperiment(MdmlError):
    pass


class ArchiveCorrupt(MdmlError):
    pass


# -- connectors / object store ----------------------------------------------

class DuplicateName(MdmlError):
    pass


class UnknownConnector(MdmlError):
    pass


class BackendUnreachable(MdmlError):
    pass


class InvalidConfig(MdmlError):
    pass


class StoreUnavailable(MdmlError):
    pass


class ClaimNotFound(MdmlError):
    pass


_CODE_MAP = {cls.__name__: cls for cls in list(globals().values())
             if isinstance(cls, type) and issubclass(cls, MdmlError)}


def error_from_code(code: str, message: str) -> MdmlError:
    """Rebuild a typed error from a wire-level ``{code, message}`` pair."""
    cls = _CODE_MAP.get(code, MdmlError)
    return cls(message)
