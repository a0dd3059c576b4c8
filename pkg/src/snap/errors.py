"""Domain exception types shared across the package.

Wire-codec errors live in snap.protocol; everything else is here.
"""


class SnapError(Exception):
    """Base class for every error this package raises on purpose."""


# --- identity / core ---

class EmptySerial(SnapError):
    """Serial is empty after normalization."""


class SerialTooLong(SnapError):
    """Serial exceeds the maximum key length."""


class InvalidIp(SnapError):
    """String does not parse as an IPv4 or IPv6 address."""


# --- registry ---

class NotRegistered(SnapError):
    """No registration record exists for the serial."""


class StorageFailure(SnapError):
    """The registry log could not be read or written."""


class CorruptStore(SnapError):
    """The registry log contains a malformed record."""


# --- sessions ---

class NoSuchSession(SnapError):
    """No live session exists for the serial."""


class CannotEnableDenied(SnapError):
    """Operator tried to enable a session whose verdict was Deny."""


# --- simulated network ---

class UnknownAp(SnapError):
    """Referenced access point does not exist."""


class NotAssociated(SnapError):
    """Frame source is not associated with any access point."""


class ScriptError(SnapError):
    """A scenario script is malformed or references unknown state."""

    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step


# --- agent ---

class ProbeUnavailable(SnapError):
    """Host firmware inventory cannot be read in probed mode."""


class ServerUnreachable(SnapError):
    """Server did not answer within the retry budget."""


class ProtocolError(SnapError):
    """Peer sent something that is not a valid reply."""
