"""Exception hierarchy shared by all excp modules."""

from __future__ import annotations


class ExcpError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(ExcpError):
    """Invalid inputs: bad configuration, invariant violations, non-finite data."""


class ContainerError(ExcpError):
    """Malformed or corrupted on-disk data: bad magic, truncation, checksum failure."""


class MismatchError(ExcpError):
    """A digest guard failed: wrong base checkpoint or tampered chain entry."""
