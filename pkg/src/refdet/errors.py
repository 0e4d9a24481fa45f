"""Exception taxonomy shared across the package.

ContractViolation is the blanket "caller broke a precondition / math broke an
invariant" error; the store format errors are deliberately distinct classes so
callers (and tests) can tell a bad magic from a bad checksum from a short read.
"""


class ContractViolation(ValueError):
    """A documented precondition or invariant was violated."""


class StoreError(Exception):
    """Base class for persistence-layer failures."""


class BadMagic(StoreError):
    """File does not start with the expected magic bytes."""


class TruncatedFile(StoreError):
    """File ended before the declared payload/footer was read."""


class CrcMismatch(StoreError):
    """Payload checksum does not match the stored CRC32."""


class UnsupportedDtype(StoreError):
    """Feature file declares a dtype code this version does not read."""


class HashMismatch(StoreError):
    """Checkpoint content hash does not verify."""


class ConfigMismatch(StoreError):
    """Checkpoint config echo disagrees with the runtime configuration."""


class UnknownTensor(StoreError):
    """Checkpoint is missing a required tensor or carries an unexpected one."""
