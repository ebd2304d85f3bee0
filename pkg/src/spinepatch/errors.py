"""Exception hierarchy.

Errors split into two families that the CLI maps to exit codes: validation
problems (bad geometry, bad arguments, schema violations) exit 1, input/output
problems (unreadable or malformed files) exit 2.
"""


class SpinePatchError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(SpinePatchError):
    """Inputs violate a contract. CLI exit code 1."""


class InvalidGeometryError(ValidationError):
    pass


class InvalidArgumentError(ValidationError):
    pass


class EmptyCropError(ValidationError):
    pass


class EmptyMaskError(ValidationError):
    pass


class ManifestError(ValidationError):
    """Manifest syntax or schema violation.

    ``location`` is a field path such as ``scans[2].vertebrae[0].points`` or a
    ``line:col`` pair for JSON syntax errors.
    """

    def __init__(self, message, location=None, scan_id=None):
        self.location = location
        self.scan_id = scan_id
        parts = []
        if scan_id is not None:
            parts.append(f"scan {scan_id!r}")
        if location is not None:
            parts.append(str(location))
        prefix = ": ".join(parts)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class SplitError(ValidationError):
    pass


class ConfigurationError(ValidationError):
    pass


class TrainingError(ValidationError):
    pass


class ImageIOError(SpinePatchError):
    """Image file problems. CLI exit code 2."""


class ImageParseError(ImageIOError):
    def __init__(self, message, offset=0):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class UnsupportedDepthError(ImageParseError):
    pass
