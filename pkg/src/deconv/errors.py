"""Error taxonomy shared across the package and the CLI exit codes."""


class ConfigError(Exception):
    """Bad configuration: unknown key, unparsable value, invalid combination."""


class DataError(Exception):
    """Bad data: unreadable file, values outside the declared domain."""


class ShapeError(Exception):
    """Dimension mismatch between two otherwise valid inputs."""
