class ConfigError(ValueError):
    """Invalid configuration or argument."""


class ParseError(ValueError):
    """Malformed input file."""

    def __init__(self, message: str, path=None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
