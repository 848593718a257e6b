"""Exception hierarchy shared by every gridpipe component."""


class GridpipeError(Exception):
    """Root of all gridpipe failures."""


class ConfigError(GridpipeError, ValueError):
    """Invalid configuration file or option combination."""

    def __init__(self, message: str, *, path: str | None = None, line: int | None = None,
                 section: str | None = None, key: str | None = None) -> None:
        self.path = path
        self.line = line
        self.section = section
        self.key = key
        where = [part for part in (
            path,
            f"line {line}" if line else None,
            f"[{section}]" if section else None,
            key,
        ) if part]
        super().__init__(f"{': '.join(where)}: {message}" if where else message)
