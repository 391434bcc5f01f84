"""Exception hierarchy shared by every module."""


class MorphError(Exception):
    """Base class for all texmorph errors."""


class InvalidInputError(MorphError, ValueError):
    """An operation received arguments outside its contract."""


class DegenerateRowError(InvalidInputError):
    def __init__(self, row: int, which: str = "a"):
        super().__init__(f"row {row} of {which} has (near-)zero norm")
        self.row = row
        self.which = which


class DegenerateEndpointsError(InvalidInputError):
    """Trajectory endpoints coincide, so a normalised path length is undefined."""


class ConfigError(MorphError):
    """Invalid run configuration. ``problems`` lists every offending field."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class StageError(MorphError):
    """Wraps a failure inside the pipeline with frame/step context."""

    def __init__(self, message: str, frame=None, step=None):
        ctx = []
        if frame is not None:
            ctx.append(f"frame={frame}")
        if step is not None:
            ctx.append(f"step={step}")
        prefix = f"[{', '.join(ctx)}] " if ctx else ""
        super().__init__(prefix + message)
        self.frame = frame
        self.step = step
