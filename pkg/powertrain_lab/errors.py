"""Exceptions raised by the powertrain lab.

Flagged outcomes (filter infeasibility, a gear shift clamped at either end of
the ladder) are carried as result fields and never raised.
"""


class LabError(Exception):
    """Base class for every error the lab raises on purpose."""


class NonFiniteState(LabError):
    pass


class OutOfEnvelope(LabError):
    """Engine speed or torque outside the configured operating envelope."""

    def __init__(self, message: str, engine_speed_rpm: float, engine_torque_nm: float):
        super().__init__(message)
        self.engine_speed_rpm = engine_speed_rpm
        self.engine_torque_nm = engine_torque_nm


class OutOfRange(LabError):
    pass


class InitSamplingExhausted(LabError):
    def __init__(self, episode_index: int, attempts: int):
        super().__init__(
            f"no initial state inside the safe set after {attempts} draws "
            f"(episode {episode_index})"
        )
        self.episode_index = episode_index
        self.attempts = attempts


class NonFiniteGradient(LabError):
    pass


class ConfigError(LabError):
    pass


class OutputError(LabError):
    def __init__(self, path: str, cause: Exception):
        super().__init__(f"could not write {path}: {cause}")
        self.path = path
