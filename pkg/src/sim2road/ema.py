"""Interval-gated exponential moving average of parameter vectors."""

from dataclasses import dataclass, field

import numpy as np

from ._validation import check_unit_interval
from .exceptions import InvalidArgumentError

DEFAULT_MOMENTUM = 0.999
DEFAULT_INTERVAL = 200


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat float64 parameter array plus the number of EMA updates applied."""

    values: np.ndarray
    step: int = 0

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(arr)):
            raise InvalidArgumentError("parameter values must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "step", int(self.step))

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class EmaConfig:
    momentum: float = DEFAULT_MOMENTUM
    update_interval: int = DEFAULT_INTERVAL

    def __post_init__(self):
        object.__setattr__(self, "momentum", check_unit_interval(self.momentum, "momentum"))
        if int(self.update_interval) != self.update_interval or self.update_interval < 1:
            raise InvalidArgumentError(f"update_interval must be a positive integer, got {self.update_interval}")
        object.__setattr__(self, "update_interval", int(self.update_interval))


def is_update_step(global_step, cfg):
    return global_step % cfg.update_interval == 0


def ema_update(teacher, student, cfg=None, global_step=1):
    """Blend the student into the teacher on interval steps.

    On steps where ``global_step % update_interval != 0`` the teacher object
    is returned untouched.  Otherwise every element becomes
    ``m * teacher + (1 - m) * student`` and the update counter advances.
    """
    cfg = cfg or EmaConfig()
    if len(teacher) != len(student):
        raise InvalidArgumentError(f"teacher has {len(teacher)} parameters but student has {len(student)}")
    if int(global_step) < 1:
        raise InvalidArgumentError(f"global_step must be >= 1, got {global_step}")
    if not is_update_step(int(global_step), cfg):
        return teacher
    m = cfg.momentum
    return ParamVector(m * teacher.values + (1.0 - m) * student.values, teacher.step + 1)
