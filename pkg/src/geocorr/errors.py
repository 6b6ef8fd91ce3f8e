"""Exception hierarchy shared by every module.

Errors split into two families so the CLI can map them to exit codes:
``ValidationError`` (bad inputs, exit 2) and ``NumericalError`` (divergence,
failed gradient checks, exit 3).
"""

from __future__ import annotations


class GeoCorrError(Exception):
    """Base class for all package errors."""


class ValidationError(GeoCorrError):
    pass


class NumericalError(GeoCorrError):
    pass


# geometry
class InvalidDepth(ValidationError):
    pass


class SingularIntrinsics(ValidationError):
    pass


class BehindCamera(ValidationError):
    pass


class EmptyTrackSet(ValidationError):
    pass


class WindowTooSmall(ValidationError):
    pass


class InvalidPolicy(ValidationError):
    pass


# scenegen
class InvalidTrajectory(ValidationError):
    pass


# diffengine
class ShapeError(ValidationError):
    pass


class NonScalarLoss(ValidationError):
    pass


class InvalidTemperature(ValidationError):
    pass


# model
class ConfigError(ValidationError):
    pass


class VocabError(ValidationError):
    pass


# losses
class EmptyBatch(ValidationError):
    pass


class NonFiniteLoss(NumericalError):
    def __init__(self, component: str, value: float):
        super().__init__(f"loss component {component!r} is not finite ({value})")
        self.component = component


# trainer
class NonFiniteGradient(NumericalError):
    def __init__(self, name: str):
        super().__init__(f"gradient of parameter {name!r} contains NaN/Inf")
        self.name = name


class DivergedTraining(NumericalError):
    def __init__(self, step: int, loss: float, last_checkpoint: str | None):
        super().__init__(
            f"training diverged at step {step} (L_total={loss}); "
            f"last checkpoint: {last_checkpoint}"
        )
        self.step = step
        self.loss = loss
        self.last_checkpoint = last_checkpoint


class GradCheckFailed(NumericalError):
    pass


# eval / persistence
class DatasetLeakage(ValidationError):
    pass


class CorruptCheckpoint(ValidationError):
    pass


class ConfigMismatch(ValidationError):
    pass


class CorruptDataset(ValidationError):
    pass
