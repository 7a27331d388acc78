"""Exception types shared across the pipeline."""


class ContractViolation(ValueError):
    """An operation was called with arguments that break its precondition."""


class IngestError(RuntimeError):
    """Exam directory could not be read at all."""


class NoCineStacksError(RuntimeError):
    """No cine stacks were found in the exam (pipeline status: no_sax)."""


class NoHeartFoundError(RuntimeError):
    """Locator produced an empty mask union (pipeline status: crop_fail)."""


class EmptySegmentationError(RuntimeError):
    """Blood-pool volume at end-diastole is zero (status: empty_segmentation)."""


class DegenerateDataError(ValueError):
    """Statistic undefined for this input (zero variance, empty set, ...)."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


class WeightFormatError(RuntimeError):
    """Weight bundle is malformed, tampered with, or mismatches the model."""
