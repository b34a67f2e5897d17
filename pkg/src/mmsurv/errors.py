"""Exception hierarchy shared by every stage of the pipeline."""


class MMSurvError(Exception):
    """Base class for all errors raised by mmsurv."""


# feature files / cohort loading

class FeatureFileError(MMSurvError):
    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{self.path} @ byte {offset}: {message}")


class BadMagic(FeatureFileError):
    pass


class TruncatedPayload(FeatureFileError):
    pass


class NonFiniteValue(FeatureFileError):
    pass


class CohortError(MMSurvError):
    pass


class MissingFeatureFile(CohortError):
    pass


class DimensionMismatch(CohortError):
    def __init__(self, expected, found, where=""):
        self.expected = expected
        self.found = found
        msg = f"expected dim {expected}, found {found}"
        super().__init__(f"{where}: {msg}" if where else msg)


class DuplicateInstanceId(CohortError):
    pass


class UnknownModality(CohortError):
    pass


class ManifestError(CohortError):
    pass


# tabular

class UnknownLevel(MMSurvError):
    pass


# synthetic generator / oracle

class InvalidConfig(MMSurvError):
    pass


class SingularCovariance(MMSurvError):
    pass


# networks

class DimMismatch(MMSurvError):
    pass


class NonFiniteLoss(MMSurvError):
    def __init__(self, batch_index, epoch=None):
        self.batch_index = batch_index
        self.epoch = epoch
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch_index}")


# modelling stages

class EmptyModality(MMSurvError):
    pass


class EmptyCohort(MMSurvError):
    pass


class MaskMismatch(MMSurvError):
    pass


class AllMasked(MMSurvError):
    pass


class MissingDependency(MMSurvError):
    pass


class MissingModel(MMSurvError):
    pass


class ModelFormatError(MissingModel):
    """A model file exists but cannot be decoded."""


# evaluation

class EmptyInput(MMSurvError):
    pass


class DegenerateClass(MMSurvError):
    pass


class InsufficientPoints(MMSurvError):
    pass
