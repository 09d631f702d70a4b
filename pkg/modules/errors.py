class WeightDynError(ValueError):
    """Base class for every data-shaped failure raised by the toolkit."""


class CheckpointFormatError(WeightDynError):
    pass


class SeriesError(WeightDynError):
    pass


class ConfigError(WeightDynError):
    pass


class ModelInputError(WeightDynError):
    pass


class AnalysisError(WeightDynError):
    pass
