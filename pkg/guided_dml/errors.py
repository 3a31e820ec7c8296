class GuidedDMLError(Exception):
    pass


class RejectedInputError(GuidedDMLError, ValueError):
    pass


class ConfigurationError(GuidedDMLError, ValueError):
    pass


class SamplingError(GuidedDMLError, ValueError):
    pass


class TrainingError(GuidedDMLError, RuntimeError):
    def __init__(self, message: str, snapshot_dir=None):
        super().__init__(message)
        self.snapshot_dir = snapshot_dir
