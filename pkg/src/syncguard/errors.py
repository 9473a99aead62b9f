"""Exception hierarchy shared by all syncguard modules."""


class SyncGuardError(Exception):
    """Base class for every error raised by this package."""


class AudioFormatError(SyncGuardError, ValueError):
    pass


class InputTooShortError(SyncGuardError, ValueError):
    pass


class ContractError(SyncGuardError, ValueError):
    """Shapes or lengths violate an operation's precondition."""


class ParameterError(SyncGuardError, ValueError):
    pass


class DegenerateInputError(SyncGuardError, ValueError):
    pass


class ConfigurationError(SyncGuardError, ValueError):
    pass


class CheckpointError(SyncGuardError):
    pass


class TrainingDivergedError(SyncGuardError, RuntimeError):
    pass
