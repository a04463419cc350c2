# exceptions.py


class TipcutError(Exception):
    """Base class for every error raised by the simulator"""


class EncodingError(TipcutError):
    pass


class DecodeError(TipcutError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnknownSignerError(TipcutError):
    pass


class HeightGapError(TipcutError):
    pass


class StoreFailedError(TipcutError):
    """Store hit an I/O failure and is read-only"""


class WalCorruptionError(TipcutError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class FetchExhaustedError(TipcutError):
    pass


class InvariantViolation(TipcutError):
    def __init__(self, message, seed=None, at_ms=None):
        super().__init__(message)
        self.seed = seed
        self.at_ms = at_ms


class ScenarioError(TipcutError):
    pass
