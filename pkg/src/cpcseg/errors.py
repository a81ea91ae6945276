"""Exception hierarchy shared by all modules."""


class CPCError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(CPCError, ValueError):
    pass


class InvalidInputError(CPCError, ValueError):
    pass


class OptimizerError(CPCError, FloatingPointError):
    def __init__(self, message, param_name=None):
        super().__init__(message)
        self.param_name = param_name


class EmptyClassError(CPCError, ValueError):
    def __init__(self, class_id):
        super().__init__(f"class {class_id} has no feature vectors")
        self.class_id = class_id


class MissingClassError(CPCError, KeyError):
    def __init__(self, class_id):
        super().__init__(class_id)
        self.class_id = class_id


class DatasetError(CPCError, OSError):
    pass


class MaskWithheldError(CPCError, PermissionError):
    """Raised when a withheld query mask is read outside evaluation."""


class NumericsError(CPCError, FloatingPointError):
    """Non-finite loss during fine-tuning.

    ``last_good`` holds the encoder state dict of the last finite iteration
    and ``record`` the diagnostic record of the failing one.
    """

    def __init__(self, message, last_good=None, record=None):
        super().__init__(message)
        self.last_good = last_good
        self.record = record
