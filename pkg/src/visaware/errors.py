"""Exception hierarchy shared across the package."""


class VisAwareError(Exception):
    """Base class for every error raised by visaware."""


class DimensionError(VisAwareError, ValueError):
    pass


class NumericError(VisAwareError, ArithmeticError):
    pass


class ContractError(VisAwareError, ValueError):
    pass


class EmptyInputError(ContractError):
    pass


class LengthError(ContractError):
    pass


class VocabularyError(VisAwareError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "vocabulary error"


class PoolingConfigError(VisAwareError, ValueError):
    pass


class NoNegativeError(VisAwareError, LookupError):
    pass


class NormalizationError(VisAwareError, ValueError):
    pass


class IngestionError(VisAwareError, ValueError):
    pass


class EvaluationError(VisAwareError, ValueError):
    pass


class ParseError(IngestionError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


class ReferentialError(IngestionError):
    pass


class IntegrityError(VisAwareError, ValueError):
    pass


class VersionError(VisAwareError, ValueError):
    pass


class ConfigError(VisAwareError, ValueError):
    pass
