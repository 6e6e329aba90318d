class SeirGraphonError(Exception):
    kind = "Error"
    exit_code = 1

    def __init__(self, message=""):
        super().__init__(message)
        self.message = message

    def to_record(self):
        return {
            'kind': self.kind,
            'exit_code': self.exit_code,
            'message': self.message,
        }


# 設定・入出力
class ConfigParseError(SeirGraphonError):
    kind = "ParseError"
    exit_code = 2

    def __init__(self, message="", lineno=None):
        if lineno is not None:
            message = f"{lineno}行目: {message}"
        super().__init__(message)
        self.lineno = lineno


class ConfigValidationError(SeirGraphonError):
    kind = "ValidationError"
    exit_code = 3


class OutputIoError(SeirGraphonError):
    kind = "IoError"
    exit_code = 4


class CommandUsageError(SeirGraphonError):
    kind = "UsageError"
    exit_code = 5


# グラフ
class DimensionMismatchError(SeirGraphonError):
    kind = "DimensionMismatch"
    exit_code = 10


class ZeroArrivalsError(SeirGraphonError):
    kind = "ZeroArrivals"
    exit_code = 11


class BadPartitionError(SeirGraphonError):
    kind = "BadPartition"
    exit_code = 12


# 時間積分
class NonFiniteInputError(SeirGraphonError):
    kind = "NonFiniteInput"
    exit_code = 20


class NonFiniteStateError(SeirGraphonError):
    kind = "NonFiniteState"
    exit_code = 21


class BlowUpError(SeirGraphonError):
    kind = "BlowUp"
    exit_code = 22


class NegativeSusceptibleError(SeirGraphonError):
    kind = "NegativeSusceptible"
    exit_code = 23


class InvalidStateError(SeirGraphonError):
    kind = "InvalidState"
    exit_code = 24


# 固有値
class NoConvergenceError(SeirGraphonError):
    kind = "NoConvergence"
    exit_code = 30


class ZeroMatrixError(SeirGraphonError):
    kind = "ZeroMatrix"
    exit_code = 31


# グラフォン
class OutOfDomainError(SeirGraphonError):
    kind = "OutOfDomain"
    exit_code = 40


class WeightOutOfRangeError(SeirGraphonError):
    kind = "WeightOutOfRange"
    exit_code = 41


class AsymmetricRequestError(SeirGraphonError):
    kind = "AsymmetricRequest"
    exit_code = 42


class TooManyBlocksError(SeirGraphonError):
    kind = "TooManyBlocks"
    exit_code = 43


class IncompatiblePartitionsError(SeirGraphonError):
    kind = "IncompatiblePartitions"
    exit_code = 44


# 収束検証
class ReferenceTooCoarseError(SeirGraphonError):
    kind = "ReferenceTooCoarse"
    exit_code = 50


def exit_code_table():
    classes = [SeirGraphonError] + _all_subclasses(SeirGraphonError)
    rows = sorted({(cls.exit_code, cls.kind) for cls in classes})
    return rows


def _all_subclasses(cls):
    found = []
    for sub in cls.__subclasses__():
        found.append(sub)
        found.extend(_all_subclasses(sub))
    return found
