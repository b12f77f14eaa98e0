"""Exception hierarchy shared by every stage.

Each error class carries the CLI exit code it maps to, so the command layer
never has to guess: 1 for usage problems, 2 for unreadable or inconsistent
inputs, 3 for numerical failures.
"""

from __future__ import annotations


class CaoGuideError(Exception):
    exit_code = 3

    def payload(self) -> dict:
        return {"error": type(self).__name__, "message": str(self)}


class UsageError(CaoGuideError):
    exit_code = 1


class InputFormatError(CaoGuideError):
    exit_code = 2


class NumericalError(CaoGuideError):
    exit_code = 3


# --- usage -----------------------------------------------------------------


class ConfigError(UsageError):
    pass


class InvalidSpec(UsageError):
    pass


class UnsupportedOption(UsageError):
    pass


class EvenBlockSize(UsageError, ValueError):
    def __init__(self, block: int):
        super().__init__(f"adaptive threshold block size must be odd and >= 3, got {block}")
        self.block = block


class DomainMismatch(UsageError):
    pass


# --- input format ----------------------------------------------------------


class MissingFile(InputFormatError):
    def __init__(self, path):
        super().__init__(f"missing file: {path}")
        self.path = str(path)


class MalformedLine(InputFormatError):
    def __init__(self, file, line_no: int, reason: str = ""):
        msg = f"{file}:{line_no}: malformed line"
        if reason:
            msg += f" ({reason})"
        super().__init__(msg)
        self.file = str(file)
        self.line_no = line_no
        self.reason = reason


class UnknownCameraModel(InputFormatError):
    def __init__(self, model: str, file=None, line_no: int | None = None):
        where = f"{file}:{line_no}: " if file is not None else ""
        super().__init__(f"{where}unknown camera model {model!r}")
        self.model = model


class BrokenReference(InputFormatError):
    def __init__(self, kind: str, ref_id, detail: str = ""):
        msg = f"broken {kind} reference {ref_id}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.kind = kind
        self.ref_id = ref_id


class MalformedImage(InputFormatError):
    pass


class MalformedCsv(InputFormatError):
    pass


class MissingMask(InputFormatError):
    def __init__(self, image_id: int):
        super().__init__(f"no mask supplied for image {image_id}")
        self.image_id = image_id


class MaskDimensionMismatch(InputFormatError):
    def __init__(self, image_id: int, expected: tuple[int, int], got: tuple[int, int]):
        super().__init__(
            f"mask for image {image_id} is {got[0]}x{got[1]}, camera is {expected[0]}x{expected[1]}"
        )
        self.image_id = image_id


# --- numerical -------------------------------------------------------------


class ZeroTotalImages(NumericalError):
    pass


class EmptyPointSet(NumericalError):
    pass


class EmptyImageSet(NumericalError):
    pass


class NoProjectableObservations(NumericalError):
    pass


class NegativeDistance(NumericalError, ValueError):
    pass


class NoTumorPoints(NumericalError):
    pass


class FewerThanFiveClusters(NumericalError):
    def __init__(self, found_n: int):
        super().__init__(f"expected at least 5 fiducial clusters, found {found_n}")
        self.found_n = found_n


class DegenerateConfiguration(NumericalError):
    pass


class TooFewPoints(NumericalError):
    pass


class RankDeficientFootprint(NumericalError):
    pass


class TooFewTumorPoints(NumericalError):
    pass


class EmptyPlan(NumericalError):
    pass


class ZeroTumorArea(NumericalError):
    pass


class ZeroTracheaDarkness(NumericalError):
    pass


class TooFewTracheaPoints(NumericalError):
    pass


class NoCharPoints(NumericalError):
    pass
