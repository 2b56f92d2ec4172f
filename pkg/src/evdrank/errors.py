"""Exception types raised across the package."""


class EvdRankError(Exception):
    """Base class for all package errors."""


# knowledge base

class MalformedRecord(EvdRankError):
    def __init__(self, line_no: int, reason: str = ""):
        self.line_no = line_no
        super().__init__(f"malformed record at line {line_no}" + (f": {reason}" if reason else ""))


class DuplicateKey(EvdRankError):
    def __init__(self, entity: str, sense_tag: str | None):
        self.entity = entity
        self.sense_tag = sense_tag
        super().__init__(f"duplicate key ({entity!r}, {sense_tag!r})")


class EmptyDescriptions(EvdRankError):
    pass


class TooManyDescriptions(EvdRankError):
    pass


class DuplicateSense(EvdRankError):
    pass


class SenseConflict(EvdRankError):
    """Tagged and untagged senses of one entity would coexist."""


class IoFailure(EvdRankError):
    pass


# llm gateway

class BackendUnavailable(EvdRankError):
    pass


class MalformedResponse(EvdRankError):
    pass


class TemplateError(EvdRankError):
    pass


# encoder / retrieval

class NonFiniteLoss(EvdRankError):
    pass


class StaleIndex(EvdRankError):
    pass


# rewriter

class IllegalAction(EvdRankError):
    pass


class DegenerateRanking(EvdRankError):
    pass


class CheckpointError(EvdRankError):
    pass
