"""Exception types shared across the toolkit.

Every domain error derives from :class:`CtxScopeError` so callers (and the
command-line front end) can separate domain failures from programming bugs.
"""


class CtxScopeError(Exception):
    """Base class for all domain errors."""


class MalformedConversation(CtxScopeError):
    pass


class SequenceTooLong(CtxScopeError):
    pass


class TokenOutOfVocab(CtxScopeError):
    pass


class EmptyLossMask(CtxScopeError):
    pass


class EmptyCorpus(CtxScopeError):
    pass


class DegenerateRow(CtxScopeError):
    pass


class EmptyUserMask(CtxScopeError):
    pass


class MismatchedTurnSets(CtxScopeError):
    pass


class HaystackTooShort(CtxScopeError):
    pass


class InvalidGrid(CtxScopeError):
    pass


class EmptyKeywordSet(CtxScopeError):
    pass


class EmptyResponse(CtxScopeError):
    pass


class NoUserTokens(CtxScopeError):
    pass


class MissingScores(CtxScopeError):
    pass


class ParseError(CtxScopeError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyAnswerSet(CtxScopeError):
    pass


class EmptyCaseSet(CtxScopeError):
    pass


class MismatchedEvalSets(CtxScopeError):
    pass


class ConfigError(CtxScopeError):
    """Bad or unknown configuration; maps to a usage-level failure."""
