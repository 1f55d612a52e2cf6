"""Exception hierarchy shared by every contextlake module."""


class ContextLakeError(Exception):
    pass


# kernel

class UnknownCut(ContextLakeError):
    pass


class TxClosed(ContextLakeError):
    pass


class EpisodicRevision(ContextLakeError):
    pass


class WriteConflict(ContextLakeError):
    def __init__(self, message: str, keys=()):
        super().__init__(message)
        self.keys = list(keys)


class UnauthorizedWrite(ContextLakeError):
    pass


# memory layers / semantic engine

class UnregisteredTransform(ContextLakeError):
    pass


class UnknownSourceEpisode(ContextLakeError):
    pass


class TransitionRejected(ContextLakeError):
    pass


class DuplicateVersion(ContextLakeError):
    pass


class EmptyLabelSet(ContextLakeError):
    pass


class UnknownLabel(ContextLakeError):
    pass


# envelope / composition / simulation

class OverEnvelope(ContextLakeError):
    pass


class UnknownSubsystem(ContextLakeError):
    pass


class UnknownScenario(ContextLakeError):
    pass


class InvalidConfig(ContextLakeError):
    pass


# trace analysis

class ParseError(ContextLakeError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class TooManyTransactions(ContextLakeError):
    pass
