"""Exception types shared across the lab."""


class TMSLabError(Exception):
    pass


class VocabError(TMSLabError, ValueError):
    pass


class MalformedSequenceError(TMSLabError, ValueError):
    pass


class EnumerationBudgetError(TMSLabError, RuntimeError):
    pass


class EmptyBatchError(TMSLabError, ValueError):
    pass


class NumericError(TMSLabError, ArithmeticError):
    pass


class GenerationError(TMSLabError, RuntimeError):
    pass


class EmptyBenchmarkError(TMSLabError, ValueError):
    pass


class IncompleteBufferError(TMSLabError, KeyError):
    def __init__(self, t, prompt_id):
        self.t = t
        self.prompt_id = prompt_id
        super().__init__(f"trajectory buffer has no entry for t={t}, prompt={prompt_id!r}")

    def __str__(self):
        return self.args[0]


class TrainingDivergedError(TMSLabError, RuntimeError):
    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class EstimatorDomainError(TMSLabError, ValueError):
    pass


class ConfigError(TMSLabError, ValueError):
    pass
