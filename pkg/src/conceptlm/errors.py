"""Exception hierarchy shared across the pipeline."""


class ConceptLMError(Exception):
    """Base class for all library errors."""


class InvalidSentence(ConceptLMError):
    pass


class UnknownLanguage(ConceptLMError):
    pass


class DegenerateEmbedding(ConceptLMError):
    pass


class DimensionMismatch(ConceptLMError):
    pass


class ShapeError(ConceptLMError):
    pass


class NumericalError(ConceptLMError):
    pass


class OptimizerError(ConceptLMError):
    pass


class ContextOverflow(ConceptLMError):
    pass


class BadTimestep(ConceptLMError):
    pass


class MalformedConversation(ConceptLMError):
    pass


class EmptyDocument(ConceptLMError):
    pass


class InsufficientData(ConceptLMError):
    pass


class NoPredictablePositions(ConceptLMError):
    pass


class EmptyCorpus(ConceptLMError):
    pass


class ResumeMismatch(ConceptLMError):
    pass


class EmptyEvalSet(ConceptLMError):
    pass


class ConfigError(ConceptLMError):
    """Invalid or unknown configuration key, section, or path."""
