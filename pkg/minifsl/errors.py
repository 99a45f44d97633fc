"""Exceptions raised by minifsl."""


class FslError(Exception):
    pass


class ConfigError(FslError, ValueError):
    pass


class InvalidConfig(ConfigError):
    pass


class InvalidInput(FslError, ValueError):
    pass


class DegenerateVector(InvalidInput):
    pass


class NegativeFeature(InvalidInput):
    pass


class EmptySet(InvalidInput):
    pass


class ShapeError(InvalidInput):
    pass


class InvalidLayer(InvalidInput):
    pass


class InvalidLabel(InvalidInput):
    pass


class MissingClass(InvalidInput):
    def __init__(self, class_id, msg=None):
        self.class_id = class_id
        super().__init__(msg or f"Class {class_id} has no support examples")


class MissingHead(FslError, ValueError):
    pass


class FormatError(FslError, ValueError):
    def __init__(self, msg, offset):
        self.offset = offset
        super().__init__(f"{msg} (at byte offset {offset})")


class InfeasibleEpisode(FslError, ValueError):
    def __init__(self, class_id, needed, available):
        self.class_id = class_id
        self.needed = needed
        self.available = available
        super().__init__(
            f"Class {class_id} has {available} examples, episode needs {needed}"
        )


class HistoryUnavailable(FslError, RuntimeError):
    pass


class TrainingDiverged(FslError, RuntimeError):
    pass


class EpisodeFailed(FslError, RuntimeError):
    def __init__(self, episode_index, cause):
        self.episode_index = episode_index
        self.cause = cause
        super().__init__(f"Episode {episode_index} failed: {cause}")
