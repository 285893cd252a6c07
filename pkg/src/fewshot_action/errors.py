"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes incompatible with the requested operation."""


class ContractError(ValueError):
    """A call violated an operation's contract (bad scalar range, arity, ...)."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(ValueError):
    """Malformed dataset or checkpoint file."""


class GenerationError(ValueError):
    """Synthetic video generation cannot satisfy its geometry constraints."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, episode: int, report: str):
        super().__init__(f"non-finite loss at episode {episode}; parameter norms: {report}")
        self.episode = episode
        self.report = report
