"""Exception types shared across the scene perception package."""


class SceneDataError(ValueError):
    """Raised when scene, comparison or embedding input data is invalid."""

    def __init__(self, message, line=None, scene_id=None):
        self.line = line
        self.scene_id = scene_id
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(ValueError):
    """Raised for unknown or malformed configuration values."""


class ShapeError(ValueError):
    """Raised when a tensor primitive receives incompatible shapes."""

    def __init__(self, primitive, *shapes):
        self.primitive = primitive
        self.shapes = shapes
        rendered = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{primitive}: incompatible shapes {rendered}")


class NonFiniteError(ArithmeticError):
    """Raised when a primitive produces NaN or infinite values."""


class TrainingDivergenceError(RuntimeError):
    """Raised when a training loss becomes non-finite."""


class PipelineError(RuntimeError):
    """Wraps a failure inside one pipeline stage."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
