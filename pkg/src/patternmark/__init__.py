"""patternmark: robust invisible image watermarking.

Embeds a fixed-length bit message into an image as a learned pattern and
recovers it from distorted copies through a locate -> crop -> decode ->
extract chain, with a three-stage training strategy and a differentiable
distortion pipeline.
"""

__version__ = "0.1.0"

from .errors import CheckpointError, ConfigError, MissingArtifactError, NotLocatedError

__all__ = ["CheckpointError", "ConfigError", "MissingArtifactError", "NotLocatedError",
           "__version__"]
