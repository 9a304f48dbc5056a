"""splat4d: desk-scale differentiable 4D Gaussian splatting toolkit."""

from . import (
    appearance,
    core,
    diffsched,
    errors,
    harness,
    imgio,
    motionfield,
    optim,
    splatter,
    trackmath,
)

__all__ = [
    "appearance",
    "core",
    "diffsched",
    "errors",
    "harness",
    "imgio",
    "motionfield",
    "optim",
    "splatter",
    "trackmath",
]

__version__ = "0.1.0"
