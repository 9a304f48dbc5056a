"""Exception types shared across the toolkit."""


class Splat4DError(Exception):
    """Base class for all toolkit errors."""


class PointBehindCamera(Splat4DError):
    """Point maps to camera-space depth at or below the near tolerance."""


class OutOfBounds(Splat4DError):
    """Continuous coordinate falls outside the sampled rectangle."""


class ZeroDescriptor(Splat4DError):
    """Descriptor norm too small for cosine similarity."""


class ShapeMismatch(Splat4DError):
    """Array operands do not share the required shape."""


class InvalidRange(Splat4DError):
    """Scalar parameter outside its admissible range."""


class DegenerateSignal(Splat4DError):
    """Signal coefficient too small to invert the noising step."""


class OutOfBox(Splat4DError):
    """Query point outside the field's bounding box or frame range."""


class BehindNearPlane(Splat4DError):
    """Gaussian center in front of or on the near plane; splat is culled."""


class TooFewGaussians(Splat4DError):
    """Not enough points to build the requested neighborhood graph."""


class DegenerateNeighborhood(Splat4DError):
    """Rigidity neighborhood has rank-zero rest-pose covariance."""
