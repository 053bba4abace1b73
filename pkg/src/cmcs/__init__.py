"""Cross-stream self-supervised learning for skeleton action recognition."""

from .errors import CMCSError

__version__ = "0.1.0"

__all__ = ["CMCSError", "__version__"]
