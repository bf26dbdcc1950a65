"""Feed-forward networks of Gaussian process neurons with moment propagation."""

__version__ = "0.1.0"

from .errors import GPNError  # noqa: E402
from .network import Mode, NetworkParams, forward, init_network  # noqa: E402

__all__ = ["GPNError", "Mode", "NetworkParams", "forward", "init_network", "__version__"]
