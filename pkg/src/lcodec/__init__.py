"""Low-complexity learned image codec.

Integer-only auto-encoder inference, a context-switching conditional
entropy model coded with rANS, and inference-based RDOQ of the latent.
"""

from lcodec.qtensor import QTensor

__version__ = "0.1.0"

__all__ = ["QTensor", "__version__"]
