"""Reference implementation of the external-stage wire protocol.

Self-contained on purpose: the server speaks only the wire protocol and
carries its own framing and mask codec, so it doubles as an integration
check that the protocol documentation is complete.
"""

from .server import ServerConfig, StageServer

__all__ = ["ServerConfig", "StageServer"]
__version__ = "0.1.0"
