from .bus import run_bus
from .wire import Transcript, decode, decode_body, encode, encode_body

__all__ = ["run_bus", "Transcript", "encode", "decode", "encode_body", "decode_body"]

from .tcp import TcpNode, run_tcp, serve_party  # noqa: E402

__all__ += ["TcpNode", "run_tcp", "serve_party"]
