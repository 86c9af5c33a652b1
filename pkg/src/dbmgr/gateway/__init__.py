"""User-facing surfaces: the HTTP API behind the status portal and the CLI."""

from .api import GatewayServer

__all__ = ["GatewayServer"]
