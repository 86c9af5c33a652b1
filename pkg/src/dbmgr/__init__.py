"""On-demand database lifecycle orchestration on a simulated multi-node cluster.

Kept import-light on purpose: engine daemons are spawned as
``python -m dbmgr.engines.daemon`` and must not pay for package-wide imports.
"""

__version__ = "0.1.0"
