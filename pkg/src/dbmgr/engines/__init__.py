"""Toy database engines: adapter definitions, daemons, supervision, client.

Re-exports are lazy so that ``python -m dbmgr.engines.daemon`` (spawned once
per service per node) does not pay for the supervisor/client imports.
"""

_EXPORTS = {
    "ENGINE_KINDS": "defs", "EngineKind": "defs", "ServiceSpec": "defs",
    "init_storage": "defs", "node_data_dir": "defs", "resolve_kind": "defs",
    "EngineClient": "client",
    "EngineHandle": "supervisor", "EngineSupervisor": "supervisor",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name):
    if name in _EXPORTS:
        import importlib
        module = importlib.import_module(f".{_EXPORTS[name]}", __name__)
        return getattr(module, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
