"""Self-contained CI orchestrator for an emulated wireless testbed.

Everything runs at desk scale against a deterministic simulation: a node
registry, a content-addressed commit store, per-device build/flash/exec
daemons, a tiny firmware VM, and a discrete-event radio medium.
"""

__version__ = "0.1.0"
