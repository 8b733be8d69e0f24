"""Single-machine emulator of the Cluster-Booster architecture."""

__version__ = "0.1.0"
