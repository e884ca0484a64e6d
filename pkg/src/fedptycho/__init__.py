"""Desk-scale federated ptychography pipeline.

Simulated beamline acquisition, a JSON state-machine flow engine, a
FaaS-style compute endpoint with file-locked accelerator slots, and an
iterative ptychographic reconstruction core.
"""

__version__ = "0.1.0"
