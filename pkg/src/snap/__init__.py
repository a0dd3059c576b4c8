"""Serial-number based network access control.

A server authenticates devices joining a simulated wireless LAN by their
registered hardware serial number, enforces allow/deny/disable at simulated
access points, and exposes an operator CLI and web console.
"""

__version__ = "0.1.0"
