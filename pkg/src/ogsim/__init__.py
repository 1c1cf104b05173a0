"""Desk-scale simulator of a multi-wavelength satellite optical ground
station: pass geometry, turbulence-disturbed tip/tilt tracking with a fine
pointing mirror, waveplate polarization compensation, a BB84 polarization
receiver, and an MQTT-compatible command/telemetry bus tying it together.
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    beacon,
    bus,
    constants,
    controller,
    ephemeris,
    frontend,
    polarization,
    qkd,
    scenario,
    tracking,
    turbulence,
)
