"""Physical constants and fixed station parameters.

Station values describe the simulated telescope and receiver; they are held
here so every module and the scenario defaults agree on a single source.
"""

# universal
MU_EARTH = 3.986e14          # m^3/s^2, gravitational parameter
R_EARTH = 6371e3             # m, spherical Earth radius
C_LIGHT = 2.998e8            # m/s
H_PLANCK = 6.62607015e-34    # J s

# telescope / receiver
APERTURE_M = 0.8             # main mirror diameter
FOCAL_RATIO = 6.85
SITE_LAT_DEG = 24.0 + 11.0 / 60.0    # 24 deg 11' N
SITE_LON_DEG = 54.0 + 41.0 / 60.0    # 54 deg 41' E
SITE_ALT_M = 70.0

# SWIR communications port
FIBER_MAX_RATE_BPS = 2.5e9

# turbulence test-bench bookkeeping: 800 mm telescope / 8 mm test beam,
# used only to report bench-frame angles alongside sky-frame ones
BENCH_MAGNIFICATION = 100.0

# reference wavelength the Fried parameter is quoted at
R0_REFERENCE_LAMBDA_M = 550e-9
