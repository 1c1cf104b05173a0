"""Jones/Stokes calculus, waveplates, and channel compensation.

The optical channel (telescope path plus satellite frame rotation) is
modeled as lossless, so every element here is a 2x2 unitary acting on a
normalized Jones vector (H, V amplitudes). Conventions, fixed once:

* Physical rotation by alpha: R(alpha) = [[cos a, -sin a], [sin a, cos a]].
* Waveplate with fast axis at theta: R(theta) @ diag(1, i|-1) @ R(-theta)
  (i for a quarter-wave plate, -1 for a half-wave plate), global phase free.
* Plate order along propagation: QWP1, then HWP, then QWP2.
* Stokes (Q, U, V) of a unit Jones vector (Ex, Ey):
  Q = |Ex|^2 - |Ey|^2, U = 2 Re(Ex* Ey), V = 2 Im(Ex* Ey);
  right-circular (1, i)/sqrt(2) has V = +1.
* Fast-axis angles are reported normalized to [0, 180) degrees.

solve_compensation decomposes the inverse channel into QWP-HWP-QWP fast-axis
angles in closed form. Writing a plate with axis theta as the SU(2) element
cos(d/2) I - i sin(d/2) (cos 2theta sz + sin 2theta sx) (d = retardance) and
multiplying out the three-plate quaternion gives, for target channel-inverse
quaternion (u0, ux, uy, uz),

    u0 = -cos S cos D     ux =  cos P sin D
    uy = -sin S cos D     uz = -sin P sin D

with S = q2 - q1, P = q2 + q1, D = 2h - P (all in axis-angle doubled units).
Inverting these gives every solution branch; ties between equivalent branches
are broken by the lexicographically smallest (q1, h, q2) triple.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, LowConfidenceError, PreconditionError

UNITARY_ATOL = 1e-10
SOLVE_TOL = 1e-6

# canonical analyzer states
H_STATE = np.array([1.0, 0.0], dtype=complex)
V_STATE = np.array([0.0, 1.0], dtype=complex)
D_STATE = np.array([1.0, 1.0], dtype=complex) / math.sqrt(2.0)
A_STATE = np.array([1.0, -1.0], dtype=complex) / math.sqrt(2.0)


def jones_vector(ex: complex, ey: complex) -> np.ndarray:
    """Normalized Jones vector from raw amplitudes."""
    v = np.array([ex, ey], dtype=complex)
    n = np.linalg.norm(v)
    if n == 0:
        raise ContractError("zero Jones vector")
    return v / n


def linear_state(psi_deg: float) -> np.ndarray:
    """Linearly polarized state with azimuth psi."""
    a = math.radians(psi_deg)
    return np.array([math.cos(a), math.sin(a)], dtype=complex)


def rotator(alpha_deg: float) -> np.ndarray:
    """Physical rotation of the transverse plane by alpha."""
    a = math.radians(alpha_deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s], [s, c]], dtype=complex)


def is_unitary(m: np.ndarray, atol: float = UNITARY_ATOL) -> bool:
    m = np.asarray(m, dtype=complex)
    return m.shape == (2, 2) and bool(
        np.allclose(m @ m.conj().T, np.eye(2), rtol=0.0, atol=atol)
    )


def waveplate(kind: str, theta_deg: float) -> np.ndarray:
    """Jones matrix of a quarter- or half-wave plate with fast axis theta."""
    if kind == "quarter":
        core = np.diag([1.0 + 0.0j, 1.0j])
    elif kind == "half":
        core = np.diag([1.0 + 0.0j, -1.0 + 0.0j])
    else:
        raise ContractError(f"waveplate kind must be quarter|half: {kind}")
    r = rotator(theta_deg)
    return r @ core @ r.conj().T


@dataclass(frozen=True)
class WaveplateSet:
    """Fast-axis angles of the QWP1 -> HWP -> QWP2 compensator stack."""

    theta_qwp1_deg: float
    theta_hwp_deg: float
    theta_qwp2_deg: float

    def __post_init__(self) -> None:
        for name in ("theta_qwp1_deg", "theta_hwp_deg", "theta_qwp2_deg"):
            object.__setattr__(self, name, float(getattr(self, name)) % 180.0)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.theta_qwp1_deg, self.theta_hwp_deg, self.theta_qwp2_deg)

    def composite(self) -> np.ndarray:
        """Jones matrix of the full stack in propagation order."""
        return (
            waveplate("quarter", self.theta_qwp2_deg)
            @ waveplate("half", self.theta_hwp_deg)
            @ waveplate("quarter", self.theta_qwp1_deg)
        )


@dataclass(frozen=True)
class StokesVector:
    """Normalized Stokes parameters of a fully polarized state (I = 1)."""

    q: float
    u: float
    v: float

    def degree_of_linear_polarization(self) -> float:
        return math.hypot(self.q, self.u)


def jones_to_stokes(state: np.ndarray) -> StokesVector:
    ex, ey = state
    return StokesVector(
        q=float(abs(ex) ** 2 - abs(ey) ** 2),
        u=float(2.0 * (ex.conjugate() * ey).real),
        v=float(2.0 * (ex.conjugate() * ey).imag),
    )


def apply_chain(elements, state: np.ndarray) -> np.ndarray:
    """Apply optical elements in propagation order (first element first)."""
    out = np.asarray(state, dtype=complex)
    for i, el in enumerate(elements):
        if not is_unitary(el):
            raise ContractError(f"element {i} is not unitary")
        out = np.asarray(el, dtype=complex) @ out
    n = np.linalg.norm(out)
    return out / n


def polarization_azimuth(state: np.ndarray) -> float:
    """Azimuth of the linear-polarization axis, degrees in (-90, 90]."""
    s = jones_to_stokes(state)
    if s.degree_of_linear_polarization() <= 0.1:
        raise LowConfidenceError(
            f"degree of linear polarization {s.degree_of_linear_polarization():.3f} too low"
        )
    psi = 0.5 * math.degrees(math.atan2(s.u, s.q))
    if psi <= -90.0:
        psi += 180.0
    elif psi > 90.0:
        psi -= 180.0
    return psi


def residual_infidelity(channel: np.ndarray, plates: WaveplateSet) -> float:
    """How far W(plates) @ channel is from the identity, phase-insensitively.

    1 - |trace(W C)|^2 / 4, which is 0 iff W C is the identity up to a
    global phase and 1 when the composite is traceless.
    """
    if not is_unitary(channel):
        raise ContractError("channel is not unitary")
    tr = np.trace(plates.composite() @ np.asarray(channel, dtype=complex))
    return float(max(0.0, 1.0 - (abs(tr) ** 2) / 4.0))


def _su2_quaternion(u: np.ndarray) -> np.ndarray:
    """Real quaternion (u0, ux, uy, uz) of an SU(2) matrix,
    u = u0 I - i (ux sx + uy sy + uz sz)."""
    det = np.linalg.det(u)
    v = u / np.sqrt(det)
    return np.array(
        [
            (v[0, 0].real + v[1, 1].real) / 2.0,
            -(v[0, 1].imag + v[1, 0].imag) / 2.0,
            (v[1, 0].real - v[0, 1].real) / 2.0,
            (v[1, 1].imag - v[0, 0].imag) / 2.0,
        ]
    )


_FREE_ANGLE_EPS = 1e-12


def _analytic_candidates(target: np.ndarray):
    """All (q1, h, q2) branches whose plate stack equals `target` up to phase."""
    base = _su2_quaternion(target)
    out = []
    for quat in (base, -base):
        u0, ux, uy, uz = quat
        cos_d = math.hypot(u0, uy)
        sin_d = math.hypot(ux, uz)
        d0 = math.atan2(sin_d, cos_d)
        s_fixed = None if cos_d < _FREE_ANGLE_EPS else math.atan2(-uy, -u0)
        p_fixed = None if sin_d < _FREE_ANGLE_EPS else math.atan2(-uz, ux)
        for d, ds, dp in (
            (d0, 0.0, 0.0),
            (-d0, 0.0, math.pi),
            (math.pi - d0, math.pi, 0.0),
            (math.pi + d0, math.pi, math.pi),
        ):
            s_values = [s_fixed + ds] if s_fixed is not None else [0.0, -d, math.pi / 2]
            p_values = (
                [p_fixed + dp]
                if p_fixed is not None
                else [0.0, -d, math.pi / 2] + s_values
            )
            for s in s_values:
                for p in p_values:
                    q1 = math.degrees((p - s) / 2.0) % 180.0
                    q2 = math.degrees((p + s) / 2.0) % 180.0
                    h = math.degrees((d + p) / 2.0) % 180.0
                    out.append((q1, h, q2))
    return out


def _plate_distance(a: tuple[float, float, float], b: tuple[float, float, float]) -> float:
    """Total plate travel between two angle triples on the mod-180 circle."""
    total = 0.0
    for x, y in zip(a, b):
        d = abs(x - y) % 180.0
        total += min(d, 180.0 - d)
    return total


def solve_compensation(channel: np.ndarray, near: WaveplateSet | None = None) -> WaveplateSet:
    """Plate angles that undo a unitary channel: W(set) @ channel ~ identity.

    Closed-form branch enumeration followed by a verification pass; if no
    analytic branch meets tolerance (numerically degenerate targets), the
    best branch is polished with a local simplex refinement. Deterministic:
    equivalent solutions are tie-broken lexicographically, or, when `near`
    is given, by least total plate travel from it (for continuous tracking
    of a slowly evolving channel), lexicographic among travel ties.
    """
    channel = np.asarray(channel, dtype=complex)
    if not is_unitary(channel):
        raise ContractError("channel is not unitary")
    target = channel.conj().T

    verified: list[tuple[float, float, float]] = []
    fallback: tuple[float, float, float] | None = None
    fallback_fid = math.inf
    for q1, h, q2 in _analytic_candidates(target):
        cand = (round(q1, 9) % 180.0, round(h, 9) % 180.0, round(q2, 9) % 180.0)
        fid = residual_infidelity(channel, WaveplateSet(*cand))
        if fid < SOLVE_TOL * 1e-3:
            verified.append(cand)
        elif fid < fallback_fid:
            fallback, fallback_fid = cand, fid

    if verified:
        if near is None:
            best = min(verified)
        else:
            ref = near.as_tuple()
            best = min(verified, key=lambda c: (round(_plate_distance(c, ref), 9), c))
    else:
        best = _refine(channel, fallback)
    best_fid = residual_infidelity(channel, WaveplateSet(*best))
    if best_fid >= SOLVE_TOL:
        raise ContractError(f"compensation solve failed, infidelity {best_fid:.2e}")
    return WaveplateSet(*best)


def _refine(channel: np.ndarray, start: tuple[float, float, float]) -> tuple[float, float, float]:
    from scipy.optimize import minimize

    def cost(x):
        return residual_infidelity(channel, WaveplateSet(*x))

    res = minimize(cost, np.array(start), method="Nelder-Mead",
                   options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 2000})
    return tuple(float(a) % 180.0 for a in res.x)


def closed_loop_step(
    measured_psi_deg: float,
    reference_psi_deg: float,
    current: WaveplateSet,
    gain: float,
) -> WaveplateSet:
    """One correction step driven by the measured polarization azimuth.

    The azimuth error (mod 180, wrapped to +-90) is scaled by -gain and
    folded into the stack's equivalent rotation; the updated target is then
    re-solved so the returned angles stay canonical.
    """
    if not 0.0 < gain <= 1.0:
        raise PreconditionError(f"gain must be in (0, 1]: {gain}")
    err = (measured_psi_deg - reference_psi_deg + 90.0) % 180.0 - 90.0
    if err == 0.0:
        return current
    # want W_new = R(-gain*err) @ W_current; solve for the channel W_new undoes,
    # staying on the solution branch nearest the current plates
    target_channel = current.composite().conj().T @ rotator(gain * err)
    return solve_compensation(target_channel, near=current)


def qber_from_misalignment(delta_deg: float) -> float:
    """Basis-averaged Malus-law error rate of a rotation misalignment."""
    return float(math.sin(math.radians(delta_deg)) ** 2)
