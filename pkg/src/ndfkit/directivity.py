"""Steerable target directivity patterns.

Two kinds are supported: DMA polynomials in the cosine of the look-angle
offset, and user-defined step patterns over azimuth. Both clamp the gain
magnitude to an attenuation floor (0.01, i.e. 40 dB, by default).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidArgumentError
from .geometry import Doa

DEFAULT_FLOOR = 0.01

DMA_PRESETS = {
    "dma1": (0.5, 0.5),
    "dma3": (0.0, 1 / 6, 1 / 2, 1 / 3),
    "dma6": (1 / 49, 8 / 49, 8 / 49, -48 / 49, -48 / 49, 64 / 49, 64 / 49),
}

_SUM_TOL = 1e-12
_ZERO_TOL = 1e-12


@dataclass(frozen=True)
class DirectivityPattern:
    kind: str
    coefficients: tuple = ()
    breakpoints: tuple = ()
    steering: Doa = field(default_factory=Doa)
    floor: float = DEFAULT_FLOOR

    @property
    def order(self):
        return len(self.coefficients) - 1 if self.kind == "dma" else None

    def steered(self, azimuth, elevation=None):
        """Copy of this pattern pointing at a new steering direction (radians)."""
        el = self.steering.elevation if elevation is None else elevation
        return replace(self, steering=Doa(float(azimuth) % (2 * np.pi), float(el)))

    def raw(self, theta, phi=0.0):
        """Unclamped signed gain."""
        theta = np.asarray(theta, dtype=float)
        phi = np.asarray(phi, dtype=float)
        if self.kind == "dma":
            x = np.cos(phi - self.steering.elevation) * np.cos(theta - self.steering.azimuth)
            acc = np.zeros(np.broadcast(x, theta).shape)
            total = 0.0
            for j, a in enumerate(self.coefficients):
                acc = acc + a * x**j
                total = total + a * 1.0**j
            # renormalising keeps the steering response at exactly 1
            return acc / total
        rel = np.rad2deg(theta - self.steering.azimuth) % 360.0
        angles = np.array([b[0] for b in self.breakpoints])
        gains = np.array([b[1] for b in self.breakpoints])
        idx = np.searchsorted(angles, rel, side="right") - 1
        # angles below the first breakpoint wrap around to the last one
        return np.broadcast_to(gains[idx % len(gains)], np.broadcast(rel, phi).shape).astype(float)

    def evaluate(self, theta, phi=0.0, clamp=True):
        """Signed gain with magnitude clamped to the floor."""
        g = self.raw(theta, phi)
        if not clamp:
            return g
        # numerically-zero raw values (polynomial nulls) clamp to +floor
        sign = np.where(g < -_ZERO_TOL, -1.0, 1.0)
        return np.where(np.abs(g) < self.floor, sign * self.floor, g)

    def to_dict(self):
        return {
            "kind": self.kind,
            "coefficients": list(self.coefficients),
            "breakpoints": [list(b) for b in self.breakpoints],
            "steering_deg": [math.degrees(self.steering.azimuth), math.degrees(self.steering.elevation)],
            "floor": self.floor,
        }

    @classmethod
    def from_dict(cls, d):
        az, el = d.get("steering_deg", [0.0, 0.0])
        steering = Doa(math.radians(az), math.radians(el))
        if d["kind"] == "dma":
            return dma_pattern(len(d["coefficients"]) - 1, d["coefficients"], steering, d.get("floor", DEFAULT_FLOOR))
        return piecewise_pattern([tuple(b) for b in d["breakpoints"]], d.get("floor", DEFAULT_FLOOR), steering)


def _check_floor(floor):
    if not 0 < floor <= 1:
        raise InvalidArgumentError(f"floor must lie in (0, 1], got {floor!r}")


def dma_pattern(order, coefficients, steering=None, floor=DEFAULT_FLOOR):
    coefficients = tuple(float(a) for a in coefficients)
    if len(coefficients) != order + 1:
        raise InvalidArgumentError(f"order {order} needs {order + 1} coefficients, got {len(coefficients)}")
    if abs(math.fsum(coefficients) - 1.0) > _SUM_TOL:
        raise InvalidArgumentError(f"DMA coefficients must sum to 1, got {math.fsum(coefficients)!r}")
    _check_floor(floor)
    return DirectivityPattern("dma", coefficients=coefficients, steering=steering or Doa(0.0, 0.0), floor=float(floor))


def piecewise_pattern(breakpoints, floor=DEFAULT_FLOOR, steering=None):
    """Step pattern from ``(azimuth_deg, linear_gain)`` breakpoints.

    The gain at an angle is the gain of the nearest breakpoint at or below
    it (measured from the steering direction, modulo 360 degrees).
    """
    if not breakpoints:
        raise InvalidArgumentError("piecewise pattern needs at least one breakpoint")
    _check_floor(floor)
    bps = tuple((float(a) % 360.0, float(g)) for a, g in breakpoints)
    angles = [a for a, _ in bps]
    if angles != sorted(angles) or len(set(angles)) != len(angles):
        raise InvalidArgumentError("breakpoints must be sorted by strictly increasing azimuth")
    for a, g in bps:
        if not floor <= g <= 1.0:
            raise InvalidArgumentError(f"breakpoint gain {g} at {a} deg outside [floor, 1]")
    return DirectivityPattern("piecewise", breakpoints=bps, steering=steering or Doa(0.0, 0.0), floor=float(floor))


def lobes_pattern(lobes, floor=DEFAULT_FLOOR):
    """Unity-gain lobes ``(center_deg, width_deg)`` over a floor-level background."""
    edges = []
    for center, width in lobes:
        lo, hi = (center - width / 2) % 360.0, (center + width / 2) % 360.0
        edges.append((lo, 1.0))
        edges.append((hi, floor))
    edges.sort()
    if edges[0][0] > 0:
        # value at 0 deg is whatever the last edge before 360 left behind
        edges.insert(0, (0.0, edges[-1][1]))
    return piecewise_pattern(edges, floor)


def preset(name, steering_deg=0.0, floor=DEFAULT_FLOOR):
    """Named target patterns: ``dma1``, ``dma3``, ``dma6``, ``omni``, ``lobes``, ``steps``."""
    steer = Doa.from_degrees(steering_deg)
    if name in DMA_PRESETS:
        coeffs = DMA_PRESETS[name]
        return dma_pattern(len(coeffs) - 1, coeffs, steer, floor)
    if name == "omni":
        return piecewise_pattern([(0.0, 1.0)], floor, steer)
    if name == "lobes":
        return lobes_pattern([(0.0, 20.0), (120.0, 30.0)], floor).steered(steer.azimuth)
    if name == "steps":
        return piecewise_pattern(
            [(0.0, 1.0), (45.0, 10 ** (-6 / 20)), (90.0, 10 ** (-12 / 20)), (135.0, 10 ** (-20 / 20)),
             (160.0, floor), (200.0, 10 ** (-20 / 20)), (225.0, 10 ** (-12 / 20)), (270.0, 10 ** (-6 / 20)),
             (315.0, 1.0)],
            floor, steer)
    raise InvalidArgumentError(f"unknown pattern preset {name!r}")


def theoretical_df(pattern, resolution_deg=1.0, clamp=True):
    """Directivity factor of the pattern as a linear ratio (not dB).

    Product-grid quadrature over the sphere: uniform midpoints in azimuth
    and Gauss-Legendre nodes in sin(elevation), which carries the cos(elevation)
    area weight. The grid is exact for unclamped DMA polynomials; the weights
    sum to exactly one so a constant pattern yields 1.
    """
    n_az = int(round(360.0 / resolution_deg))
    n_el = int(round(180.0 / resolution_deg))
    az = np.deg2rad((np.arange(n_az) + 0.5) * 360.0 / n_az)
    mu, w_mu = np.polynomial.legendre.leggauss(n_el)
    A, E = np.meshgrid(az, np.arcsin(mu), indexing="ij")
    w = np.broadcast_to(w_mu[None, :], A.shape)
    g = pattern.evaluate(A, E, clamp=clamp)
    return float(np.sum(w) / np.sum(w * g**2))
