"""Array geometry, DOA unit vectors and far-field propagation delays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

SPEED_OF_SOUND = 343.0


@dataclass(frozen=True)
class Doa:
    """Direction of arrival in radians (azimuth in the x-y plane, elevation above it)."""

    azimuth: float
    elevation: float = 0.0

    @classmethod
    def from_degrees(cls, azimuth_deg, elevation_deg=0.0):
        return cls(np.deg2rad(azimuth_deg) % (2 * np.pi), np.deg2rad(elevation_deg))

    @property
    def azimuth_deg(self):
        return float(np.rad2deg(self.azimuth))


@dataclass(frozen=True, eq=False)
class ArrayGeometry:
    """Microphone positions in metres, relative to the array origin.

    Row ``reference_index`` is the reference microphone;
    for arrays built by :func:`build_array` it is the centre microphone at
    the origin and rows 1..3 are the ring microphones.
    """

    mic_positions: np.ndarray
    reference_index: int = 0
    diameter: float = 0.0

    def __post_init__(self):
        pos = np.asarray(self.mic_positions, dtype=float)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise InvalidArgumentError("mic_positions must have shape (Q, 3)")
        pos.setflags(write=False)
        object.__setattr__(self, "mic_positions", pos)

    @property
    def num_mics(self):
        return self.mic_positions.shape[0]

    @property
    def reference_position(self):
        return self.mic_positions[self.reference_index]

    def placed_at(self, center):
        """Absolute mic positions for an array whose origin sits at ``center``."""
        return self.mic_positions + np.asarray(center, dtype=float)[None, :]

    def to_dict(self):
        return {
            "diameter": self.diameter,
            "reference_index": self.reference_index,
            "mic_positions": self.mic_positions.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mic_positions"], dtype=float), int(d["reference_index"]), float(d["diameter"]))


def build_array(diameter):
    """Centre microphone plus a three-element UCA of the given diameter.

    The first ring microphone sits at azimuth 0, the others at 120 and 240
    degrees. All microphones lie in the z = 0 plane.
    """
    if not diameter > 0:
        raise InvalidArgumentError(f"array diameter must be positive, got {diameter!r}")
    radius = diameter / 2.0
    az = np.deg2rad([0.0, 120.0, 240.0])
    ring = np.stack([radius * np.cos(az), radius * np.sin(az), np.zeros(3)], axis=1)
    positions = np.vstack([np.zeros((1, 3)), ring])
    return ArrayGeometry(positions, reference_index=0, diameter=float(diameter))


def doa_unit_vector(doa):
    """Unit vector pointing from the array towards the source."""
    cp = np.cos(doa.elevation)
    return np.array([cp * np.cos(doa.azimuth), cp * np.sin(doa.azimuth), np.sin(doa.elevation)])


def far_field_delays(array, doa, c=SPEED_OF_SOUND):
    """Plane-wave arrival delay (seconds) of every mic relative to the reference.

    Negative values mean the wavefront reaches that mic before the reference.
    """
    if not c > 0:
        raise InvalidArgumentError("speed of sound must be positive")
    u = doa_unit_vector(doa)
    rel = array.mic_positions - array.reference_position[None, :]
    return -(rel @ u) / c
