"""Simulation and evaluation toolkit for directional filtering with compact microphone arrays."""

__version__ = "0.1.0"

from .directivity import DirectivityPattern, dma_pattern, piecewise_pattern, preset, theoretical_df  # noqa: E402
from .geometry import ArrayGeometry, Doa, build_array, doa_unit_vector, far_field_delays  # noqa: E402
from .room import RoomSpec, simulate_rir, simulate_vdm_rir, split_direct_reverb  # noqa: E402

__all__ = [
    "ArrayGeometry", "DirectivityPattern", "Doa", "RoomSpec", "build_array", "dma_pattern",
    "doa_unit_vector", "far_field_delays", "piecewise_pattern", "preset", "simulate_rir",
    "simulate_vdm_rir", "split_direct_reverb", "theoretical_df",
]
