"""VQT-domain stretch-and-crop augmentation.

The reference view drops the upper and lower half-octaves, gets a random
linear-interpolation time-stretch, and a random temporal crop. The A/B
views get random frequency and temporal crops instead; thanks to the
log-frequency axis a frequency crop acts as a pitch shift of up to +-6
semitones around the centered position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "CropGeometry",
    "ViewParams",
    "time_stretch",
    "interp_frames",
    "ref_view",
    "sub_view",
    "draw_view_params",
    "stretch_positions",
    "ref_frame_window",
]


@dataclass(frozen=True)
class CropGeometry:
    """Output view geometry and stretch range."""

    total_bins: int = 288  # q * b of the parent VQT
    bins_per_octave: int = 36
    out_frames: int = 256
    stretch_range: tuple[float, float] = (0.7, 1.5)

    def __post_init__(self):
        if self.total_bins % self.bins_per_octave != 0:
            raise ValueError("total_bins must be a whole number of octaves")
        if self.total_bins // self.bins_per_octave < 2:
            raise ValueError("need at least 2 octaves to trim half-octaves")
        if self.bins_per_octave % 2 != 0:
            raise ValueError("bins_per_octave must be even (half-octave trim)")
        lo, hi = self.stretch_range
        if not (0 < lo <= hi):
            raise ValueError("stretch_range must be positive and ordered")

    @property
    def out_bins(self) -> int:
        return self.total_bins - self.bins_per_octave

    @property
    def half_octave(self) -> int:
        return self.bins_per_octave // 2


@dataclass(frozen=True)
class ViewParams:
    """One triple's random augmentation draws."""

    t: float  # stretch ratio (multiplies duration)
    ref_time_offset: int
    a_bin_offset: int
    a_time_offset: int
    b_bin_offset: int
    b_time_offset: int


def stretch_positions(w: int, t: float) -> np.ndarray:
    """Fractional source positions of the stretched frames.

    Output frame j samples the input at j * (w - 1) / (w_t - 1) with
    w_t = round(w * t), so the stretched matrix spans the full input.
    """
    if w < 2:
        raise ValueError("need at least 2 frames to stretch")
    if t <= 0:
        raise ValueError("stretch ratio must be positive")
    w_t = int(round(w * t))
    if w_t < 2:
        raise ValueError(f"stretch ratio {t} collapses {w} frames to {w_t}")
    return np.arange(w_t) * ((w - 1) / (w_t - 1))


def interp_frames(values: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Columnwise linear interpolation at fractional frame positions."""
    idx = np.floor(positions).astype(np.int64)
    idx = np.minimum(idx, values.shape[1] - 2)
    frac = (positions - idx).astype(values.real.dtype)
    return values[:, idx] * (1.0 - frac) + values[:, idx + 1] * frac


def time_stretch(values: np.ndarray, t: float) -> np.ndarray:
    """Linear-interpolation time stretch of a complex (bins, frames) matrix."""
    return interp_frames(values, stretch_positions(values.shape[1], t))


def ref_view(
    values: np.ndarray, t: float, time_offset: int, geom: CropGeometry = CropGeometry()
) -> np.ndarray:
    """Reference view: trim half-octaves, stretch, temporal crop."""
    if values.shape[0] != geom.total_bins:
        raise ValueError(f"expected {geom.total_bins} bins, got {values.shape[0]}")
    h = geom.half_octave
    trimmed = values[h:geom.total_bins - h]
    stretched = time_stretch(trimmed, t)
    if time_offset < 0 or time_offset + geom.out_frames > stretched.shape[1]:
        raise ValueError(
            f"time offset {time_offset} infeasible for {stretched.shape[1]} "
            f"stretched frames"
        )
    return stretched[:, time_offset:time_offset + geom.out_frames]


def sub_view(
    values: np.ndarray,
    bin_offset: int,
    time_offset: int,
    geom: CropGeometry = CropGeometry(),
) -> np.ndarray:
    """A/B view: frequency crop (pitch shift) plus temporal crop."""
    if values.shape[0] != geom.total_bins:
        raise ValueError(f"expected {geom.total_bins} bins, got {values.shape[0]}")
    if not 0 <= bin_offset <= geom.bins_per_octave:
        raise ValueError(f"bin offset {bin_offset} outside [0, {geom.bins_per_octave}]")
    if time_offset < 0 or time_offset + geom.out_frames > values.shape[1]:
        raise ValueError("temporal crop does not fit")
    return values[
        bin_offset:bin_offset + geom.out_bins,
        time_offset:time_offset + geom.out_frames,
    ]


def ref_frame_window(w: int, t: float, time_offset: int, out_frames: int):
    """Parent frame range [lo, hi) needed to build a cropped stretched view.

    Lets callers compute only the consumed slice of the parent VQT; the
    result feeds `interp_frames` with positions shifted by lo.
    """
    pos = stretch_positions(w, t)
    if time_offset < 0 or time_offset + out_frames > pos.shape[0]:
        raise ValueError("time offset infeasible")
    sel = pos[time_offset:time_offset + out_frames]
    lo = int(np.floor(sel[0]))
    hi = min(int(np.floor(sel[-1])) + 2, w)
    lo = min(lo, hi - 2)
    return lo, hi, sel - lo


def draw_view_params(
    rng: np.random.Generator,
    w: int,
    geom: CropGeometry = CropGeometry(),
    no_stretch: bool = False,
    no_pitch: bool = False,
    no_shift: bool = False,
) -> ViewParams:
    """Random draws for one triple, honoring the ablation flags.

    The stretch ratio is redrawn until round(w * t) >= out_frames, since
    smaller ratios leave nothing to crop.
    """
    if no_stretch:
        t = 1.0
    else:
        lo, hi = geom.stretch_range
        while True:
            t = float(rng.uniform(lo, hi))
            if int(round(w * t)) >= geom.out_frames:
                break
    w_t = int(round(w * t))
    if w_t < geom.out_frames or w < geom.out_frames:
        raise ValueError("parent VQT too short for the configured crop")
    b = geom.bins_per_octave
    if no_shift:
        ref_off = a_time = b_time = 0
    else:
        ref_off = int(rng.integers(0, w_t - geom.out_frames + 1))
        a_time = int(rng.integers(0, w - geom.out_frames + 1))
        b_time = int(rng.integers(0, w - geom.out_frames + 1))
    if no_pitch:
        a_bin = b_bin = geom.half_octave
    else:
        a_bin = int(rng.integers(0, b + 1))
        b_bin = int(rng.integers(0, b + 1))
    return ViewParams(t, ref_off, a_bin, a_time, b_bin, b_time)
