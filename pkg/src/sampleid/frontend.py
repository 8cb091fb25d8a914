"""Variable-Q transform frontend.

Computes a complex log-frequency spectrogram by direct time-domain inner
products between the signal and Hann-windowed complex exponentials, one
kernel per bin. The per-bin bandwidth is ``alpha * f_k + gamma``; with
``gamma = 0`` this reduces to a constant-Q transform.

Kernels are evaluated at every hop position, which keeps the transform an
exactly linear function of the input (no multirate tricks, no FFT
approximations). Bins with nearly equal kernel lengths are zero-padded to a
shared length so the per-frame inner products become one BLAS matmul per
group.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

__all__ = ["VqtConfig", "VqtMatrix", "vqt", "vqt_values", "log_magnitude"]

# bins whose kernel lengths differ by less than this factor share a padded
# frame buffer (purely a performance knob, results are unaffected)
_GROUP_RATIO = 1.3


@dataclass(frozen=True)
class VqtConfig:
    """Geometry of the transform: frequency grid, bandwidths, hop."""

    sample_rate: int = 22050
    f_min: float = 32.70  # C1
    octaves: int = 8
    bins_per_octave: int = 36
    gamma: float = 7.0
    hop: float = 0.020  # seconds
    dtype: str = "float64"  # compute precision: "float32" or "float64"

    def __post_init__(self):
        if self.sample_rate <= 0 or int(self.sample_rate) != self.sample_rate:
            raise ValueError("sample_rate must be a positive integer")
        if self.octaves < 1 or self.bins_per_octave < 1:
            raise ValueError("need octaves >= 1 and bins_per_octave >= 1")
        if self.hop <= 0:
            raise ValueError("hop must be positive")
        if self.f_min <= 0:
            raise ValueError("f_min must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")
        nyquist = self.sample_rate / 2
        if self.f_min * 2.0 ** self.octaves >= nyquist:
            raise ValueError(
                f"highest bin center {self.f_min * 2.0 ** self.octaves:.1f} Hz "
                f"is not below Nyquist ({nyquist:.1f} Hz)"
            )
        # reject configs whose widened top bins leak past Nyquist up front,
        # rather than failing per call
        f_top = self.bin_frequencies[-1]
        if f_top + self.bandwidths[-1] / 2 >= nyquist:
            raise ValueError(
                "top bin exceeds Nyquist after bandwidth widening; "
                "lower f_min, octaves or gamma"
            )

    @property
    def n_bins(self) -> int:
        return self.octaves * self.bins_per_octave

    @property
    def hop_samples(self) -> int:
        h = int(round(self.hop * self.sample_rate))
        return max(h, 1)

    @property
    def alpha(self) -> float:
        b = self.bins_per_octave
        return 2.0 ** (1.0 / b) - 2.0 ** (-1.0 / b)

    @property
    def bin_frequencies(self) -> np.ndarray:
        k = np.arange(self.n_bins)
        return self.f_min * 2.0 ** (k / self.bins_per_octave)

    @property
    def bandwidths(self) -> np.ndarray:
        return self.alpha * self.bin_frequencies + self.gamma

    def kernel_lengths(self, max_len: int | None = None) -> np.ndarray:
        """Per-bin kernel length round(fs / B_k), optionally clamped."""
        lengths = np.round(self.sample_rate / self.bandwidths).astype(np.int64)
        lengths = np.maximum(lengths, 2)
        if max_len is not None:
            lengths = np.minimum(lengths, max_len)
        return lengths

    def n_frames(self, n_samples: int) -> int:
        return n_samples // self.hop_samples + 1


@dataclass
class VqtMatrix:
    """Complex time-frequency matrix plus its frequency-axis metadata."""

    values: np.ndarray  # (n_bins, n_frames) complex
    config: VqtConfig
    bin_frequencies: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.bin_frequencies is None:
            self.bin_frequencies = self.config.bin_frequencies

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def _hann(length: int) -> np.ndarray:
    if length == 1:
        return np.ones(1)
    n = np.arange(length)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * n / (length - 1)))


@lru_cache(maxsize=16)
def _kernel_table(config: VqtConfig, clamp_len: int):
    """Grouped kernel matrices for one config and one clamped max length.

    Returns a list of (L_group, bin_lo, bin_hi, K) where K is a real
    (L_group, 2 * n_group) matrix holding [real | imag] kernel parts so the
    transform is a single real GEMM per group.
    """
    real_dtype = np.dtype(config.dtype)
    freqs = config.bin_frequencies
    lengths = config.kernel_lengths(max_len=clamp_len)
    groups = []
    lo = 0
    while lo < config.n_bins:
        hi = lo + 1
        # lengths decrease with bin index; extend while close enough
        while hi < config.n_bins and lengths[lo] / lengths[hi] <= _GROUP_RATIO:
            hi += 1
        l_group = int(lengths[lo])
        k_mat = np.zeros((l_group, 2 * (hi - lo)), dtype=real_dtype)
        for j, k in enumerate(range(lo, hi)):
            l_k = int(lengths[k])
            win = _hann(l_k)
            n = np.arange(l_k)
            phase = -2.0 * np.pi * freqs[k] * (n - (l_k - 1) / 2.0) / config.sample_rate
            kern = win * np.exp(1j * phase) / win.sum()
            # align kernel centers: bin window starts at t*hop - l_k//2,
            # group window at t*hop - l_group//2
            off = l_group // 2 - l_k // 2
            k_mat[off:off + l_k, j] = kern.real
            k_mat[off:off + l_k, (hi - lo) + j] = kern.imag
        groups.append((l_group, lo, hi, k_mat))
        lo = hi
    return groups


def vqt_values(
    signal: np.ndarray,
    config: VqtConfig,
    bins: tuple[int, int] | None = None,
    frames: tuple[int, int] | None = None,
) -> np.ndarray:
    """Complex VQT values, optionally restricted to a bin/frame window.

    The restricted result equals the corresponding slice of the full
    transform; restriction only skips work.
    """
    signal = np.asarray(signal)
    if signal.ndim != 1:
        raise ValueError("expected a mono 1-D signal")
    n = signal.shape[0]
    hop = config.hop_samples
    if n < hop:
        raise ValueError(f"signal too short: {n} samples < one hop ({hop})")
    w_full = config.n_frames(n)
    b_lo, b_hi = bins if bins is not None else (0, config.n_bins)
    f_lo, f_hi = frames if frames is not None else (0, w_full)
    if not (0 <= b_lo < b_hi <= config.n_bins):
        raise ValueError("bin window out of range")
    if not (0 <= f_lo < f_hi <= w_full):
        raise ValueError("frame window out of range")

    real_dtype = np.dtype(config.dtype)
    cplx_dtype = np.complex64 if real_dtype == np.float32 else np.complex128
    # clamp key only depends on n while n is shorter than the longest kernel,
    # so long signals of different lengths share one cached table
    l_max_unclamped = int(config.kernel_lengths()[0])
    groups = _kernel_table(config, min(n, l_max_unclamped))

    max_l = groups[0][0]
    pad = max_l // 2 + 1
    padded = np.zeros(n + 2 * pad, dtype=real_dtype)
    padded[pad:pad + n] = signal

    w_sel = f_hi - f_lo
    out = np.empty((b_hi - b_lo, w_sel), dtype=cplx_dtype)
    stride = padded.strides[0]
    for l_group, lo, hi, k_mat in groups:
        if hi <= b_lo or lo >= b_hi:
            continue
        start = pad + f_lo * hop - l_group // 2
        # contiguous copy so the product hits the BLAS fast path
        frames_mat = np.ascontiguousarray(
            np.lib.stride_tricks.as_strided(
                padded[start:],
                shape=(w_sel, l_group),
                strides=(hop * stride, stride),
                writeable=False,
            )
        )
        sel_lo = max(lo, b_lo)
        sel_hi = min(hi, b_hi)
        n_group = hi - lo
        j_lo, j_hi = sel_lo - lo, sel_hi - lo
        cols = np.concatenate(
            [np.arange(j_lo, j_hi), n_group + np.arange(j_lo, j_hi)]
        )
        prod = frames_mat @ np.ascontiguousarray(k_mat[:, cols])
        n_sel = sel_hi - sel_lo
        block = out[sel_lo - b_lo:sel_hi - b_lo]
        block.real = prod[:, :n_sel].T
        block.imag = prod[:, n_sel:].T
    return out


def vqt(signal: np.ndarray, config: VqtConfig) -> VqtMatrix:
    """Full complex VQT of a mono waveform."""
    return VqtMatrix(values=vqt_values(signal, config), config=config)


def log_magnitude(m: VqtMatrix | np.ndarray) -> np.ndarray:
    """Elementwise log(1 + |value|); non-negative, finite, same shape."""
    values = m.values if isinstance(m, VqtMatrix) else m
    return np.log1p(np.abs(values))
