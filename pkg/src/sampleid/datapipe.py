"""Multi-track data pipeline.

Loads or synthesizes multi-track recordings, extracts random chunks with
disjoint stem subsets A/B, and applies audio-domain transforms (gain,
peaking EQ, feed-forward RMS compression).

Corpus layout on disk: one directory per song containing ``stem_*.wav``
files, plus a top-level ``manifest.json`` listing songs, stem paths and
instrument labels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import lfilter

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

__all__ = [
    "MultiTrack",
    "MultiTrackChunk",
    "TransformSpec",
    "extract_chunk",
    "apply_transforms",
    "synthesize_corpus",
    "merge_stems",
    "load_wav",
    "save_wav",
    "write_corpus",
    "load_corpus",
    "resample_linear",
    "build_synthetic_eval_set",
]


@dataclass
class MultiTrack:
    """S aligned mono stems sharing one sample rate; the mix is their sum."""

    song_id: str
    stems: list[np.ndarray]
    sample_rate: int
    stem_labels: list[str] | None = None

    def __post_init__(self):
        if len(self.stems) < 2:
            raise ValueError("need at least 2 stems")
        n = self.stems[0].shape[0]
        for s in self.stems:
            if s.ndim != 1 or s.shape[0] != n:
                raise ValueError("stems must be mono and equal length")
        if self.stem_labels is not None and len(self.stem_labels) != len(self.stems):
            raise ValueError("one label per stem")

    @property
    def n_stems(self) -> int:
        return len(self.stems)

    @property
    def n_samples(self) -> int:
        return self.stems[0].shape[0]

    def mix(self) -> np.ndarray:
        return np.sum(np.stack(self.stems), axis=0)


@dataclass
class MultiTrackChunk:
    """One random chunk with its disjoint A/B stem subsets and full mix."""

    x_ref: np.ndarray
    x_a: np.ndarray
    x_b: np.ndarray
    subset_a: tuple[int, ...]
    subset_b: tuple[int, ...]
    source_song: str
    sample_rate: int

    def __post_init__(self):
        a, b = set(self.subset_a), set(self.subset_b)
        if not a or not b or a & b:
            raise ValueError("subsets must be disjoint and non-empty")


@dataclass
class TransformSpec:
    """Ranges for the random gain / EQ / compressor chain.

    Defaults are our own documented choices; override any field to match an
    external reference configuration.
    """

    gain_db_range: tuple[float, float] = (-12.0, 6.0)
    p_gain: float = 0.5
    eq_bands: int = 3
    eq_freq_range: tuple[float, float] = (80.0, 8000.0)  # log-uniform
    eq_gain_db_range: tuple[float, float] = (-6.0, 6.0)
    eq_q_range: tuple[float, float] = (0.5, 2.0)
    p_eq: float = 0.5
    comp_threshold_range: tuple[float, float] = (-30.0, -10.0)  # dBFS
    comp_ratio_range: tuple[float, float] = (2.0, 6.0)
    comp_attack: float = 0.005  # seconds
    comp_release: float = 0.1
    p_comp: float = 0.5

    def __post_init__(self):
        for lo, hi in (
            self.gain_db_range,
            self.eq_freq_range,
            self.eq_gain_db_range,
            self.eq_q_range,
            self.comp_threshold_range,
            self.comp_ratio_range,
        ):
            if lo > hi:
                raise ValueError("ranges must be well-ordered")
        for p in (self.p_gain, self.p_eq, self.p_comp):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")


def no_transforms() -> TransformSpec:
    return TransformSpec(p_gain=0.0, p_eq=0.0, p_comp=0.0)


def extract_chunk(
    track: MultiTrack, d: float, rng: np.random.Generator
) -> MultiTrackChunk:
    """Extract a random chunk of duration d with a random A/B stem split.

    A/B rule: shuffle stem indices, draw |A| uniform in [1, S-1], then |B|
    uniform in [1, S-|A|]; leftover stems belong to neither subset but still
    enter the full reference mix.
    """
    n_chunk = int(np.floor(d * track.sample_rate))
    if n_chunk > track.n_samples:
        raise ValueError(f"track shorter than chunk duration {d} s")
    if n_chunk < 1:
        raise ValueError("chunk duration too small")
    s = track.n_stems
    onset = int(rng.integers(0, track.n_samples - n_chunk + 1))
    order = rng.permutation(s)
    n_a = int(rng.integers(1, s))  # 1 .. S-1
    n_b = int(rng.integers(1, s - n_a + 1))  # 1 .. S-|A|
    subset_a = tuple(sorted(int(i) for i in order[:n_a]))
    subset_b = tuple(sorted(int(i) for i in order[n_a:n_a + n_b]))

    chunk = np.stack([st[onset:onset + n_chunk] for st in track.stems])
    return MultiTrackChunk(
        x_ref=chunk.sum(axis=0),
        x_a=chunk[list(subset_a)].sum(axis=0),
        x_b=chunk[list(subset_b)].sum(axis=0),
        subset_a=subset_a,
        subset_b=subset_b,
        source_song=track.song_id,
        sample_rate=track.sample_rate,
    )


# ---------------------------------------------------------------------------
# audio transforms


def peaking_biquad(fs: float, f0: float, gain_db: float, q: float):
    """RBJ peaking-EQ biquad coefficients (b, a)."""
    a_lin = 10.0 ** (gain_db / 40.0)
    w0 = 2.0 * np.pi * f0 / fs
    alpha = np.sin(w0) / (2.0 * q)
    cos_w0 = np.cos(w0)
    b = np.array([1 + alpha * a_lin, -2 * cos_w0, 1 - alpha * a_lin])
    a = np.array([1 + alpha / a_lin, -2 * cos_w0, 1 - alpha / a_lin])
    return b / a[0], a / a[0]


def _envelope_python(power, attack_coef, release_coef):
    env = np.empty_like(power)
    state = 0.0
    for i in range(power.shape[0]):
        coef = attack_coef if power[i] > state else release_coef
        state = coef * state + (1.0 - coef) * power[i]
        env[i] = state
    return env


if _HAVE_NUMBA:
    _envelope = njit(cache=True)(_envelope_python)
else:  # pragma: no cover
    _envelope = _envelope_python


def compress(
    x: np.ndarray,
    fs: float,
    threshold_db: float,
    ratio: float,
    attack: float,
    release: float,
    rms_window: float = 0.02,
) -> np.ndarray:
    """Feed-forward compressor with an RMS envelope detector.

    The power is first smoothed by a symmetric one-pole RMS window (so a
    steady sine of peak amplitude a reads 20*log10(a) dBFS, free of the
    2f ripple an asymmetric detector would ride up), then attack/release
    ballistics shape the response to level changes. The static curve maps
    input level x above threshold to threshold + (x - threshold) / ratio.
    """
    attack_coef = np.exp(-1.0 / (attack * fs))
    release_coef = np.exp(-1.0 / (release * fs))
    rms_coef = np.exp(-1.0 / (rms_window * fs))
    power = x.astype(np.float64) ** 2
    power = lfilter([1.0 - rms_coef], [1.0, -rms_coef], power)
    env = _envelope(power, attack_coef, release_coef)
    level_db = 10.0 * np.log10(2.0 * env + 1e-20)  # x2: sine RMS -> peak
    over = level_db - threshold_db
    gain_db = np.where(over > 0.0, -over * (1.0 - 1.0 / ratio), 0.0)
    return (x * 10.0 ** (gain_db / 20.0)).astype(x.dtype)


def apply_transforms(
    x: np.ndarray, spec: TransformSpec, sample_rate: int, rng: np.random.Generator
) -> tuple[np.ndarray, dict]:
    """Random gain / EQ / compression chain. Returns (audio, draw log)."""
    log: dict = {}
    y = x
    if rng.random() < spec.p_gain:
        gain_db = float(rng.uniform(*spec.gain_db_range))
        y = y * 10.0 ** (gain_db / 20.0)
        log["gain_db"] = gain_db
    if rng.random() < spec.p_eq:
        bands = []
        lo, hi = spec.eq_freq_range
        for _ in range(spec.eq_bands):
            f0 = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
            g = float(rng.uniform(*spec.eq_gain_db_range))
            q = float(rng.uniform(*spec.eq_q_range))
            b, a = peaking_biquad(sample_rate, f0, g, q)
            y = lfilter(b, a, y)
            bands.append({"freq": f0, "gain_db": g, "q": q})
        log["eq"] = bands
    if rng.random() < spec.p_comp:
        thr = float(rng.uniform(*spec.comp_threshold_range))
        ratio = float(rng.uniform(*spec.comp_ratio_range))
        y = compress(y, sample_rate, thr, ratio, spec.comp_attack, spec.comp_release)
        log["compressor"] = {
            "threshold_db": thr,
            "ratio": ratio,
            "attack": spec.comp_attack,
            "release": spec.comp_release,
        }
    return np.asarray(y, dtype=x.dtype), log


# ---------------------------------------------------------------------------
# synthetic corpus


def _note_track(rng, n, fs, f0, scale, pattern, harmonics, decay):
    """Tone sequence following an on/off pattern, notes drawn from scale."""
    out = np.zeros(n)
    step = n // len(pattern) if len(pattern) else n
    t = np.arange(step) / fs
    for i, on in enumerate(pattern):
        if not on:
            continue
        f = f0 * scale[int(rng.integers(0, len(scale)))]
        env = np.exp(-t / decay)
        seg = np.zeros(step)
        for h, amp in harmonics:
            if f * h < fs / 2:
                phase = rng.uniform(0, 2 * np.pi)
                seg += amp * np.sin(2 * np.pi * f * h * t + phase)
        start = i * step
        out[start:start + step] += env * seg
    return out


def _drum_track(rng, n, fs, pattern, center, width):
    """Band-passed noise bursts on a step pattern."""
    out = np.zeros(n)
    step = n // len(pattern)
    burst_len = min(step, int(0.08 * fs))
    t = np.arange(burst_len) / fs
    env = np.exp(-t / 0.02)
    for i, on in enumerate(pattern):
        if not on:
            continue
        noise = rng.standard_normal(burst_len)
        spec = np.fft.rfft(noise)
        f = np.fft.rfftfreq(burst_len, 1.0 / fs)
        spec *= np.exp(-0.5 * ((f - center) / width) ** 2)
        out[i * step:i * step + burst_len] += env * np.fft.irfft(spec, burst_len)
    return out


def _pad_track(rng, n, fs, f0, scale):
    """Sustained chord with a slow song-specific amplitude modulation."""
    t = np.arange(n) / fs
    out = np.zeros(n)
    for idx in rng.choice(len(scale), size=3, replace=False):
        f = 2.0 * f0 * scale[idx]
        if f < fs / 2:
            out += np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    lfo = 0.55 + 0.45 * np.sin(2 * np.pi * rng.uniform(0.1, 0.6) * t)
    return out * lfo


_STEM_KINDS = ["bass", "lead", "drums", "pads", "arp", "noise"]


def _make_stem(kind, rng, n, fs, f0, scale, n_steps):
    pattern = (rng.random(n_steps) < rng.uniform(0.4, 0.9)).astype(int)
    pattern[0] = 1
    if kind == "bass":
        return _note_track(rng, n, fs, f0 / 2, scale, pattern,
                           [(1, 1.0), (3, 0.3)], decay=0.3)
    if kind == "lead":
        harm = [(h, 1.0 / h) for h in range(1, 9)]
        return _note_track(rng, n, fs, f0 * 2, scale, pattern, harm, decay=0.15)
    if kind == "drums":
        center = rng.uniform(1500, 7000)
        return _drum_track(rng, n, fs, pattern, center, width=center / 3)
    if kind == "pads":
        return _pad_track(rng, n, fs, f0, scale)
    if kind == "arp":
        harm = [(h, 1.0 / h ** 2) for h in range(1, 6)]
        return _note_track(rng, n, fs, f0 * 4, scale, pattern, harm, decay=0.08)
    # low band-passed noise groove
    center = rng.uniform(200, 800)
    return _drum_track(rng, n, fs, pattern, center, width=center / 2)


def _xcorr_peak(a: np.ndarray, b: np.ndarray) -> float:
    """Peak of the normalized cross-correlation (energy normalization)."""
    m = len(a) + len(b) - 1
    nfft = 1 << (m - 1).bit_length()
    fa = np.fft.rfft(a, nfft)
    fb = np.fft.rfft(b, nfft)
    xc = np.fft.irfft(fa * np.conj(fb), nfft)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0:
        return 0.0
    return float(np.abs(xc).max() / denom)


def synthesize_corpus(
    n_songs: int,
    stems_per_song: int,
    duration: float,
    rng: np.random.Generator,
    sample_rate: int = 22050,
) -> list[MultiTrack]:
    """Deterministic synthetic multi-track corpus.

    Every song gets its own root frequency, scale ratios, tempo grid and
    per-stem generators, so stems are spectrally discriminative across
    songs. Stems of one song are regenerated (fresh sub-seed) if any pair
    exceeds a 0.5 normalized cross-correlation peak, checked on a decimated
    copy for speed.
    """
    if n_songs < 1 or stems_per_song < 2 or duration <= 0:
        raise ValueError("counts must be positive, stems_per_song >= 2")
    fs = sample_rate
    n = int(round(duration * fs))
    songs = []
    for si in range(n_songs):
        f0 = float(np.exp(rng.uniform(np.log(55.0), np.log(220.0))))
        scale = np.concatenate([[1.0], np.sort(rng.uniform(1.02, 1.98, size=4))])
        n_steps = int(rng.integers(8, 17)) * max(1, int(duration / 8))
        labels = [_STEM_KINDS[j % len(_STEM_KINDS)] for j in range(stems_per_song)]
        for _attempt in range(8):
            stems = []
            for kind in labels:
                s = _make_stem(kind, rng, n, fs, f0, scale, n_steps)
                peak = np.abs(s).max()
                if peak > 0:
                    s = s * (0.25 / peak)
                stems.append(s.astype(np.float32))
            dec = max(1, fs // 2000)
            ok = all(
                _xcorr_peak(stems[i][::dec].astype(np.float64),
                            stems[j][::dec].astype(np.float64)) < 0.5
                for i in range(len(stems))
                for j in range(i + 1, len(stems))
            )
            if ok:
                break
        songs.append(
            MultiTrack(
                song_id=f"song_{si:03d}",
                stems=stems,
                sample_rate=fs,
                stem_labels=labels,
            )
        )
    return songs


# ---------------------------------------------------------------------------
# stem merging (training-time granularity ablation)

_MERGE_CATEGORIES = {
    "4stem": ["bass", "drums", "vocals", "other"],
    "6stem": ["bass", "drums", "vocals", "piano", "guitar", "other"],
}


def merge_stems(track: MultiTrack, scheme: str = "none") -> MultiTrack:
    """Merge stems into 4 or 6 categories; the full mix is preserved.

    Label-driven when labels are available (unknown labels map to "other");
    otherwise stems are grouped round-robin. Categories that receive no stem
    are dropped, but at least two groups are always kept.
    """
    if scheme == "none":
        return track
    if scheme not in _MERGE_CATEGORIES:
        raise ValueError(f"unknown merge scheme: {scheme!r}")
    cats = _MERGE_CATEGORIES[scheme]
    groups: dict[str, list[np.ndarray]] = {c: [] for c in cats}
    if track.stem_labels is not None:
        for s, lab in zip(track.stems, track.stem_labels):
            groups[lab if lab in cats else "other"].append(s)
    else:
        for j, s in enumerate(track.stems):
            groups[cats[j % len(cats)]].append(s)
    merged, labels = [], []
    for c in cats:
        if groups[c]:
            merged.append(np.sum(np.stack(groups[c]), axis=0))
            labels.append(c)
    if len(merged) < 2:
        # everything collapsed into one category: split it back in two
        half = (len(track.stems) + 1) // 2
        merged = [
            np.sum(np.stack(track.stems[:half]), axis=0),
            np.sum(np.stack(track.stems[half:]), axis=0),
        ]
        labels = ["other", "other"]
    return MultiTrack(
        song_id=track.song_id,
        stems=merged,
        sample_rate=track.sample_rate,
        stem_labels=labels,
    )


# ---------------------------------------------------------------------------
# WAV + manifest I/O


def load_wav(path: str | Path, expect_rate: int | None = None) -> tuple[np.ndarray, int]:
    """Load a WAV file as mono float (PCM 16/24/32-bit or float32)."""
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float32) / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float32) - 128.0) / 128.0
    else:
        data = data.astype(np.float32)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if expect_rate is not None and rate != expect_rate:
        raise ValueError(f"{path}: sample rate {rate} != expected {expect_rate}")
    return data, int(rate)


def save_wav(path: str | Path, audio: np.ndarray, sample_rate: int) -> None:
    wavfile.write(str(path), sample_rate, audio.astype(np.float32))


def write_corpus(tracks: list[MultiTrack], out_dir: str | Path) -> Path:
    """Write songs as per-song stem WAV directories plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"sample_rate": tracks[0].sample_rate, "songs": []}
    for tr in tracks:
        song_dir = out / tr.song_id
        song_dir.mkdir(exist_ok=True)
        stems = []
        labels = tr.stem_labels or ["unknown"] * tr.n_stems
        for j, (s, lab) in enumerate(zip(tr.stems, labels)):
            name = f"stem_{j:02d}_{lab}.wav"
            save_wav(song_dir / name, s, tr.sample_rate)
            stems.append({"path": f"{tr.song_id}/{name}", "label": lab})
        manifest["songs"].append({"id": tr.song_id, "stems": stems})
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)
    return out / "manifest.json"


def load_corpus(manifest_path: str | Path) -> list[MultiTrack]:
    manifest_path = Path(manifest_path)
    with open(manifest_path) as f:
        manifest = json.load(f)
    root = manifest_path.parent
    rate = manifest["sample_rate"]
    tracks = []
    for song in manifest["songs"]:
        stems, labels = [], []
        for rec in song["stems"]:
            audio, _ = load_wav(root / rec["path"], expect_rate=rate)
            stems.append(audio)
            labels.append(rec.get("label", "unknown"))
        tracks.append(MultiTrack(song["id"], stems, rate, labels))
    return tracks


# ---------------------------------------------------------------------------
# synthetic evaluation set


def resample_linear(x: np.ndarray, factor: float) -> np.ndarray:
    """Resample by linear interpolation; factor > 1 slows down + lowers pitch."""
    n_out = max(2, int(round(x.shape[0] * factor)))
    pos = np.linspace(0.0, x.shape[0] - 1.0, n_out)
    return np.interp(pos, np.arange(x.shape[0]), x).astype(x.dtype)


def build_synthetic_eval_set(
    songs: list[MultiTrack],
    n_pairs: int,
    noise_songs: list[MultiTrack],
    out_dir: str | Path,
    rng: np.random.Generator,
    transform_spec: TransformSpec | None = None,
    semitone_range: tuple[float, float] = (1.0, 4.0),
) -> Path:
    """Query/reference pairs by re-mixing stem subsets of known songs.

    The query re-mix takes a random non-empty strict stem subset, applies
    the random transform chain, then resamples by a random factor whose
    magnitude lies in ``semitone_range`` semitones (pitch and tempo shift
    together, emulating sampled and repitched material). References and
    noise entries are plain full mixes. Writes WAVs and an eval manifest.
    """
    if n_pairs > len(songs):
        raise ValueError("not enough songs for the requested number of pairs")
    spec = transform_spec if transform_spec is not None else TransformSpec()
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    manifest = {"queries": [], "candidates": [], "noise": [], "ground_truth": {}}
    fs = songs[0].sample_rate

    for tr in songs[:n_pairs]:
        ref = tr.mix()
        ref_id = f"ref_{tr.song_id}"
        ref_path = f"audio/{ref_id}.wav"
        save_wav(out / ref_path, ref, fs)
        manifest["candidates"].append({"id": ref_id, "path": ref_path})

        s = tr.n_stems
        size = int(rng.integers(1, s))
        subset = rng.permutation(s)[:size]
        sub = np.sum(np.stack([tr.stems[i] for i in subset]), axis=0)
        sub, _ = apply_transforms(sub, spec, fs, rng)
        semis = float(rng.uniform(*semitone_range)) * (1 if rng.random() < 0.5 else -1)
        sub = resample_linear(sub, 2.0 ** (semis / 12.0))
        peak = np.abs(sub).max()
        if peak > 1.0:
            sub = sub / peak
        q_id = f"query_{tr.song_id}"
        q_path = f"audio/{q_id}.wav"
        save_wav(out / q_path, sub, fs)
        manifest["queries"].append({"id": q_id, "path": q_path})
        manifest["ground_truth"][q_id] = ref_id

    for tr in noise_songs:
        n_id = f"noise_{tr.song_id}"
        n_path = f"audio/{n_id}.wav"
        save_wav(out / n_path, tr.mix(), fs)
        manifest["noise"].append({"id": n_id, "path": n_path})

    manifest["sample_rate"] = fs
    path = out / "eval_manifest.json"
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1)
    return path
