"""Chunk-based retrieval evaluation.

Tracks are split into overlapping fixed-duration chunks, each chunk is
embedded, and a (query, candidate) pair is scored by aggregating all
pairwise cosine similarities between their chunk embeddings (max, or mean
of the top-k). Queries rank every candidate by that score; we report mAP,
HR@k, mean/median normalized rank with bootstrap confidence intervals,
plus hop-size sweeps and noise-scaling studies.

Normalized rank maps rank 1 -> 0 and last place -> 1:
NR = (rank - 1) / (n_candidates - 1).
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoder
from .augment import CropGeometry
from .datapipe import load_wav
from .frontend import VqtConfig, log_magnitude, vqt_values

__all__ = [
    "EmbeddingStore",
    "RankingReport",
    "embed_track",
    "embed_corpus",
    "pair_score",
    "score_matrix",
    "rank_and_score",
    "hop_sweep",
    "noise_scaling",
    "load_eval_manifest",
    "evaluate_manifest",
    "write_matrix",
]

STORE_MAGIC = b"SIDE"
STORE_VERSION = 1

# blockwise scoring cap (bytes of one similarity block)
_BLOCK_BYTES = 256 * 1024 * 1024


@dataclass
class EmbeddingStore:
    """Unit-norm chunk embeddings with a (track, offset) index."""

    matrix: np.ndarray  # (n_chunks, m) float32
    index: list[tuple[str, float]]  # (track_id, chunk_start_seconds)
    hop: float
    chunk_duration: float
    digest: bytes = b"\x00" * 32

    def __post_init__(self):
        if len(self.index) != self.matrix.shape[0]:
            raise ValueError("index length must equal row count")
        if self.matrix.size:
            norms = np.linalg.norm(self.matrix, axis=1)
            if np.abs(norms - 1.0).max() > 1e-4:
                raise ValueError("rows must be unit-norm within 1e-4")
        last: dict[str, float] = {}
        for track, start in self.index:
            if track in last and start <= last[track]:
                raise ValueError("chunk starts must increase per track")
            last[track] = start

    def rows_for(self, track_id: str) -> np.ndarray:
        sel = [i for i, (t, _) in enumerate(self.index) if t == track_id]
        return self.matrix[sel]

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as f:
            f.write(STORE_MAGIC)
            f.write(struct.pack("<I", STORE_VERSION))
            f.write(struct.pack("<I", self.matrix.shape[1]))
            f.write(struct.pack("<Q", self.matrix.shape[0]))
            f.write(struct.pack("<f", self.hop))
            f.write(struct.pack("<f", self.chunk_duration))
            f.write(self.digest)
            f.write(self.matrix.astype("<f4").tobytes())
            for track, start in self.index:
                blob = track.encode("utf-8")
                f.write(struct.pack("<I", len(blob)))
                f.write(blob)
                f.write(struct.pack("<f", start))

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingStore":
        with open(path, "rb") as f:
            if f.read(4) != STORE_MAGIC:
                raise ValueError("not an embedding store file")
            (version,) = struct.unpack("<I", f.read(4))
            if version != STORE_VERSION:
                raise ValueError(f"unsupported store version {version}")
            (m,) = struct.unpack("<I", f.read(4))
            (rows,) = struct.unpack("<Q", f.read(8))
            (hop,) = struct.unpack("<f", f.read(4))
            (chunk,) = struct.unpack("<f", f.read(4))
            digest = f.read(32)
            matrix = np.frombuffer(f.read(rows * m * 4), dtype="<f4").reshape(rows, m)
            index = []
            for _ in range(rows):
                (ln,) = struct.unpack("<I", f.read(4))
                track = f.read(ln).decode("utf-8")
                (start,) = struct.unpack("<f", f.read(4))
                index.append((track, start))
        return cls(matrix=matrix.copy(), index=index, hop=hop,
                   chunk_duration=chunk, digest=digest)


def write_matrix(path: str | Path, matrix: np.ndarray) -> None:
    """Write a real matrix in the embedding-store header format (f32)."""
    with open(path, "wb") as f:
        f.write(STORE_MAGIC)
        f.write(struct.pack("<I", STORE_VERSION))
        f.write(struct.pack("<I", matrix.shape[1]))
        f.write(struct.pack("<Q", matrix.shape[0]))
        f.write(struct.pack("<f", 0.0))
        f.write(struct.pack("<f", 0.0))
        f.write(b"\x00" * 32)
        f.write(matrix.astype("<f4").tobytes())


def _center_to(values: np.ndarray, out_frames: int) -> np.ndarray:
    """Center-crop or zero-pad the frame axis to out_frames."""
    w = values.shape[1]
    if w == out_frames:
        return values
    if w > out_frames:
        lo = (w - out_frames) // 2
        return values[:, lo:lo + out_frames]
    out = np.zeros((values.shape[0], out_frames), dtype=values.dtype)
    lo = (out_frames - w) // 2
    out[:, lo:lo + w] = values
    return out


def embed_track(
    audio: np.ndarray,
    params: encoder.Parameters,
    enc_config: encoder.EncoderConfig = encoder.EncoderConfig(),
    vqt_config: VqtConfig | None = None,
    chunk_duration: float = 5.0,
    hop: float = 2.5,
    geom: CropGeometry | None = None,
) -> tuple[np.ndarray, list[float], bool]:
    """Embed one track's overlapping chunks.

    Returns (rows, chunk start times, short_flag). Chunks sit at offsets
    0, hop, 2*hop, ... while a full chunk fits; a track shorter than one
    chunk yields a single zero-padded chunk with short_flag set. Each chunk
    goes VQT -> half-octave trim -> centered 256-frame window -> encoder.
    """
    if hop <= 0:
        raise ValueError("hop must be positive")
    if vqt_config is None:
        vqt_config = VqtConfig(dtype="float32")
    if geom is None:
        geom = CropGeometry(
            total_bins=vqt_config.n_bins,
            bins_per_octave=vqt_config.bins_per_octave,
        )
    fs = vqt_config.sample_rate
    n_chunk = int(round(chunk_duration * fs))
    short = audio.shape[0] < n_chunk
    if short:
        padded = np.zeros(n_chunk, dtype=audio.dtype)
        padded[:audio.shape[0]] = audio
        audio = padded
    n_offsets = (audio.shape[0] - n_chunk) // int(round(hop * fs)) + 1
    hop_samples = int(round(hop * fs))

    h = geom.half_octave
    views = []
    starts = []
    for i in range(n_offsets):
        o = i * hop_samples
        seg = audio[o:o + n_chunk]
        vals = vqt_values(seg, vqt_config, bins=(h, geom.total_bins - h))
        views.append(log_magnitude(_center_to(vals, geom.out_frames)))
        starts.append(o / fs)
    views = encoder.standardize(np.stack(views)).astype(enc_config.dtype)
    rows = encoder.forward(views, params, enc_config, check_finite=False)
    return rows.astype(np.float32), starts, short


def embed_corpus(
    audios: dict[str, np.ndarray],
    params: encoder.Parameters,
    enc_config: encoder.EncoderConfig = encoder.EncoderConfig(),
    vqt_config: VqtConfig | None = None,
    chunk_duration: float = 5.0,
    hop: float = 2.5,
) -> EmbeddingStore:
    """Embed many tracks into one store (insertion order preserved)."""
    rows, index = [], []
    for track_id, audio in audios.items():
        r, starts, _ = embed_track(
            audio, params, enc_config, vqt_config, chunk_duration, hop
        )
        rows.append(r)
        index.extend((track_id, s) for s in starts)
    return EmbeddingStore(
        matrix=np.vstack(rows),
        index=index,
        hop=hop,
        chunk_duration=chunk_duration,
        digest=encoder.config_digest(enc_config),
    )


def pair_score(
    q_rows: np.ndarray, r_rows: np.ndarray, mode: str = "max", k: int = 5
) -> float:
    """Aggregate pairwise cosine similarity between two chunk sets."""
    if q_rows.shape[0] == 0 or r_rows.shape[0] == 0:
        raise ValueError("both chunk sets must be non-empty")
    block = max(1, _block_rows(q_rows, r_rows))
    best: list[np.ndarray] = []
    top: list[np.ndarray] = []
    for lo in range(0, q_rows.shape[0], block):
        sims = q_rows[lo:lo + block].astype(np.float64) @ r_rows.astype(np.float64).T
        flat = sims.ravel()
        if mode == "max":
            top.append(np.array([flat.max()]))
        elif mode == "top_k_mean":
            kk = min(k, flat.shape[0])
            top.append(np.partition(flat, flat.shape[0] - kk)[-kk:])
        else:
            raise ValueError(f"unknown mode {mode!r}")
    allv = np.concatenate(top)
    if mode == "max":
        return float(allv.max())
    kk = min(k, q_rows.shape[0] * r_rows.shape[0])
    return float(np.sort(allv)[-kk:].mean())


def _block_rows(q_rows, r_rows):
    return max(1, _BLOCK_BYTES // max(1, 8 * r_rows.shape[0]))


def score_matrix(
    query_rows: dict[str, np.ndarray],
    candidate_rows: dict[str, np.ndarray],
    mode: str = "max",
    k: int = 5,
) -> tuple[np.ndarray, list[str], list[str]]:
    """(n_queries, n_candidates) aggregated score matrix."""
    q_ids = list(query_rows)
    c_ids = list(candidate_rows)
    scores = np.empty((len(q_ids), len(c_ids)))
    for i, q in enumerate(q_ids):
        for j, c in enumerate(c_ids):
            scores[i, j] = pair_score(query_rows[q], candidate_rows[c], mode, k)
    return scores, q_ids, c_ids


@dataclass
class RankingReport:
    per_query: list  # dicts: id, rank (best relevant), best_score, ap, nr
    map: float
    hr: dict[int, float]
    mnr: float
    mednr: float
    ci: dict[str, tuple[float, float]]
    n_candidates: int
    n_ties: int
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "mAP": self.map,
                "HR": {str(k): v for k, v in self.hr.items()},
                "mNR": self.mnr,
                "medNR": self.mednr,
                "ci95": {k: list(v) for k, v in self.ci.items()},
                "n_candidates": self.n_candidates,
                "n_ties": self.n_ties,
                "config": self.config,
                "per_query": self.per_query,
            },
            indent=1,
        )


def _average_precision(order: np.ndarray, relevant: set[int]) -> float:
    hits = 0
    total = 0.0
    for pos, cand in enumerate(order, start=1):
        if int(cand) in relevant:
            hits += 1
            total += hits / pos
    return total / max(1, len(relevant))


def rank_and_score(
    scores: np.ndarray,
    q_ids: list[str],
    c_ids: list[str],
    ground_truth: dict[str, str | list[str]],
    k_list: tuple[int, ...] = (1, 10),
    n_bootstrap: int = 1000,
    bootstrap_seed: int = 0,
    config: dict | None = None,
) -> RankingReport:
    """Rank candidates per query and aggregate retrieval metrics.

    Ties in score are broken by stable candidate order (and counted).
    Confidence intervals are 95% percentile bootstrap over queries.
    """
    n_q, n_c = scores.shape
    c_pos = {c: j for j, c in enumerate(c_ids)}
    per_query = []
    aps, ranks, nrs = [], [], []
    n_ties = 0
    for i, q in enumerate(q_ids):
        if q not in ground_truth:
            raise KeyError(f"query {q!r} has no ground truth")
        gt = ground_truth[q]
        gt_list = [gt] if isinstance(gt, str) else list(gt)
        missing = [g for g in gt_list if g not in c_pos]
        if missing:
            raise KeyError(f"ground truth {missing} absent from candidates")
        relevant = {c_pos[g] for g in gt_list}
        order = np.argsort(-scores[i], kind="stable")
        rank_of = np.empty(n_c, dtype=np.int64)
        rank_of[order] = np.arange(1, n_c + 1)
        best_rank = int(min(rank_of[j] for j in relevant))
        best_rel = max(relevant, key=lambda j: scores[i, j])
        if np.sum(scores[i] == scores[i, best_rel]) > 1:
            n_ties += 1
        ap = _average_precision(order, relevant)
        nr = (best_rank - 1) / max(1, n_c - 1)
        aps.append(ap)
        ranks.append(best_rank)
        nrs.append(nr)
        per_query.append(
            {
                "id": q,
                "rank": best_rank,
                "best_score": float(scores[i, best_rel]),
                "ap": ap,
                "nr": nr,
            }
        )

    aps = np.array(aps)
    ranks = np.array(ranks)
    nrs = np.array(nrs)
    hr = {k: float(np.mean(ranks <= k)) for k in k_list}

    ci: dict[str, tuple[float, float]] = {}
    if n_bootstrap > 0:
        rng = np.random.default_rng(bootstrap_seed)
        boots = {"mAP": [], "mNR": [], "medNR": []}
        boots.update({f"HR@{k}": [] for k in k_list})
        for _ in range(n_bootstrap):
            sel = rng.integers(0, n_q, size=n_q)
            boots["mAP"].append(aps[sel].mean())
            boots["mNR"].append(nrs[sel].mean())
            boots["medNR"].append(np.median(nrs[sel]))
            for k in k_list:
                boots[f"HR@{k}"].append(np.mean(ranks[sel] <= k))
        ci = {
            key: (float(np.percentile(v, 2.5)), float(np.percentile(v, 97.5)))
            for key, v in boots.items()
        }
    return RankingReport(
        per_query=per_query,
        map=float(aps.mean()),
        hr=hr,
        mnr=float(nrs.mean()),
        mednr=float(np.median(nrs)),
        ci=ci,
        n_candidates=n_c,
        n_ties=n_ties,
        config=config or {},
    )


def hop_sweep(
    queries: dict[str, np.ndarray],
    candidates: dict[str, np.ndarray],
    ground_truth: dict[str, str],
    params: encoder.Parameters,
    enc_config: encoder.EncoderConfig = encoder.EncoderConfig(),
    vqt_config: VqtConfig | None = None,
    h_grid: tuple[float, ...] = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0),
    mode: str = "max",
    k: int = 5,
    out_csv: str | Path | None = None,
) -> list[dict]:
    """Re-embed and score at every hop size; marks the best-mAP row."""
    rows = []
    for h in h_grid:
        q_rows = {
            q: embed_track(a, params, enc_config, vqt_config, hop=h)[0]
            for q, a in queries.items()
        }
        c_rows = {
            c: embed_track(a, params, enc_config, vqt_config, hop=h)[0]
            for c, a in candidates.items()
        }
        scores, q_ids, c_ids = score_matrix(q_rows, c_rows, mode, k)
        rep = rank_and_score(scores, q_ids, c_ids, ground_truth, n_bootstrap=0)
        rows.append({"h": h, "mAP": rep.map, "HR@1": rep.hr[1], "mNR": rep.mnr})
    best = max(range(len(rows)), key=lambda i: rows[i]["mAP"])
    for i, row in enumerate(rows):
        row["best"] = int(i == best)
    if out_csv is not None:
        with open(out_csv, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["h", "mAP", "HR@1", "mNR", "best"])
            writer.writeheader()
            writer.writerows(rows)
    return rows


def noise_scaling(
    query_rows: dict[str, np.ndarray],
    reference_rows: dict[str, np.ndarray],
    noise_rows: dict[str, np.ndarray],
    ground_truth: dict[str, str],
    sizes: tuple[int, ...] = (0, 10, 50),
    mode: str = "max",
    k: int = 5,
    shuffle_seed: int = 0,
    out_csv: str | Path | None = None,
) -> tuple[list[dict], bool]:
    """Metrics as the candidate set grows by nested noise prefixes.

    Returns (rows, monotonic): `monotonic` verifies that adding noise never
    improved any query's ground-truth rank (exact, candidate sets are
    nested).
    """
    noise_ids = list(noise_rows)
    rng = np.random.default_rng(shuffle_seed)
    order = [noise_ids[i] for i in rng.permutation(len(noise_ids))]
    if max(sizes) > len(order):
        raise ValueError("noise pool smaller than the largest requested size")

    rows = []
    prev_ranks: dict[str, int] | None = None
    monotonic = True
    for size in sizes:
        cand = dict(reference_rows)
        for nid in order[:size]:
            cand[nid] = noise_rows[nid]
        scores, q_ids, c_ids = score_matrix(query_rows, cand, mode, k)
        rep = rank_and_score(
            scores, q_ids, c_ids, ground_truth, k_list=(1, 5, 10), n_bootstrap=0
        )
        ranks = {r["id"]: r["rank"] for r in rep.per_query}
        if prev_ranks is not None:
            if any(ranks[q] < prev_ranks[q] for q in ranks):
                monotonic = False
        prev_ranks = ranks
        rows.append(
            {
                "n_noise": size,
                "n_candidates": rep.n_candidates,
                "mAP": rep.map,
                "HR@1": rep.hr[1],
                "HR@5": rep.hr[5],
                "HR@10": rep.hr[10],
                "mNR": rep.mnr,
            }
        )
    if out_csv is not None:
        with open(out_csv, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return rows, monotonic


def load_eval_manifest(path: str | Path) -> dict:
    """Load an eval manifest and its referenced audio."""
    path = Path(path)
    with open(path) as f:
        manifest = json.load(f)
    root = path.parent
    rate = manifest.get("sample_rate")

    def load_group(records):
        return {
            rec["id"]: load_wav(root / rec["path"], expect_rate=rate)[0]
            for rec in records
        }

    return {
        "queries": load_group(manifest["queries"]),
        "candidates": load_group(manifest["candidates"]),
        "noise": load_group(manifest.get("noise", [])),
        "ground_truth": manifest["ground_truth"],
        "sample_rate": rate,
    }


def evaluate_manifest(
    manifest_path: str | Path,
    params: encoder.Parameters,
    enc_config: encoder.EncoderConfig = encoder.EncoderConfig(),
    vqt_config: VqtConfig | None = None,
    hop: float = 2.5,
    mode: str = "max",
    k: int = 5,
    include_noise: bool = True,
    k_list: tuple[int, ...] = (1, 10),
    n_bootstrap: int = 1000,
) -> RankingReport:
    """Full protocol: embed everything in a manifest, rank, aggregate."""
    data = load_eval_manifest(manifest_path)
    candidates = dict(data["candidates"])
    if include_noise:
        candidates.update(data["noise"])

    def embed_group(group):
        return {
            tid: embed_track(a, params, enc_config, vqt_config, hop=hop)[0]
            for tid, a in group.items()
        }

    q_rows = embed_group(data["queries"])
    c_rows = embed_group(candidates)
    scores, q_ids, c_ids = score_matrix(q_rows, c_rows, mode, k)
    return rank_and_score(
        scores,
        q_ids,
        c_ids,
        data["ground_truth"],
        k_list=k_list,
        n_bootstrap=n_bootstrap,
        config={"hop": hop, "mode": mode, "k": k},
    )
