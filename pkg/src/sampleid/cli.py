"""Command-line interface.

One executable, subcommand style: corpus synthesis, VQT inspection,
training, embedding, evaluation and the two study sweeps. Every run echoes
its resolved configuration (stdout, and resolved_config.json next to the
outputs) so results are reproducible from the echo plus the seed.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

DEFAULT_SEED = 1234


def _limit_threads(n: int | None):
    if n is None:
        env = os.environ.get("SAMPLEID_THREADS")
        n = int(env) if env else None
    if n is None:
        return
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=n)
    except Exception:
        pass  # best effort; BLAS may not expose a control interface


def _echo_config(args: argparse.Namespace, out_dir: Path | None):
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    for k, v in resolved.items():
        if isinstance(v, Path):
            resolved[k] = str(v)
    print(json.dumps({"resolved_config": resolved}))
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "resolved_config.json", "w") as f:
            json.dump(resolved, f, indent=1)


def _vqt_config(args, dtype="float32"):
    from .frontend import VqtConfig

    return VqtConfig(
        sample_rate=args.sample_rate,
        f_min=args.f_min,
        octaves=args.octaves,
        bins_per_octave=args.bins_per_octave,
        gamma=args.gamma,
        hop=args.hop_vqt,
        dtype=dtype,
    )


def _add_vqt_args(p):
    p.add_argument("--sample-rate", type=int, default=22050, dest="sample_rate")
    p.add_argument("--f-min", type=float, default=32.70, dest="f_min")
    p.add_argument("--octaves", type=int, default=8)
    p.add_argument("--bins-per-octave", type=int, default=36, dest="bins_per_octave")
    p.add_argument("--gamma", type=float, default=7.0)
    p.add_argument("--hop-vqt", type=float, default=0.020, dest="hop_vqt",
                   help="VQT hop in seconds")


def cmd_synth(args):
    from . import datapipe

    rng = np.random.default_rng(args.seed)
    songs = datapipe.synthesize_corpus(
        args.songs, args.stems, args.duration, rng, sample_rate=args.sample_rate
    )
    out = Path(args.out)
    _echo_config(args, out)
    manifest = datapipe.write_corpus(songs, out)
    print(f"wrote {len(songs)} songs to {manifest}")
    if args.eval_pairs > 0:
        noise = datapipe.synthesize_corpus(
            args.noise, args.stems, args.duration, rng, sample_rate=args.sample_rate
        )
        for i, tr in enumerate(noise):
            tr.song_id = f"extra_{i:03d}"
        eval_out = Path(args.eval_out or (out / "evalset"))
        path = datapipe.build_synthetic_eval_set(
            songs, args.eval_pairs, noise, eval_out, rng,
            semitone_range=tuple(args.semitones),
        )
        print(f"wrote eval manifest to {path}")
    return 0


def cmd_vqt(args):
    from . import datapipe, evaluate
    from .frontend import log_magnitude, vqt_values

    cfg = _vqt_config(args)
    audio, _ = datapipe.load_wav(args.input, expect_rate=cfg.sample_rate)
    _echo_config(args, None)
    mag = log_magnitude(vqt_values(audio, cfg))
    evaluate.write_matrix(args.out, mag)
    print(f"wrote {mag.shape[0]}x{mag.shape[1]} magnitude matrix to {args.out}")
    return 0


def cmd_train(args):
    from . import datapipe, encoder, training as train_mod

    out = Path(args.out)
    _echo_config(args, out)
    tracks = datapipe.load_corpus(args.corpus)
    cfg = train_mod.TrainConfig(
        batch_size=args.batch_size,
        learning_rate=args.lr,
        plateau_patience=args.patience,
        lr_divisor=args.lr_divisor,
        weight_decay=args.weight_decay,
        max_steps=args.steps,
        checkpoint_interval=args.checkpoint_interval,
        seed=args.seed,
        loss_variant=args.variant,
        no_stretch=args.no_stretch,
        no_pitch=args.no_pitch,
        no_shift=args.no_shift,
        merge_scheme=args.merge,
    )
    enc_cfg = encoder.EncoderConfig(embedding_dim=args.embedding_dim)
    vqt_cfg = _vqt_config(args)
    if args.resume:
        result = train_mod.resume(
            args.resume, tracks, cfg, enc_cfg, vqt_config=vqt_cfg, out_dir=out
        )
    else:
        result = train_mod.train(
            tracks, cfg, enc_cfg, vqt_config=vqt_cfg, out_dir=out
        )
    last = result.loss_log[-1]
    print(f"done: step={last[0]} loss={last[1]:.4f} tau={last[2]:.4g} "
          f"checkpoint={result.checkpoint_path}")
    return 0


def cmd_embed(args):
    from . import datapipe, encoder, evaluate

    enc_cfg = encoder.EncoderConfig(embedding_dim=args.embedding_dim)
    params = encoder.load_checkpoint(args.ckpt, enc_cfg)
    vqt_cfg = _vqt_config(args)
    _echo_config(args, None)
    audios = {}
    for path in args.audio:
        audio, _ = datapipe.load_wav(path, expect_rate=vqt_cfg.sample_rate)
        audios[Path(path).stem] = audio
    store = evaluate.embed_corpus(
        audios, params, enc_cfg, vqt_cfg, chunk_duration=args.chunk, hop=args.hop
    )
    store.save(args.out)
    print(f"wrote {store.matrix.shape[0]} embeddings to {args.out}")
    return 0


def _mode_args(args):
    if args.mode == "max":
        return "max", 5
    if args.mode.startswith("top"):
        return "top_k_mean", int(args.mode[3:])
    raise SystemExit(f"unknown mode {args.mode!r}")


def cmd_eval(args):
    from . import encoder, evaluate

    enc_cfg = encoder.EncoderConfig(embedding_dim=args.embedding_dim)
    params = encoder.load_checkpoint(args.ckpt, enc_cfg)
    vqt_cfg = _vqt_config(args)
    mode, k = _mode_args(args)
    out_prefix = Path(args.out_prefix)
    _echo_config(args, out_prefix.parent if out_prefix.parent != Path() else None)
    report = evaluate.evaluate_manifest(
        args.manifest, params, enc_cfg, vqt_cfg, hop=args.hop, mode=mode, k=k
    )
    with open(f"{args.out_prefix}.json", "w") as f:
        f.write(report.to_json())
    import csv

    with open(f"{args.out_prefix}.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["id", "rank", "best_score", "ap", "nr"])
        writer.writeheader()
        writer.writerows(report.per_query)
    print(f"mAP={report.map:.4f} HR@1={report.hr[1]:.4f} mNR={report.mnr:.4f} "
          f"medNR={report.mednr:.4f} candidates={report.n_candidates}")
    return 0


def cmd_sweep_hop(args):
    from . import encoder, evaluate

    enc_cfg = encoder.EncoderConfig(embedding_dim=args.embedding_dim)
    params = encoder.load_checkpoint(args.ckpt, enc_cfg)
    vqt_cfg = _vqt_config(args)
    mode, k = _mode_args(args)
    _echo_config(args, None)
    data = evaluate.load_eval_manifest(args.manifest)
    candidates = dict(data["candidates"])
    if args.include_noise:
        candidates.update(data["noise"])
    grid = tuple(float(h) for h in args.grid.split(","))
    rows = evaluate.hop_sweep(
        data["queries"], candidates, data["ground_truth"], params, enc_cfg,
        vqt_cfg, h_grid=grid, mode=mode, k=k, out_csv=args.out,
    )
    best = next(r for r in rows if r["best"])
    print(f"wrote {len(rows)} rows to {args.out}; best h={best['h']} "
          f"mAP={best['mAP']:.4f}")
    return 0


def cmd_noise_scaling(args):
    from . import encoder, evaluate

    enc_cfg = encoder.EncoderConfig(embedding_dim=args.embedding_dim)
    params = encoder.load_checkpoint(args.ckpt, enc_cfg)
    vqt_cfg = _vqt_config(args)
    mode, k = _mode_args(args)
    _echo_config(args, None)
    data = evaluate.load_eval_manifest(args.manifest)

    def embed_group(group):
        return {
            tid: evaluate.embed_track(a, params, enc_cfg, vqt_cfg, hop=args.hop)[0]
            for tid, a in group.items()
        }

    sizes = tuple(int(s) for s in args.sizes.split(","))
    rows, monotonic = evaluate.noise_scaling(
        embed_group(data["queries"]),
        embed_group(data["candidates"]),
        embed_group(data["noise"]),
        data["ground_truth"],
        sizes=sizes,
        mode=mode,
        k=k,
        shuffle_seed=args.seed,
        out_csv=args.out,
    )
    print(f"wrote {len(rows)} rows to {args.out}; rank monotonicity="
          f"{'ok' if monotonic else 'VIOLATED'}")
    return 0 if monotonic else 2


def cmd_gradcheck(args):
    from . import loss as loss_mod

    _echo_config(args, None)
    report = loss_mod.loss_gradient_check(n=args.n, m=args.m, seed=args.seed)
    print(f"max relative error: {report['max_rel_err']:.3e}")
    return 0 if report["max_rel_err"] < 1e-5 else 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sampleid",
        description="sample identification pipeline (synthesis, training, retrieval)",
    )
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS thread pools (env SAMPLEID_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a multi-track corpus")
    p.add_argument("--songs", type=int, default=30)
    p.add_argument("--stems", type=int, default=4)
    p.add_argument("--duration", type=float, default=30.0)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--sample-rate", type=int, default=22050, dest="sample_rate")
    p.add_argument("--eval-pairs", type=int, default=0, dest="eval_pairs")
    p.add_argument("--noise", type=int, default=0)
    p.add_argument("--eval-out", default=None, dest="eval_out")
    p.add_argument("--semitones", type=float, nargs=2, default=(1.0, 4.0))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("vqt", help="write the log-magnitude VQT of a WAV file")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    _add_vqt_args(p)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_vqt)

    p = sub.add_parser("train", help="train the encoder on a corpus")
    p.add_argument("--corpus", required=True, help="corpus manifest.json")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=16, dest="batch_size")
    p.add_argument("--embedding-dim", type=int, default=128, dest="embedding_dim")
    p.add_argument("--lr", type=float, default=1.5e-3)
    p.add_argument("--patience", type=int, default=300)
    p.add_argument("--lr-divisor", type=float, default=5.0, dest="lr_divisor")
    p.add_argument("--weight-decay", type=float, default=1e-4, dest="weight_decay")
    p.add_argument("--checkpoint-interval", type=int, default=500,
                   dest="checkpoint_interval")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--variant", choices=["two_positive", "ntxent"],
                   default="two_positive")
    p.add_argument("--no-stretch", action="store_true", dest="no_stretch")
    p.add_argument("--no-pitch", action="store_true", dest="no_pitch")
    p.add_argument("--no-shift", action="store_true", dest="no_shift")
    p.add_argument("--merge", choices=["none", "4stem", "6stem"], default="none")
    p.add_argument("--resume", default=None)
    _add_vqt_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="embed WAV tracks into a store file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--audio", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--embedding-dim", type=int, default=128, dest="embedding_dim")
    p.add_argument("--chunk", type=float, default=5.0)
    p.add_argument("--hop", type=float, default=2.5)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    _add_vqt_args(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="full retrieval evaluation of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out-prefix", default="report", dest="out_prefix")
    p.add_argument("--embedding-dim", type=int, default=128, dest="embedding_dim")
    p.add_argument("--hop", type=float, default=2.5)
    p.add_argument("--mode", default="max", help="max or topK (e.g. top5)")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    _add_vqt_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-hop", help="mAP as a function of the chunk hop")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", default="0.5,1,1.5,2,2.5,3,3.5,4,4.5,5")
    p.add_argument("--mode", default="max")
    p.add_argument("--embedding-dim", type=int, default=128, dest="embedding_dim")
    p.add_argument("--include-noise", action="store_true", dest="include_noise")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    _add_vqt_args(p)
    p.set_defaults(func=cmd_sweep_hop)

    p = sub.add_parser("noise-scaling", help="metrics vs number of noise songs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sizes", default="0,10,50")
    p.add_argument("--hop", type=float, default=2.5)
    p.add_argument("--mode", default="max")
    p.add_argument("--embedding-dim", type=int, default=128, dest="embedding_dim")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    _add_vqt_args(p)
    p.set_defaults(func=cmd_noise_scaling)

    p = sub.add_parser("gradcheck", help="finite-difference check of the loss")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--m", type=int, default=8)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    _limit_threads(args.threads)
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, SystemExit) as e:
        print(json.dumps({"error": str(e), "type": type(e).__name__}),
              file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(json.dumps({"error": str(e), "type": type(e).__name__}),
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
