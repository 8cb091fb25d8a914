"""Command-line interface tests (in-process via main(argv))."""

import json

import numpy as np

from sampleid import datapipe, encoder
from sampleid.cli import build_parser, main
from sampleid.evaluate import EmbeddingStore


def run(args):
    return main([str(a) for a in args])


def test_unknown_flag_exits_nonzero(capsys):
    assert run(["synth", "--bogus"]) == 1
    assert run(["no-such-command"]) == 1


def test_gradcheck(capsys):
    assert run(["gradcheck", "--n", 3, "--m", 6]) == 0
    out = capsys.readouterr().out
    assert "max relative error" in out
    assert "resolved_config" in out


def test_synth_layout(tmp_path, capsys):
    out = tmp_path / "corpus"
    code = run(["synth", "--songs", 2, "--stems", 3, "--duration", 2.0,
                "--out", out, "--seed", 7])
    assert code == 0
    assert (out / "manifest.json").exists()
    assert (out / "resolved_config.json").exists()
    songs = datapipe.load_corpus(out / "manifest.json")
    assert len(songs) == 2 and songs[0].n_stems == 3
    # the first stdout line is the resolved configuration echo
    first = capsys.readouterr().out.splitlines()[0]
    echo = json.loads(first)["resolved_config"]
    assert echo["seed"] == 7 and echo["songs"] == 2


def test_synth_with_eval_set(tmp_path):
    out = tmp_path / "corpus"
    code = run(["synth", "--songs", 3, "--stems", 3, "--duration", 6.0,
                "--out", out, "--eval-pairs", 2, "--noise", 1])
    assert code == 0
    manifest = out / "evalset" / "eval_manifest.json"
    assert manifest.exists()
    with open(manifest) as f:
        data = json.load(f)
    assert len(data["queries"]) == 2 and len(data["noise"]) == 1


def test_vqt_output(tmp_path):
    wav = tmp_path / "tone.wav"
    fs = 22050
    t = np.arange(fs) / fs
    datapipe.save_wav(wav, 0.5 * np.sin(2 * np.pi * 440 * t), fs)
    out = tmp_path / "tone.side"
    assert run(["vqt", "--input", wav, "--out", out]) == 0
    blob = out.read_bytes()
    assert blob[:4] == b"SIDE"
    assert run(["vqt", "--input", tmp_path / "missing.wav", "--out", out]) != 0


def test_train_embed_eval_pipeline(tmp_path, capsys):
    corpus = tmp_path / "corpus"
    assert run(["synth", "--songs", 2, "--stems", 3, "--duration", 8.0,
                "--out", corpus, "--eval-pairs", 2, "--noise", 1,
                "--seed", 5]) == 0
    run_dir = tmp_path / "run"
    assert run(["train", "--corpus", corpus / "manifest.json",
                "--out", run_dir, "--steps", 2, "--batch-size", 2,
                "--embedding-dim", 8, "--seed", 5]) == 0
    ckpt = run_dir / "model.sid"
    assert ckpt.exists()

    wavs = sorted((corpus / "song_000").glob("*.wav"))
    store_path = tmp_path / "emb.side"
    assert run(["embed", "--ckpt", ckpt, "--audio", wavs[0], wavs[1],
                "--out", store_path, "--embedding-dim", 8]) == 0
    store = EmbeddingStore.load(store_path)
    assert store.matrix.shape[1] == 8

    manifest = corpus / "evalset" / "eval_manifest.json"
    prefix = tmp_path / "report"
    assert run(["eval", "--manifest", manifest, "--ckpt", ckpt,
                "--out-prefix", prefix, "--embedding-dim", 8]) == 0
    with open(f"{prefix}.json") as f:
        report = json.load(f)
    assert "mAP" in report and "per_query" in report
    assert (tmp_path / "report.csv").exists()

    sweep_csv = tmp_path / "sweep.csv"
    assert run(["sweep-hop", "--manifest", manifest, "--ckpt", ckpt,
                "--out", sweep_csv, "--grid", "2.5,5",
                "--embedding-dim", 8]) == 0
    assert sweep_csv.read_text().startswith("h,")

    noise_csv = tmp_path / "noise.csv"
    assert run(["noise-scaling", "--manifest", manifest, "--ckpt", ckpt,
                "--out", noise_csv, "--sizes", "0,1",
                "--embedding-dim", 8]) == 0
    assert len(noise_csv.read_text().strip().splitlines()) == 3


def test_train_rejects_missing_corpus(tmp_path):
    assert run(["train", "--corpus", tmp_path / "nope.json",
                "--out", tmp_path / "run", "--steps", 1]) == 1


def test_eval_rejects_mismatched_checkpoint(tmp_path):
    ckpt = tmp_path / "model.sid"
    cfg = encoder.EncoderConfig(embedding_dim=8, channels=(4,))
    params = encoder.init_parameters(cfg, np.random.default_rng(0))
    encoder.save_checkpoint(ckpt, params, cfg)
    code = run(["eval", "--manifest", tmp_path / "m.json", "--ckpt", ckpt,
                "--embedding-dim", 128,
                "--out-prefix", tmp_path / "rep"])
    assert code == 2  # digest mismatch surfaces as a runtime failure


def test_parser_covers_all_subcommands():
    parser = build_parser()
    subparsers = parser._subparsers._group_actions[0]
    assert set(subparsers.choices) == {
        "synth", "vqt", "train", "embed", "eval", "sweep-hop",
        "noise-scaling", "gradcheck",
    }
