"""Command-line entry points: prepare, train, restore, evaluate, profile."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import torch

from mp3restore import dataset, evaluation, spectral, training
from mp3restore.codec import CodecConfig, CodecError
from mp3restore.model import ModelError, load_checkpoint
from mp3restore.spectral import SpectralError

logger = logging.getLogger("mp3restore")

EXIT_OK, EXIT_CONFIG, EXIT_TOOL, EXIT_DATA = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


def write_effective_config(out_dir: Path, command: str, values: dict) -> Path:
    """Serialise the merged file+flag settings in the shared ``key = json`` format."""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{command}_config.txt"
    lines = [f"# mp3restore {command}"]
    lines += [f"{k} = {json.dumps(v, default=str)}" for k, v in sorted(values.items())]
    path.write_text("\n".join(lines) + "\n")
    return path


def merged(args, keys) -> dict:
    """Flag values override config-file values; missing flags fall back to the file, then defaults."""
    file_vals = training.parse_config_file(args.config) if args.config else {}
    out = {}
    for k in keys:
        flag = getattr(args, k, None)
        out[k] = flag if flag is not None else file_vals.get(k, DEFAULTS.get(k))
    return out


DEFAULTS = {
    "seed": 0, "bitrates": [16, 32, 64], "ratios": [0.8, 0.1, 0.1], "resample": False,
    "split": "test", "systems": ["mp3", "det", "sto"], "n_samples": 20, "bitrate": 16,
    "frames": dataset.EVAL_SEGMENT_FRAMES, "max_excerpts": None, "z_count": 8, "excerpt_count": 50,
    "excerpt_seconds": 4.0, "peaq": None,
}


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> int:
    cfg = merged(args, ["corpus_dir", "bitrates", "seed", "ratios", "resample"])
    if not cfg["corpus_dir"]:
        raise ConfigError("prepare needs a corpus directory")
    write_effective_config(args.out_dir, "prepare", cfg)
    codec = CodecConfig.resolve(args.encoder, args.decoder)
    manifest = dataset.prepare_corpus(cfg["corpus_dir"], args.out_dir, [b * 1000 for b in cfg["bitrates"]],
                                      cfg["seed"], tuple(cfg["ratios"]), codec, cfg["resample"])
    for b in cfg["bitrates"]:
        stats = dataset.corpus_statistics(manifest, b * 1000)
        print(f"{b} kbit/s: " + "  ".join(f"{s}: {v['songs']} songs, {v['segments']} segments"
                                          for s, v in stats.items()))
    print(f"manifest: {args.out_dir / 'manifest.tsv'}")
    return EXIT_OK


def _train_config(args) -> training.TrainConfig:
    names = [f.name for f in fields(training.TrainConfig)]
    values = training.parse_config_file(args.config) if args.config else {}
    unknown = set(values) - set(names) - {"manifest", "resume", "timing"}
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    values = {k: v for k, v in values.items() if k in names}
    for k in names:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    if values.get("bitrate", 16000) < 1000:
        values["bitrate"] = values["bitrate"] * 1000
    try:
        return training.TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def cmd_train(args) -> int:
    config = _train_config(args)
    config.arch_config()
    manifest = dataset.read_manifest(args.manifest)
    batches = dataset.BatchSource(manifest, "train", config.bitrate, config.batch_size, config.seed,
                                  frames=config.segment_frames, dtype=config.torch_dtype)
    write_effective_config(args.out_dir, "train", {**asdict(config), "manifest": str(args.manifest),
                                                    "resume": str(args.resume) if args.resume else None,
                                                    "timing": not args.no_timing})
    state = training.train(config, batches, args.out_dir, resume=args.resume, timing=not args.no_timing)
    print(f"trained to step {state.step}; checkpoint {state.last_checkpoint}")
    return EXIT_OK


def _load_z(args, G, k: int):
    if not G.stochastic:
        if args.z_file:
            raise ConfigError("checkpoint holds a deterministic generator; it takes no noise vector")
        return None
    if args.z_file and k == 0:
        z = np.loadtxt(args.z_file, dtype=np.float64).reshape(-1)
        if z.size != G.arch.noise_dim:
            raise ConfigError(f"z file has {z.size} values, generator expects {G.arch.noise_dim}")
        return z
    return np.random.default_rng([args.seed or 0, k]).standard_normal(G.arch.noise_dim)


def restore_signal(G, mp3: spectral.AudioSignal, z) -> spectral.AudioSignal:
    """Whole-song inference in padded mode with a single noise vector."""
    Y = spectral.stft(mp3)
    out = evaluation.restore_spectrogram(G, Y.to_signed_sqrt().data, z, train_mode=False)
    restored = spectral.istft(spectral.ComplexSpectrogram(out, spectral.LINEAR)).samples
    # the STFT drops a partial final window; keep the song length
    n = len(mp3)
    if restored.shape[0] < n:
        restored = np.concatenate([restored, mp3.samples[restored.shape[0]:]])
    return spectral.AudioSignal(restored[:n])


def cmd_restore(args) -> int:
    write_effective_config(args.out_dir, "restore", {
        "checkpoint": str(args.checkpoint), "input": str(args.input), "z_file": args.z_file, "seed": args.seed,
        "n_samples": args.n_samples or 1, "resample": bool(args.resample)})
    G, _, payload = load_checkpoint(args.checkpoint, with_critic=False)
    G.eval()
    mp3 = spectral.load_wav(args.input, resample=bool(args.resample))
    n = args.n_samples or 1
    if n > 1 and not G.stochastic:
        raise ConfigError("--n-samples > 1 needs a stochastic generator")
    stem = Path(args.input).stem
    for k in range(n):
        z = _load_z(args, G, k)
        out = restore_signal(G, mp3, z)
        name = f"{stem}_restored.wav" if n == 1 else f"{stem}_restored_{k:02d}.wav"
        path = spectral.save_wav(args.out_dir / name, out, subtype="FLOAT")
        if z is not None:
            np.savetxt(path.with_suffix(".z.txt"), z)
        print(path)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = merged(args, ["split", "systems", "n_samples", "bitrate", "frames", "max_excerpts", "seed", "peaq"])
    cfg["manifest"] = str(args.manifest)
    cfg["checkpoints"] = {"det": str(args.det_checkpoint) if args.det_checkpoint else None,
                          "sto": str(args.sto_checkpoint) if args.sto_checkpoint else None}
    write_effective_config(args.out_dir, "evaluate", cfg)
    manifest = dataset.read_manifest(args.manifest)
    peaq = evaluation.PeaqConfig.resolve(cfg["peaq"])
    reports, ids = [], []
    for system in cfg["systems"]:
        G = None
        if system in ("det", "sto"):
            ckpt = cfg["checkpoints"][system]
            if not ckpt:
                raise ConfigError(f"system {system!r} needs --{system}-checkpoint")
            G, _, payload = load_checkpoint(ckpt, with_critic=False)
            ids.append(payload["id"])
            if system == "sto" and not G.stochastic:
                raise ConfigError("best-of-n requires stochastic generator")
        rep = evaluation.evaluate_system(manifest, system, cfg["bitrate"] * 1000, G, cfg["split"], cfg["n_samples"],
                                         cfg["seed"], cfg["frames"], max_excerpts=cfg["max_excerpts"], peaq=peaq,
                                         wav_dir=args.out_dir / "peaq_wavs", checkpoint_id=",".join(ids))
        reports.append(rep)
    report = evaluation.merge_reports(reports)
    # hash contents rather than locations so relocated runs compare equal
    hashed = {k: v for k, v in cfg.items() if k not in ("manifest", "checkpoints")}
    hashed["manifest_sha256"] = hashlib.sha256(Path(args.manifest).read_bytes()).hexdigest()
    hashed["checkpoint_ids"] = ids
    report.config_hash = evaluation.config_hash(hashed)
    report.checkpoint_id = ",".join(ids)
    report.protocol["n_samples"] = cfg["n_samples"]
    path = report.write(args.out_dir / "metrics.tsv")
    print(report.summary_table())
    print(f"report: {path}")
    return EXIT_OK


def cmd_profile(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cfg = merged(args, ["z_count", "excerpt_count", "excerpt_seconds", "seed", "split", "bitrate"])
    cfg.update(checkpoint=str(args.checkpoint), manifest=str(args.manifest))
    write_effective_config(args.out_dir, "profile", cfg)
    G, _, _ = load_checkpoint(args.checkpoint, with_critic=False)
    if not G.stochastic:
        raise ConfigError("profiles across z need a stochastic generator")
    manifest = dataset.read_manifest(args.manifest)
    pairs = manifest.pairs(cfg["split"], cfg["bitrate"] * 1000)
    if not pairs:
        raise dataset.DataError(f"split {cfg['split']!r} has no songs")
    frames = spectral.n_frames_for(int(cfg["excerpt_seconds"] * spectral.SAMPLE_RATE))
    rng = np.random.default_rng(cfg["seed"])
    excerpts = []
    for _ in range(cfg["excerpt_count"]):
        pair = pairs[int(rng.integers(len(pairs)))]
        hq, mp3 = load_cached(pair, manifest.root)
        X, Y = spectral.stft(hq).data, spectral.stft(mp3).data
        if X.shape[2] < frames:
            raise dataset.DataError(f"{pair.song_id} is shorter than one excerpt")
        s = int(rng.integers(X.shape[2] - frames + 1))
        excerpts.append((X[:, :, s:s + frames], spectral.signed_sqrt(Y[:, :, s:s + frames])))
    zs = evaluation.noise_vectors(G.arch.noise_dim, cfg["z_count"], cfg["seed"])
    curves = np.zeros((len(zs), len(excerpts), G.arch.n_bins))
    for i, z in enumerate(zs):
        for j, (_, y) in enumerate(excerpts):
            out = evaluation.restore_spectrogram(G, y, z)
            curves[i, j] = evaluation.frequency_profile(out).values
    reference = np.mean([evaluation.frequency_profile(x).values for x, _ in excerpts], axis=0)
    np.savez(args.out_dir / "profiles.npz", curves=curves, mean=curves.mean(axis=1), reference=reference,
             z=np.stack(zs))
    stats = evaluation.profile_consistency(curves)
    (args.out_dir / "profile_stats.json").write_text(json.dumps(stats, indent=2) + "\n")

    freqs = np.arange(G.arch.n_bins) * spectral.SAMPLE_RATE / spectral.WIN / 1000
    ncol = min(4, len(zs))
    nrow = -(-len(zs) // ncol)
    fig, axes = plt.subplots(nrow, ncol, figsize=(3.2 * ncol, 2.4 * nrow), squeeze=False, sharey=True)
    for i, ax in enumerate(axes.flat):
        if i >= len(zs):
            ax.axis("off")
            continue
        for c in curves[i]:
            ax.semilogy(freqs, c, color="0.7", lw=0.5)
        ax.semilogy(freqs, curves[i].mean(axis=0), color="C0", lw=1.2, label="mean")
        ax.semilogy(freqs, reference, color="C3", lw=1.0, ls="--", label="reference")
        ax.set_title(f"z {i}", fontsize=9)
        ax.set_xlabel("kHz", fontsize=8)
    axes.flat[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(args.out_dir / "profiles.png", dpi=100)
    plt.close(fig)
    print(f"profiles: {args.out_dir / 'profiles.npz'} {args.out_dir / 'profiles.png'}")
    print(f"within-z variance {stats['within_z_var']:.4g}, across-z variance {stats['across_z_var']:.4g}")
    return EXIT_OK


_cache = {}


def load_cached(pair, root):
    key = (pair.song_id, pair.bitrate)
    if key not in _cache:
        _cache[key] = dataset.load_pair_audio(pair, root)
    return _cache[key]


def cmd_make_fixtures(args) -> int:
    n = args.n_songs or 6
    write_effective_config(args.out_dir, "make_fixtures", {"n_songs": n, "seconds": args.seconds, "seed": args.seed})
    for p in dataset.make_fixture_corpus(args.out_dir, n, args.seconds, args.seed or 0):
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mp3restore", description="Restore MP3-compressed music with a WGAN.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="key = value settings file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", type=Path, required=True)
        return p

    p = common(sub.add_parser("prepare", help="encode, align and split a WAV corpus"))
    p.add_argument("corpus_dir", type=Path, nargs="?")
    p.add_argument("--bitrates", type=int, nargs="+", help="kbit/s")
    p.add_argument("--ratios", type=float, nargs=3)
    p.add_argument("--resample", action="store_true", default=None)
    p.add_argument("--encoder", help="LAME-compatible encoder command")
    p.add_argument("--decoder", help="LAME-compatible decoder command")
    p.set_defaults(func=cmd_prepare)

    p = common(sub.add_parser("train", help="train generator and critic"))
    p.add_argument("--manifest", type=Path, required=True)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--stochastic", dest="stochastic", action="store_true", default=None)
    mode.add_argument("--deterministic", dest="stochastic", action="store_false")
    p.add_argument("--bitrate", type=int, help="kbit/s")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--theta", type=float)
    p.add_argument("--arch", choices=["full", "tiny"])
    p.add_argument("--segment-frames", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--resume", type=Path)
    p.add_argument("--no-timing", action="store_true", help="write 0 in the wall_ms column")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("restore", help="restore a decoded MP3 WAV"))
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("input", type=Path)
    p.add_argument("--z-file", help="text file with one noise vector")
    p.add_argument("--n-samples", type=int)
    p.add_argument("--resample", action="store_true")
    p.set_defaults(func=cmd_restore)

    p = common(sub.add_parser("evaluate", help="objective metrics on a split"))
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--split", choices=dataset.SPLITS)
    p.add_argument("--systems", nargs="+", choices=["mp3", "det", "sto"])
    p.add_argument("--det-checkpoint", type=Path)
    p.add_argument("--sto-checkpoint", type=Path)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--bitrate", type=int, help="kbit/s")
    p.add_argument("--frames", type=int, help="excerpt length in STFT frames")
    p.add_argument("--max-excerpts", type=int)
    p.add_argument("--peaq", help="PEAQ command (reference and test WAV appended)")
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("profile", help="frequency profiles across fixed noise vectors"))
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--z-count", type=int)
    p.add_argument("--excerpt-count", type=int)
    p.add_argument("--excerpt-seconds", type=float)
    p.add_argument("--split", choices=dataset.SPLITS)
    p.add_argument("--bitrate", type=int, help="kbit/s")
    p.set_defaults(func=cmd_profile)

    p = common(sub.add_parser("make-fixtures", help="write the synthetic fixture corpus"))
    p.add_argument("--n-songs", type=int)
    p.add_argument("--seconds", type=float, default=8.0)
    p.set_defaults(func=cmd_make_fixtures)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.config is not None and not args.config.is_file():
            raise ConfigError(f"config file {args.config} not found")
        return args.func(args)
    except (ConfigError, ModelError, evaluation.EvaluationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CodecError as exc:
        print(f"external tool error: {exc}", file=sys.stderr)
        return EXIT_TOOL
    except (dataset.DataError, SpectralError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except training.TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
