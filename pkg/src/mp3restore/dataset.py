"""Paired (high quality, MP3) training data.

Songs are encoded once per bitrate, aligned by cross-correlation, split at the
song level and cut into fixed-length spectrogram excerpts with 50% overlap.
"""
from __future__ import annotations

import functools
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile
from scipy.signal import correlate

from mp3restore import spectral
from mp3restore.codec import CodecConfig
from mp3restore.spectral import HOP, WIN, AudioSignal, ComplexSpectrogram

logger = logging.getLogger(__name__)

BITRATES = (16000, 32000, 64000)
SPLITS = ("train", "eval", "test")
MANIFEST_VERSION = 1
MANIFEST_HEADER = f"# mp3restore manifest v{MANIFEST_VERSION}"
MANIFEST_FIELDS = ("song_id", "split", "bitrate", "hq_path", "mp3_path", "offset", "n_samples")

SEGMENT_FRAMES = 336
EVAL_SEGMENT_FRAMES = 672


class DataError(ValueError):
    pass


@dataclass
class SongPair:
    song_id: str
    hq_path: Path
    mp3_decoded_path: Path
    bitrate: int
    alignment_offset: int = 0
    n_samples: int | None = None

    def __post_init__(self):
        if self.bitrate not in BITRATES:
            raise DataError(f"bitrate must be one of {BITRATES}, got {self.bitrate}")


@dataclass
class SegmentPair:
    x: ComplexSpectrogram
    y: ComplexSpectrogram
    song_id: str
    start_frame: int

    def __post_init__(self):
        if self.x.data.shape != self.y.data.shape:
            raise DataError("x and y excerpts differ in shape")
        if self.x.scaling != spectral.SIGNED_SQRT or self.y.scaling != spectral.SIGNED_SQRT:
            raise DataError("segment pairs carry signed_sqrt spectrograms")


@dataclass
class SplitManifest:
    train: list
    eval: list
    test: list
    seed: int
    ratios: tuple = (0.8, 0.1, 0.1)
    songs: dict = field(default_factory=dict)  # song_id -> {bitrate: SongPair}
    root: Path | None = None

    def split_of(self, song_id: str) -> str:
        for name in SPLITS:
            if song_id in getattr(self, name):
                return name
        raise KeyError(song_id)

    def ids(self, split: str) -> list:
        if split not in SPLITS:
            raise DataError(f"unknown split {split!r}")
        return list(getattr(self, split))

    def pairs(self, split: str, bitrate: int) -> list:
        out = []
        for sid in self.ids(split):
            try:
                out.append(self.songs[sid][bitrate])
            except KeyError:
                raise DataError(f"song {sid} has no {bitrate} bit/s version in the manifest") from None
        return out


# ---------------------------------------------------------------------------
# codec round trip and alignment


def estimate_offset(reference: np.ndarray, decoded: np.ndarray, window: int = 4096,
                    max_lag: int = 4096, tie_tol: float = 1e-3) -> int:
    """Lag ``k`` such that ``decoded[n + k]`` best matches ``reference[n]``.

    Correlates the first ``window`` samples of the reference; if those are
    silent the first window with energy is used instead.
    """
    reference = np.asarray(reference, dtype=np.float64)
    decoded = np.asarray(decoded, dtype=np.float64)
    start = 0
    while start + window <= len(reference) and not np.any(np.abs(reference[start:start + window]) > 1e-6):
        start += window
    if start + window > len(reference):
        return 0
    ref = reference[start:start + window]
    lo = start - max_lag
    padded = np.zeros(window + 2 * max_lag)
    src_lo, src_hi = max(lo, 0), min(lo + len(padded), len(decoded))
    if src_hi > src_lo:
        padded[src_lo - lo:src_hi - lo] = decoded[src_lo:src_hi]
    corr = correlate(padded, ref, mode="valid", method="fft")
    lags = np.arange(len(corr)) - max_lag
    # periodic material has many near-equal peaks; take the smallest shift among them
    near = np.flatnonzero(corr >= corr.max() - tie_tol * abs(corr.max()))
    return int(lags[near[np.argmin(np.abs(lags[near]))]])


def apply_offset(decoded: np.ndarray, offset: int, length: int) -> np.ndarray:
    out = np.zeros(length)
    src_lo = max(offset, 0)
    dst_lo = max(-offset, 0)
    n = min(len(decoded) - src_lo, length - dst_lo)
    if n > 0:
        out[dst_lo:dst_lo + n] = decoded[src_lo:src_lo + n]
    return out


def _read_decoded(path) -> np.ndarray:
    rate, data = wavfile.read(str(path))
    x = data.astype(np.float64)
    if np.issubdtype(data.dtype, np.integer):
        x /= float(np.iinfo(data.dtype).max) + 1.0
    if x.ndim == 2:
        x = x.mean(axis=1)
    if rate != spectral.SAMPLE_RATE:
        x = spectral.resample_audio(x, rate)
    return x


def encode_decode_mp3(hq: AudioSignal, bitrate: int, codec: CodecConfig | None = None,
                      workdir=None, keep_as=None) -> tuple[AudioSignal, int]:
    """Round-trip ``hq`` through the MP3 codec.

    Returns the decoded signal aligned to ``hq`` (same length) and the codec
    offset that was removed. With ``keep_as`` the unaligned decoded audio is kept
    at that path as a 44.1 kHz float WAV.
    """
    if bitrate not in BITRATES:
        raise DataError(f"bitrate must be one of {BITRATES}, got {bitrate}")
    codec = codec or CodecConfig.resolve()
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        tmp = Path(tmp)
        spectral.save_wav(tmp / "in.wav", hq)
        codec.encode(tmp / "in.wav", tmp / "out.mp3", bitrate // 1000)
        codec.decode(tmp / "out.mp3", tmp / "dec.wav")
        decoded = _read_decoded(tmp / "dec.wav")
    if keep_as:
        spectral.save_wav(keep_as, decoded, subtype="FLOAT")
        decoded = _read_decoded(keep_as)
    offset = estimate_offset(hq.samples, decoded)
    # trailing codec padding is trimmed; missing content is not acceptable
    if len(decoded) - offset < len(hq) - HOP:
        raise DataError(
            f"decoded length {len(decoded)} (offset {offset}) falls short of source {len(hq)} by more than {HOP}")
    return AudioSignal(apply_offset(decoded, offset, len(hq))), offset


# ---------------------------------------------------------------------------
# splitting and segmentation


def split_sizes(n: int, ratios=(0.8, 0.1, 0.1)) -> tuple:
    """Floor each share, then hand out the remainder one by one starting at test."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must sum to 1, got {ratios}")
    sizes = [math.floor(n * r + 1e-9) for r in ratios]
    i = len(sizes) - 1
    while sum(sizes) < n:
        sizes[i] += 1
        i = (i - 1) % len(sizes)
    return tuple(sizes)


def split_dataset(song_ids, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> SplitManifest:
    song_ids = list(song_ids)
    ids = sorted(set(song_ids))
    if len(ids) != len(song_ids):
        raise DataError("duplicate song ids")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train, n_eval, _ = split_sizes(len(ids), ratios)
    return SplitManifest(
        train=sorted(shuffled[:n_train]),
        eval=sorted(shuffled[n_train:n_train + n_eval]),
        test=sorted(shuffled[n_train + n_eval:]),
        seed=seed,
        ratios=tuple(ratios),
    )


def segment_starts(n_frames: int, frames: int = SEGMENT_FRAMES, overlap: float = 0.5,
                   stride: int | None = None) -> list:
    stride = stride or int(round(frames * (1.0 - overlap)))
    if stride <= 0:
        raise DataError("segment stride must be positive")
    if n_frames < frames:
        return []
    return list(range(0, n_frames - frames + 1, stride))


def load_pair_audio(pair: SongPair, root=None) -> tuple[AudioSignal, AudioSignal]:
    root = Path(root) if root else Path(".")
    hq = spectral.load_wav(root / pair.hq_path)
    decoded = _read_decoded(root / pair.mp3_decoded_path)
    return hq, AudioSignal(apply_offset(decoded, pair.alignment_offset, len(hq)))


def song_spectrograms(hq: AudioSignal, mp3: AudioSignal) -> tuple[ComplexSpectrogram, ComplexSpectrogram]:
    return spectral.stft(hq).to_signed_sqrt(), spectral.stft(mp3).to_signed_sqrt()


def segment_pairs(pair, frames: int = SEGMENT_FRAMES, overlap: float = 0.5, stride: int | None = None,
                  root=None) -> list:
    """Cut a song into aligned excerpt pairs.

    ``pair`` is a :class:`SongPair` or an ``(id, hq, mp3)`` tuple of aligned
    signals. Consecutive excerpts start ``frames * (1 - overlap)`` frames
    apart unless ``stride`` is given; a trailing partial excerpt is dropped.
    """
    if isinstance(pair, SongPair):
        song_id = pair.song_id
        hq, mp3 = load_pair_audio(pair, root)
    else:
        song_id, hq, mp3 = pair
    if len(hq) < WIN:
        logger.warning("%s: too short for a single frame", song_id)
        return []
    x, y = song_spectrograms(hq, mp3)
    starts = segment_starts(x.n_frames, frames, overlap, stride)
    if not starts:
        logger.warning("%s: %d frames, shorter than one %d-frame segment", song_id, x.n_frames, frames)
    return [SegmentPair(x.frames(s, s + frames), y.frames(s, s + frames), song_id, s) for s in starts]


# ---------------------------------------------------------------------------
# batches


class BatchSource:
    """Random-access batches: ``batch(step)`` depends only on ``(seed, step)``.

    Segments are drawn uniformly with replacement from every excerpt of the
    requested split.
    """

    def __init__(self, manifest: SplitManifest, split: str, bitrate: int, batch_size: int = 12,
                 seed: int = 0, frames: int = SEGMENT_FRAMES, overlap: float = 0.5, dtype=torch.float32):
        self.manifest = manifest
        self.batch_size = batch_size
        self.seed = seed
        self.frames = frames
        self.dtype = dtype
        self.pairs = manifest.pairs(split, bitrate) if manifest.ids(split) else []
        self.index = []
        for k, pair in enumerate(self.pairs):
            n = spectral.n_frames_for(self._n_samples(pair))
            self.index.extend((k, s) for s in segment_starts(n, frames, overlap))
        if not self.index:
            raise DataError(f"split {split!r} at {bitrate} bit/s has no segments")

    def _n_samples(self, pair):
        if pair.n_samples is not None:
            return pair.n_samples
        return spectral.load_wav(Path(self.manifest.root or ".") / pair.hq_path).samples.shape[0]

    @functools.lru_cache(maxsize=64)
    def _song(self, k: int):
        hq, mp3 = load_pair_audio(self.pairs[k], self.manifest.root)
        x, y = song_spectrograms(hq, mp3)
        return x.data, y.data

    def __len__(self):
        return len(self.index)

    def draw(self, step: int) -> list:
        rng = np.random.default_rng([self.seed, step])
        return [self.index[i] for i in rng.integers(0, len(self.index), size=self.batch_size)]

    def batch(self, step: int) -> tuple[torch.Tensor, torch.Tensor]:
        xs, ys = [], []
        for k, s in self.draw(step):
            x, y = self._song(k)
            xs.append(x[:, :, s:s + self.frames])
            ys.append(y[:, :, s:s + self.frames])
        return (torch.as_tensor(np.stack(xs), dtype=self.dtype),
                torch.as_tensor(np.stack(ys), dtype=self.dtype))

    def __iter__(self):
        step = 0
        while True:
            yield self.batch(step)
            step += 1


def batch_iterator(manifest: SplitManifest, split: str, bitrate: int, batch_size: int = 12, seed: int = 0,
                   **kwargs):
    return iter(BatchSource(manifest, split, bitrate, batch_size, seed, **kwargs))


class InMemoryBatches:
    """Batches drawn from a fixed list of :class:`SegmentPair` (tests, toy runs)."""

    def __init__(self, segments, batch_size: int = 12, seed: int = 0, dtype=torch.float32):
        if not segments:
            raise DataError("no segments")
        self.x = torch.as_tensor(np.stack([s.x.data for s in segments]), dtype=dtype)
        self.y = torch.as_tensor(np.stack([s.y.data for s in segments]), dtype=dtype)
        self.batch_size = batch_size
        self.seed = seed

    def __len__(self):
        return len(self.x)

    def batch(self, step: int):
        rng = np.random.default_rng([self.seed, step])
        idx = torch.as_tensor(rng.integers(0, len(self.x), size=self.batch_size))
        return self.x[idx], self.y[idx]


# ---------------------------------------------------------------------------
# manifest files


def write_manifest(manifest: SplitManifest, path) -> Path:
    """Tab-separated records, one per (song, bitrate); paths relative to the file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER, f"# seed={manifest.seed} ratios={','.join(repr(r) for r in manifest.ratios)}",
             "\t".join(MANIFEST_FIELDS)]
    base = path.parent.resolve()
    for sid in sorted(manifest.songs):
        split = manifest.split_of(sid)
        for bitrate in sorted(manifest.songs[sid]):
            p = manifest.songs[sid][bitrate]
            hq = _relative(p.hq_path, manifest.root, base)
            mp3 = _relative(p.mp3_decoded_path, manifest.root, base)
            n = p.n_samples or spectral.load_wav(_absolute(p.hq_path, manifest.root)).samples.shape[0]
            lines.append("\t".join([sid, split, str(bitrate), hq, mp3, str(p.alignment_offset), str(n)]))
    path.write_text("\n".join(lines) + "\n")
    return path


def _absolute(p, root):
    p = Path(p)
    return p if p.is_absolute() or root is None else Path(root) / p


def _relative(p, root, base):
    return Path(os.path.relpath(_absolute(p, root).resolve(), base)).as_posix()


def read_manifest(path) -> SplitManifest:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise DataError(f"{path}: not a v{MANIFEST_VERSION} manifest")
    meta = dict(kv.split("=", 1) for kv in lines[1].lstrip("# ").split())
    if tuple(lines[2].split("\t")) != MANIFEST_FIELDS:
        raise DataError(f"{path}: unexpected columns {lines[2]!r}")
    splits = {name: set() for name in SPLITS}
    songs = {}
    for line in lines[3:]:
        if not line.strip():
            continue
        sid, split, bitrate, hq, mp3, offset, n = line.split("\t")
        splits[split].add(sid)
        songs.setdefault(sid, {})[int(bitrate)] = SongPair(sid, Path(hq), Path(mp3), int(bitrate), int(offset),
                                                            int(n))
    return SplitManifest(
        train=sorted(splits["train"]), eval=sorted(splits["eval"]), test=sorted(splits["test"]),
        seed=int(meta["seed"]), ratios=tuple(float(r) for r in meta["ratios"].split(",")),
        songs=songs, root=path.parent,
    )


# ---------------------------------------------------------------------------
# synthetic corpus


def synth_song(seed: int, seconds: float = 8.0, sr: int = spectral.SAMPLE_RATE) -> np.ndarray:
    """A deterministic toy 'song': harmonic notes, a kick and bright hi-hats."""
    rng = np.random.default_rng(seed)
    n = int(seconds * sr)
    t = np.arange(n) / sr
    out = np.zeros(n)
    bpm = rng.uniform(90, 140)
    beat = 60.0 / bpm
    note_len = beat * rng.choice([1, 2])
    n_notes = int(np.ceil(seconds / note_len))
    base = rng.uniform(110, 330)
    scale = np.array([0, 2, 4, 5, 7, 9, 11, 12])
    for k in range(n_notes):
        f0 = base * 2 ** (rng.choice(scale) / 12)
        lo, hi = int(k * note_len * sr), min(n, int((k + 1) * note_len * sr))
        tt = t[lo:hi] - t[lo]
        env = np.exp(-tt * rng.uniform(1.5, 4.0)) * np.minimum(1.0, tt / 0.01)
        tone = np.zeros(hi - lo)
        h = 1
        while h * f0 < 16000:
            tone += np.sin(2 * np.pi * h * f0 * tt + rng.uniform(0, 2 * np.pi)) / h ** rng.uniform(0.8, 1.4)
            h += 1
        out[lo:hi] += 0.25 * env * tone / max(1.0, np.max(np.abs(tone)))
    # kick on the beat, hi-hat on eighths
    for k in range(int(seconds / beat) + 1):
        s = int(k * beat * sr)
        if s >= n:
            break
        m = min(n - s, int(0.25 * sr))
        tt = np.arange(m) / sr
        out[s:s + m] += 0.4 * np.sin(2 * np.pi * 55 * tt * (1 + 2 * np.exp(-tt * 30))) * np.exp(-tt * 12)
    hat = np.diff(rng.standard_normal(n + 1))  # first difference: tilt energy upwards
    for k in range(int(2 * seconds / beat) + 1):
        s = int(k * beat / 2 * sr)
        if s >= n:
            break
        m = min(n - s, int(0.08 * sr))
        out[s:s + m] += 0.08 * hat[s:s + m] * np.exp(-np.arange(m) / sr * rng.uniform(40, 80))
    out /= max(1.0, np.max(np.abs(out)) / 0.9)
    return out


def make_fixture_corpus(out_dir, n_songs: int = 6, seconds: float = 8.0, seed: int = 0) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n_songs):
        p = out_dir / f"song{i:02d}.wav"
        spectral.save_wav(p, synth_song(seed * 1000 + i, seconds))
        paths.append(p)
    return paths


def prepare_corpus(corpus_dir, out_dir, bitrates=BITRATES, seed: int = 0, ratios=(0.8, 0.1, 0.1),
                   codec: CodecConfig | None = None, resample: bool = False) -> SplitManifest:
    """Encode every WAV of ``corpus_dir`` at each bitrate and write ``manifest.tsv``."""
    corpus_dir, out_dir = Path(corpus_dir), Path(out_dir)
    if not corpus_dir.is_dir():
        raise DataError(f"corpus directory {corpus_dir} does not exist")
    wavs = sorted(corpus_dir.glob("*.wav"))
    if not wavs:
        raise DataError(f"no .wav files in {corpus_dir}")
    codec = codec or CodecConfig.resolve()
    manifest = split_dataset([w.stem for w in wavs], ratios, seed)
    manifest.root = out_dir
    for wav in wavs:
        sid = wav.stem
        hq = spectral.load_wav(wav, resample=resample)
        hq_path = wav.resolve()
        if resample:
            hq_path = spectral.save_wav(out_dir / "hq" / f"{sid}.wav", hq).resolve()
        for bitrate in bitrates:
            dec_path = out_dir / "mp3" / str(bitrate // 1000) / f"{sid}.wav"
            _, offset = encode_decode_mp3(hq, bitrate, codec, keep_as=dec_path)
            manifest.songs.setdefault(sid, {})[bitrate] = SongPair(sid, hq_path, dec_path.resolve(), bitrate, offset,
                                                                   len(hq))
            logger.info("%s @ %d bit/s: offset %d", sid, bitrate, offset)
    write_manifest(manifest, out_dir / "manifest.tsv")
    return read_manifest(out_dir / "manifest.tsv")


def corpus_statistics(manifest: SplitManifest, bitrate: int, frames: int = SEGMENT_FRAMES) -> dict:
    stats = {}
    for split in SPLITS:
        n_seg = 0
        for pair in manifest.pairs(split, bitrate):
            n = pair.n_samples or spectral.load_wav(Path(manifest.root or ".") / pair.hq_path).samples.shape[0]
            n_seg += len(segment_starts(spectral.n_frames_for(n), frames))
        stats[split] = {"songs": len(manifest.ids(split)), "segments": n_seg}
    return stats
