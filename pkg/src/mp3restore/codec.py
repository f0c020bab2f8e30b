"""MP3 encoder/decoder adapter.

Any program with the LAME command-line interface works::

    <encoder> -b <kbps> -m m <in.wav> <out.mp3>
    <decoder> --decode <in.mp3> <out.wav>

Commands come from ``MP3RESTORE_ENCODER`` / ``MP3RESTORE_DECODER`` (or the
config file). Without them a ``lame`` binary on ``PATH`` is used, and failing
that the bundled ``mp3restore-lame`` front end, which drives libmp3lame through
the ffmpeg binary shipped by ``imageio-ffmpeg``.
"""
from __future__ import annotations

import argparse
import logging
import os
import shlex
import shutil
import subprocess
import sys
from dataclasses import dataclass
from pathlib import Path

logger = logging.getLogger(__name__)

ENCODER_ENV = "MP3RESTORE_ENCODER"
DECODER_ENV = "MP3RESTORE_DECODER"

# Output sample rate LAME picks for mono CBR at a 44.1 kHz input, by kbit/s.
# ffmpeg would keep 44.1 kHz and silently raise 16 kbit/s to 32 kbit/s.
LAME_RESAMPLE = {8: 8000, 16: 8000, 24: 11025, 32: 16000, 40: 22050, 48: 22050, 56: 22050, 64: 24000}


class CodecError(RuntimeError):
    """The codec is missing or misconfigured."""


@dataclass(frozen=True)
class CodecConfig:
    encoder: tuple
    decoder: tuple

    @classmethod
    def resolve(cls, encoder: str | None = None, decoder: str | None = None) -> "CodecConfig":
        encoder = encoder or os.environ.get(ENCODER_ENV)
        decoder = decoder or os.environ.get(DECODER_ENV)
        default = None
        if not (encoder and decoder):
            default = _default_command()
        enc = shlex.split(encoder) if encoder else default
        dec = shlex.split(decoder) if decoder else default
        if not enc or not dec:
            raise CodecError(
                "no MP3 codec found: install lame, install imageio-ffmpeg, "
                f"or set {ENCODER_ENV}/{DECODER_ENV}")
        return cls(tuple(enc), tuple(dec))

    def encode(self, wav_in, mp3_out, kbps: int):
        _run(list(self.encoder) + ["-b", str(int(kbps)), "-m", "m", str(wav_in), str(mp3_out)])

    def decode(self, mp3_in, wav_out):
        _run(list(self.decoder) + ["--decode", str(mp3_in), str(wav_out)])


def _default_command():
    lame = shutil.which("lame")
    if lame:
        return [lame, "--silent"]
    try:
        import imageio_ffmpeg  # noqa: F401
    except ImportError:
        return None
    return [sys.executable, "-m", "mp3restore.codec"]


def _run(cmd):
    try:
        proc = subprocess.run(cmd, capture_output=True, text=True)
    except FileNotFoundError as exc:
        raise CodecError(f"codec executable not found: {cmd[0]}") from exc
    if proc.returncode != 0:
        raise CodecError(f"codec command failed ({proc.returncode}): {' '.join(cmd)}\n{proc.stderr.strip()}")


def _ffmpeg():
    try:
        import imageio_ffmpeg
    except ImportError as exc:
        raise CodecError("mp3restore-lame needs the imageio-ffmpeg package") from exc
    return imageio_ffmpeg.get_ffmpeg_exe()


def lame_main(argv=None) -> int:
    """LAME-compatible front end (the subset the adapter uses)."""
    ap = argparse.ArgumentParser(prog="mp3restore-lame")
    ap.add_argument("-b", type=int, help="bitrate in kbit/s")
    ap.add_argument("-m", default="m", help="channel mode (only m supported)")
    ap.add_argument("--decode", action="store_true")
    ap.add_argument("--silent", action="store_true")
    ap.add_argument("input")
    ap.add_argument("output")
    args = ap.parse_args(argv)
    ffmpeg = _ffmpeg()
    base = [ffmpeg, "-nostdin", "-y", "-loglevel", "error", "-i", args.input]
    if args.decode:
        cmd = base + ["-c:a", "pcm_s16le", "-fflags", "+bitexact", args.output]
    else:
        if args.b is None:
            ap.error("-b is required for encoding")
        if args.m != "m":
            ap.error("only mono (-m m) is supported")
        cmd = base + ["-ac", "1"]
        rate = LAME_RESAMPLE.get(args.b)
        if rate:
            cmd += ["-ar", str(rate)]
        cmd += ["-c:a", "libmp3lame", "-b:a", f"{args.b}k", "-fflags", "+bitexact", args.output]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode:
        sys.stderr.write(proc.stderr)
    return proc.returncode


if __name__ == "__main__":
    sys.exit(lame_main())
