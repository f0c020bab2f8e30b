"""Objective metrics, best-of-N selection and frequency profiles."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import shlex
import shutil
import subprocess
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from mp3restore import spectral
from mp3restore.dataset import SEGMENT_FRAMES, SplitManifest, load_pair_audio, segment_starts
from mp3restore.spectral import (LINEAR, SIGNED_SQRT, AudioSignal, ComplexSpectrogram, PowerSpectrogram)

logger = logging.getLogger(__name__)

LSD_FLOOR = 1e-10
METRICS = ("lsd", "mse", "snr")
MINIMIZE = {"lsd": True, "mse": True, "snr": False, "odg": False, "di": False}
REPORT_COLUMNS = ("song_id", "start_frame", "bitrate", "system", "lsd", "mse", "snr", "odg", "di")
PEAQ_ENV = "MP3RESTORE_PEAQ"


class EvaluationError(ValueError):
    pass


def _power(p):
    if isinstance(p, PowerSpectrogram):
        return p.data
    if isinstance(p, ComplexSpectrogram):
        return spectral.power_spectrogram(p).data
    return np.asarray(p, dtype=np.float64)


def lsd(P, P_hat, floor: float = LSD_FLOOR) -> float:
    """Log-spectral distance between power spectrograms laid out ``(F, T)``."""
    P, P_hat = _power(P), _power(P_hat)
    if P.shape != P_hat.shape:
        raise EvaluationError(f"shape mismatch {P.shape} vs {P_hat.shape}")
    ratio_db = 10.0 * (np.log10(np.maximum(P, floor)) - np.log10(np.maximum(P_hat, floor)))
    return float(np.mean(np.sqrt(np.mean(ratio_db ** 2, axis=0))))


def mse_root_power(P, P_hat) -> float:
    P, P_hat = _power(P), _power(P_hat)
    if P.shape != P_hat.shape:
        raise EvaluationError(f"shape mismatch {P.shape} vs {P_hat.shape}")
    return float(np.mean((np.sqrt(P) - np.sqrt(P_hat)) ** 2))


def snr(s, s_hat) -> float:
    """Time-domain SNR in dB; ``inf`` for a perfect approximation."""
    s = np.asarray(s.samples if isinstance(s, AudioSignal) else s, dtype=np.float64)
    s_hat = np.asarray(s_hat.samples if isinstance(s_hat, AudioSignal) else s_hat, dtype=np.float64)
    if s.shape != s_hat.shape:
        raise EvaluationError(f"length mismatch {s.shape} vs {s_hat.shape}")
    signal = float(np.sum(s ** 2))
    if signal == 0.0:
        raise EvaluationError("reference signal is all zeros")
    noise = float(np.sum((s - s_hat) ** 2))
    if noise == 0.0:
        return math.inf
    return 10.0 * math.log10(signal / noise)


@dataclass
class FrequencyProfile:
    values: np.ndarray
    z: np.ndarray | None = None


def frequency_profile(output, z=None) -> FrequencyProfile:
    """Mean over time of ``|h|``; signed square-root input is undone first."""
    if isinstance(output, ComplexSpectrogram):
        data = output.to_linear().data
    else:
        data = np.asarray(output, dtype=np.float64)
    mag = np.sqrt(data[0] ** 2 + data[1] ** 2)
    return FrequencyProfile(mag.mean(axis=1), None if z is None else np.asarray(z))


# ---------------------------------------------------------------------------
# restoration helpers


def restore_spectrogram(G, y: np.ndarray, z=None, train_mode: bool = False) -> np.ndarray:
    """Run ``G`` on one signed-sqrt excerpt ``(2, F, T)`` and return linear data."""
    dtype = next(G.parameters()).dtype
    with torch.no_grad():
        yt = torch.as_tensor(y, dtype=dtype)[None]
        zt = None if z is None else torch.as_tensor(z, dtype=dtype).reshape(1, -1)
        out = G(yt, zt, train_mode=train_mode)[0].double().numpy()
    return spectral.signed_square(out)


def excerpt_signal(spec_linear: np.ndarray) -> np.ndarray:
    return spectral.istft(ComplexSpectrogram(spec_linear, LINEAR)).samples


def excerpt_metrics(ref_linear: np.ndarray, test_linear: np.ndarray, ref_signal=None) -> dict:
    """LSD and MSE on power spectra, SNR on the resynthesised excerpts."""
    P = ref_linear[0] ** 2 + ref_linear[1] ** 2
    P_hat = test_linear[0] ** 2 + test_linear[1] ** 2
    s = excerpt_signal(ref_linear) if ref_signal is None else ref_signal
    try:
        snr_val = snr(s, excerpt_signal(test_linear))
    except EvaluationError:
        snr_val = math.nan
    return {"lsd": lsd(P, P_hat), "mse": mse_root_power(P, P_hat), "snr": snr_val}


def best_of_n(G, y, n: int = 20, metric: str = "lsd", reference=None, seed: int = 0, z_list=None):
    """Draw ``n`` noise vectors, restore, and keep the sample closest to the reference.

    Returns ``(best_output, best_value, values)``; ``best_output`` is linear
    complex data ``(2, F, T)``. The k-th noise vector depends only on
    ``(seed, k)``, so a larger ``n`` extends a smaller draw.
    """
    if not getattr(G, "stochastic", False):
        raise EvaluationError("best-of-n requires stochastic generator")
    if metric not in METRICS:
        raise EvaluationError(f"metric must be one of {METRICS}")
    y = y.data if isinstance(y, ComplexSpectrogram) else np.asarray(y)
    ref = reference.to_linear().data if isinstance(reference, ComplexSpectrogram) else np.asarray(reference)
    ref_signal = excerpt_signal(ref)
    if z_list is None:
        z_list = noise_vectors(G.arch.noise_dim, n, seed)
    values, best, best_val = [], None, None
    for z in z_list[:n]:
        out = restore_spectrogram(G, y, z)
        val = excerpt_metrics(ref, out, ref_signal)[metric]
        values.append(val)
        if best is None or (val < best_val if MINIMIZE[metric] else val > best_val):
            best, best_val = out, val
    return best, best_val, values


def noise_vectors(dim: int, n: int, seed: int) -> list:
    return [np.random.default_rng([seed, k]).standard_normal(dim) for k in range(n)]


# ---------------------------------------------------------------------------
# PEAQ adapter


@dataclass
class PeaqConfig:
    command: tuple | None = None
    odg_pattern: str = r"ODG:\s*(-?[0-9.]+)"
    di_pattern: str = r"DI:\s*(-?[0-9.]+)"

    @classmethod
    def resolve(cls, command: str | None = None, **patterns) -> "PeaqConfig":
        command = command or os.environ.get(PEAQ_ENV)
        if not command:
            found = shutil.which("peaqb")
            command = found
        return cls(tuple(shlex.split(command)) if command else None,
                   **{k: v for k, v in patterns.items() if v})


def peaq_scores(ref_wav, test_wav, config: PeaqConfig | None = None) -> tuple:
    """``(odg, di)`` from the external PEAQ tool, or ``(None, None)`` if unavailable."""
    config = config or PeaqConfig.resolve()
    if not config.command:
        warnings.warn("PEAQ tool not configured; ODG/DI left empty", RuntimeWarning, stacklevel=2)
        return None, None
    try:
        proc = subprocess.run(list(config.command) + [str(ref_wav), str(test_wav)], capture_output=True,
                              text=True, timeout=600)
    except (FileNotFoundError, subprocess.TimeoutExpired) as exc:
        warnings.warn(f"PEAQ tool failed: {exc}", RuntimeWarning, stacklevel=2)
        return None, None
    text = proc.stdout + "\n" + proc.stderr
    odg = _last_match(config.odg_pattern, text)
    di = _last_match(config.di_pattern, text)
    if odg is None:
        warnings.warn(f"could not parse ODG from PEAQ output (exit {proc.returncode})", RuntimeWarning,
                      stacklevel=2)
        return None, None
    return odg, di


def _last_match(pattern, text):
    found = re.findall(pattern, text)
    return float(found[-1]) if found else None


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    records: list = field(default_factory=list)
    protocol: dict = field(default_factory=dict)
    config_hash: str = ""
    checkpoint_id: str = ""

    def aggregates(self) -> dict:
        groups = {}
        for r in self.records:
            for m in ("lsd", "mse", "snr", "odg", "di"):
                v = r.get(m)
                if v is None or (isinstance(v, float) and math.isnan(v)):
                    continue
                groups.setdefault((r["system"], r["bitrate"], m), []).append(float(v))
        return {k: {"mean": float(np.mean(v)), "std": float(np.std(v)), "n": len(v)} for k, v in groups.items()}

    def summary_table(self) -> str:
        """Rows ``<system>_<kbps>k`` and columns ODG DI LSD MSE SNR."""
        agg = self.aggregates()
        rows = sorted({(s, b) for s, b, _ in agg}, key=lambda sb: (sb[1], ["mp3", "det", "sto"].index(sb[0])
                                                                   if sb[0] in ("mp3", "det", "sto") else 9))
        lines = [f"{'':10s}{'ODG':>8s}{'DI':>8s}{'LSD':>8s}{'MSE':>8s}{'SNR':>8s}"]
        for system, bitrate in rows:
            cells = []
            for m in ("odg", "di", "lsd", "mse", "snr"):
                a = agg.get((system, bitrate, m))
                cells.append(f"{a['mean']:8.2f}" if a else f"{'-':>8s}")
            lines.append(f"{system}_{bitrate // 1000}k".ljust(10) + "".join(cells))
        return "\n".join(lines)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["# mp3restore metric report v1",
                 f"# protocol={json.dumps(self.protocol, sort_keys=True)}",
                 f"# config_hash={self.config_hash} checkpoint_id={self.checkpoint_id}",
                 "\t".join(REPORT_COLUMNS)]
        for r in self.records:
            lines.append("\t".join(_fmt(r.get(c)) for c in REPORT_COLUMNS))
        lines.append("# summary")
        lines.extend("# " + l for l in self.summary_table().splitlines())
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "MetricReport":
        lines = Path(path).read_text().splitlines()
        protocol = json.loads(lines[1].split("=", 1)[1])
        meta = dict(kv.split("=", 1) for kv in lines[2].lstrip("# ").split())
        cols = lines[3].split("\t")
        records = []
        for line in lines[4:]:
            if line.startswith("#"):
                break
            vals = line.split("\t")
            r = dict(zip(cols, vals))
            r["start_frame"] = int(r["start_frame"])
            r["bitrate"] = int(r["bitrate"])
            for m in ("lsd", "mse", "snr", "odg", "di"):
                r[m] = None if r[m] == "" else float(r[m])
            records.append(r)
        return cls(records, protocol, meta.get("config_hash", ""), meta.get("checkpoint_id", ""))


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def evaluate_system(manifest: SplitManifest, system: str, bitrate: int, G=None, split: str = "test",
                    n_samples: int = 20, seed: int = 0, frames: int = SEGMENT_FRAMES, stride: int | None = None,
                    max_excerpts: int | None = None, peaq: PeaqConfig | None = None, wav_dir=None,
                    checkpoint_id: str = "") -> MetricReport:
    """Metrics for one system (``mp3``, ``det`` or ``sto``) on one split.

    Stochastic systems pick the best of ``n_samples`` draws separately for
    each metric. The generator runs in padded mode so excerpts keep their
    length. PEAQ, when configured, scores the LSD-selected output.
    """
    if system not in ("mp3", "det", "sto"):
        raise EvaluationError(f"unknown system {system!r}")
    if system != "mp3" and G is None:
        raise EvaluationError(f"system {system!r} needs a generator")
    if system == "sto" and not G.stochastic:
        raise EvaluationError("best-of-n requires stochastic generator")
    if system == "det" and G.stochastic:
        raise EvaluationError("system 'det' needs a deterministic generator")
    stride = stride or frames
    protocol = {"n_samples": n_samples if system == "sto" else 1,
                "selection_metric": "per-metric" if system == "sto" else "none",
                "split": split, "frames": frames, "stride": stride, "seed": seed}
    report = MetricReport(protocol=protocol, checkpoint_id=checkpoint_id)
    count = 0
    for pair in manifest.pairs(split, bitrate):
        hq, mp3 = load_pair_audio(pair, manifest.root)
        X = spectral.stft(hq).data
        Y = spectral.stft(mp3).data
        for s in segment_starts(X.shape[2], frames, stride=stride):
            if max_excerpts is not None and count >= max_excerpts:
                break
            count += 1
            x, y = X[:, :, s:s + frames], Y[:, :, s:s + frames]
            ref_sig = excerpt_signal(x)
            rec = {"song_id": pair.song_id, "start_frame": s, "bitrate": bitrate, "system": system}
            y_sq = spectral.signed_sqrt(y)
            if system == "mp3":
                chosen = y
                rec.update(excerpt_metrics(x, y, ref_sig))
            elif system == "det":
                chosen = restore_spectrogram(G, y_sq)
                rec.update(excerpt_metrics(x, chosen, ref_sig))
            else:
                zs = noise_vectors(G.arch.noise_dim, n_samples, _excerpt_seed(seed, pair.song_id, s))
                outs = [restore_spectrogram(G, y_sq, z) for z in zs]
                vals = [excerpt_metrics(x, o, ref_sig) for o in outs]
                for m in METRICS:
                    col = [v[m] for v in vals]
                    rec[m] = float(np.nanmin(col) if MINIMIZE[m] else np.nanmax(col))
                chosen = outs[int(np.argmin([v["lsd"] for v in vals]))]
            rec["odg"], rec["di"] = _peaq_for(ref_sig, excerpt_signal(chosen), peaq, wav_dir, rec)
            report.records.append(rec)
    return report


def _excerpt_seed(seed: int, song_id: str, start: int) -> int:
    h = hashlib.sha256(f"{seed}:{song_id}:{start}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def _peaq_for(ref_sig, test_sig, peaq, wav_dir, rec):
    if peaq is None or not peaq.command:
        return None, None
    base = Path(wav_dir or ".") / f"{rec['system']}_{rec['bitrate'] // 1000}k_{rec['song_id']}_{rec['start_frame']}"
    ref_path = spectral.save_wav(str(base) + "_ref.wav", ref_sig)
    test_path = spectral.save_wav(str(base) + "_test.wav", test_sig)
    odg, di = peaq_scores(ref_path, test_path, peaq)
    if odg is not None and not -4.0 <= odg <= 0.0:
        logger.warning("ODG %.3f outside [-4, 0] for %s", odg, base.name)
    return odg, di


def merge_reports(reports) -> MetricReport:
    out = MetricReport()
    for r in reports:
        out.records.extend(r.records)
        out.protocol.setdefault("systems", {})[f"{r.records[0]['system']}_{r.records[0]['bitrate']}"
                                               if r.records else "empty"] = r.protocol
        out.checkpoint_id = out.checkpoint_id or r.checkpoint_id
    return out


def profile_consistency(profiles: np.ndarray, top_fraction: float = 0.25) -> dict:
    """Variance across excerpts (fixed z) vs across z, on the top bands.

    ``profiles`` is ``(n_z, n_excerpts, F)``.
    """
    F = profiles.shape[-1]
    top = profiles[..., int(F * (1 - top_fraction)):]
    within = float(np.mean(np.var(top, axis=1)))
    across = float(np.mean(np.var(top.mean(axis=1), axis=0)))
    return {"within_z_var": within, "across_z_var": across}


__all__ = [
    "lsd", "mse_root_power", "snr", "best_of_n", "frequency_profile", "FrequencyProfile", "peaq_scores",
    "PeaqConfig", "MetricReport", "evaluate_system", "restore_spectrogram", "SIGNED_SQRT", "asdict",
]
