"""Audio loading, MFCC extraction, fixed-width framing and the ``.tbf`` format."""

from __future__ import annotations

import csv
import logging
import math
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import scipy.fft
import scipy.signal

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

SAMPLE_RATE = 22050
N_FFT = 2048
HOP_LENGTH = 512
N_MELS = 128
N_MFCC = 39
TOP_DB = 80.0
AMIN = 1e-10

# frame counts known for specific corpora; others come from the manifest
DATASET_FRAMES = {"casia": 172, "iemocap": 606}

GENDER_MODES = ("none", "golden", "binary", "probabilities")
GENDER_ROWS = {"none": 0, "golden": 1, "binary": 1, "probabilities": 2}

TBF_MAGIC = b"TBDM"
TBF_VERSION = 1
_TBF_HEADER = struct.Struct("<4sIII")

PathLike = Union[str, Path]


# ---------------------------------------------------------------------------
# audio


def load_audio(path: PathLike, target_rate: int = SAMPLE_RATE) -> tuple[np.ndarray, int]:
    """Read a 16-bit PCM WAV as mono float64 in [-1, 1] at ``target_rate``."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (OSError, EOFError, wave.Error) as exc:
        raise DataError(f"{path}: cannot read WAV file ({exc})") from exc
    if width != 2:
        raise DataError(f"{path}: only 16-bit PCM is supported (sample width {8 * width} bits)")
    if n_channels not in (1, 2):
        raise DataError(f"{path}: expected mono or stereo, got {n_channels} channels")

    pcm = np.frombuffer(raw, dtype="<i2")
    usable = len(pcm) - len(pcm) % n_channels
    samples = pcm[:usable].reshape(-1, n_channels).astype(np.float64) / 32768.0
    samples = samples.mean(axis=1)
    if rate != target_rate:
        samples = resample(samples, rate, target_rate)
    return samples, target_rate


def resample(samples: np.ndarray, src_rate: int, dst_rate: int) -> np.ndarray:
    g = math.gcd(int(src_rate), int(dst_rate))
    return scipy.signal.resample_poly(samples, dst_rate // g, src_rate // g)


def write_wav(path: PathLike, samples: np.ndarray, rate: int = SAMPLE_RATE) -> None:
    """Write mono or [n, 2] int16/float samples as 16-bit PCM (test fixtures, tooling)."""
    arr = np.asarray(samples)
    if arr.dtype.kind == "f":
        arr = np.clip(np.round(arr * 32767.0), -32768, 32767).astype("<i2")
    else:
        arr = arr.astype("<i2")
    channels = 1 if arr.ndim == 1 else arr.shape[1]
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(2)
        wf.setframerate(int(rate))
        wf.writeframes(arr.tobytes())


# ---------------------------------------------------------------------------
# MFCC


def hz_to_mel(freq):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    freq = np.asarray(freq, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(
        freq >= min_log_hz,
        min_log_mel + np.log(np.maximum(freq, min_log_hz) / min_log_hz) / logstep,
        freq / f_sp,
    )


def mel_to_hz(mels):
    mels = np.asarray(mels, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(mels >= min_log_mel, min_log_hz * np.exp(logstep * (mels - min_log_mel)), f_sp * mels)


def mel_filterbank(sample_rate: int = SAMPLE_RATE, n_fft: int = N_FFT, n_mels: int = N_MELS) -> np.ndarray:
    """Triangular, area-normalised mel filters, shape [n_mels, 1 + n_fft // 2]."""
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, 1 + n_fft // 2)
    mel_pts = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2))
    fdiff = np.diff(mel_pts)
    ramps = mel_pts[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (mel_pts[2:] - mel_pts[:-2]))[:, None]
    return weights


def power_spectrogram(samples: np.ndarray, n_fft: int = N_FFT, hop: int = HOP_LENGTH) -> np.ndarray:
    """|STFT|^2 with a periodic Hann window and reflect-padded centred frames."""
    x = np.asarray(samples, dtype=np.float64)
    padded = np.pad(x, n_fft // 2, mode="reflect") if len(x) > 1 else np.pad(x, n_fft // 2)
    n_frames = 1 + (len(padded) - n_fft) // hop
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop][:n_frames]
    window = scipy.signal.get_window("hann", n_fft, fftbins=True)
    spec = np.fft.rfft(frames * window, n=n_fft, axis=1)
    return (spec.real**2 + spec.imag**2).T


def mfcc(samples: np.ndarray, sample_rate: int = SAMPLE_RATE, n_mfcc: int = N_MFCC) -> np.ndarray:
    """Return a [n_mfcc, T] grid with T = 1 + len(samples) // 512."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise DataError("cannot compute MFCC of an empty signal")
    power = power_spectrogram(samples)
    mel = mel_filterbank(sample_rate) @ power
    db = 10.0 * np.log10(np.maximum(AMIN, mel))
    db = np.maximum(db, db.max() - TOP_DB)
    return scipy.fft.dct(db, type=2, norm="ortho", axis=0)[:n_mfcc]


def n_frames_for(n_samples: int, hop: int = HOP_LENGTH) -> int:
    return 1 + n_samples // hop


# ---------------------------------------------------------------------------
# framing and gender rows


def fit_frames(grid: np.ndarray, target_frames: int) -> np.ndarray:
    """Zero-pad symmetrically (extra frame on the right) or crop the centre."""
    if target_frames < 1:
        raise ValueError(f"target frame count must be >= 1, got {target_frames}")
    grid = np.asarray(grid)
    C, T = grid.shape
    if T == target_frames:
        return grid.copy()
    if T > target_frames:
        start = (T - target_frames) // 2
        return grid[:, start : start + target_frames].copy()
    left = (target_frames - T) // 2
    out = np.zeros((C, target_frames), dtype=grid.dtype)
    out[:, left : left + T] = grid
    return out


def gender_channels(mode: str, base: int = N_MFCC) -> int:
    if mode not in GENDER_ROWS:
        raise ConfigError(f"unknown gender mode {mode!r}; expected one of {GENDER_MODES}")
    return base + GENDER_ROWS[mode]


def inject_gender(grid: np.ndarray, mode: str, gender_info=None) -> np.ndarray:
    """Append constant gender rows after the MFCC rows.

    ``golden``/``binary`` take ``"M"``/``"F"`` (or 0/1) and add one row,
    0 for male and 1 for female. ``probabilities`` takes ``(p_male, p_female)``
    and adds two rows in that order.
    """
    if mode == "none":
        return grid
    if mode not in GENDER_ROWS:
        raise ConfigError(f"unknown gender mode {mode!r}")
    if gender_info is None:
        raise DataError(f"gender mode {mode!r} needs gender information")
    grid = np.asarray(grid)
    F = grid.shape[1]
    if mode == "probabilities":
        p_male, p_female = (float(p) for p in gender_info)
        rows = np.array([[p_male] * F, [p_female] * F], dtype=grid.dtype)
    else:
        rows = np.full((1, F), _gender_bit(gender_info), dtype=grid.dtype)
    return np.concatenate([grid, rows], axis=0)


def _gender_bit(value) -> float:
    if value in ("M", "m", 0, 0.0):
        return 0.0
    if value in ("F", "f", 1, 1.0):
        return 1.0
    raise DataError(f"gender must be M or F, got {value!r}")


# ---------------------------------------------------------------------------
# manifest and sidecar


@dataclass(frozen=True)
class Sample:
    utterance_id: str
    audio_path: str
    emotion_label: str
    speaker_id: str
    gender: str  # "M", "F" or "?"


@dataclass
class DatasetManifest:
    rows: list[Sample]
    label_set: list[str] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for s in self.rows:
            if s.utterance_id in seen:
                raise DataError(f"duplicate utterance_id {s.utterance_id!r} in manifest")
            seen.add(s.utterance_id)
        labels = sorted({s.emotion_label for s in self.rows})
        if not self.label_set:
            self.label_set = labels
        else:
            missing = [lab for lab in labels if lab not in self.label_set]
            if missing:
                raise DataError(f"labels {missing} not in label set {self.label_set}")

    def __len__(self) -> int:
        return len(self.rows)


MANIFEST_HEADER = ["utterance_id", "audio_path", "emotion", "speaker", "gender"]


def read_manifest(path: PathLike) -> DatasetManifest:
    """Read the CSV manifest; relative audio paths resolve against its folder."""
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != MANIFEST_HEADER:
                raise DataError(f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}")
            rows = []
            for line_no, rec in enumerate(reader, start=2):
                gender = (rec["gender"] or "?").strip().upper()
                if gender not in ("M", "F", "?"):
                    raise DataError(f"{path}:{line_no}: gender must be M, F or ?, got {rec['gender']!r}")
                audio = Path(rec["audio_path"].strip())
                if not audio.is_absolute():
                    audio = path.parent / audio
                rows.append(
                    Sample(
                        utterance_id=rec["utterance_id"].strip(),
                        audio_path=str(audio),
                        emotion_label=rec["emotion"].strip(),
                        speaker_id=rec["speaker"].strip(),
                        gender=gender,
                    )
                )
    except OSError as exc:
        raise DataError(f"{path}: cannot read manifest ({exc})") from exc
    return DatasetManifest(rows)


def write_manifest(path: PathLike, rows: list[Sample]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEADER)
        for s in rows:
            w.writerow([s.utterance_id, s.audio_path, s.emotion_label, s.speaker_id, s.gender])


def read_sidecar(path: PathLike) -> dict[str, tuple[float, float]]:
    """Gender classifier output: utterance_id -> (p_male, p_female)."""
    path = Path(path)
    out = {}
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != [
                "utterance_id",
                "p_male",
                "p_female",
            ]:
                raise DataError(f"{path}: sidecar header must be utterance_id,p_male,p_female")
            for line_no, rec in enumerate(reader, start=2):
                pm, pf = float(rec["p_male"]), float(rec["p_female"])
                if not (0.0 <= pm <= 1.0 and 0.0 <= pf <= 1.0) or abs(pm + pf - 1.0) > 1e-6:
                    raise DataError(f"{path}:{line_no}: probabilities must lie in [0,1] and sum to 1")
                out[rec["utterance_id"].strip()] = (pm, pf)
    except OSError as exc:
        raise DataError(f"{path}: cannot read gender sidecar ({exc})") from exc
    except ValueError as exc:
        raise DataError(f"{path}: malformed probability ({exc})") from exc
    return out


def write_sidecar(path: PathLike, probs: dict[str, tuple[float, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["utterance_id", "p_male", "p_female"])
        for uid, (pm, pf) in probs.items():
            w.writerow([uid, repr(float(pm)), repr(float(pf))])


def binary_gender(p: tuple[float, float]) -> str:
    return "F" if p[1] > 0.5 else "M"


def gender_info_for(utterance_id: str, mode: str, golden: str = "?", sidecar: Optional[dict] = None):
    """Resolve what :func:`inject_gender` needs for one utterance."""
    if mode == "none":
        return None
    if mode == "golden":
        if golden not in ("M", "F"):
            raise DataError(f"utterance {utterance_id!r} has no golden gender label")
        return golden
    if sidecar is None:
        raise ConfigError(f"gender mode {mode!r} needs a gender sidecar file")
    if utterance_id not in sidecar:
        raise DataError(f"gender sidecar has no entry for utterance {utterance_id!r}")
    p = sidecar[utterance_id]
    return binary_gender(p) if mode == "binary" else p


# ---------------------------------------------------------------------------
# feature files


@dataclass
class FeatureMatrix:
    utterance_id: str
    values: np.ndarray  # [channels, frames] float32
    gender_mode: str = "none"

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]


def encode_features(values: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(values, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"feature grid must be 2-D, got shape {arr.shape}")
    C, F = arr.shape
    return _TBF_HEADER.pack(TBF_MAGIC, TBF_VERSION, C, F) + arr.tobytes()


def decode_features(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < _TBF_HEADER.size:
        raise DataError(f"{source}: truncated feature header")
    magic, version, C, F = _TBF_HEADER.unpack_from(blob)
    if magic != TBF_MAGIC:
        raise DataError(f"{source}: bad magic {magic!r}, expected {TBF_MAGIC!r}")
    if version != TBF_VERSION:
        raise DataError(f"{source}: unsupported feature file version {version}")
    payload = blob[_TBF_HEADER.size :]
    if len(payload) != 4 * C * F:
        raise DataError(f"{source}: header says {C}x{F} floats but payload holds {len(payload)} bytes")
    return np.frombuffer(payload, dtype="<f4").reshape(C, F).astype(np.float32)


def infer_gender_mode(channels: int, base: int = N_MFCC) -> str:
    extra = channels - base
    return {0: "none", 1: "golden", 2: "probabilities"}.get(extra, "none")


def feature_path(directory: PathLike, utterance_id: str) -> Path:
    return Path(directory) / f"{utterance_id}.tbf"


def write_features(directory: PathLike, fm: FeatureMatrix) -> Path:
    path = feature_path(directory, fm.utterance_id)
    path.write_bytes(encode_features(fm.values))
    return path


def read_features(path: PathLike, gender_mode: Optional[str] = None) -> FeatureMatrix:
    """Load one ``.tbf`` file; a 40-row file is ambiguous so pass ``gender_mode`` when known."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read feature file ({exc})") from exc
    values = decode_features(blob, str(path))
    mode = gender_mode or infer_gender_mode(values.shape[0])
    return FeatureMatrix(path.stem, values, mode)


# ---------------------------------------------------------------------------
# batch extraction


def default_frame_count(lengths: list[int]) -> int:
    """95th percentile of utterance lengths in frames, rounded up."""
    if not lengths:
        raise DataError("cannot derive a frame count from an empty manifest")
    return max(1, int(math.ceil(np.percentile(lengths, 95))))


def utterance_features(
    samples: np.ndarray,
    frames: int,
    gender_mode: str = "none",
    gender_info=None,
) -> np.ndarray:
    grid = fit_frames(mfcc(samples).astype(np.float32), frames)
    return inject_gender(grid, gender_mode, gender_info)


def extract_manifest(
    manifest: DatasetManifest,
    out_dir: PathLike,
    frames: Optional[int] = None,
    gender_mode: str = "none",
    sidecar: Optional[dict] = None,
    dataset: str = "",
) -> dict:
    """Write one ``.tbf`` per manifest row and return an extraction log.

    Failures are collected per file rather than raised; the caller decides
    what a non-empty ``failed`` list means.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gender_channels(gender_mode)
    if gender_mode in ("binary", "probabilities") and sidecar is None:
        raise ConfigError(f"gender mode {gender_mode!r} needs a gender sidecar file")

    failed: dict[str, str] = {}
    grids: dict[str, np.ndarray] = {}
    for s in manifest.rows:
        try:
            samples, _ = load_audio(s.audio_path)
            grids[s.utterance_id] = mfcc(samples).astype(np.float32)
        except DataError as exc:
            failed[s.utterance_id] = str(exc)

    lengths = [g.shape[1] for g in grids.values()]
    if frames is None:
        frames = DATASET_FRAMES.get(dataset.lower())
    frame_source = "config"
    if frames is None:
        frames = default_frame_count(lengths) if lengths else 1
        frame_source = "p95"
        logger.info("frame count %d chosen as 95th percentile of %d utterances", frames, len(lengths))

    padded = cropped = 0
    written = []
    for s in manifest.rows:
        if s.utterance_id not in grids:
            continue
        grid = grids[s.utterance_id]
        padded += grid.shape[1] < frames
        cropped += grid.shape[1] > frames
        try:
            info = gender_info_for(s.utterance_id, gender_mode, s.gender, sidecar)
        except DataError as exc:
            failed[s.utterance_id] = str(exc)
            continue
        values = inject_gender(fit_frames(grid, frames), gender_mode, info)
        write_features(out_dir, FeatureMatrix(s.utterance_id, values, gender_mode))
        written.append(s.utterance_id)

    return {
        "dataset": dataset,
        "frames": int(frames),
        "frame_source": frame_source,
        "gender_mode": gender_mode,
        "channels": gender_channels(gender_mode),
        "written": len(written),
        "padded": int(padded),
        "cropped": int(cropped),
        "min_frames": int(min(lengths)) if lengths else 0,
        "max_frames": int(max(lengths)) if lengths else 0,
        "failed": failed,
    }
