"""Feature engineering: RCS normalization, windowing, scaling, splitting.

Turns raw observation streams into fixed-shape standardized 1-second
windows with binary labels: the frequency-normalized RCS feature zeta,
the Doppler-derived tag velocity, linear resampling to a fixed per-window
sample count, z-score standardization fitted on the training split only,
and a seeded 3:1 train/test split.  CSV import/export is lossless for
finite 64-bit floats.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.signal import periodogram

from .synth import (SPEED_OF_LIGHT, BreathScript, ObservationStream, RfConfig,
                    dbm_to_watts, sawtooth_residual_db)

SAMPLES_PER_WINDOW = 28

FEATURES_CSV_HEADER = "window_start,sample_idx,zeta,velocity"
LABELS_CSV_HEADER = "window_start,label"


class SchemaError(ValueError):
    """CSV file does not conform to the documented schema."""


def zeta_from_watts(tx_power_w, reader_gain, p_rx_w, wavelength_m):
    """zeta = P_Tx * G_reader^2 * P_Rx^-1 * (lambda / 4 pi)^4.

    Isolates the tag-state terms G_tag^-2 * r^4 * R^-1 of the link budget.
    """
    p_rx_w = np.asarray(p_rx_w, dtype=float)
    if np.any(p_rx_w <= 0):
        raise ValueError("received power must be > 0")
    return (tx_power_w * reader_gain ** 2 / p_rx_w
            * (wavelength_m / (4.0 * np.pi)) ** 4)


def compute_zeta(rssi_dbm, freq_hz, cfg: RfConfig, remove_residual: bool = True):
    """Frequency-normalized RCS feature from a dBm RSSI record.

    The sawtooth residual is subtracted in the dB domain before converting
    to watts, then the link budget is inverted.
    """
    rssi_dbm = np.asarray(rssi_dbm, dtype=float)
    if remove_residual:
        rssi_dbm = rssi_dbm - sawtooth_residual_db(freq_hz)
    p_rx = dbm_to_watts(rssi_dbm)
    wavelength = SPEED_OF_LIGHT / np.asarray(freq_hz, dtype=float)
    return zeta_from_watts(cfg.tx_power_w, cfg.reader_gain, p_rx, wavelength)


def doppler_velocity(doppler_hz, freq_hz):
    """Radial tag velocity from the Doppler shift: v = f_d * lambda / 2.

    Monostatic backscatter convention (round-trip path).
    """
    wavelength = SPEED_OF_LIGHT / np.asarray(freq_hz, dtype=float)
    return np.asarray(doppler_hz, dtype=float) * wavelength / 2.0


@dataclass(frozen=True)
class FeatureWindow:
    """Fixed-length (zeta, velocity) window with a binary label."""

    samples: np.ndarray  # (samples_per_window, 2)
    label: int
    window_start: float

    def __post_init__(self):
        if self.samples.ndim != 2 or self.samples.shape[1] != 2:
            raise ValueError("samples must have shape (n, 2)")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("window contains non-finite samples")
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")


@dataclass(frozen=True)
class ScalerStats:
    mean: np.ndarray  # per feature
    std: np.ndarray

    def __post_init__(self):
        if np.any(self.std <= 0):
            raise ValueError("zero-variance feature; cannot standardize")


@dataclass
class Dataset:
    train: list
    test: list
    scaler: ScalerStats


def windowize(stream: ObservationStream, script: BreathScript, cfg: RfConfig,
              window_s: float = 1.0,
              samples_per_window: int = SAMPLES_PER_WINDOW) -> list[FeatureWindow]:
    """Slice a stream into contiguous non-overlapping labeled windows.

    NaN records are dropped first; each window is linearly resampled to the
    fixed length; the label is the ground truth at the window midpoint.
    """
    if len(stream) == 0:
        raise ValueError("empty stream")
    zeta = compute_zeta(stream.rssi_dbm, stream.freq_hz, cfg)
    velocity = doppler_velocity(stream.doppler_hz, stream.freq_hz)
    keep = (np.isfinite(stream.timestamp) & np.isfinite(zeta)
            & np.isfinite(velocity))
    times, zeta, velocity = stream.timestamp[keep], zeta[keep], velocity[keep]
    if len(times) == 0:
        raise ValueError("no finite records after NaN filtering")
    duration = times[-1] - times[0]
    if window_s > duration:
        raise ValueError("window longer than stream")

    windows = []
    t0 = times[0]
    n_windows = int(np.ceil((duration + 1e-9) / window_s))
    lo = 0
    for w in range(n_windows):
        start = t0 + w * window_s
        end = start + window_s
        hi = lo
        while hi < len(times) and times[hi] < end:
            hi += 1
        if hi - lo < 2:  # too few records to resample meaningfully
            lo = hi
            continue
        grid = start + (np.arange(samples_per_window) + 0.5) * (window_s / samples_per_window)
        seg_t = times[lo:hi]
        samples = np.column_stack([
            np.interp(grid, seg_t, zeta[lo:hi]),
            np.interp(grid, seg_t, velocity[lo:hi]),
        ])
        mid = start + window_s / 2.0
        label = script.label_at(min(mid, script.total_duration * (1 - 1e-12)))
        windows.append(FeatureWindow(samples, label, float(start)))
        lo = hi
    return windows


def fit_scaler(train: list[FeatureWindow]) -> ScalerStats:
    """Per-feature mean/std over every sample of the training windows."""
    if not train:
        raise ValueError("empty training set")
    stacked = np.concatenate([w.samples for w in train], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    if np.any(std <= 0):
        raise ValueError("zero-variance feature; cannot standardize")
    return ScalerStats(mean=mean, std=std)


def apply_scaler(window: FeatureWindow, stats: ScalerStats) -> FeatureWindow:
    z = (window.samples - stats.mean) / stats.std
    return FeatureWindow(z, window.label, window.window_start)


def split(windows: list[FeatureWindow], seed: int = 0,
          test_fraction: float = 0.25, standardize: bool = True) -> Dataset:
    """Seeded shuffle, 3:1 partition, scaler fitted on train only."""
    if len(windows) < 4:
        raise ValueError("need at least 4 windows to split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(windows))
    n_test = int(round(len(windows) * test_fraction))
    n_test = max(1, min(n_test, len(windows) - 1))
    test = [windows[i] for i in order[:n_test]]
    train = [windows[i] for i in order[n_test:]]
    stats = fit_scaler(train)
    if standardize:
        train = [apply_scaler(w, stats) for w in train]
        test = [apply_scaler(w, stats) for w in test]
    return Dataset(train=train, test=test, scaler=stats)


def band_power(window: FeatureWindow, sample_rate_hz: float,
               band: tuple[float, float] = (0.3, 1.5),
               feature: int = 0) -> float:
    """Mean power of one feature channel inside the respiration band."""
    freqs, psd = periodogram(window.samples[:, feature], fs=sample_rate_hz)
    mask = (freqs >= band[0]) & (freqs <= band[1])
    if not mask.any():
        return 0.0
    return float(psd[mask].mean())


# --- CSV interchange -------------------------------------------------------
#
# features CSV: window_start,sample_idx,zeta,velocity  (one row per sample)
# labels CSV:   window_start,label                     (one row per window)
# UTF-8, LF line endings, shortest round-trip decimal representation.

def export_window_csv(windows: list[FeatureWindow], features_path, labels_path) -> None:
    with open(features_path, "w", newline="\n") as ff, \
         open(labels_path, "w", newline="\n") as lf:
        ff.write(FEATURES_CSV_HEADER + "\n")
        lf.write(LABELS_CSV_HEADER + "\n")
        for w in windows:
            start = float(w.window_start)
            lf.write(f"{start!r},{w.label}\n")
            for i, (zeta, vel) in enumerate(w.samples.tolist()):
                ff.write(f"{start!r},{i},{zeta!r},{vel!r}\n")


def import_window_csv(features_path, labels_path) -> tuple[list[FeatureWindow], int]:
    """Load windows from the two-file schema.

    Rows with non-finite values are dropped (whole window) with a warning;
    returns (windows, dropped_window_count).  Malformed rows and header
    mismatches raise SchemaError with the offending line number.
    """
    labels: dict[float, int] = {}
    with open(labels_path) as lf:
        header = lf.readline().strip()
        if header != LABELS_CSV_HEADER:
            raise SchemaError(f"{labels_path}: bad header {header!r}")
        for lineno, line in enumerate(lf, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise SchemaError(f"{labels_path}:{lineno}: expected 2 columns")
            try:
                labels[float(parts[0])] = int(parts[1])
            except ValueError as exc:
                raise SchemaError(f"{labels_path}:{lineno}: {exc}") from exc

    rows: dict[float, list[tuple[int, float, float]]] = {}
    bad_windows: set[float] = set()
    with open(features_path) as ff:
        header = ff.readline().strip()
        if header != FEATURES_CSV_HEADER:
            raise SchemaError(f"{features_path}: bad header {header!r}")
        for lineno, line in enumerate(ff, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise SchemaError(f"{features_path}:{lineno}: expected 4 columns")
            try:
                start = float(parts[0])
                idx = int(parts[1])
                zeta = float(parts[2])
                vel = float(parts[3])
            except ValueError as exc:
                raise SchemaError(f"{features_path}:{lineno}: {exc}") from exc
            if not (np.isfinite(zeta) and np.isfinite(vel)):
                bad_windows.add(start)
                continue
            rows.setdefault(start, []).append((idx, zeta, vel))

    if bad_windows:
        warnings.warn(f"dropped {len(bad_windows)} window(s) with non-finite values")

    windows = []
    for start in sorted(rows):
        if start in bad_windows:
            continue
        if start not in labels:
            raise SchemaError(f"window_start {start!r} missing from labels file")
        ordered = sorted(rows[start])
        samples = np.array([[z, v] for _, z, v in ordered])
        windows.append(FeatureWindow(samples, labels[start], start))
    return windows, len(bad_windows)


def export_dataset(dataset: Dataset, out_dir) -> None:
    """Write a Dataset as train/test window CSVs plus scaler stats."""
    from pathlib import Path
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    export_window_csv(dataset.train, out / "features_train.csv", out / "labels_train.csv")
    export_window_csv(dataset.test, out / "features_test.csv", out / "labels_test.csv")
    with open(out / "scaler.csv", "w", newline="\n") as fh:
        fh.write("feature,mean,std\n")
        for i in range(len(dataset.scaler.mean)):
            fh.write(f"{i},{float(dataset.scaler.mean[i])!r},"
                     f"{float(dataset.scaler.std[i])!r}\n")


def import_dataset(in_dir) -> Dataset:
    from pathlib import Path
    src = Path(in_dir)
    train, _ = import_window_csv(src / "features_train.csv", src / "labels_train.csv")
    test, _ = import_window_csv(src / "features_test.csv", src / "labels_test.csv")
    with open(src / "scaler.csv") as fh:
        header = fh.readline().strip()
        if header != "feature,mean,std":
            raise SchemaError(f"scaler.csv: bad header {header!r}")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    mean = np.array([float(r[1]) for r in rows])
    std = np.array([float(r[2]) for r in rows])
    return Dataset(train=train, test=test, scaler=ScalerStats(mean, std))
