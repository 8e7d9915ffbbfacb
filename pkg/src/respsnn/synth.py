"""Synthetic RFID observation streams from a programmable breathing script.

Models a mannequin wearing a passive backscatter tag interrogated over 50
hopping channels in the 900 MHz ISM band.  Chest excursion during breathing
segments sinusoidally modulates tag distance and gain; the received power
follows the radar-cross-section link budget, with a small log-domain
sawtooth residual that tracks the hopped channel frequency, plus Gaussian
noise.  Everything is a pure, seeded function of its inputs.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0  # m/s

CSV_HEADER = "timestamp,rssi_dbm,phase_rad,doppler_hz,channel,freq_hz"

BREATHING = "breathing"
APNEA = "apnea"


@dataclass(frozen=True)
class Segment:
    state: str  # BREATHING or APNEA
    duration_s: float
    rate_bpm: float = 0.0  # breaths per minute, breathing segments only

    def __post_init__(self):
        if self.state not in (BREATHING, APNEA):
            raise ValueError(f"unknown segment state {self.state!r}")
        if self.duration_s <= 0:
            raise ValueError("segment duration must be > 0")
        if self.state == BREATHING and self.rate_bpm <= 0:
            raise ValueError("breathing segments need rate_bpm > 0")


@dataclass(frozen=True)
class BreathScript:
    """Ordered breathing/apnea schedule with closed-open segment intervals."""

    segments: tuple[Segment, ...]

    def __post_init__(self):
        if not self.segments:
            raise ValueError("script needs at least one segment")

    @property
    def total_duration(self) -> float:
        return float(sum(s.duration_s for s in self.segments))

    def segment_starts(self) -> np.ndarray:
        return np.concatenate(
            [[0.0], np.cumsum([s.duration_s for s in self.segments])]
        )

    def segment_at(self, t: float) -> tuple[Segment, float]:
        """Segment covering time t plus the segment start time.

        Segments are closed-open [start, end), so a boundary instant belongs
        to the segment that starts there.
        """
        if t < 0 or t >= self.total_duration:
            raise ValueError(f"t={t} outside [0, {self.total_duration})")
        starts = self.segment_starts()
        idx = int(np.searchsorted(starts, t, side="right")) - 1
        return self.segments[idx], float(starts[idx])

    def label_at(self, t: float) -> int:
        """Ground-truth label: 1 while breathing, 0 during apnea."""
        seg, _ = self.segment_at(t)
        return 1 if seg.state == BREATHING else 0


def ground_truth(script: BreathScript, t: float) -> int:
    return script.label_at(t)


def default_script(total_duration_s: float = 3600.0,
                   breathing_rate_bpm: float = 31.0,
                   breathing_duration_s: float = 60.0) -> BreathScript:
    """One-hour schedule alternating breathing with 30/45/60 s apnea pauses.

    Breathing intervals run at 31 bpm; pauses cycle through 30, 45 and 60
    seconds.  If a pause would overrun the total duration it is replaced by
    breathing so that every apnea segment keeps a duration from {30,45,60}.
    """
    apnea_cycle = (30.0, 45.0, 60.0)
    segments: list[Segment] = []
    t = 0.0
    apnea_idx = 0
    breathing_turn = True
    while t < total_duration_s:
        remaining = total_duration_s - t
        if breathing_turn:
            dur = min(breathing_duration_s, remaining)
            segments.append(Segment(BREATHING, dur, breathing_rate_bpm))
        else:
            dur = apnea_cycle[apnea_idx % len(apnea_cycle)]
            if dur > remaining:
                # tail too short for a canonical pause; fill with breathing
                segments.append(Segment(BREATHING, remaining, breathing_rate_bpm))
                t = total_duration_s
                break
            segments.append(Segment(APNEA, dur))
            apnea_idx += 1
        t += dur
        breathing_turn = not breathing_turn
    return BreathScript(tuple(segments))


@dataclass(frozen=True)
class RfConfig:
    """Interrogator/channel parameters for the backscatter link model."""

    tx_power_w: float = 1.0
    reader_gain: float = 6.0
    tag_gain: float = 1.5
    distance_m: float = 0.3048  # interrogator 1 ft from the mannequin
    return_loss: float = 0.5
    channel_count: int = 50
    band_center_hz: float = 915e6
    channel_spacing_hz: float = 500e3
    interrogation_rate_hz: float = 28.0
    noise_sigma_db: float = 0.05
    breath_amplitude_m: float = 0.005  # chest excursion amplitude
    gain_mod_frac: float = 0.05  # fractional tag-gain swing at full excursion
    seed: int = 0

    def __post_init__(self):
        for name in ("tx_power_w", "reader_gain", "tag_gain", "distance_m",
                     "return_loss", "band_center_hz", "channel_spacing_hz"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.channel_count < 1:
            raise ValueError("channel_count must be >= 1")
        if self.interrogation_rate_hz <= 0:
            raise ValueError("interrogation_rate_hz must be > 0")
        if self.noise_sigma_db < 0:
            raise ValueError("noise_sigma_db must be >= 0")

    def channel_frequencies(self) -> np.ndarray:
        offsets = np.arange(self.channel_count) - (self.channel_count - 1) / 2.0
        return self.band_center_hz + offsets * self.channel_spacing_hz


@dataclass
class ObservationStream:
    """Columnar timestamped interrogation records."""

    timestamp: np.ndarray
    rssi_dbm: np.ndarray
    phase_rad: np.ndarray
    doppler_hz: np.ndarray
    channel: np.ndarray
    freq_hz: np.ndarray

    def __len__(self) -> int:
        return len(self.timestamp)

    def __post_init__(self):
        n = len(self.timestamp)
        for name in ("rssi_dbm", "phase_rad", "doppler_hz", "channel", "freq_hz"):
            if len(getattr(self, name)) != n:
                raise ValueError("column length mismatch")
        finite_t = self.timestamp[np.isfinite(self.timestamp)]
        if len(finite_t) > 1 and not np.all(np.diff(finite_t) > 0):
            raise ValueError("timestamps must be strictly increasing")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            self.write_csv(fh)

    def write_csv(self, fh) -> None:
        fh.write(CSV_HEADER + "\n")
        cols = (self.timestamp.tolist(), self.rssi_dbm.tolist(),
                self.phase_rad.tolist(), self.doppler_hz.tolist(),
                self.channel.tolist(), self.freq_hz.tolist())
        for ts, rssi, phase, dop, chan, freq in zip(*cols):
            fh.write(f"{ts!r},{rssi!r},{phase!r},{dop!r},{int(chan)},{freq!r}\n")

    @classmethod
    def from_csv(cls, path) -> "ObservationStream":
        with open(path) as fh:
            return cls.read_csv(fh)

    @classmethod
    def read_csv(cls, fh) -> "ObservationStream":
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise ValueError(f"unexpected header {header!r}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
        if data.size == 0:
            data = data.reshape(0, 6)
        return cls(
            timestamp=data[:, 0], rssi_dbm=data[:, 1], phase_rad=data[:, 2],
            doppler_hz=data[:, 3], channel=data[:, 4].astype(int),
            freq_hz=data[:, 5],
        )


def sawtooth_residual_db(freq_hz: np.ndarray | float) -> np.ndarray | float:
    """Log-domain residual from RSSI quantization across hopped channels.

    delta = -10*log10(f^4 / (f - 0.5 MHz)^4), about -0.0094 dB near 915 MHz,
    varying sawtooth-like as the channel index hops.
    """
    f = np.asarray(freq_hz, dtype=float)
    return -10.0 * np.log10(f ** 4 / (f - 0.5e6) ** 4)


def received_power_w(tx_power_w, reader_gain, tag_gain, return_loss,
                     wavelength_m, distance_m):
    """RCS link budget: P_Rx = P_Tx G_reader^2 G_tag^2 R (lambda/4pi)^4 / r^4."""
    return (tx_power_w * reader_gain ** 2 * tag_gain ** 2 * return_loss
            * (wavelength_m / (4.0 * np.pi)) ** 4 / distance_m ** 4)


def watts_to_dbm(p_w):
    return 10.0 * np.log10(np.asarray(p_w, dtype=float) * 1e3)


def dbm_to_watts(p_dbm):
    return 10.0 ** (np.asarray(p_dbm, dtype=float) / 10.0) / 1e3


def _excursion(script: BreathScript, times: np.ndarray, amplitude_m: float):
    """Chest displacement and its time derivative at each timestamp.

    Displacement is a per-segment sine at the scripted breathing rate,
    zero during apnea.
    """
    disp = np.zeros_like(times)
    vel = np.zeros_like(times)
    starts = script.segment_starts()
    for i, seg in enumerate(script.segments):
        if seg.state != BREATHING:
            continue
        mask = (times >= starts[i]) & (times < starts[i + 1])
        if not mask.any():
            continue
        omega = 2.0 * np.pi * seg.rate_bpm / 60.0
        local = times[mask] - starts[i]
        disp[mask] = amplitude_m * np.sin(omega * local)
        vel[mask] = amplitude_m * omega * np.cos(omega * local)
    return disp, vel


def modeled_tag_state(script: BreathScript, cfg: RfConfig, times: np.ndarray):
    """Instantaneous (tag gain, distance, radial velocity) ground truth."""
    disp, vel = _excursion(script, times, cfg.breath_amplitude_m)
    if cfg.breath_amplitude_m > 0:
        gain = cfg.tag_gain * (1.0 + cfg.gain_mod_frac * disp / cfg.breath_amplitude_m)
    else:
        gain = np.full_like(times, cfg.tag_gain)
    distance = cfg.distance_m + disp
    return gain, distance, vel


def synthesize(script: BreathScript, cfg: RfConfig) -> ObservationStream:
    """Forward model: breathing script + RF config -> observation stream.

    Deterministic given cfg.seed.  With noise_sigma_db = 0 the RCS link
    budget holds exactly for every record (after removing the sawtooth
    residual), so the feature stage can invert it.
    """
    rng = np.random.default_rng(cfg.seed)
    n = int(round(script.total_duration * cfg.interrogation_rate_hz))
    times = np.arange(n) / cfg.interrogation_rate_hz

    channel = rng.integers(0, cfg.channel_count, size=n)
    freqs = cfg.channel_frequencies()[channel]
    wavelength = SPEED_OF_LIGHT / freqs

    gain, distance, velocity = modeled_tag_state(script, cfg, times)

    p_rx = received_power_w(cfg.tx_power_w, cfg.reader_gain, gain,
                            cfg.return_loss, wavelength, distance)
    rssi = watts_to_dbm(p_rx) + sawtooth_residual_db(freqs)
    if cfg.noise_sigma_db > 0:
        rssi = rssi + rng.normal(0.0, cfg.noise_sigma_db, size=n)

    doppler = 2.0 * velocity / wavelength
    phase = np.mod(4.0 * np.pi * distance / wavelength, 2.0 * np.pi)

    return ObservationStream(
        timestamp=times, rssi_dbm=rssi, phase_rad=phase,
        doppler_hz=doppler, channel=channel, freq_hz=freqs,
    )


# --- script config text format -------------------------------------------
#
# One segment per line, in order:
#   segment = breathing,<duration_s>,<rate_bpm>
#   segment = apnea,<duration_s>
# Blank lines and lines starting with '#' are ignored.

def parse_script(text: str) -> BreathScript:
    segments = []
    for lineno, raw in enumerate(io.StringIO(text), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        if key.strip() != "segment":
            raise ValueError(f"line {lineno}: expected 'segment = ...'")
        parts = [p.strip() for p in value.split(",")]
        try:
            if parts[0] == BREATHING:
                segments.append(Segment(BREATHING, float(parts[1]), float(parts[2])))
            elif parts[0] == APNEA:
                segments.append(Segment(APNEA, float(parts[1])))
            else:
                raise ValueError(f"unknown state {parts[0]!r}")
        except (IndexError, ValueError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc
    return BreathScript(tuple(segments))


def format_script(script: BreathScript) -> str:
    lines = []
    for seg in script.segments:
        if seg.state == BREATHING:
            lines.append(f"segment = breathing,{seg.duration_s!r},{seg.rate_bpm!r}")
        else:
            lines.append(f"segment = apnea,{seg.duration_s!r}")
    return "\n".join(lines) + "\n"
