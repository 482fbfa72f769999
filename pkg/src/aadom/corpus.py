"""Audio I/O, DCASE-style dataset manifests and a synthetic machine corpus."""

from __future__ import annotations

import json
import logging
import math
import re
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    AmbiguousFilename,
    EmptyDataset,
    InvalidConfig,
    MalformedWav,
    UnsupportedEncoding,
)

logger = logging.getLogger(__name__)

MACHINES = ("Bearing", "Fan", "Gearbox", "Slider", "ToyCar", "ToyTrain", "Valve")
DOMAINS = ("source", "target")
SPLITS = ("train", "test")
LABELS = ("normal", "anomaly", "unknown")
DEFAULT_SAMPLE_RATE = 16000

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE

_NAME_RE = re.compile(
    r"section_(?P<section>\d+)_(?P<domain>[a-z]+)_(?P<split>[a-z]+)"
    r"(?:_(?P<label>normal|anomaly))?_(?P<index>\d+)"
)


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("AudioClip needs a non-empty 1-D sample array")
        if not np.all(np.isfinite(samples)):
            raise ValueError("AudioClip samples must be finite")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class ClipMeta:
    machine: str
    section: int
    domain: str
    split: str
    label: str
    path: str
    pseudo: bool = False

    def __post_init__(self):
        if self.machine not in MACHINES:
            raise ValueError(f"unknown machine {self.machine!r}")
        if self.section not in (0, 1, 2):
            raise ValueError(f"section must be 0, 1 or 2, got {self.section}")
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")
        if self.split == "train" and self.label != "normal":
            raise ValueError("train clips are always labelled normal")


@dataclass(frozen=True)
class Manifest:
    entries: tuple[ClipMeta, ...]
    root: str
    skipped: tuple[str, ...] = ()

    def __post_init__(self):
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest paths must be unique")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def select(self, **criteria) -> "Manifest":
        """Sub-manifest of entries whose attributes equal every given value."""
        keep = tuple(
            e for e in self.entries
            if all(getattr(e, k) == v for k, v in criteria.items())
        )
        return Manifest(keep, self.root)

    def counts(self, *keys: str) -> dict:
        out: dict = {}
        for e in self.entries:
            k = tuple(getattr(e, name) for name in keys)
            k = k[0] if len(k) == 1 else k
            out[k] = out.get(k, 0) + 1
        return out

    def to_json(self) -> str:
        return json.dumps([asdict(e) for e in self.entries], indent=1)

    @classmethod
    def from_json(cls, text: str, root: str = "") -> "Manifest":
        return cls(tuple(ClipMeta(**rec) for rec in json.loads(text)), root)


# --------------------------------------------------------------------------
# WAV I/O


def _decode_format(fmt: bytes) -> tuple[int, int, int, int]:
    if len(fmt) < 16:
        raise MalformedWav("fmt chunk shorter than 16 bytes")
    tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == _WAVE_FORMAT_EXTENSIBLE:
        if len(fmt) < 40:
            raise MalformedWav("extensible fmt chunk truncated")
        tag = struct.unpack("<H", fmt[24:26])[0]
    if channels == 0 or rate == 0 or block_align == 0:
        raise MalformedWav("fmt chunk has zero channels, rate or block size")
    return tag, channels, rate, bits


def read_wav(path) -> AudioClip:
    """Read a RIFF/WAVE file into a mono clip scaled to [-1, 1].

    PCM 16/32-bit integer and 32-bit IEEE float are accepted. Multi-channel
    data are averaged to mono.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise MalformedWav(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid, size = struct.unpack("<4sI", raw[pos:pos + 8])
        body = raw[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise MalformedWav(f"{path}: chunk {cid!r} truncated ({len(body)} of {size} bytes)")
        if cid == b"fmt ":
            fmt = _decode_format(body)
        elif cid == b"data":
            data = body
            break
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise MalformedWav(f"{path}: missing fmt or data chunk")

    tag, channels, rate, bits = fmt
    if tag == _WAVE_FORMAT_PCM and bits == 16:
        x = np.frombuffer(data, dtype="<i2", count=len(data) // 2).astype(np.float64) / 32768.0
    elif tag == _WAVE_FORMAT_PCM and bits == 32:
        x = np.frombuffer(data, dtype="<i4", count=len(data) // 4).astype(np.float64) / 2147483648.0
    elif tag == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        x = np.frombuffer(data, dtype="<f4", count=len(data) // 4).astype(np.float64)
    else:
        raise UnsupportedEncoding(f"{path}: format tag {tag:#06x} with {bits} bits")
    if x.size % channels:
        raise MalformedWav(f"{path}: data length is not a whole number of frames")
    if x.size == 0:
        raise MalformedWav(f"{path}: empty data chunk")
    if channels > 1:
        x = x.reshape(-1, channels).mean(axis=1)
    if not np.all(np.isfinite(x)):
        raise MalformedWav(f"{path}: non-finite samples")
    return AudioClip(np.clip(x, -1.0, 1.0), rate)


def write_wav(path, clip: AudioClip, encoding: str = "pcm16") -> None:
    """Write a mono clip as PCM16 (default) or 32-bit float WAV."""
    x = np.clip(clip.samples, -1.0, 1.0)
    if encoding == "pcm16":
        payload = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
        tag, bits = _WAVE_FORMAT_PCM, 16
    elif encoding == "float32":
        payload = x.astype("<f4").tobytes()
        tag, bits = _WAVE_FORMAT_IEEE_FLOAT, 32
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    block = bits // 8
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, tag, 1, clip.sample_rate,
                                    clip.sample_rate * block, block, bits)
    header += b"data" + struct.pack("<I", len(payload))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + payload)


def resample_linear(clip: AudioClip, sample_rate: int) -> AudioClip:
    if clip.sample_rate == sample_rate:
        return clip
    n_out = max(1, int(round(len(clip) * sample_rate / clip.sample_rate)))
    t_out = np.arange(n_out) / sample_rate
    t_in = np.arange(len(clip)) / clip.sample_rate
    return AudioClip(np.interp(t_out, t_in, clip.samples), sample_rate)


def load_clip(path, sample_rate: int = DEFAULT_SAMPLE_RATE) -> AudioClip:
    return resample_linear(read_wav(path), sample_rate)


# --------------------------------------------------------------------------
# Dataset scanning


def parse_clip_name(name: str, machine: str, split: str, path: str = "",
                    pseudo: bool = False) -> ClipMeta:
    """Parse DCASE tokens ``section_<NN>_<domain>_<split>[_<label>]_<index>``.

    Trailing attribute tokens (and, for pseudo clips, a leading prefix) are
    tolerated.
    """
    m = _NAME_RE.search(name)
    if m is None:
        raise AmbiguousFilename(f"{name}: missing section/domain/split tokens")
    section = int(m["section"])
    if section not in (0, 1, 2) or m["domain"] not in DOMAINS or m["split"] != split:
        raise AmbiguousFilename(f"{name}: tokens inconsistent with {split!r} directory")
    label = m["label"] or ("normal" if split == "train" else "unknown")
    return ClipMeta(machine, section, m["domain"], split, label, path or name, pseudo)


def _machine_dir(root: Path, machine: str) -> Path:
    if machine not in MACHINES:
        raise ValueError(f"unknown machine {machine!r}; expected one of {MACHINES}")
    for cand in (root / machine, root / machine.lower()):
        if cand.is_dir():
            return cand
    raise EmptyDataset(f"no directory for {machine} under {root}")


def scan_dataset(root, machine: str, strict: bool = True) -> Manifest:
    """Build a manifest for ``<root>/<machine>/{train,test}`` (plus ``pseudo``).

    Non-WAV files are skipped with a warning. WAV files whose names lack the
    DCASE tokens raise AmbiguousFilename unless ``strict`` is false, in which
    case they are listed in ``Manifest.skipped``.
    """
    root = Path(root)
    mdir = _machine_dir(root, machine)
    entries: list[ClipMeta] = []
    skipped: list[str] = []
    bad: list[str] = []
    for sub, split, pseudo in (("train", "train", False), ("test", "test", False),
                               ("pseudo", "train", True)):
        d = mdir / sub
        if not d.is_dir():
            if not pseudo:
                raise EmptyDataset(f"missing directory {d}")
            continue
        for p in sorted(d.iterdir()):
            if not p.is_file():
                continue
            if p.suffix.lower() != ".wav":
                logger.warning("skipping non-wav file %s", p)
                skipped.append(str(p))
                continue
            try:
                entries.append(parse_clip_name(p.name, machine, split, str(p), pseudo))
            except AmbiguousFilename:
                bad.append(str(p))
    if bad:
        if strict:
            raise AmbiguousFilename(f"{len(bad)} unparsable file names, e.g. {bad[0]}")
        for b in bad:
            logger.warning("skipping unparsable file %s", b)
        skipped.extend(bad)
    if not entries:
        raise EmptyDataset(f"no clips found for {machine} under {root}")
    entries.sort(key=lambda e: e.path)
    return Manifest(tuple(entries), str(root), tuple(sorted(skipped)))


# --------------------------------------------------------------------------
# Synthetic corpus


def _default_section_tones():
    # per section: out-of-band identity tones plus one in the 2-5 kHz region
    return [[420.0, 1130.0, 2650.0, 6150.0],
            [610.0, 1470.0, 3270.0, 6720.0],
            [830.0, 1760.0, 4310.0, 7260.0]]


@dataclass
class SynthConfig:
    machine: str = "Slider"
    sample_rate: int = DEFAULT_SAMPLE_RATE
    duration_s: float = 10.0
    section_tones: list = field(default_factory=_default_section_tones)
    tone_amplitude: float = 0.08
    tone_jitter: float = 0.1
    noise_level: float = 0.01
    nuisance_tones: int = 4
    nuisance_amplitude: float = 0.12
    anomaly_band: tuple = (2000.0, 5000.0)
    anomaly_tone_hz: float | None = None
    anomaly_amplitude: float = 0.08
    target_detune: float = 0.01
    n_train: int = 200
    train_target_fraction: float = 0.05
    n_test_normal: int = 20
    n_test_anomaly: int = 20

    def validate(self) -> None:
        nyq = self.sample_rate / 2
        lo, hi = self.anomaly_band
        if not 0 <= lo < hi:
            raise InvalidConfig(f"anomaly band {self.anomaly_band} is empty")
        if hi > nyq:
            raise InvalidConfig(f"anomaly band upper edge {hi} Hz above Nyquist {nyq} Hz")
        if self.anomaly_tone_hz is not None and not lo <= self.anomaly_tone_hz <= hi:
            raise InvalidConfig("anomaly tone lies outside the anomaly band")
        if self.machine not in MACHINES:
            raise InvalidConfig(f"unknown machine {self.machine!r}")
        if not 1 <= len(self.section_tones) <= 3:
            raise InvalidConfig("between one and three sections are supported")
        top = max(f for tones in self.section_tones for f in tones) * (1 + self.target_detune)
        if top >= nyq:
            raise InvalidConfig("section tones (after target detune) reach Nyquist")
        if self.duration_s <= 0 or self.n_train < 1:
            raise InvalidConfig("duration and train count must be positive")
        if min(self.n_test_normal, self.n_test_anomaly) < 0:
            raise InvalidConfig("test counts must be non-negative")
        if not 0 <= self.train_target_fraction <= 1:
            raise InvalidConfig("train_target_fraction must lie in [0, 1]")
        if self.anomaly_amplitude ** 2 / 2 <= 2 * self._normal_band_energy_spread():
            raise InvalidConfig(
                "anomaly tone too weak: its power must exceed twice the spread of "
                "normal in-band power")

    def _normal_band_energy_spread(self) -> float:
        # worst-case mean-power spread of in-band section tones under amplitude
        # jitter, plus a generous allowance for noise power fluctuation
        lo, hi = self.anomaly_band
        a, j = self.tone_amplitude, self.tone_jitter
        worst = 0.0
        for tones in self.section_tones:
            n_in = sum(1 for f in tones for d in (1.0, 1 + self.target_detune)
                       if lo <= f * d <= hi) / 2
            worst = max(worst, n_in * a * a * 2 * j)
        frac = (hi - lo) / (self.sample_rate / 2)
        n = self.sample_rate * self.duration_s
        noise_sd = self.noise_level ** 2 * frac * 6 / math.sqrt(n * frac)
        return worst + noise_sd

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SynthConfig":
        data = json.loads(text)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown synth config keys {sorted(unknown)}")
        if "anomaly_band" in data:
            data["anomaly_band"] = tuple(data["anomaly_band"])
        return cls(**data)


def _nuisance_freq(rng, cfg: SynthConfig) -> float:
    # irrelevant lines kept 200 Hz clear of the anomaly band
    lo, hi = cfg.anomaly_band
    nyq = cfg.sample_rate / 2
    spans = [(50.0, lo - 200.0), (hi + 200.0, nyq - 100.0)]
    spans = [(a, b) for a, b in spans if b > a]
    if not spans:
        return 0.0
    widths = np.array([b - a for a, b in spans])
    k = rng.choice(len(spans), p=widths / widths.sum())
    return float(rng.uniform(*spans[k]))


def synth_clip(cfg: SynthConfig, section: int, domain: str, anomalous: bool,
               rng: np.random.Generator) -> AudioClip:
    n = int(round(cfg.sample_rate * cfg.duration_s))
    t = np.arange(n) / cfg.sample_rate
    detune = 1.0 + (cfg.target_detune if domain == "target" else 0.0)
    x = cfg.noise_level * rng.standard_normal(n)
    for f in cfg.section_tones[section]:
        amp = cfg.tone_amplitude * rng.uniform(1 - cfg.tone_jitter, 1 + cfg.tone_jitter)
        x += amp * np.sin(2 * np.pi * f * detune * t + rng.uniform(0, 2 * np.pi))
    for _ in range(cfg.nuisance_tones):
        f = _nuisance_freq(rng, cfg)
        amp = cfg.nuisance_amplitude * rng.uniform(0.2, 1.0)
        x += amp * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    if anomalous:
        lo, hi = cfg.anomaly_band
        f = cfg.anomaly_tone_hz if cfg.anomaly_tone_hz is not None else rng.uniform(lo, hi)
        x += cfg.anomaly_amplitude * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    peak = np.max(np.abs(x))
    if peak >= 1.0:
        raise InvalidConfig(f"synthetic clip clips (peak {peak:.2f}); lower the amplitudes")
    return AudioClip(x, cfg.sample_rate)


def _plan(cfg: SynthConfig) -> list[tuple[str, int, str, str, int]]:
    """(split, section, domain, label, index) for every clip, round-robin over sections."""
    n_sec = len(cfg.section_tones)
    plan = []
    n_target = int(round(cfg.n_train * cfg.train_target_fraction))
    for i in range(cfg.n_train):
        domain = "target" if i >= cfg.n_train - n_target else "source"
        plan.append(("train", i % n_sec, domain, "normal", i))
    for label, count in (("normal", cfg.n_test_normal), ("anomaly", cfg.n_test_anomaly)):
        for i in range(count):
            plan.append(("test", i % n_sec, DOMAINS[(i // n_sec) % 2], label, i))
    return plan


def generate_synthetic_corpus(cfg: SynthConfig, seed: int, root) -> Manifest:
    """Write a DCASE-shaped synthetic corpus under ``root/<machine>``.

    Every clip draws from its own generator seeded by (seed, clip number), so
    the output is byte-identical for a given seed.
    """
    cfg.validate()
    root = Path(root)
    mdir = root / cfg.machine
    entries = []
    for k, (split, section, domain, label, idx) in enumerate(_plan(cfg)):
        rng = np.random.default_rng([seed, k])
        clip = synth_clip(cfg, section, domain, label == "anomaly", rng)
        name = f"section_{section:02d}_{domain}_{split}_{label}_{idx:04d}_synth.wav"
        path = mdir / split / name
        write_wav(path, clip)
        entries.append(ClipMeta(cfg.machine, section, domain, split, label, str(path)))
    (mdir / "synth_config.json").write_text(cfg.to_json())
    entries.sort(key=lambda e: e.path)
    return Manifest(tuple(entries), str(root))


def band_energy(clip: AudioClip, f_lo: float, f_hi: float) -> float:
    """Mean power of the clip restricted to [f_lo, f_hi] (whole-clip FFT)."""
    spec = np.fft.rfft(clip.samples)
    freqs = np.fft.rfftfreq(len(clip), 1.0 / clip.sample_rate)
    sel = (freqs >= f_lo) & (freqs <= f_hi)
    return float(2.0 * np.sum(np.abs(spec[sel]) ** 2) / len(clip) ** 2)
