"""Configuration and the end-to-end train / embed / fit / score / evaluate flow.

Artifacts written under an output directory ``out``::

    manifest.json
    train_log.csv
    checkpoints/epoch_NNN.aadm
    embeddings/epoch_NNN.csv        clip_path, segment_index, e0..e{d-1}
    references/section_NN.json
    scores.csv
    report.csv / report.md / report_plot.csv

Log-mel features are cached as AADS files keyed by a hash of the audio bytes
and the feature settings, under ``AAD_CACHE_DIR`` (default ``<out>/cache``).
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock

from .anomaly import METRICS, REDUCERS, ReferenceModel, decide, fit_reference, score_clip
from .augment import AugmentConfig, LabeledBatch, pitch_shift
from .corpus import MACHINES, ClipMeta, Manifest, load_clip, read_wav, scan_dataset, write_wav
from .dsp import FrequencyBand, build_mel_filterbank, full_band, read_spectrogram_cache, \
    write_spectrogram_cache
from .errors import EmptyDataset, InvalidConfig, InvalidGrid, InvalidP, IoFailure, QOutOfRange
from .metrics import EvalReport, ScoredSet, emit_report, evaluate_scores, run_threshold_sweep
from .net.checkpoint import load_checkpoint, save_checkpoint
from .net.embed import Embedding, clip_features, extract_embeddings
from .net.model import MIN_FRAMES, ModelConfig, build_model
from .net.train import train

logger = logging.getLogger(__name__)

N_SECTIONS = 3
PSEUDO_DIR = "pseudo"
DEFAULT_Q_GRID = tuple(round(0.85 + 0.01 * i, 2) for i in range(11))


# --------------------------------------------------------------------------
# Configuration


@dataclass
class StftConfig:
    n_fft: int = 2048
    hop: int = 1024


@dataclass
class BandConfig:
    f_lo: float = 0.0
    f_hi: float = 8000.0

    def band(self) -> FrequencyBand:
        return FrequencyBand(float(self.f_lo), float(self.f_hi))


@dataclass
class SegmentConfig:
    len_s: float = 2.5
    overlap: float = 0.5


@dataclass
class AugmentSection(AugmentConfig):
    pseudo: bool = True
    specaug: bool = True
    mixup: bool = True

    def core(self) -> AugmentConfig:
        return AugmentConfig(list(self.pitch_semitones), self.specaug_time_width,
                             self.specaug_freq_width, self.mixup_beta_alpha,
                             self.mixup_uniform_prob)


@dataclass
class ModelSection:
    width_mult: float = 1.0
    dropout_rate: float = 0.3
    embedding: str = "softmax"


@dataclass
class TrainSection:
    epochs: int = 30
    lr: float = 1e-4
    batch_size: int = 32
    checkpoint_every: int = 20
    seed: int = 0
    pool_checkpoints: bool = False


@dataclass
class AnomalySection:
    metric: str = "mahalanobis"
    q: float = 0.9
    reducer: str = "mean"
    cov_reg: float = 1e-3


@dataclass
class EvalSection:
    pauc_p: float = 0.1
    q_grid: list = field(default_factory=lambda: list(DEFAULT_Q_GRID))


@dataclass
class PipelineConfig:
    dataset_root: str = "data"
    machine: str = "Slider"
    sample_rate: int = 16000
    stft: StftConfig = field(default_factory=StftConfig)
    n_mels: int = 128
    band: BandConfig | None = None  # None = full band
    segmenting: bool = True
    segment: SegmentConfig = field(default_factory=SegmentConfig)
    augment: AugmentSection = field(default_factory=AugmentSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    anomaly: AnomalySection = field(default_factory=AnomalySection)
    eval: EvalSection = field(default_factory=EvalSection)
    cache_dir: str | None = None

    # -- derived -----------------------------------------------------------
    @property
    def frequency_band(self) -> FrequencyBand:
        return self.band.band() if self.band is not None else full_band(self.sample_rate)

    def segment_frames(self) -> int:
        n = int(round(self.segment.len_s * self.sample_rate)) if self.segmenting \
            else None
        if n is None:
            return MIN_FRAMES  # whole clips are checked when loaded
        return (n - self.stft.n_fft) // self.stft.hop + 1

    def model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig(num_classes, self.model.width_mult, self.model.dropout_rate,
                           self.n_mels, self.model.embedding)

    def with_band(self, band: FrequencyBand | None) -> "PipelineConfig":
        cfg = copy.deepcopy(self)
        cfg.band = None if band is None else BandConfig(band.f_lo, band.f_hi)
        return cfg

    # -- validation --------------------------------------------------------
    def validate(self) -> None:
        if self.machine not in MACHINES:
            raise InvalidConfig(f"machine must be one of {MACHINES}")
        if self.sample_rate <= 0:
            raise InvalidConfig("sample_rate must be positive")
        n_fft, hop = self.stft.n_fft, self.stft.hop
        if n_fft < 16 or n_fft & (n_fft - 1) or not 0 < hop <= n_fft:
            raise InvalidConfig("stft.n_fft must be a power of two >= 16 and 0 < hop <= n_fft")
        if not 16 <= self.n_mels <= n_fft // 2:
            raise InvalidConfig("n_mels must lie in [16, n_fft / 2]")
        if self.band is not None:
            try:
                self.band.band().validate(self.sample_rate)
            except ValueError as exc:
                raise InvalidConfig(str(exc)) from None
        if self.segment.len_s <= 0 or not 0 <= self.segment.overlap < 1:
            raise InvalidConfig("segment length must be positive and overlap in [0, 1)")
        frames = self.segment_frames()
        if self.segmenting and frames < MIN_FRAMES:
            raise InvalidConfig(
                f"segments of {self.segment.len_s} s give {frames} frames; need >= {MIN_FRAMES}")
        self.augment.validate()
        if self.augment.specaug and (self.augment.specaug_time_width >= frames
                                     or self.augment.specaug_freq_width >= self.n_mels):
            raise InvalidConfig("SpecAugment widths must be smaller than the input size")
        self.model_config(N_SECTIONS + 1).validate()
        t = self.train
        if t.epochs < 1 or t.batch_size < 1 or t.checkpoint_every < 1 or t.lr < 0:
            raise InvalidConfig("epochs, batch_size and checkpoint_every must be >= 1, lr >= 0")
        a = self.anomaly
        if a.metric not in METRICS:
            raise InvalidConfig(f"anomaly.metric must be one of {METRICS}")
        if a.reducer not in REDUCERS:
            raise InvalidConfig(f"anomaly.reducer must be one of {REDUCERS}")
        if not 0 < a.q < 1:
            raise QOutOfRange(f"anomaly.q must lie in (0, 1), got {a.q}")
        if a.cov_reg < 0:
            raise InvalidConfig("anomaly.cov_reg must be non-negative")
        if not 0 < self.eval.pauc_p <= 1:
            raise InvalidP(f"eval.pauc_p must lie in (0, 1], got {self.eval.pauc_p}")
        grid = self.eval.q_grid
        if not grid or any(not 0 < q < 1 for q in grid) or len(set(grid)) != len(grid):
            raise InvalidGrid(f"eval.q_grid must hold distinct values in (0, 1): {grid}")

    # -- (de)serialisation -------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        return _build(cls, data, "")


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise InvalidConfig(f"{where or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise InvalidConfig(f"unknown config keys in {where or 'top level'}: {sorted(unknown)}")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for name, value in data.items():
        sub = _nested_type(hints[name])
        path = f"{where}.{name}" if where else name
        if sub is not None and value is not None:
            kwargs[name] = _build(sub, value, path)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _nested_type(hint):
    for t in (hint, *typing.get_args(hint)):
        if dataclasses.is_dataclass(t):
            return t
    return None


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Read a JSON config (missing keys take defaults), apply dotted overrides, validate."""
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise InvalidConfig(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"config {path} is not valid JSON: {exc}") from None
    for key, value in (overrides or {}).items():
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise InvalidConfig(f"cannot override {key}")
        node[parts[-1]] = value
    try:
        cfg = PipelineConfig.from_dict(data)
    except TypeError as exc:
        raise InvalidConfig(f"bad config: {exc}") from None
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------
# Features


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def cache_root(cfg: PipelineConfig, out) -> Path:
    env = os.environ.get("AAD_CACHE_DIR")
    return Path(env or cfg.cache_dir or Path(out) / "cache")


class FeatureStore:
    """Log-mel stacks per clip, memoised in memory and on disk."""

    def __init__(self, cfg: PipelineConfig, cache_dir):
        self.cfg = cfg
        self.dir = Path(cache_dir) / "features"
        self.fb = build_mel_filterbank(cfg.sample_rate, cfg.stft.n_fft, cfg.n_mels)
        band = cfg.band.band() if cfg.band is not None else None
        self.band = band
        self.settings = json.dumps({
            "sample_rate": cfg.sample_rate, "stft": asdict(cfg.stft), "n_mels": cfg.n_mels,
            "band": None if band is None else [band.f_lo, band.f_hi],
            "segmenting": cfg.segmenting, "segment": asdict(cfg.segment)}, sort_keys=True)
        self._memo: dict[str, np.ndarray] = {}

    def key(self, path) -> str:
        return hashlib.sha256((file_digest(path) + self.settings).encode()).hexdigest()[:32]

    def compute(self, path) -> np.ndarray:
        clip = load_clip(path, self.cfg.sample_rate)
        s = self.cfg.segment
        return clip_features(clip, self.fb, self.band, self.cfg.segmenting, s.len_s,
                             s.overlap, self.cfg.stft.hop)

    def __call__(self, meta: ClipMeta) -> np.ndarray:
        if meta.path in self._memo:
            return self._memo[meta.path]
        key = self.key(meta.path)
        f = self.dir / f"{key}.aads"
        if f.exists():
            grid, _ = read_spectrogram_cache(f)
            stack = grid.reshape(-1, self.cfg.n_mels, grid.shape[1])
        else:
            stack = self.compute(meta.path)
            self.dir.mkdir(parents=True, exist_ok=True)
            with FileLock(str(self.dir / ".lock")):
                tmp = f.with_name(f.name + ".tmp")
                write_spectrogram_cache(tmp, stack.reshape(-1, stack.shape[2]),
                                        self.cfg.sample_rate)
                tmp.replace(f)
        self._memo[meta.path] = stack
        return stack


# --------------------------------------------------------------------------
# Pseudo audio


def _shift_tag(s: float) -> str:
    return ("p" if s >= 0 else "m") + f"{abs(s):g}".replace(".", "_")


def synth_pseudo(cfg: PipelineConfig) -> tuple[int, int]:
    """Write pitch-shifted copies of the real train clips under ``<machine>/pseudo``.

    An index of source-content hashes makes reruns skip finished files.
    Returns (written, skipped).
    """
    shifts = list(cfg.augment.pitch_semitones)
    manifest = scan_dataset(cfg.dataset_root, cfg.machine)
    sources = [e for e in manifest.entries if e.split == "train" and not e.pseudo]
    if not shifts:
        logger.warning("no pitch shifts configured; nothing to synthesise")
        return 0, 0
    if not sources:
        raise EmptyDataset("no train clips to pitch-shift")
    pdir = Path(sources[0].path).parent.parent / PSEUDO_DIR
    pdir.mkdir(exist_ok=True)
    index_path = pdir / "index.json"
    index = json.loads(index_path.read_text()) if index_path.exists() else {}
    written = skipped = 0
    for meta in sources:
        digest = file_digest(meta.path)
        clip = None
        for s in shifts:
            name = f"{Path(meta.path).stem}_pitch_{_shift_tag(s)}.wav"
            stamp = f"{digest}:{s!r}"
            if index.get(name) == stamp and (pdir / name).exists():
                skipped += 1
                continue
            if clip is None:
                clip = read_wav(meta.path)
            write_wav(pdir / name, pitch_shift(clip, s))
            index[name] = stamp
            written += 1
    index_path.write_text(json.dumps(index, indent=1, sort_keys=True))
    return written, skipped


# --------------------------------------------------------------------------
# Pipeline stages


def _class_of(meta: ClipMeta) -> int:
    return N_SECTIONS if meta.pseudo else meta.section


def training_manifest(cfg: PipelineConfig, manifest: Manifest) -> list[ClipMeta]:
    return [e for e in manifest.entries
            if e.split == "train" and (cfg.augment.pseudo or not e.pseudo)]


def training_data(cfg: PipelineConfig, entries, features) -> tuple[LabeledBatch, int]:
    if not entries:
        raise EmptyDataset("no training clips; check dataset_root and machine")
    n_classes = N_SECTIONS + (1 if any(e.pseudo for e in entries) else 0)
    specs, labels = [], []
    eye = np.eye(n_classes)
    for e in entries:
        stack = features(e)
        specs.append(stack)
        labels.extend([eye[_class_of(e)]] * len(stack))
    return LabeledBatch(np.concatenate(specs), np.array(labels)), n_classes


def checkpoint_path(out, epoch: int) -> Path:
    return Path(out) / "checkpoints" / f"epoch_{epoch:03d}.aadm"


class Pipeline:
    def __init__(self, cfg: PipelineConfig, out):
        cfg.validate()
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.features = FeatureStore(cfg, cache_root(cfg, out))
        self._manifest = None

    # -- data --------------------------------------------------------------
    @property
    def manifest(self) -> Manifest:
        if self._manifest is None:
            self._manifest = scan_dataset(self.cfg.dataset_root, self.cfg.machine)
        return self._manifest

    def ingest(self) -> Manifest:
        m = self.manifest
        (self.out / "manifest.json").write_text(m.to_json())
        return m

    def build_features(self) -> int:
        entries = [e for e in self.manifest.entries if not e.pseudo or self.cfg.augment.pseudo]
        for e in entries:
            self.features(e)
        return len(entries)

    # -- training ----------------------------------------------------------
    def train(self) -> list[Path]:
        cfg = self.cfg
        if cfg.augment.pseudo and cfg.augment.pitch_semitones:
            synth_pseudo(cfg)
            self._manifest = None
        data, n_classes = training_data(cfg, training_manifest(cfg, self.manifest),
                                        self.features)
        model = build_model(cfg.model_config(n_classes), cfg.train.seed)
        t = cfg.train
        saved: list[Path] = []
        for old in sorted((self.out / "checkpoints").glob("epoch_*.aadm")):
            old.unlink()

        def on_epoch_end(epoch, m):
            if epoch % t.checkpoint_every == 0 or epoch == t.epochs:
                p = checkpoint_path(self.out, epoch)
                save_checkpoint(m, p)
                saved.append(p)

        log = train(model, data, t.epochs, t.lr, t.batch_size, t.seed, cfg.augment.core(),
                    cfg.augment.specaug, cfg.augment.mixup, on_epoch_end=on_epoch_end)
        (self.out / "train_log.csv").write_text(log.to_csv())
        return saved

    def checkpoints(self) -> list[Path]:
        found = sorted((self.out / "checkpoints").glob("epoch_*.aadm"))
        if not found:
            raise EmptyDataset(f"no checkpoints under {self.out}; run train first")
        return found if self.cfg.train.pool_checkpoints else found[-1:]

    # -- embeddings --------------------------------------------------------
    def eval_entries(self) -> list[ClipMeta]:
        return [e for e in self.manifest.entries if not e.pseudo]

    def embed(self) -> list[Path]:
        written = []
        entries = Manifest(tuple(self.eval_entries()), self.manifest.root)
        for ck in self.checkpoints():
            model = load_checkpoint(ck)
            embs = extract_embeddings(model, entries, self.features.band, self.cfg.segmenting,
                                      self.features)
            path = self.out / "embeddings" / f"{ck.stem}.csv"
            write_embeddings(path, embs)
            written.append(path)
        return written

    def load_embeddings(self) -> dict[str, np.ndarray]:
        """clip path -> segment embeddings pooled over the used checkpoints."""
        pooled: dict[str, list] = {}
        for ck in self.checkpoints():
            path = self.out / "embeddings" / f"{ck.stem}.csv"
            if not path.exists():
                raise EmptyDataset(f"missing {path}; run embed first")
            for clip, vecs in read_embeddings(path).items():
                pooled.setdefault(clip, []).append(vecs)
        return {k: np.concatenate(v) for k, v in pooled.items()}

    # -- reference + scoring ----------------------------------------------
    def fit(self) -> dict[int, ReferenceModel]:
        embs = self.load_embeddings()
        refs = {}
        a = self.cfg.anomaly
        for sec in range(N_SECTIONS):
            train_clips = [e.path for e in self.eval_entries()
                           if e.split == "train" and e.section == sec]
            if not train_clips:
                continue
            x = np.concatenate([embs[p] for p in train_clips])
            refs[sec] = fit_reference(x, a.metric, a.cov_reg,
                                      provenance=f"{self.cfg.machine} section {sec}")
            path = self.out / "references" / f"section_{sec:02d}.json"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(refs[sec].to_json())
        if not refs:
            raise EmptyDataset("no train embeddings to fit a reference")
        return refs

    def load_references(self) -> dict[int, ReferenceModel]:
        refs = {}
        for p in sorted((self.out / "references").glob("section_*.json")):
            refs[int(p.stem.split("_")[1])] = ReferenceModel.from_json(p.read_text())
        if not refs:
            raise EmptyDataset(f"no references under {self.out}; run fit first")
        return refs

    def score(self) -> list[dict]:
        refs = self.load_references()
        embs = self.load_embeddings()
        a = self.cfg.anomaly
        rows = []
        for e in self.eval_entries():
            if e.split != "test":
                continue
            if e.section not in refs:
                raise EmptyDataset(f"no reference for section {e.section}")
            ref = refs[e.section]
            s = score_clip(embs[e.path], ref, a.reducer)
            if ref.gamma is None:
                # ranking metrics still work; only the decision is unavailable
                thr, decision = float("nan"), "undecided"
            else:
                d = decide(s, ref, a.q, e)
                thr, decision = d.threshold_used, d.decision
            rows.append({"clip_path": e.path, "section": e.section, "domain": e.domain,
                         "label": e.label, "score": s, "threshold": thr, "decision": decision})
        if not rows:
            raise EmptyDataset("no test clips to score")
        undecided = sorted({r["section"] for r in rows if r["decision"] == "undecided"})
        if undecided:
            logger.warning("sections %s have no Gamma fit; decisions left undecided", undecided)
        write_rows(self.out / "scores.csv", rows)
        return rows

    def scored_set(self) -> ScoredSet:
        path = self.out / "scores.csv"
        if not path.exists():
            raise EmptyDataset(f"missing {path}; run score first")
        rows = [r for r in read_rows(path) if r["label"] in ("normal", "anomaly")]
        if not rows:
            raise EmptyDataset("no labelled test clips")
        return ScoredSet([float(r["score"]) for r in rows],
                         [r["label"] == "anomaly" for r in rows],
                         [(self.cfg.machine, int(r["section"]), r["domain"]) for r in rows])

    def evaluate(self, formats=("csv", "markdown")) -> EvalReport:
        report = evaluate_scores(self.scored_set(), self.cfg.frequency_band, self.cfg.eval.pauc_p)
        self.emit(report, "report", formats)
        return report

    def threshold_sweep(self, grid=None, formats=("csv",)) -> EvalReport:
        report = run_threshold_sweep(self.load_references(), self.scored_set(),
                                     grid or self.cfg.eval.q_grid, self.cfg.frequency_band)
        self.emit(report, "threshold_sweep", formats)
        return report

    def emit(self, report, stem, formats):
        suffix = {"csv": ".csv", "markdown": ".md", "plotdata": "_plot.csv"}
        for fmt in formats:
            emit_report(report, fmt, self.out / f"{stem}{suffix[fmt]}")

    def run(self, formats=("csv", "markdown")) -> EvalReport:
        """train -> embed -> fit -> score -> evaluate."""
        self.train()
        self.embed()
        self.fit()
        self.score()
        return self.evaluate(formats)


def band_dir_name(band: FrequencyBand) -> str:
    return f"band_{band.f_lo:g}_{band.f_hi:g}"


# --------------------------------------------------------------------------
# CSV helpers


def write_embeddings(path, embeddings: list[Embedding]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = len(embeddings[0].values) if embeddings else 0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["clip_path", "segment_index"] + [f"e{i}" for i in range(d)])
    for e in embeddings:
        w.writerow([e.source_clip.path, e.segment_index] + [repr(float(v)) for v in e.values])
    path.write_text(buf.getvalue())


def read_embeddings(path) -> dict[str, np.ndarray]:
    out: dict[str, list] = {}
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if header[:2] != ["clip_path", "segment_index"]:
            raise IoFailure(f"{path}: not an embeddings file")
        for row in r:
            out.setdefault(row[0], []).append((int(row[1]), [float(v) for v in row[2:]]))
    return {k: np.array([v for _, v in sorted(rows)]) for k, rows in out.items()}


def write_rows(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    path.write_text(buf.getvalue())


def read_rows(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
