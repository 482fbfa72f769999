"""Command-line entry point: ``aadom <command> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .corpus import SynthConfig, generate_synthetic_corpus
from .dsp import DEFAULT_BANDS, FrequencyBand, full_band
from .errors import AADError, InvalidBand, InvalidConfig
from .metrics import FORMATS, emit_report, report_to_markdown, run_band_sweep
from .pipeline import Pipeline, band_dir_name, load_config, synth_pseudo

logger = logging.getLogger("aadom")

COMMANDS = ("ingest", "synth-corpus", "synth-pseudo", "features", "train", "embed", "fit",
            "score", "evaluate", "band-sweep", "threshold-sweep")
_SUFFIX = {"csv": ".csv", "markdown": ".md", "plotdata": "_plot.csv"}


def _parse_set(items):
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise InvalidConfig(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def parse_bands(text: str) -> list[FrequencyBand]:
    bands = [FrequencyBand.parse(t.strip()) for t in text.split(",") if t.strip()]
    if not bands:
        raise InvalidBand("--bands needs at least one LO:HI entry")
    return bands


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aadom", description="Machine-sound anomaly detection")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="overrides train.seed (and the synthetic corpus seed)")
    p.add_argument("--machine", help="machine type, e.g. Slider")
    p.add_argument("--out", default="runs/default", help="output directory")
    p.add_argument("--format", choices=FORMATS, default="csv", help="report format")
    p.add_argument("--bands", help='band-sweep grid, e.g. "2000:5000,500:3500" (Hz)')
    p.add_argument("--grid", help='threshold-sweep q grid, e.g. "0.85,0.9,0.95"')
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry by dotted key (JSON value)")
    p.add_argument("--synth-config", help="synthetic corpus JSON config (synth-corpus)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _config(args):
    overrides = _parse_set(args.set)
    if args.seed is not None:
        overrides["train.seed"] = args.seed
    if args.machine is not None:
        overrides["machine"] = args.machine
    return load_config(args.config, overrides)


def _ensure_scores(pipe: Pipeline) -> None:
    """Build whichever upstream artifacts are missing, then rescore."""
    if not list((pipe.out / "checkpoints").glob("epoch_*.aadm")):
        pipe.train()
    if not all((pipe.out / "embeddings" / f"{c.stem}.csv").exists() for c in pipe.checkpoints()):
        pipe.embed()
    if not list((pipe.out / "references").glob("section_*.json")):
        pipe.fit()
    pipe.score()


def run(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    cmd = args.command
    if cmd == "synth-corpus":
        scfg = SynthConfig.from_json(Path(args.synth_config).read_text()) if args.synth_config \
            else SynthConfig(machine=cfg.machine)
        m = generate_synthetic_corpus(scfg, args.seed if args.seed is not None else 0,
                                      cfg.dataset_root)
        print(f"wrote {len(m)} clips under {cfg.dataset_root}/{scfg.machine}")
        return 0
    if cmd == "synth-pseudo":
        written, skipped = synth_pseudo(cfg)
        print(f"pseudo clips: {written} written, {skipped} already present")
        return 0
    if cmd == "band-sweep":
        bands = parse_bands(args.bands) if args.bands else list(DEFAULT_BANDS)
        control = full_band(cfg.sample_rate)
        if control not in bands:
            bands.append(control)
        for b in bands:
            b.validate(cfg.sample_rate)

        def one(band):
            return Pipeline(cfg.with_band(band), out / band_dir_name(band)).run(("csv",))

        report = run_band_sweep(bands, one, flush_path=out / "band_sweep.csv")
        path = emit_report(report, args.format, out / f"band_sweep{_SUFFIX[args.format]}")
        print(f"band sweep over {len(bands)} bands -> {path}")
        return 0

    pipe = Pipeline(cfg, out)
    if cmd == "ingest":
        m = pipe.ingest()
        for key, n in sorted(m.counts("split", "domain").items()):
            print(f"{key[0]:5s} {key[1]:6s} {n}")
        if m.skipped:
            print(f"skipped {len(m.skipped)} files")
    elif cmd == "features":
        print(f"features ready for {pipe.build_features()} clips")
    elif cmd == "train":
        for path in pipe.train():
            print(f"checkpoint {path}")
    elif cmd == "embed":
        for path in pipe.embed():
            print(f"embeddings {path}")
    elif cmd == "fit":
        for sec, ref in pipe.fit().items():
            if ref.gamma is None:
                print(f"section {sec}: {ref.metric} (no Gamma fit, scores only)")
            else:
                print(f"section {sec}: {ref.metric} gamma shape={ref.gamma.shape:.4g} "
                      f"scale={ref.gamma.scale:.4g}")
    elif cmd == "score":
        rows = pipe.score()
        n_anom = sum(r["decision"] == "anomaly" for r in rows)
        print(f"scored {len(rows)} test clips, {n_anom} flagged anomalous")
    elif cmd == "evaluate":
        _ensure_scores(pipe)
        report = pipe.evaluate(("csv", args.format))
        print(report_to_markdown(report))
    elif cmd == "threshold-sweep":
        _ensure_scores(pipe)
        grid = [float(q) for q in args.grid.split(",")] if args.grid else None
        pipe.threshold_sweep(grid, ("csv", args.format))
        print(f"threshold sweep -> {out / 'threshold_sweep.csv'}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except AADError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
