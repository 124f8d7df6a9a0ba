"""Command-line entry point: generate, synth, train, detect, baseline, evaluate."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

from . import baseline as bl
from . import metrics
from . import token_codec as tc
from .error_gen import MANIFEST_NAME, ConfigError, DatasetManifest, ErrorConfig, generate_dataset
from .midi_core import LabeledScore, ParseError, UnsupportedFeatureError, read_track, write_track
from .synth import get_profile, read_wav, render, write_wav

log = logging.getLogger("scoreerr")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
USER_ERRORS = (ValueError, FileNotFoundError, ParseError, UnsupportedFeatureError, ConfigError, KeyError)
LABEL_ROLES = ("correct", "missed", "extra")
NOTE_SUFFIXES = (".notes", ".mid", ".midi")


class UserError(Exception):
    pass


def _map(fn, items, threads):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _write_labels(labels: LabeledScore, out_dir: Path, source_id: str) -> None:
    for role, track in labels.tracks().items():
        write_track(track, out_dir / f"{source_id}.{role}.notes")


def _read_labels(directory: Path, source_id: str) -> LabeledScore:
    return LabeledScore(*(read_track(directory / f"{source_id}.{r}.notes") for r in LABEL_ROLES))


def _label_ids(directory: Path) -> list[str]:
    ids = sorted(p.name[: -len(".correct.notes")] for p in directory.glob("*.correct.notes"))
    if not ids:
        raise UserError(f"no *.correct.notes files in {directory}")
    return ids


def _echo_config(args, out: Path, extra: dict | None = None) -> None:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "config") and v is not None}
    cfg.update(extra or {})
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n")


def _error_config(args) -> ErrorConfig:
    base = dict(args.error_config or {})
    if args.lambda_low is not None or args.lambda_high is not None:
        low, high = base.get("lambda_range", (0.1, 0.4))
        base["lambda_range"] = (args.lambda_low if args.lambda_low is not None else low,
                                args.lambda_high if args.lambda_high is not None else high)
    base["seed"] = args.seed
    return ErrorConfig.from_dict(base)


def cmd_generate(args) -> int:
    refs_dir = Path(args.refs)
    paths = sorted(p for p in refs_dir.iterdir() if p.suffix.lower() in NOTE_SUFFIXES) if refs_dir.is_dir() else []
    if not paths:
        raise UserError(f"no reference note files (*.notes, *.mid) in {refs_dir}")
    refs = [read_track(p) for p in paths]
    cfg = _error_config(args)
    out = Path(args.out)
    _echo_config(args, out, {"error_config": asdict(cfg)})
    manifest = generate_dataset(refs, cfg, out, threads=args.threads)
    print(f"wrote {len(manifest.entries)} entries to {out / MANIFEST_NAME}")
    return EXIT_OK


def cmd_synth(args) -> int:
    manifest = DatasetManifest.read(args.manifest)
    out = Path(args.out)
    _echo_config(args, out)

    def one(entry):
        profile = get_profile(entry.instrument)
        for role in ("reference", "performance"):
            audio = render(read_track(manifest.path_of(entry, role)), profile, args.sample_rate)
            write_wav(audio, out / f"{entry.source_id}.{role}.wav")

    _map(one, manifest.entries, args.threads)
    print(f"rendered {2 * len(manifest.entries)} files into {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    import torch

    from .model import ModelConfig
    from .train import Trainer, TrainConfig, dataset_from_manifest

    torch.manual_seed(args.seed)
    manifest = DatasetManifest.read(args.manifest)
    mc = dict(args.model_config or {})
    if args.large:
        mc = {**asdict(ModelConfig.large()), **mc, "enc_dim": 768, "dec_dim": 512}
    mc["seed"] = args.seed
    model_cfg = ModelConfig.from_dict({**asdict(ModelConfig()), **mc})
    tcfg = dict(args.train_config or {})
    for key in ("steps", "lr", "batch_size", "target_accuracy"):
        if getattr(args, key) is not None:
            tcfg[key] = getattr(args, key)
    tcfg["seed"] = args.seed
    train_cfg = TrainConfig.from_dict(tcfg)
    out = Path(args.out)
    _echo_config(args, out, {"model_config": model_cfg.to_dict(), "train_config": asdict(train_cfg),
                             "threads": args.threads})
    ds = dataset_from_manifest(manifest, Path(args.audio_dir) if args.audio_dir else None)
    if args.resume:
        trainer = Trainer.load(Path(args.resume), ds, train_cfg)
    else:
        trainer = Trainer(model_cfg, train_cfg, ds)
    trainer.fit(out)
    loss, acc = trainer.evaluate()
    print(f"trained {trainer.step} steps on {len(ds)} segments: loss {loss:.4f}, token accuracy {acc:.4f}")
    return EXIT_OK


def cmd_detect(args) -> int:
    from .train import detect, load_model

    model, header = load_model(Path(args.checkpoint))
    norm = tuple(header["norm"])
    out = Path(args.out)
    _echo_config(args, out)
    jobs = []
    if args.manifest:
        manifest = DatasetManifest.read(args.manifest)
        audio_dir = Path(args.audio_dir) if args.audio_dir else None
        for e in manifest.entries:
            if audio_dir is not None:
                jobs.append((e.source_id, e.instrument, audio_dir / f"{e.source_id}.reference.wav",
                             audio_dir / f"{e.source_id}.performance.wav"))
            else:
                jobs.append((e.source_id, e.instrument, manifest.path_of(e, "reference"),
                             manifest.path_of(e, "performance")))
    elif args.score_audio and args.perf_audio:
        sid = args.source_id or Path(args.perf_audio).stem.split(".")[0]
        jobs.append((sid, args.instrument, Path(args.score_audio), Path(args.perf_audio)))
    else:
        raise UserError("detect needs --manifest or both --score-audio and --perf-audio")

    def load_audio(path: Path, instrument: str):
        if path.suffix.lower() == ".wav":
            return read_wav(path)
        return render(read_track(path), get_profile(instrument))

    # inference stays sequential: torch already owns the configured threads
    for sid, inst, sp, pp in jobs:
        labels, segs, diag = detect(model, norm, load_audio(sp, inst), load_audio(pp, inst), inst, sid)
        _write_labels(labels, out, sid)
        if args.emit_tokens:
            (out / f"{sid}.tokens.txt").write_text(
                "".join(f"# segment {s.segment_index}\n" + tc.dump_tokens(s.tokens) for s in segs))
        if diag.total():
            log.info("%s: decoder diagnostics %s", sid, vars(diag))
    print(f"detected {len(jobs)} track(s) into {out}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = bl.BaselineConfig(**(args.baseline_config or {}))
    noise = bl.TranscriptionNoise(args.onset_jitter, args.drop_rate, args.insert_rate, args.seed)
    out = Path(args.out)
    _echo_config(args, out, {"baseline_config": asdict(cfg)})
    if args.manifest:
        manifest = DatasetManifest.read(args.manifest)
        pairs = [(e.source_id, manifest.path_of(e, "reference"), manifest.path_of(e, "performance"))
                 for e in manifest.entries]
    elif args.score and args.performance:
        pairs = [(args.source_id or Path(args.performance).stem.split(".")[0], Path(args.score), Path(args.performance))]
    else:
        raise UserError("baseline needs --manifest or both --score and --performance")

    def one(job):
        sid, sp, pp = job
        score = read_track(sp)
        perf = read_track(pp) if cfg.transcriber == "oracle" else None
        ext = Path(args.external_dir) / f"{sid}.notes" if args.external_dir else None
        labels = bl.detect(score, perf, cfg, noise, ext)
        _write_labels(labels, out, sid)

    _map(one, pairs, args.threads)
    print(f"baseline labeled {len(pairs)} track(s) into {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    truth_dir, pred_dir, out = Path(args.truth), Path(args.pred), Path(args.out)
    _echo_config(args, out)
    ids = _label_ids(truth_dir)

    def one(sid):
        truth = _read_labels(truth_dir, sid)
        pred = _read_labels(pred_dir, sid)
        inst = truth.correct.instrument or "unknown"
        return inst, metrics.report(truth, pred, args.tolerance, inst, sid)

    reports = _map(one, ids, args.threads)
    table = metrics.aggregate(reports)
    (out / "report.csv").write_text(table.to_csv())
    (out / "report.txt").write_text(table.pretty())
    (out / "summary.json").write_text(table.summary_json())
    per_track = [dict(r.to_dict(), instrument=i) for i, r in reports]
    (out / "tracks.jsonl").write_text("".join(json.dumps(x, sort_keys=True) + "\n" for x in per_track))
    print(table.pretty(), end="")
    return EXIT_OK


# enforced after the config file is merged, so a config may supply them
_REQUIRED = {"default": None, "help": "required (flag or config file)"}
REQUIRED_FLAGS = {
    "generate": ("refs",),
    "synth": ("manifest",),
    "train": ("manifest",),
    "detect": ("checkpoint",),
    "evaluate": ("truth", "pred"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--config", help="JSON run config; command-line flags override it")
    common.add_argument("--out", default="run")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="scoreerr", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="inject errors into reference note files")
    g.add_argument("--refs", **_REQUIRED)
    g.add_argument("--lambda-low", type=float)
    g.add_argument("--lambda-high", type=float)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("synth", parents=[common], help="render reference/performance audio")
    s.add_argument("--manifest", **_REQUIRED)
    s.add_argument("--sample-rate", type=int, default=16000)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="train the error detector")
    t.add_argument("--manifest", **_REQUIRED)
    t.add_argument("--audio-dir")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--target-accuracy", type=float)
    t.add_argument("--large", action="store_true", help="use 768/512 encoder/decoder widths")
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("detect", parents=[common], help="run a checkpoint on score/performance audio")
    d.add_argument("--checkpoint", **_REQUIRED)
    d.add_argument("--score-audio")
    d.add_argument("--perf-audio")
    d.add_argument("--manifest")
    d.add_argument("--audio-dir")
    d.add_argument("--instrument", default="piano")
    d.add_argument("--source-id")
    d.add_argument("--emit-tokens", action="store_true")
    d.set_defaults(func=cmd_detect)

    b = sub.add_parser("baseline", parents=[common], help="DTW alignment baseline")
    b.add_argument("--manifest")
    b.add_argument("--score")
    b.add_argument("--performance")
    b.add_argument("--source-id")
    b.add_argument("--external-dir")
    b.add_argument("--onset-jitter", type=float, default=0.0)
    b.add_argument("--drop-rate", type=float, default=0.0)
    b.add_argument("--insert-rate", type=float, default=0.0)
    b.set_defaults(func=cmd_baseline)

    e = sub.add_parser("evaluate", parents=[common], help="per-category Error Detection F1")
    e.add_argument("--truth", **_REQUIRED)
    e.add_argument("--pred", **_REQUIRED)
    e.add_argument("--tolerance", type=float, default=metrics.DEFAULT_TOLERANCE)
    e.set_defaults(func=cmd_evaluate)

    for sp in (g, s, t, d, b, e):
        sp.set_defaults(error_config=None, model_config=None, train_config=None, baseline_config=None)
    return p


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        # defaults < config file < flags: re-parse with the file as defaults
        file_cfg = json.loads(Path(args.config).read_text())
        file_cfg = {k: v for k, v in file_cfg.items() if k not in ("command", "config")}
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**file_cfg)
        args = parser.parse_args(argv)
    missing = [f"--{k.replace('_', '-')}" for k in REQUIRED_FLAGS.get(args.command, ()) if getattr(args, k) is None]
    if missing:
        parser.error(f"{args.command}: missing required {', '.join(missing)}")
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return EXIT_USER if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        import torch

        torch.set_num_threads(max(args.threads, 1))
    except ImportError:  # pragma: no cover
        pass
    try:
        return args.func(args)
    except (UserError, *USER_ERRORS) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "internal": True}), file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
