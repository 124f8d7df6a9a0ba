"""Baseline DTW vs. an overfit detector on chordal material with asynchronous chord notes.

Writes a chordal dataset, renders it, overfits the desk model, then counts
correctly played notes that each method splits into Missed + Extra.

    python3 scripts/chordal_comparison.py --out runs/chordal --tracks 8
"""
import argparse
import json
from pathlib import Path

from scoreerr import metrics
from scoreerr.cli import main as cli
from scoreerr.fixtures import write_chordal_dataset
from scoreerr.midi_core import LabeledScore, read_track


def labels(d: Path, sid: str) -> LabeledScore:
    return LabeledScore(*(read_track(d / f"{sid}.{r}.notes") for r in ("correct", "missed", "extra")))


def run(argv):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/chordal")
    ap.add_argument("--tracks", type=int, default=8)
    ap.add_argument("--seed", type=int, default=100)
    ap.add_argument("--spread", type=float, default=0.03, help="max chord asynchrony (s)")
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--checkpoint", help="skip training and use this checkpoint")
    args = ap.parse_args(argv)

    out = Path(args.out)
    manifest = write_chordal_dataset(out / "data", args.tracks, args.seed, spread=args.spread)
    m = str(out / "data" / "manifest.jsonl")
    cli(["synth", "--manifest", m, "--out", str(out / "audio")])
    ckpt = args.checkpoint
    if ckpt is None:
        (out / "model.json").write_text(json.dumps({"model_config": {"dropout": 0.0}}))
        cli(["train", "--manifest", m, "--audio-dir", str(out / "audio"), "--config", str(out / "model.json"),
             "--steps", str(args.steps), "--target-accuracy", "1.0", "--out", str(out / "train")])
        ckpt = str(out / "train" / "final.ckpt")
    cli(["detect", "--checkpoint", ckpt, "--manifest", m, "--audio-dir", str(out / "audio"), "--out", str(out / "model")])
    cli(["baseline", "--manifest", m, "--out", str(out / "baseline")])

    rows = []
    for method in ("baseline", "model"):
        fp = 0
        reports = []
        for e in manifest.entries:
            truth, pred = labels(out / "data", e.source_id), labels(out / method, e.source_id)
            fp += metrics.false_pairs(truth, pred)
            reports.append((e.instrument, metrics.report(truth, pred)))
        table = metrics.aggregate(reports)
        rows.append((method, fp, table.overall))
    print(f"{'method':<10}{'false pairs':>12}{'Missed P':>10}{'Missed R':>10}{'Extra P':>10}{'Correct F1':>12}")
    for method, fp, o in rows:
        print(f"{method:<10}{fp:>12}{o['missed'].precision:>10.3f}{o['missed'].recall:>10.3f}"
              f"{o['extra'].precision:>10.3f}{o['correct'].f1:>12.3f}")


if __name__ == "__main__":
    import sys

    run(sys.argv[1:])
