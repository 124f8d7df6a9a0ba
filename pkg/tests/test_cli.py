import json

import pytest

from scoreerr.cli import EXIT_INTERNAL, EXIT_OK, EXIT_USER, main, parse_args
from scoreerr.fixtures import random_melody
from scoreerr.midi_core import read_track, write_track


@pytest.fixture
def refs_dir(tmp_path):
    d = tmp_path / "refs"
    d.mkdir()
    for i in range(4):
        write_track(random_melody(f"mel{i}", 10, seed=i), d / f"mel{i}.mid")
    return d


def _files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 7, "lambda_low": 0.2, "threads": 3}))
    args = parse_args(["generate", "--refs", "x", "--config", str(cfg), "--seed", "9"])
    assert (args.seed, args.lambda_low, args.threads) == (9, 0.2, 3)
    assert parse_args(["generate", "--refs", "x"]).seed == 0


def test_exit_codes(tmp_path, capsys):
    assert main(["generate", "--refs", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == EXIT_USER
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "UserError"
    assert main(["nonsense"]) == EXIT_USER
    bad = tmp_path / "bad.mid"
    bad.write_bytes(b"MThd\x00\x00")
    (tmp_path / "r").mkdir()
    bad.rename(tmp_path / "r" / "bad.mid")
    assert main(["generate", "--refs", str(tmp_path / "r"), "--out", str(tmp_path / "o")]) == EXIT_USER
    assert "ParseError" in capsys.readouterr().err


def test_internal_error_exit_code(monkeypatch, tmp_path, refs_dir):
    from scoreerr import cli

    def boom(*a, **k):
        raise RuntimeError("unexpected")

    monkeypatch.setattr(cli, "generate_dataset", boom)
    assert main(["generate", "--refs", str(refs_dir), "--out", str(tmp_path / "o")]) == EXIT_INTERNAL


def test_generate_is_thread_count_independent(tmp_path, refs_dir):
    for name, threads in (("a", 1), ("b", 4)):
        assert main(["generate", "--refs", str(refs_dir), "--out", str(tmp_path / name), "--threads", str(threads)]) == EXIT_OK
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    a.pop("run_config.json"), b.pop("run_config.json")
    assert a == b and len(a) == 4 * 5 + 1


def test_run_config_replays(tmp_path, refs_dir):
    out = tmp_path / "g"
    assert main(["generate", "--refs", str(refs_dir), "--out", str(out), "--seed", "5", "--lambda-high", "0.5"]) == EXIT_OK
    first = _files(out)
    (tmp_path / "replay.json").write_bytes(first["run_config.json"])
    assert main(["generate", "--config", str(tmp_path / "replay.json")]) == EXIT_OK
    assert _files(out) == first


def test_baseline_error_free_pair_is_all_correct(tmp_path):
    t = random_melody("clean", 12, seed=1)
    write_track(t, tmp_path / "s.notes")
    out = tmp_path / "b"
    assert main(["baseline", "--score", str(tmp_path / "s.notes"), "--performance", str(tmp_path / "s.notes"),
                 "--source-id", "clean", "--out", str(out)]) == EXIT_OK
    assert len(read_track(out / "clean.missed.notes")) == len(read_track(out / "clean.extra.notes")) == 0
    assert read_track(out / "clean.correct.notes").notes == t.notes
    ev = tmp_path / "ev"
    # score the baseline against itself: every category is perfect
    assert main(["evaluate", "--truth", str(out), "--pred", str(out), "--out", str(ev)]) == EXIT_OK
    summary = json.loads((ev / "summary.json").read_text())
    assert summary["overall"]["correct"]["f1"] == 1.0


def test_baseline_and_evaluate_on_generated_data(tmp_path, refs_dir):
    data = tmp_path / "data"
    assert main(["generate", "--refs", str(refs_dir), "--out", str(data)]) == EXIT_OK
    assert main(["baseline", "--manifest", str(data / "manifest.jsonl"), "--out", str(tmp_path / "b"), "--threads", "2"]) == EXIT_OK
    assert main(["evaluate", "--truth", str(data), "--pred", str(tmp_path / "b"), "--out", str(tmp_path / "e")]) == EXIT_OK
    lines = (tmp_path / "e" / "tracks.jsonl").read_text().splitlines()
    assert len(lines) == 4
    assert (tmp_path / "e" / "report.csv").read_text().startswith("instrument,n_tracks,")


def test_missing_inputs(tmp_path):
    assert main(["baseline", "--out", str(tmp_path / "x")]) == EXIT_USER
    assert main(["generate", "--out", str(tmp_path / "x")]) == EXIT_USER
