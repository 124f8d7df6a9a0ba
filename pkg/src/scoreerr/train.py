"""Teacher-forced training, checkpoints and dataset assembly for the detector."""
from __future__ import annotations

import base64
import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import features as feat
from . import token_codec as tc
from .midi_core import LabeledScore, read_track
from .model import ErrorDetector, ModelConfig, greedy_decode, weighted_loss
from .synth import AudioBuffer, get_profile, render

log = logging.getLogger(__name__)

CKPT_MAGIC = b"SEDCKPT\x00"
CKPT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    lr: float = 3e-3
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-9
    weight_decay: float = 0.0
    batch_size: int = 8
    grad_clip: float = 1.0
    warmup: int = 50
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 0
    target_accuracy: Optional[float] = None

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class SegmentDataset:
    """Aligned (score patches, performance patches, target tokens) triples."""

    score: np.ndarray  # (S, n_patches, patch_dim) float32, unnormalized log-mel patches
    perf: np.ndarray
    tokens: list[list[int]]
    keys: list[tuple[str, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tokens)

    def stats(self) -> tuple[float, float]:
        both = np.concatenate([self.score.ravel(), self.perf.ravel()])
        return float(both.mean()), float(both.std() + 1e-8)


def segment_pair(score_audio: AudioBuffer, perf_audio: AudioBuffer, labels: LabeledScore):
    """Features and token targets for every segment of one track pair."""
    count = max(
        len(feat.segment_audio(score_audio)), len(feat.segment_audio(perf_audio)), tc.n_segments_for(labels)
    )
    s = feat.extract(score_audio, count)
    p = feat.extract(perf_audio, count)
    toks = tc.encode_all(labels, count)
    return s, p, toks


def build_dataset(items: Sequence[tuple[str, AudioBuffer, AudioBuffer, LabeledScore]]) -> SegmentDataset:
    score, perf, tokens, keys = [], [], [], []
    for key, sa, pa, labels in items:
        s, p, toks = segment_pair(sa, pa, labels)
        for a, b, t in zip(s, p, toks):
            score.append(a.patches.astype(np.float32))
            perf.append(b.patches.astype(np.float32))
            tokens.append(list(t.tokens))
            keys.append((key, t.segment_index))
    return SegmentDataset(np.stack(score), np.stack(perf), tokens, keys)


def dataset_from_manifest(manifest, audio_dir: Optional[Path] = None) -> SegmentDataset:
    from .synth import read_wav

    items = []
    for e in manifest.entries:
        ref = read_track(manifest.path_of(e, "reference"))
        labels = LabeledScore(*(read_track(manifest.path_of(e, r)) for r in ("correct", "missed", "extra")))
        perf = read_track(manifest.path_of(e, "performance"))
        wavs = [audio_dir / f"{e.source_id}.{r}.wav" for r in ("reference", "performance")] if audio_dir else []
        if wavs and all(w.exists() for w in wavs):
            sa, pa = read_wav(wavs[0]), read_wav(wavs[1])
        else:
            profile = get_profile(e.instrument)
            sa, pa = render(ref, profile), render(perf, profile)
        items.append((e.source_id, sa, pa, labels))
    return build_dataset(items)


def _batch(ds: SegmentDataset, idx: Sequence[int], max_len: int, mean: float, std: float):
    seqs = [ds.tokens[i][: max_len + 1] for i in idx]
    n = max(len(s) for s in seqs) - 1
    inp = torch.full((len(idx), n), tc.EOS, dtype=torch.long)
    tgt = torch.zeros((len(idx), n), dtype=torch.long)
    valid = torch.zeros((len(idx), n), dtype=torch.bool)
    for r, s in enumerate(seqs):
        inp[r, : len(s) - 1] = torch.tensor(s[:-1])
        tgt[r, : len(s) - 1] = torch.tensor(s[1:])
        valid[r, : len(s) - 1] = True
    score = torch.from_numpy((ds.score[list(idx)] - mean) / std)
    perf = torch.from_numpy((ds.perf[list(idx)] - mean) / std)
    return score, perf, inp, tgt, valid


class Trainer:
    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: SegmentDataset,
                 norm: Optional[tuple[float, float]] = None):
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.ds = dataset
        self.mean, self.std = norm if norm is not None else dataset.stats()
        self.model = ErrorDetector(model_cfg)
        self.opt = torch.optim.Adam(self.model.parameters(), lr=train_cfg.lr, betas=train_cfg.betas,
                                    eps=train_cfg.eps, weight_decay=train_cfg.weight_decay)
        self.sched = torch.optim.lr_scheduler.LambdaLR(self.opt, self._lr_factor)
        self.rng = np.random.default_rng(train_cfg.seed)
        self.torch_gen = torch.Generator().manual_seed(train_cfg.seed)
        self.step = 0
        self.history: list[tuple[int, float, float]] = []

    def _lr_factor(self, step: int) -> float:
        return min(1.0, (step + 1) / self.cfg.warmup) if self.cfg.warmup else 1.0

    def _indices(self) -> list[int]:
        n = len(self.ds)
        if self.cfg.batch_size >= n:
            return list(range(n))
        return sorted(self.rng.choice(n, self.cfg.batch_size, replace=False).tolist())

    def train_step(self) -> tuple[float, float]:
        self.model.train()
        score, perf, inp, tgt, valid = _batch(self.ds, self._indices(), self.model_cfg.max_decoder_len, self.mean, self.std)
        # dropout draws from the global generator; keep it tied to our own state
        torch.set_rng_state(self.torch_gen.get_state())
        logits = self.model(score, perf, inp)
        loss = weighted_loss(logits, tgt, self.model_cfg.alpha_error, self.model_cfg.alpha_scope, valid)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at step {self.step}; recent: {self.history[-5:]}")
        self.opt.zero_grad()
        loss.backward()
        if self.cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.opt.step()
        self.sched.step()
        self.torch_gen.set_state(torch.get_rng_state())
        acc = float(((logits.argmax(-1) == tgt) & valid).sum() / valid.sum())
        self.step += 1
        self.history.append((self.step, value, acc))
        return value, acc

    @torch.no_grad()
    def evaluate(self, idx: Optional[Sequence[int]] = None) -> tuple[float, float]:
        """Teacher-forced (loss, token accuracy) with dropout off."""
        self.model.eval()
        idx = list(range(len(self.ds))) if idx is None else list(idx)
        score, perf, inp, tgt, valid = _batch(self.ds, idx, self.model_cfg.max_decoder_len, self.mean, self.std)
        logits = self.model(score, perf, inp)
        loss = weighted_loss(logits, tgt, self.model_cfg.alpha_error, self.model_cfg.alpha_scope, valid)
        acc = float(((logits.argmax(-1) == tgt) & valid).sum() / valid.sum())
        return float(loss), acc

    def fit(self, out_dir: Optional[Path] = None, eval_every: int = 25) -> list[tuple[int, float, float]]:
        target = self.cfg.target_accuracy
        while self.step < self.cfg.steps:
            loss, acc = self.train_step()
            if self.cfg.log_every and self.step % self.cfg.log_every == 0:
                log.info("step %d loss %.4f acc %.4f", self.step, loss, acc)
            if out_dir is not None and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                self.save(Path(out_dir) / f"step{self.step:06d}.ckpt")
            if target is not None and self.step % eval_every == 0 and self.evaluate()[1] >= target:
                break
        if out_dir is not None:
            out_dir = Path(out_dir)
            self.save(out_dir / "final.ckpt")
            write_loss_csv(self.history, out_dir / "loss.csv")
        return self.history

    # -- checkpoints ------------------------------------------------------

    def save(self, path: Path) -> None:
        names = [n for n, _ in self.model.named_parameters()]
        tensors = {f"param.{n}": p.detach() for n, p in self.model.named_parameters()}
        opt_state = self.opt.state_dict()
        steps = {}
        for i, st in opt_state["state"].items():
            for k, v in st.items():
                if k == "step":
                    steps[names[i]] = float(v)
                else:
                    tensors[f"adam.{names[i]}.{k}"] = v
        header = {
            "format_version": CKPT_VERSION,
            "model_config": self.model_cfg.to_dict(),
            "train_config": asdict(self.cfg),
            "step": self.step,
            "norm": [self.mean, self.std],
            "threads": torch.get_num_threads(),
            "adam_steps": steps,
            "sched": self.sched.state_dict(),
            "param_groups": opt_state["param_groups"],
            "rng": {
                "numpy": self.rng.bit_generator.state,
                "torch": base64.b64encode(self.torch_gen.get_state().numpy().tobytes()).decode("ascii"),
            },
        }
        write_checkpoint(path, header, tensors)

    @classmethod
    def load(cls, path: Path, dataset: SegmentDataset, train_cfg: Optional[TrainConfig] = None) -> "Trainer":
        header, tensors = read_checkpoint(path)
        model_cfg = ModelConfig.from_dict(header["model_config"])
        cfg = train_cfg or TrainConfig.from_dict(header["train_config"])
        tr = cls(model_cfg, cfg, dataset, norm=tuple(header["norm"]))
        load_params(tr.model, tensors)
        names = [n for n, _ in tr.model.named_parameters()]
        sd = tr.opt.state_dict()
        for i, name in enumerate(names):
            if name in header["adam_steps"]:
                sd["state"][i] = {
                    "step": torch.tensor(header["adam_steps"][name]),
                    "exp_avg": tensors[f"adam.{name}.exp_avg"].float(),
                    "exp_avg_sq": tensors[f"adam.{name}.exp_avg_sq"].float(),
                }
        # the scheduler state alone does not carry the current learning rate
        sd["param_groups"] = [{**g, "betas": tuple(g["betas"])} for g in header["param_groups"]]
        tr.opt.load_state_dict(sd)
        tr.sched.load_state_dict(header["sched"])
        tr.rng.bit_generator.state = header["rng"]["numpy"]
        raw = np.frombuffer(base64.b64decode(header["rng"]["torch"]), dtype=np.uint8).copy()
        tr.torch_gen.set_state(torch.from_numpy(raw))
        tr.step = header["step"]
        return tr


def load_params(model: ErrorDetector, tensors: dict) -> None:
    with torch.no_grad():
        for n, p in model.named_parameters():
            p.copy_(tensors[f"param.{n}"].to(p.dtype))


def load_model(path: Path) -> tuple[ErrorDetector, dict]:
    header, tensors = read_checkpoint(path)
    model = ErrorDetector(ModelConfig.from_dict(header["model_config"]))
    load_params(model, tensors)
    model.eval()
    return model, header


def write_checkpoint(path: Path, header: dict, tensors: dict) -> None:
    """Layout: magic, u32 version, u64 header length, JSON header, u32 count,
    then per tensor: u16 name length, name, u8 ndim, u64 dims, float64 data
    (little-endian, row-major)."""
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<IQ", CKPT_VERSION, len(hbytes)), hbytes, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().double().numpy()
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path: Path) -> tuple[dict, dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack("<IQ", buf[8:20])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 20
    header = json.loads(buf[pos:pos + hlen])
    pos += hlen
    (count,) = struct.unpack("<I", buf[pos:pos + 4])
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", buf[pos:pos + 2])
        name = buf[pos + 2:pos + 2 + nlen].decode("utf-8")
        pos += 2 + nlen
        (ndim,) = struct.unpack("<B", buf[pos:pos + 1])
        pos += 1
        shape = struct.unpack(f"<{ndim}Q", buf[pos:pos + 8 * ndim])
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf[pos:pos + 8 * size], dtype="<f8").reshape(shape)
        pos += 8 * size
        tensors[name] = torch.from_numpy(arr.copy())
    return header, tensors


def write_loss_csv(history, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "token_accuracy"])
        for step, loss, acc in history:
            w.writerow([step, f"{loss:.8f}", f"{acc:.6f}"])


def detect_segments(model: ErrorDetector, norm: tuple[float, float], score_feats, perf_feats, max_len=None):
    """Greedy-decode every segment pair; returns (TokenSegments, truncated count)."""
    mean, std = norm
    s = torch.from_numpy((np.stack([f.patches for f in score_feats]).astype(np.float32) - mean) / std)
    p = torch.from_numpy((np.stack([f.patches for f in perf_feats]).astype(np.float32) - mean) / std)
    seqs, trunc = greedy_decode(model, s, p, max_len)
    segs = [tc.TokenSegment(i, tuple(t)) for i, t in enumerate(seqs)]
    return segs, sum(trunc)


def detect(model: ErrorDetector, norm, score_audio: AudioBuffer, perf_audio: AudioBuffer,
           instrument: str = "", source_id: str = ""):
    """Audio pair -> (LabeledScore, token segments, Diagnostics)."""
    count = max(len(feat.segment_audio(score_audio)), len(feat.segment_audio(perf_audio)))
    sf = feat.extract(score_audio, count)
    pf = feat.extract(perf_audio, count)
    segs, truncated = detect_segments(model, norm, sf, pf)
    score, diag = tc.stitch(tc.decode_all(segs), instrument, source_id)
    diag.truncated += truncated
    return score, segs, diag
