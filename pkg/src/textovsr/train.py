"""Two-stage training, sample preparation, checkpoints and the ablation matrix."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import yaml

from .degrade import DegradationRecord, NoiseBank, VideoClip, mix_noise
from .exceptions import ConfigurationError, DatasetError, LineageError, TrainingError, VersioningError
from .generator import GeneratorConfig, TextOVSRGenerator
from .io import read_clip_dir
from .losses import (
    ContrastQualityScorer,
    LossWeights,
    RandomFeatureExtractor,
    adv_loss_d,
    adv_loss_g,
    clipiqa_loss,
    neg_loss,
    perceptual_loss,
    rec_loss,
    stage1_total,
    stage2_total,
)
from .prompts import PromptPack
from .ted import Discriminator, TedConfig

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "textovsr-checkpoint"
CHECKPOINT_VERSION = 1
VARIANTS = ("V1", "V2", "V3", "V4", "V5", "V6", "neg_before", "neg_after")


@dataclass
class TrainConfig:
    seed: int = 0
    iterations: int = 2000
    stage2_iterations: int = 200
    lr_stage1: float = 1e-4
    lr_stage2: float = 5e-5
    batch_size: int = 2
    num_frames: int = 7
    lr_crop: int = 64
    scale: int = 4
    flip: bool = True
    checkpoint_every: int = 0
    variant: Optional[str] = "V6"
    noise_bank: Optional[str] = None
    weights: LossWeights = field(default_factory=LossWeights)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: TedConfig = field(default_factory=TedConfig)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        w = LossWeights(**d.pop("weights", {}))
        g = GeneratorConfig(**d.pop("generator", {}))
        t = TedConfig(**d.pop("discriminator", {}))
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigurationError(f"unknown training config keys: {sorted(unknown)}")
        return cls(weights=w, generator=g, discriminator=t, **d)

    @classmethod
    def from_file(cls, path):
        data = yaml.safe_load(Path(path).read_text()) or {}
        return cls.from_dict(data.get("train", data))

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def build_ablation(config: TrainConfig, variant: str) -> TrainConfig:
    """Resolve one row of the component ablation (or a negative DRF placement row).

    V1 baseline without DRF or text-enhanced discriminator; V2 image-only DRF
    on the negative branch; V3 adds degradation text to it; V4 image-only DRF
    on both branches; V5 both branches with their texts; V6 is V5 with the
    text-enhanced discriminator. ``neg_before`` / ``neg_after`` are V2 with the
    negative DRF before or after deep feature extraction.
    """
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown ablation variant {variant!r}; expected one of {VARIANTS}")
    cfg = copy.deepcopy(config)
    g = asdict(cfg.generator)
    rows = {
        "V1": dict(drf_positive=None, drf_negative=None),
        "V2": dict(drf_positive=None, drf_negative="after_deep", text_negative=False),
        "V3": dict(drf_positive=None, drf_negative="after_deep", text_negative=True),
        "V4": dict(drf_positive="before_deep", drf_negative="after_deep", text_positive=False, text_negative=False),
        "V5": dict(drf_positive="before_deep", drf_negative="after_deep", text_positive=True, text_negative=True),
        "V6": dict(drf_positive="before_deep", drf_negative="after_deep", text_positive=True, text_negative=True),
        "neg_before": dict(drf_positive=None, drf_negative="before_deep", text_negative=False),
        "neg_after": dict(drf_positive=None, drf_negative="after_deep", text_negative=False),
    }
    g.update(rows[variant])
    cfg.generator = GeneratorConfig(**g)
    t = asdict(cfg.discriminator)
    t["kind"] = "ted" if variant == "V6" else "unet"
    t["d_text"] = cfg.generator.d_text
    cfg.discriminator = TedConfig(**t)
    cfg.variant = variant
    return cfg


# ------------------------------------------------------------------------- data

@dataclass
class ClipPair:
    hr: VideoClip
    lr: VideoClip
    record: Optional[DegradationRecord]
    pack: PromptPack


@dataclass
class Sample:
    hr_crop: np.ndarray
    lr_crop: np.ndarray
    noisy_lr: np.ndarray
    prompt_pack: PromptPack
    record: Optional[DegradationRecord]
    frame_indices: tuple
    offset: tuple
    flipped: bool

    @property
    def content_embeddings(self):
        return self.prompt_pack.content_embeddings

    @property
    def degradation_embedding(self):
        return self.prompt_pack.degradation_embedding


class PairedClipDataset:
    """In-memory list of aligned HR/LR clips with their prompt packs."""

    def __init__(self, pairs, noise_bank: Optional[NoiseBank] = None):
        self.pairs = list(pairs)
        self.noise_bank = noise_bank
        if not self.pairs:
            raise DatasetError("dataset has no clips")
        for p in self.pairs:
            if len(p.hr) != len(p.lr):
                raise DatasetError(f"clip {p.hr.id}: {len(p.hr)} HR frames vs {len(p.lr)} LR frames")
            if len(p.pack) != len(p.hr):
                raise DatasetError(f"clip {p.hr.id}: prompt pack covers {len(p.pack)} of {len(p.hr)} frames")

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]

    @classmethod
    def from_root(cls, root):
        """Load ``clips/<id>/{hr,lr}/NNNN.png`` plus sidecars and ``noise_bank/*.png``."""
        root = Path(root)
        clip_dirs = sorted(p for p in (root / "clips").glob("*") if p.is_dir())
        if not clip_dirs:
            raise DatasetError(f"no clips under {root / 'clips'}")
        pairs = []
        for d in clip_dirs:
            for part in ("hr", "lr"):
                if not (d / part).is_dir():
                    raise DatasetError(f"{d} lacks a {part}/ frame directory")
            if not (d / "prompts.json").exists():
                raise DatasetError(f"{d} lacks prompts.json; run the caption step first")
            hr = read_clip_dir(d / "hr", d.name)
            lr = read_clip_dir(d / "lr", d.name)
            rec = DegradationRecord.load(d / "degradation.json") if (d / "degradation.json").exists() else None
            pairs.append(ClipPair(hr, lr, rec, PromptPack.load(d)))
        bank = NoiseBank.from_directory(root / "noise_bank") if (root / "noise_bank").is_dir() else None
        return cls(pairs, bank)


def make_sample(pair: ClipPair, rng: np.random.Generator, num_frames=7, lr_crop=64, scale=4, flip=True,
                noise_bank: Optional[NoiseBank] = None, lam=0.5) -> Sample:
    """Aligned random crop of ``num_frames`` consecutive frames, optional flip, noise mixing."""
    n = len(pair.hr)
    if len(pair.lr) != n:
        raise DatasetError(f"clip {pair.hr.id}: misaligned HR/LR lengths")
    lh, lw = pair.lr.shape[-2:]
    hh, hw = pair.hr.shape[-2:]
    if (hh, hw) != (lh * scale, lw * scale):
        raise DatasetError(f"clip {pair.hr.id}: HR {hh}x{hw} is not {scale}x LR {lh}x{lw}")
    if num_frames > n or lr_crop > min(lh, lw):
        raise DatasetError(f"clip {pair.hr.id} too small for {num_frames} frames of {lr_crop}px crops")
    t0 = int(rng.integers(n - num_frames + 1))
    y = int(rng.integers(lh - lr_crop + 1))
    x = int(rng.integers(lw - lr_crop + 1))
    sl = slice(t0, t0 + num_frames)
    lr = pair.lr.frames[sl, :, y:y + lr_crop, x:x + lr_crop]
    hr = pair.hr.frames[sl, :, y * scale:(y + lr_crop) * scale, x * scale:(x + lr_crop) * scale]
    flipped = bool(flip and rng.random() < 0.5)
    if flipped:
        lr, hr = lr[..., ::-1], hr[..., ::-1]
    lr, hr = np.ascontiguousarray(lr), np.ascontiguousarray(hr)
    if noise_bank is not None and lam > 0:
        noisy = mix_noise(VideoClip(lr), noise_bank, lam, rng).frames
    elif lam > 0:
        raise ConfigurationError("noise mixing ratio > 0 but no noise bank configured")
    else:
        noisy = lr.copy()
    frames = tuple(range(t0, t0 + num_frames))
    return Sample(hr, lr, noisy, pair.pack.subset(frames), pair.record, frames, (y, x), flipped)


def collate(samples, d_text):
    out = {
        "hr": torch.from_numpy(np.stack([s.hr_crop for s in samples])),
        "lr": torch.from_numpy(np.stack([s.lr_crop for s in samples])),
        "noisy": torch.from_numpy(np.stack([s.noisy_lr for s in samples])),
        "content": torch.from_numpy(np.stack([s.content_embeddings for s in samples])),
    }
    deg = [s.degradation_embedding if s.degradation_embedding is not None else np.zeros(d_text, np.float32)
           for s in samples]
    out["degradation"] = torch.from_numpy(np.stack(deg))
    return out


# ----------------------------------------------------------------- train state

@dataclass
class TrainState:
    stage: int
    iteration: int
    generator: TextOVSRGenerator
    discriminator: Discriminator
    config: TrainConfig
    opt_g: Optional[torch.optim.Optimizer] = None
    opt_d: Optional[torch.optim.Optimizer] = None
    rng: Optional[np.random.Generator] = None
    lineage: dict = field(default_factory=dict)
    log: list = field(default_factory=list)

    @property
    def weights(self):
        return self.config.weights

    @property
    def checkpoint_id(self):
        return self.lineage.get("id")


def build_models(config: TrainConfig):
    torch.manual_seed(config.seed)
    gen = TextOVSRGenerator(config.generator)
    t = asdict(config.discriminator)
    t["d_text"] = config.generator.d_text
    disc = Discriminator(TedConfig(**t))
    return gen, disc


def _checkpoint_id(config, stage, iteration, parent):
    h = hashlib.sha256(f"{config.digest()}:{stage}:{iteration}:{parent}".encode())
    return h.hexdigest()[:16]


def save_checkpoint(path, state: TrainState):
    """Single archive: namespaced tensors, config snapshot, optimizer and lineage metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    parent = state.lineage.get("parent")
    lineage = dict(state.lineage)
    lineage["id"] = _checkpoint_id(state.config, state.stage, state.iteration, parent)
    state.lineage = lineage
    tensors = {f"generator/{k}": v for k, v in state.generator.state_dict().items()}
    tensors.update({f"ted/{k}": v for k, v in state.discriminator.state_dict().items()})
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "stage": state.stage,
        "iteration": state.iteration,
        "config": json.dumps(state.config.to_dict()),
        "lineage": json.dumps(lineage),
        "tensors": tensors,
        "optim": {
            "generator": state.opt_g.state_dict() if state.opt_g else None,
            "ted": state.opt_d.state_dict() if state.opt_d else None,
        },
        "rng": json.dumps(state.rng.bit_generator.state) if state.rng is not None else None,
    }
    torch.save(payload, path)
    return lineage["id"]


def _read_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise VersioningError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    if int(payload.get("version", -1)) != CHECKPOINT_VERSION:
        raise VersioningError(f"unsupported checkpoint version {payload.get('version')}")
    return payload


def load_checkpoint(path) -> TrainState:
    payload = _read_checkpoint(path)
    config = TrainConfig.from_dict(json.loads(payload["config"]))
    gen, disc = build_models(config)
    tensors = payload["tensors"]
    gen.load_state_dict({k[len("generator/"):]: v for k, v in tensors.items() if k.startswith("generator/")})
    disc.load_state_dict({k[len("ted/"):]: v for k, v in tensors.items() if k.startswith("ted/")})
    state = TrainState(int(payload["stage"]), int(payload["iteration"]), gen, disc, config,
                       lineage=json.loads(payload["lineage"]))
    state._optim = payload["optim"]
    if payload.get("rng"):
        rng = np.random.default_rng()
        rng.bit_generator.state = json.loads(payload["rng"])
        state.rng = rng
    return state


def load_generator(path):
    """Inference loading: only ``generator/`` tensors are read; ``ted/`` is skipped."""
    payload = _read_checkpoint(path)
    config = TrainConfig.from_dict(json.loads(payload["config"]))
    gen = TextOVSRGenerator(config.generator)
    gen.load_state_dict({k[len("generator/"):]: v for k, v in payload["tensors"].items()
                         if k.startswith("generator/")})
    lineage = json.loads(payload["lineage"])
    return gen.eval(), config, lineage.get("id")


# ------------------------------------------------------------------- training

class LossLog:
    """Line-delimited JSON loss log; also kept in memory."""

    KEYS = ("iter", "stage", "rec", "neg", "per", "clipiqa", "adv_g", "adv_d", "total")

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, **row):
        row = {k: row.get(k) for k in self.KEYS}
        self.rows.append(row)
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(row) + "\n")


def _f(x):
    return None if x is None else float(x.detach()) if torch.is_tensor(x) else float(x)


def _check_finite(iteration, **terms):
    for name, v in terms.items():
        if v is not None and not torch.isfinite(v).all():
            logger.error("non-finite %s loss at iteration %d", name, iteration)
            raise TrainingError(iteration, f"non-finite {name} loss")


def _draw_batch(dataset, config, rng):
    idx = rng.integers(len(dataset), size=config.batch_size)
    samples = [make_sample(dataset[int(i)], rng, config.num_frames, config.lr_crop, config.scale,
                           config.flip, dataset.noise_bank, config.weights.lambda_mix) for i in idx]
    return collate(samples, config.generator.d_text)


def _stage1_terms(gen, batch, weights):
    pos = gen.forward_positive(batch["lr"], batch["content"]).sr
    neg = gen.forward_negative(batch["noisy"], batch["degradation"]).sr
    rec = rec_loss(pos, batch["hr"], weights.charbonnier_eps)
    nl = neg_loss(pos, neg, weights.neg_detach)
    return pos, rec, nl


def run_stage1(config: TrainConfig, dataset: PairedClipDataset, out_dir=None, resume=None,
               log_path=None, callback=None, models=None) -> TrainState:
    """Optimize ``rec + alpha * neg`` over the generator only.

    Args:
        config: resolved training config.
        dataset: paired clips.
        out_dir: where the JSONL log and checkpoints go; nothing is written when None.
        resume: stage-1 checkpoint to continue from.
        log_path: explicit JSONL path (overrides ``out_dir``).
        callback: called with the state after every iteration; a truthy return stops early.
        models: optional prebuilt ``(generator, discriminator)`` matching ``config``.
    """
    if resume is not None:
        state = load_checkpoint(resume)
        if state.stage != 1:
            raise LineageError(f"cannot resume stage 1 from a stage-{state.stage} checkpoint")
        config = state.config if config is None else config
        state.config = config
    else:
        gen, disc = models if models is not None else build_models(config)
        state = TrainState(1, 0, gen, disc, config, rng=np.random.default_rng(config.seed),
                           lineage={"parent": None, "stage1": None})
    gen = state.generator.train()
    state.opt_g = torch.optim.Adam(gen.parameters(), lr=config.lr_stage1)
    if resume is not None and getattr(state, "_optim", {}).get("generator"):
        state.opt_g.load_state_dict(state._optim["generator"])
    if state.rng is None:
        state.rng = np.random.default_rng(config.seed)
    log = LossLog(log_path or (Path(out_dir) / "train_log.jsonl" if out_dir else None))
    state.log = log.rows
    w = config.weights
    while state.iteration < config.iterations:
        batch = _draw_batch(dataset, config, state.rng)
        _, rec, nl = _stage1_terms(gen, batch, w)
        total = stage1_total(rec, nl, w)
        _check_finite(state.iteration, total=total)
        state.opt_g.zero_grad(set_to_none=True)
        total.backward()
        state.opt_g.step()
        state.iteration += 1
        log.write(iter=state.iteration, stage=1, rec=_f(rec), neg=_f(nl), total=_f(total))
        if callback is not None and callback(state):
            break
        if out_dir and config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
            save_checkpoint(Path(out_dir) / f"stage1_{state.iteration:06d}.pt", state)
    if out_dir:
        save_checkpoint(Path(out_dir) / "stage1_final.pt", state)
    return state


def run_stage2(config: Optional[TrainConfig], dataset: PairedClipDataset, stage1_ckpt, out_dir=None,
               log_path=None, scorer=None, extractor=None, callback=None) -> TrainState:
    """Alternate generator (stage-2 total) and discriminator updates, 1:1."""
    if stage1_ckpt is None or not Path(stage1_ckpt).exists():
        raise LineageError(f"stage 2 requires a stage-1 checkpoint, got {stage1_ckpt!r}")
    state = load_checkpoint(stage1_ckpt)
    if state.stage == 1:
        parent = state.lineage.get("id")
        resumed = False
        state.lineage = {"parent": parent, "stage1": parent}
        state.iteration = 0
    elif state.stage == 2 and state.lineage.get("stage1"):
        resumed = True
    else:
        raise LineageError("stage-2 checkpoint lacks stage-1 provenance")
    if config is not None:
        config = copy.deepcopy(config)
        config.generator = state.config.generator
        state.config = config
    config = state.config
    state.stage = 2
    gen, disc = state.generator.train(), state.discriminator.train()
    state.opt_g = torch.optim.Adam(gen.parameters(), lr=config.lr_stage2)
    state.opt_d = torch.optim.Adam([p for p in disc.parameters() if p.requires_grad], lr=config.lr_stage2)
    if resumed:
        state.opt_g.load_state_dict(state._optim["generator"])
        state.opt_d.load_state_dict(state._optim["ted"])
    if state.rng is None:
        state.rng = np.random.default_rng(config.seed + 1)
    scorer = scorer or ContrastQualityScorer()
    extractor = extractor or RandomFeatureExtractor()
    log = LossLog(log_path or (Path(out_dir) / "train_log_stage2.jsonl" if out_dir else None))
    state.log = log.rows
    w = config.weights
    d_params = [p for p in disc.parameters() if p.requires_grad]
    while state.iteration < config.stage2_iterations:
        batch = _draw_batch(dataset, config, state.rng)
        # generator update
        for p in d_params:
            p.requires_grad_(False)
        pos, rec, nl = _stage1_terms(gen, batch, w)
        per = perceptual_loss(pos, batch["hr"], extractor)
        iqa = clipiqa_loss(pos, scorer)
        adv_g = adv_loss_g(pos, batch["content"], disc)
        total = stage2_total(rec, nl, per, iqa, adv_g, w)
        _check_finite(state.iteration, total=total)
        state.opt_g.zero_grad(set_to_none=True)
        total.backward()
        state.opt_g.step()
        for p in d_params:
            p.requires_grad_(True)
        # discriminator update
        adv_d = adv_loss_d(batch["hr"], pos, batch["content"], disc)
        _check_finite(state.iteration, adv_d=adv_d)
        state.opt_d.zero_grad(set_to_none=True)
        adv_d.backward()
        state.opt_d.step()
        state.iteration += 1
        log.write(iter=state.iteration, stage=2, rec=_f(rec), neg=_f(nl), per=_f(per), clipiqa=_f(iqa),
                  adv_g=_f(adv_g), adv_d=_f(adv_d), total=_f(total))
        if callback is not None and callback(state):
            break
        if out_dir and config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
            save_checkpoint(Path(out_dir) / f"stage2_{state.iteration:06d}.pt", state)
    if out_dir:
        save_checkpoint(Path(out_dir) / "stage2_final.pt", state)
    return state
