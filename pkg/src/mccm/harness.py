"""Training, evaluation and the leave-one-out cross-generator grid."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import evalkit, freqspec, imgdata, lossfn, net
from .imgdata import Dataset

log = logging.getLogger(__name__)

VARIANTS = ("dual_cmfl", "dual_bce", "one_rgb", "one_dft", "fusion")
TRAINED_VARIANTS = VARIANTS[:4]
VARIANT_MODE = {"dual_cmfl": "dual", "dual_bce": "dual", "one_rgb": "rgb_only", "one_dft": "dft_only"}
PROTOCOLS = ("I", "II")


@dataclass(frozen=True)
class ExperimentConfig:
    protocol: str = "I"
    train_generator: str = "freqfake"
    model_variant: str = "dual_cmfl"
    loss_cfg: lossfn.LossConfig = lossfn.LossConfig()
    net_cfg: net.NetConfig = net.NetConfig()
    epochs: int = 25
    batch_size: int = 32
    lr: float = 1e-4
    wd: float = 1e-5
    flip_prob: float = 0.5
    seed: int = 0
    # samples per forward/backward chunk; gradients are summed, so results do not depend on it
    micro_batch: int = 8
    decoupled_wd: bool = False

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.model_variant not in VARIANTS:
            raise ValueError(f"unknown model variant {self.model_variant!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.micro_batch < 1:
            raise ValueError("epochs, batch_size and micro_batch must be positive")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")

    def network_config(self) -> net.NetConfig:
        if self.model_variant == "fusion":
            raise ValueError("the fusion variant combines two trained single-channel models; it is not trained")
        heads = net.NetConfig.for_mode(VARIANT_MODE[self.model_variant]).heads
        return replace(self.net_cfg, heads=heads, seed=self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["net_cfg"]["heads"] = list(self.net_cfg.heads)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "loss_cfg" in d:
            d["loss_cfg"] = lossfn.LossConfig(**d["loss_cfg"])
        if "net_cfg" in d:
            nc = dict(d["net_cfg"])
            if "heads" in nc:
                nc["heads"] = tuple(nc["heads"])
            d["net_cfg"] = net.NetConfig(**nc)
        return cls(**d)


@dataclass
class TrainResult:
    best_state: net.NetworkState
    history: list[tuple[int, float, float]]
    best_epoch: int
    counters: Counter = field(default_factory=Counter)

    def history_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss"]
        lines += [f"{e},{evalkit.format_float(t)},{evalkit.format_float(v)}" for e, t, v in self.history]
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- objectives


def objective(variant: str, probs: dict, y: np.ndarray, loss_cfg: lossfn.LossConfig):
    """Per-sample loss and per-sample ``dL/dp`` for each supervised head."""
    eps = loss_cfg.clamp_eps
    if variant == "dual_cmfl":
        h = lossfn.HeadOutputs(probs["spatial"], probs["frequency"], probs["joint"])
        loss, _, _, _ = lossfn.per_sample_loss(h, y, loss_cfg)
        g = lossfn.total_loss_grad(h, y, loss_cfg)
        return loss, {"spatial": g.s, "frequency": g.f, "joint": g.r}
    heads = {
        "dual_bce": ("spatial", "frequency", "joint") if loss_cfg.bce_all_heads else ("joint",),
        "one_rgb": ("spatial",),
        "one_dft": ("frequency",),
    }[variant]
    loss = np.zeros(len(y))
    grads = {}
    for name in heads:
        p = probs[name]
        pc = lossfn.clamp(p, eps)
        loss = loss + lossfn.bce_loss(pc, y)
        inside = (p >= eps) & (p <= 1.0 - eps)
        grads[name] = np.where(inside, lossfn.bce_grad(pc, y), 0.0)
    return loss, grads


# --------------------------------------------------------------------------- inputs


def _require_both_classes(ds: Dataset, what: str) -> None:
    labels = set(ds.labels.tolist())
    if labels != {0, 1}:
        raise ValueError(f"{what} split must contain pristine and synthetic samples, found labels {sorted(labels)}")


def model_inputs(rgb: np.ndarray, cfg: net.NetConfig):
    """RGB batch to the ``(rgb, freq)`` pair the enabled branches consume."""
    freq = freqspec.to_freq_batch(rgb) if "dft" in cfg.branches else None
    rgb_in = rgb if "rgb" in cfg.branches else None
    return rgb_in, freq


def augmented_images(ds: Dataset, eval_seed: int | None) -> np.ndarray:
    """Float images of ``ds``; with ``eval_seed`` the fixed per-image augmentation is applied."""
    out = np.empty(ds.pixels.shape, dtype=np.float64)
    for i, rec in enumerate(ds.manifest.records):
        img = ds.image(i)
        if eval_seed is not None:
            img = imgdata.apply_augment(img, imgdata.deterministic_eval_aug(rec.id, eval_seed))
        out[i] = img
    return out


def inputs_digest(images: np.ndarray) -> str:
    return hashlib.sha256(imgdata.pack_images(list(images))).hexdigest()


def _forward_scores(state: net.NetworkState, images: np.ndarray, chunk: int = 64) -> dict[str, np.ndarray]:
    cfg = state.cfg
    out: dict[str, list] = {h: [] for h in cfg.heads}
    for i in range(0, len(images), chunk):
        rgb, freq = model_inputs(images[i : i + chunk], cfg)
        probs, _, _ = net.forward(state, rgb, freq)
        for h in cfg.heads:
            out[h].append(probs[h].astype(np.float64))
    return {h: np.concatenate(v) for h, v in out.items()}


def validation_loss(state: net.NetworkState, variant: str, images: np.ndarray, labels: np.ndarray,
                    loss_cfg: lossfn.LossConfig) -> float:
    probs = _forward_scores(state, images)
    loss, _ = objective(variant, probs, labels, loss_cfg)
    return float(np.mean(loss))


# --------------------------------------------------------------------------- training


def _train_sample(img: np.ndarray, rng: np.random.Generator, cfg: ExperimentConfig, counters: Counter,
                  label: int) -> np.ndarray:
    if rng.random() < cfg.flip_prob:
        img = imgdata.hflip(img)
        counters[f"flip_{label}"] += 1
    if cfg.protocol == "II":
        sigma = float(rng.uniform(0.0, 2.0))
        quality = imgdata.JPEG_QUALITIES[int(rng.integers(len(imgdata.JPEG_QUALITIES)))]
        img = imgdata.apply_augment(img, imgdata.AugmentSpec(sigma, quality))
        counters[f"aug_{label}"] += 1
    return img


def train_model(cfg: ExperimentConfig, train: Dataset, val: Dataset) -> TrainResult:
    """Train one variant; keeps the parameters with the lowest validation objective."""
    _require_both_classes(train, "training")
    _require_both_classes(val, "validation")
    ncfg = cfg.network_config()
    state = net.init_network(ncfg)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 1])))
    labels = train.labels
    val_images = augmented_images(val, None)
    val_labels = val.labels
    counters: Counter = Counter()
    history = []
    best_state, best_epoch, best_value = None, -1, math.inf

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        loss_sum = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = np.stack([_train_sample(train.image(i), rng, cfg, counters, int(labels[i])) for i in idx])
            y = labels[idx]
            grads = None
            for m0 in range(0, len(idx), cfg.micro_batch):
                sl = slice(m0, m0 + cfg.micro_batch)
                rgb, freq = model_inputs(batch[sl], ncfg)
                probs, _, cache = net.forward(state, rgb, freq)
                loss, head_grads = objective(cfg.model_variant, probs, y[sl], cfg.loss_cfg)
                loss_sum += float(loss.sum())
                head_grads = {h: g / len(idx) for h, g in head_grads.items()}
                g = net.backward(state, cache, head_grads)
                if grads is None:
                    grads = g
                else:
                    for k in grads:
                        grads[k] += g[k]
            net.adam_step(state, grads, cfg.lr, cfg.wd, decoupled=cfg.decoupled_wd)
        val_loss = validation_loss(state, cfg.model_variant, val_images, val_labels, cfg.loss_cfg)
        history.append((epoch, loss_sum / len(order), val_loss))
        log.info("epoch %d train %.5f val %.5f", epoch, loss_sum / len(order), val_loss)
        if val_loss < best_value:
            best_state, best_epoch, best_value = state.copy(), epoch, val_loss
    best_state.best_epoch = best_epoch
    best_state.best_value = best_value
    return TrainResult(best_state, history, best_epoch, counters)


# --------------------------------------------------------------------------- evaluation


def fusion_score(score_rgb, score_dft):
    """Score-level fusion of two single-channel models: the arithmetic mean."""
    return (np.asarray(score_rgb, dtype=np.float64) + np.asarray(score_dft, dtype=np.float64)) / 2.0


def score_images(state: net.NetworkState, images: np.ndarray) -> np.ndarray:
    head = {"dual": "joint", "rgb_only": "spatial", "dft_only": "frequency"}[state.cfg.mode]
    return _forward_scores(state, images)[head]


def evaluate_model(model, test: Dataset, eval_seed: int | None = None, images: np.ndarray | None = None
                   ) -> evalkit.ScoreSet:
    """Score a test split with a checkpoint state or an ``(rgb_state, dft_state)`` fusion pair."""
    if len(test) == 0:
        raise ValueError("test split is empty")
    if images is None:
        images = augmented_images(test, eval_seed)
    if isinstance(model, tuple):
        rgb_state, dft_state = model
        scores = fusion_score(score_images(rgb_state, images), score_images(dft_state, images))
    else:
        scores = score_images(model, images)
    return evalkit.ScoreSet.from_arrays(test.labels, scores, test.ids)


def fuse_scoresets(a: evalkit.ScoreSet, b: evalkit.ScoreSet) -> evalkit.ScoreSet:
    """Row-wise mean; rows follow ``a``. Id sets must match."""
    lookup = dict(zip(b.ids, zip(b.labels.tolist(), b.scores.tolist())))
    missing = [i for i in a.ids if i not in lookup]
    extra = sorted(set(b.ids) - set(a.ids))
    if missing or extra:
        raise ValueError(f"score files disagree on ids: only in a: {missing[:10]}, only in b: {extra[:10]}")
    mismatched = [i for i, y in zip(a.ids, a.labels.tolist()) if lookup[i][0] != y]
    if mismatched:
        raise ValueError(f"labels differ for ids {mismatched[:10]}")
    other = np.array([lookup[i][1] for i in a.ids])
    return evalkit.ScoreSet(a.ids, a.labels, fusion_score(a.scores, other))


# --------------------------------------------------------------------------- leave-one-out grid


def aug_modes(protocol: str) -> tuple[str, ...]:
    return ("none",) if protocol == "I" else ("none", "with")


def grid_cells(generators: Sequence[str], protocol: str, variants: Sequence[str], seeds: Sequence[int],
               include_seen: bool = False) -> list[tuple]:
    """Expected (variant, protocol, aug, train_gen, test_gen, seed) coordinates."""
    cells = []
    for train_gen in generators:
        tests = [g for g in generators if include_seen or g != train_gen]
        for seed in seeds:
            for test_gen in tests:
                for aug in aug_modes(protocol):
                    for v in variants:
                        cells.append((v, protocol, aug, train_gen, test_gen, seed))
    return cells


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_done(cell_dir: Path, files: list[str]) -> None:
    digest = {f: _sha256(cell_dir / f) for f in files}
    imgdata.atomic_write_text(cell_dir / "done.json", json.dumps(digest, indent=2, sort_keys=True) + "\n")


def _verified(cell_dir: Path) -> bool:
    done = cell_dir / "done.json"
    if not done.is_file():
        return False
    try:
        digest = json.loads(done.read_text())
    except json.JSONDecodeError:
        return False
    return all((cell_dir / f).is_file() and _sha256(cell_dir / f) == h for f, h in digest.items())


def _scores_name(test_gen: str, aug: str) -> str:
    return f"scores_{test_gen}_{aug}.csv"


@dataclass
class GridSpec:
    """Everything needed to run one leave-one-out grid."""

    datasets: dict[str, Dataset]  # "pristine" plus fake generators
    base: ExperimentConfig
    variants: tuple[str, ...] = VARIANTS
    seeds: tuple[int, ...] = (0,)
    eval_seed: int = 0
    include_seen: bool = False
    out_dir: Path | None = None

    @property
    def fakes(self) -> list[str]:
        return [g for g in self.datasets if g != "pristine"]


def _train_cell(spec: GridSpec, train_gen: str, seed: int) -> list[evalkit.EvalReport]:
    """Train every variant for one (train generator, seed) and score every test cell."""
    pristine = spec.datasets["pristine"]
    fake = spec.datasets[train_gen]
    train = imgdata.concat_datasets([pristine.select("train"), fake.select("train")])
    val = imgdata.concat_datasets([pristine.select("val"), fake.select("val")])
    tests = [g for g in spec.fakes if spec.include_seen or g != train_gen]
    protocol = spec.base.protocol
    test_sets = {g: imgdata.concat_datasets([pristine.select("test"), spec.datasets[g].select("test")]) for g in tests}
    test_images: dict[tuple[str, str], np.ndarray] = {}

    def images_for(g: str, aug: str) -> np.ndarray:
        if (g, aug) not in test_images:
            test_images[(g, aug)] = augmented_images(test_sets[g], spec.eval_seed if aug == "with" else None)
        return test_images[(g, aug)]

    root = spec.out_dir / "cells" / train_gen / f"seed{seed}" if spec.out_dir else None
    reports = []
    states: dict[str, net.NetworkState] = {}
    order = [v for v in TRAINED_VARIANTS if v in spec.variants or (v in ("one_rgb", "one_dft") and "fusion" in spec.variants)]
    for variant in order + (["fusion"] if "fusion" in spec.variants else []):
        cell_dir = root / variant if root else None
        score_sets: dict[tuple[str, str], evalkit.ScoreSet] = {}
        if cell_dir is not None and _verified(cell_dir):
            for g in tests:
                for aug in aug_modes(protocol):
                    score_sets[(g, aug)] = evalkit.read_scores(cell_dir / _scores_name(g, aug))
        else:
            if variant == "fusion":
                for single in ("one_rgb", "one_dft"):
                    if single not in states:
                        states[single] = net.load_checkpoint(root / single / "model.ckpt")
                for g in tests:
                    for aug in aug_modes(protocol):
                        score_sets[(g, aug)] = evaluate_model(
                            (states["one_rgb"], states["one_dft"]), test_sets[g], images=images_for(g, aug))
            else:
                cfg = replace(spec.base, model_variant=variant, train_generator=train_gen, seed=seed)
                log.info("training %s on %s seed %d", variant, train_gen, seed)
                result = train_model(cfg, train, val)
                states[variant] = result.best_state
                for g in tests:
                    for aug in aug_modes(protocol):
                        score_sets[(g, aug)] = evaluate_model(result.best_state, test_sets[g], images=images_for(g, aug))
                if cell_dir is not None:
                    cell_dir.mkdir(parents=True, exist_ok=True)
                    net.save_checkpoint(result.best_state, cell_dir / "model.ckpt")
                    imgdata.atomic_write_text(cell_dir / "history.csv", result.history_csv())
            if cell_dir is not None:
                cell_dir.mkdir(parents=True, exist_ok=True)
                for (g, aug), ss in score_sets.items():
                    evalkit.write_scores(ss, cell_dir / _scores_name(g, aug))
                files = [_scores_name(g, aug) for (g, aug) in score_sets]
                if variant != "fusion":
                    files += ["model.ckpt", "history.csv"]
                _write_done(cell_dir, sorted(files))
        if variant not in spec.variants:
            continue
        for (g, aug), ss in score_sets.items():
            reports.append(evalkit.evaluate(ss, variant=variant, protocol=protocol, aug=aug,
                                            train_gen=train_gen, test_gen=g, seed=seed))
    return reports


def _timed_cell(spec: GridSpec, train_gen: str, seed: int) -> tuple[list[evalkit.EvalReport], float]:
    t0 = time.perf_counter()
    reports = _train_cell(spec, train_gen, seed)
    return reports, time.perf_counter() - t0


def run_leave_one_out(spec: GridSpec, jobs: int = 1, timings: dict | None = None) -> list[evalkit.EvalReport]:
    """Train on one fake generator at a time, test on the held-out ones.

    Pristine test images are shared by every test cell of a training cell.
    Protocol II is scored twice: without and with the fixed per-image
    evaluation augmentation. If ``timings`` is given it receives the wall
    time in seconds of each ``(train_gen, seed)`` job.
    """
    if "pristine" not in spec.datasets:
        raise ValueError("grid needs a pristine dataset")
    if len(spec.fakes) < 2:
        raise ValueError("leave-one-out needs at least two fake generators")
    for name, ds in spec.datasets.items():
        for split in imgdata.SPLITS:
            if len(ds.indices(split)) == 0:
                raise ValueError(f"dataset {name!r} has an empty {split} split")
    jobs_list = [(g, s) for g in spec.fakes for s in spec.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_timed_cell, [spec] * len(jobs_list), *zip(*jobs_list)))
    else:
        parts = [_timed_cell(spec, g, s) for g, s in jobs_list]
    if timings is not None:
        timings.update({job: secs for job, (_, secs) in zip(jobs_list, parts)})
    reports = [r for part, _ in parts for r in part]
    evalkit.check_grid(reports, grid_cells(spec.fakes, spec.base.protocol, spec.variants, spec.seeds,
                                           spec.include_seen))
    return reports


def config_summary(cfg: ExperimentConfig) -> str:
    buf = io.StringIO()
    json.dump(cfg.to_dict(), buf, sort_keys=True)
    return buf.getvalue()
