"""Training loop with dynamic pseudo ground truth, plus batched inference helpers."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from . import loss as L
from . import net as N
from . import tensor as T
from .config import RunConfig
from .rng import get_state, make_rng, set_state
from .synth import Sample, augment

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    code = "E_TRAIN"


@dataclass
class StepRecord:
    iteration: int
    loss: float
    color_counts: np.ndarray  # counts for colors 2..C


class Trainer:
    """Owns parameters, optimizer state and the data RNG for one run."""

    def __init__(self, cfg: RunConfig, samples: Sequence[Sample],
                 resume: Optional[ckpt_io.Checkpoint] = None):
        self.cfg = cfg.validate()
        if not samples:
            raise TrainingError("training set is empty")
        self.samples = list(samples)
        self.loss_cfg = cfg.loss()
        self.aug_cfg = cfg.augment()
        ncfg = cfg.net()
        for i, s in enumerate(self.samples):
            if s.image.shape[0] != ncfg.input_channels:
                raise TrainingError(f"sample {i} has {s.image.shape[0]} channels, "
                                    f"network expects {ncfg.input_channels}")
            h, w = self.aug_cfg.patch or s.labels.shape
            ncfg.check_input(h, w)
        self.rng = make_rng(cfg.seed, "train-data")
        if resume is not None:
            self.params = resume.params
            self.adam = resume.adam
            self.iteration = resume.iteration
            if resume.rng_state is not None:
                set_state(self.rng, resume.rng_state)
        else:
            self.params = N.build(ncfg, cfg.seed)
            self.adam = T.AdamState()
            self.iteration = 0

    def _batch(self) -> tuple[np.ndarray, list[L.ImageTargets]]:
        idx = self.rng.integers(0, len(self.samples), size=self.cfg.batch)
        images, targets = [], []
        for i in idx:
            s = self.samples[int(i)]
            if self.aug_cfg.rotate or self.aug_cfg.flip or self.aug_cfg.patch:
                s = augment(s, self.rng, self.aug_cfg)
            images.append(s.image)
            targets.append(L.prepare_targets(s.labels, self.loss_cfg))
        return np.stack(images), targets

    def step(self) -> StepRecord:
        images, targets = self._batch()
        y = N.forward(self.params, images, training=True)
        loss, assignments = L.batch_coloring_loss(y, targets, self.loss_cfg)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at iteration {self.iteration + 1}")
        loss.backward()
        grads = {k: t.grad for k, t in self.params.tensors.items()}
        T.adam_step(self.params.tensors, grads, self.adam, self.cfg.lr_at(self.iteration))
        self.iteration += 1
        hist = L.color_histogram(assignments, self.cfg.colors)[2:]
        return StepRecord(self.iteration, value, hist)

    def run(self, iters: int, on_step: Optional[Callable[[StepRecord], None]] = None) -> list[StepRecord]:
        out = []
        t0 = time.time()
        for _ in range(iters):
            rec = self.step()
            out.append(rec)
            if on_step is not None:
                on_step(rec)
            if rec.iteration % 100 == 0:
                log.info("iter %d loss %.4f (%.1fs)", rec.iteration, rec.loss, time.time() - t0)
        return out

    def checkpoint(self) -> ckpt_io.Checkpoint:
        return ckpt_io.Checkpoint(self.params, self.adam, self.iteration, get_state(self.rng),
                                  self.cfg.to_dict())

    def save(self, path) -> None:
        ckpt_io.save(path, self.checkpoint())


class LossLog:
    """Append-only CSV: iteration, loss, then one count column per foreground color."""

    def __init__(self, path, colors: int):
        self.path = Path(path)
        self.header = ["iteration", "loss"] + [f"color_{c}" for c in range(2, colors + 1)]
        if not self.path.exists() or self.path.stat().st_size == 0:
            with self.path.open("w", newline="") as f:
                csv.writer(f).writerow(self.header)

    def append(self, rec: StepRecord) -> None:
        with self.path.open("a", newline="") as f:
            csv.writer(f).writerow([rec.iteration, repr(rec.loss)] + [int(c) for c in rec.color_counts])


def read_loss_log(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with Path(path).open() as f:
        rows = list(csv.reader(f))[1:]
    it = np.array([int(r[0]) for r in rows])
    loss = np.array([float(r[1]) for r in rows])
    counts = np.array([[int(v) for v in r[2:]] for r in rows]) if rows else np.zeros((0, 0), int)
    return it, loss, counts


def predict_probs(params: N.NetworkParams, images: Sequence[np.ndarray], batch: int = 8) -> list[np.ndarray]:
    """Probability maps for a list of (C,H,W) images, evaluated in batches."""
    out: list[np.ndarray] = []
    for s in range(0, len(images), batch):
        chunk = np.stack(images[s:s + batch])
        out.extend(N.forward(params, chunk, training=False).data)
    return out


def color_usage(params: N.NetworkParams, samples: Sequence[Sample], loss_cfg: L.LossConfig,
                batch: int = 8) -> np.ndarray:
    """Histogram (index = color) of the colors the assignment picks for each ground-truth instance."""
    probs = predict_probs(params, [s.image for s in samples], batch)
    assignments = [L.assign_colors(y, L.prepare_targets(s.labels, loss_cfg), loss_cfg)
                   for y, s in zip(probs, samples)]
    return L.color_histogram(assignments, loss_cfg.colors)


def moving_average(x: np.ndarray, window: int) -> np.ndarray:
    if len(x) < window:
        return np.array([])
    c = np.cumsum(np.insert(np.asarray(x, float), 0, 0.0))
    return (c[window:] - c[:-window]) / window
