"""Experiment orchestration: model assembly, evaluation, attention maps and results."""

from __future__ import annotations

from dataclasses import dataclass
import itertools
import logging
import os
import time

import numpy as np

from . import backbone as bb
from . import tensor as T
from .dataset import load_dataset, write_pgm
from .errors import DataError
from .prompts import PromptedCLIP, PromptSet
from .trainer import Trainer, sample_few_shot, stack_images

logger = logging.getLogger(__name__)

RESULTS_HEADER = ("variant", "shots", "seed", "accuracy", "epochs", "seconds")


@dataclass
class ResultsRow:
    variant: str
    shots: int
    seed: int
    test_accuracy: float
    epochs_run: int
    wall_seconds: float

    def __post_init__(self):
        if not 0.0 <= self.test_accuracy <= 1.0:
            raise ValueError(f"accuracy {self.test_accuracy} outside [0, 1]")


def load_vocabulary(config):
    return bb.Vocabulary.from_file(config.vocab) if config.vocab else bb.Vocabulary.default()


def load_backbone(config, vocab):
    cfg = config.backbone(len(vocab))
    return bb.init_or_load_weights(cfg, config.weights or None, config.backbone_seed)


def build_model(config, class_names, weights=None, vocab=None, prompts=None):
    """A :class:`PromptedCLIP` for ``config``; fresh prompts unless ``prompts`` is given."""
    vocab = vocab or load_vocabulary(config)
    weights = weights or load_backbone(config, vocab)
    if prompts is None:
        prompts = PromptSet.initialise(config.prompt_settings(), weights.config, len(class_names), config.seed)
    return PromptedCLIP(weights, vocab, class_names, prompts)


def load_task(config, shots=None, seed=None):
    data = load_dataset(config.data_dir)
    return sample_few_shot(data, config.shots if shots is None else shots, config.seed if seed is None else seed)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def predict(model, samples, batch_size=64):
    out = []
    for start in range(0, len(samples), batch_size):
        out.append(model.predict(stack_images(samples[start : start + batch_size])))
    return np.concatenate(out) if out else np.zeros(0, int)


def evaluate(task, model, batch_size=64):
    """Query-set accuracy; selections at inference never see labels."""
    if not task.query:
        raise DataError("empty query set")
    labels = np.array([s.label for s in task.query])
    return float(np.mean(predict(model, task.query, batch_size) == labels))


# ---------------------------------------------------------------------------
# attention maps
# ---------------------------------------------------------------------------


def attention_grid(model, images):
    """Final-layer class-token attention on patch slots, head-averaged, as ``(B, g, g)``."""
    images = np.asarray(images, np.float32)
    if images.ndim == 3:
        images = images[None]
    with T.no_lineage():
        result = model.forward(images)
    g = model.weights.config.grid
    p = result.n_prompts[-1]
    patches = result.cls_attention[:, :, 1 + p :].mean(axis=1)
    return patches.reshape(-1, g, g)


def upsample_nearest(grid, factor):
    return np.repeat(np.repeat(grid, factor, axis=-2), factor, axis=-1)


def normalize_map(grid):
    lo, hi = float(grid.min()), float(grid.max())
    if hi == lo:
        return np.zeros(grid.shape, np.uint8)
    return np.rint((grid - lo) / (hi - lo) * 255.0).astype(np.uint8)


def export_attention_map(image, model, out_path):
    """Write the image's attention map as a binary PGM; returns the uint8 array."""
    grid = attention_grid(model, image)[0]
    gray = upsample_nearest(normalize_map(grid), model.weights.config.patch_size)
    write_pgm(out_path, gray)
    return gray


def attention_focus(grid, bbox, patch_size):
    """Share of patch attention inside ``bbox`` (x0, y0, x1, y1 in pixels).

    Each patch's mass is spread evenly over its pixels, so partially covered
    patches contribute in proportion to the overlap.
    """
    grid = np.asarray(grid, np.float64)
    total = grid.sum()
    if total <= 0:
        return 0.0
    pixels = upsample_nearest(grid, patch_size) / (patch_size * patch_size)
    x0, y0, x1, y1 = bbox
    return float(pixels[y0:y1, x0:x1].sum() / total)


def mean_focus(model, samples, batch_size=64):
    ps = model.weights.config.patch_size
    values = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        grids = attention_grid(model, stack_images(chunk))
        values += [attention_focus(g, s.bbox, ps) for g, s in zip(grids, chunk)]
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------


def summarize(rows):
    """``{(variant, shots): (mean, std, rows)}`` in first-seen order; std is the population std."""
    groups = {}
    for r in rows:
        groups.setdefault((r.variant, r.shots), []).append(r)
    out = {}
    for key, members in groups.items():
        acc = np.array([r.test_accuracy for r in members], np.float64)
        # centring on the first value keeps the std of identical values exactly 0
        out[key] = (float(acc.mean()), float((acc - acc[0]).std()), members)
    return out


def write_results(rows, path):
    if not rows:
        raise DataError("no results to write")
    lines = [",".join(RESULTS_HEADER)]
    for r in rows:
        lines.append(f"{r.variant},{r.shots},{r.seed},{r.test_accuracy:.4f},{r.epochs_run},{r.wall_seconds:.2f}")
    for (variant, shots), (mean, std, members) in summarize(rows).items():
        epochs = members[0].epochs_run
        seconds = sum(r.wall_seconds for r in members)
        lines.append(f"{variant},{shots},mean+-std,{mean:.4f}+-{std:.4f},{epochs},{seconds:.2f}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_results(path):
    """Data rows of a results file (summary rows skipped)."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != RESULTS_HEADER:
            raise DataError(f"{path}: unexpected header {header}")
        for line in fh:
            variant, shots, seed, acc, epochs, secs = line.strip().split(",")
            if not seed.isdigit():
                continue
            rows.append(ResultsRow(variant, int(shots), int(seed), float(acc), int(epochs), float(secs)))
    return rows


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


def cell_name(variant, shots, seed):
    return f"{variant}_{shots}shot_seed{seed}"


def train_cell(config, dataset, weights, vocab, out_dir=None):
    """Sample, train and evaluate one (variant, shots, seed) cell."""
    task = sample_few_shot(dataset, config.shots, config.seed)
    model = build_model(config, task.class_names, weights, vocab)
    epochs = 0 if config.variant == "zeroshot" else config.epochs_for(config.shots)
    name = cell_name(config.variant, config.shots, config.seed)
    log_path = os.path.join(out_dir, name + ".log") if out_dir else None
    start = time.perf_counter()
    Trainer(model, config, epochs=epochs, log_path=log_path).fit(task)
    accuracy = evaluate(task, model)
    seconds = time.perf_counter() - start
    if out_dir:
        model.prompts.save(os.path.join(out_dir, name + ".dptp"))
        if config.attention_maps:
            maps = os.path.join(out_dir, "attention")
            os.makedirs(maps, exist_ok=True)
            for i, sample in enumerate(task.query[: config.attention_maps]):
                export_attention_map(sample.image, model, os.path.join(maps, f"{name}_{i:03d}.pgm"))
    row = ResultsRow(config.variant, config.shots, config.seed, accuracy, epochs, seconds)
    logger.info("%s: accuracy %.4f in %.1fs", name, accuracy, seconds)
    return row, model, task


def run_experiment(config, results_path=None):
    """Every (variant, shots, seed) of the sweep; writes the results CSV and returns the rows."""
    dataset = load_dataset(config.data_dir)
    vocab = load_vocabulary(config)
    weights = load_backbone(config, vocab)
    out_dir = config.out_dir
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for variant, shots, seed in itertools.product(config.variants, config.shots_list, config.seeds):
        cell = config.replace(variant=variant, shots=shots, seed=seed)
        row, _, _ = train_cell(cell, dataset, weights, vocab, out_dir)
        rows.append(row)
    write_results(rows, results_path or os.path.join(out_dir, "results.csv"))
    return rows
