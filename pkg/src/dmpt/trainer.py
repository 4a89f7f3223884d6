"""Losses, few-shot sampling and the training loop."""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math

import numpy as np

from . import tensor as T
from .errors import ContractError, DataError, DivergenceError
from .optim import OptimizerState, sgd_step

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step", "phase", "lr", "l_ce", "l_ca", "l_coop", "l_vpt", "total")


@dataclass
class Sample:
    image: np.ndarray
    label: int
    bbox: tuple | None = None
    path: str = ""


@dataclass
class FewShotTask:
    class_names: list
    support: list
    query: list

    @property
    def shots(self):
        counts = np.bincount([s.label for s in self.support], minlength=len(self.class_names))
        return int(counts.min()) if len(counts) else 0


@dataclass
class LossReport:
    l_ce: float
    l_ca: float = 0.0
    l_coop: float = 0.0
    l_vpt: float = 0.0
    total: float = 0.0
    phase: str = "main"
    lr: float = 0.0


def sample_few_shot(dataset, shots, seed):
    """Draw ``shots`` support samples per class without replacement.

    ``dataset`` is ``(class_names, samples)``; every sample not drawn goes
    to the query split.
    """
    class_names, samples = dataset
    rng = np.random.Generator(np.random.PCG64(seed))
    support, query = [], []
    for label, name in enumerate(class_names):
        members = [s for s in samples if s.label == label]
        if len(members) < shots:
            raise DataError(f"class {name!r} has {len(members)} images, fewer than {shots} shots")
        chosen = set(rng.choice(len(members), size=shots, replace=False).tolist())
        support += [members[i] for i in sorted(chosen)]
        query += [m for i, m in enumerate(members) if i not in chosen]
    return FewShotTask(list(class_names), support, query)


def stack_images(samples):
    return np.stack([s.image for s in samples]).astype(np.float32)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def loss_main(result, labels):
    """Cross entropy of the variant's prediction logits."""
    if len(labels) == 0:
        raise DataError("empty batch")
    return T.cross_entropy(result.logits, labels)


def loss_ca(result, labels):
    """Auxiliary K-way cross entropy on the generator's ground-truth rows.

    Averaged over CAVPT layers when there is more than one.
    """
    if not result.aux_logits:
        raise ContractError("loss_ca needs a forward pass with class-aware prompts and labels")
    terms = [T.cross_entropy(logits, labels) for logits in result.aux_logits]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms)) if len(terms) > 1 else total


def loss_total(l_ce, l_ca, alpha):
    return l_ce + l_ca * alpha


def warmup_terms(model, result, labels, plain_features):
    """``(l_coop, l_vpt)``: learned text vs. prompt-free image, template text vs. prompted image."""
    x = plain_features if isinstance(plain_features, T.Tensor) else T.Tensor(plain_features)
    l_coop = T.cross_entropy(model.logits(x, result.text_features), labels)
    l_vpt = T.cross_entropy(model.logits(result.image_features, model.handcrafted), labels)
    return l_coop, l_vpt


def warmup_loss(l_coop, l_vpt, l_ce, l_ca, alpha, beta):
    total = l_coop + l_vpt + l_ce * beta
    if l_ca is not None:
        total = total + l_ca * alpha
    return total


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


class Trainer:
    """Optimises a model's prompt parameters on a few-shot support set."""

    def __init__(self, model, config, epochs=None, log_path=None):
        self.model = model
        self.config = config
        self.epochs = config.epochs_for(config.shots) if epochs is None else epochs
        self.log_path = log_path
        self.global_step = 0
        self.phase_switches = []
        self.history = []
        self._log = None
        self.groups = model.prompts.parameter_groups(include_generator=model.uses_cavpt)

    @property
    def knowledge_warmup(self):
        return self.model.variant in ("vlp", "dpt")

    def phase(self, epoch):
        return "warmup" if self.knowledge_warmup and epoch < self.config.warmup_epochs else "main"

    def make_states(self, steps_per_epoch):
        """One schedule per parameter group; the constant warm-up applies to visual-side groups only."""
        total = max(1, self.epochs * steps_per_epoch)
        fixed = min(self.config.fixed_warmup_epochs * steps_per_epoch, total - 1)
        rates = self.config.group_learning_rates()
        states = {}
        for name in self.groups:
            states[name] = OptimizerState(
                base_lr=rates[name],
                total_steps=total,
                warmup_steps=0 if name == "text" else fixed,
                warmup_lr=self.config.fixed_warmup_lr,
            )
        return states

    def compute_losses(self, images, labels, plain_features, phase):
        """Forward pass and the phase's objective; returns ``(total, LossReport)``."""
        model, cfg = self.model, self.config
        result = model.forward(images, labels=labels, plain_features=plain_features)
        l_ce = loss_main(result, labels)
        l_ca = loss_ca(result, labels) if model.uses_cavpt else None
        report = LossReport(l_ce=l_ce.item(), l_ca=l_ca.item() if l_ca is not None else 0.0, phase=phase)
        if phase == "warmup":
            l_coop, l_vpt = warmup_terms(model, result, labels, plain_features)
            total = warmup_loss(l_coop, l_vpt, l_ce, l_ca, cfg.alpha, cfg.beta)
            report.l_coop, report.l_vpt = l_coop.item(), l_vpt.item()
        else:
            total = loss_total(l_ce, l_ca, cfg.alpha) if l_ca is not None else l_ce
        report.total = total.item()
        return total, report

    def train_step(self, images, labels, plain_features, epoch, states):
        phase = self.phase(epoch)
        if self.phase_switches == [] or self.phase_switches[-1][1] != phase:
            self.phase_switches.append((epoch, phase))
            logger.info("epoch %d: objective phase %s", epoch, phase)
        total, report = self.compute_losses(images, labels, plain_features, phase)
        if not math.isfinite(report.total):
            raise DivergenceError(f"non-finite loss {report.total} at step {self.global_step}", step=self.global_step)
        T.backward(total)
        lead = "text" if "text" in states else "visual"
        report.lr = states[lead].learning_rate if lead in states else 0.0
        for name, params in self.groups.items():
            sgd_step(params, states[name])
        self._write_log(epoch, phase, report)
        self.global_step += 1
        self.history.append(report)
        return report

    def fit(self, task):
        """Train for the configured epochs; returns the list of step reports."""
        if self.model.variant == "zeroshot" or self.epochs == 0:
            return []
        support = task.support
        if not support:
            raise DataError("empty support set")
        images = stack_images(support)
        labels = np.array([s.label for s in support])
        plain = self.model.plain_features(images).data
        bs = self.config.batch_size
        steps_per_epoch = math.ceil(len(support) / bs)
        states = self.make_states(steps_per_epoch)
        rng = np.random.Generator(np.random.PCG64(self.config.seed))
        if self.log_path:
            self._log = open(self.log_path, "w", encoding="utf-8")
            self._log.write("\t".join(LOG_COLUMNS) + "\n")
        try:
            for epoch in range(self.epochs):
                order = rng.permutation(len(support))
                for start in range(0, len(order), bs):
                    idx = order[start : start + bs]
                    self.train_step(images[idx], labels[idx], plain[idx], epoch, states)
        finally:
            if self._log:
                self._log.close()
                self._log = None
        return self.history

    def _write_log(self, epoch, phase, r):
        if self._log is None:
            return
        row = [str(epoch), str(self.global_step), phase, f"{r.lr:.6g}"]
        row += [f"{v:.6f}" for v in (r.l_ce, r.l_ca, r.l_coop, r.l_vpt, r.total)]
        self._log.write("\t".join(row) + "\n")
