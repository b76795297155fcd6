"""Two-stage training orchestration: adversarial alignment (ADA),
pseudo-label self-training (PST), and their combinations.

One trainer thread owns every parameter and the gradient tape.  All
randomness derives from the config seed, so identical configs give
bit-identical checkpoints and metric logs.
"""

from __future__ import annotations

import csv
import sys
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from . import tensor as T
from .alignment import Discriminator, GrlConfig, domain_loss, grl
from .data import Dataset, batch_iter
from .errors import ConfigError, NumericError
from .model import ModelConfig, VitSamb
from .pseudo_label import build_table
from .tensor import SgdState


class Scheme(Enum):
    ADA = "ada"
    PST = "pst"
    JOINT = "joint"
    ADA_THEN_PST = "ada-then-pst"
    PST_THEN_ADA = "pst-then-ada"
    ADA_THEN_JOINT = "ada-then-joint"


# phase kinds per stage; single-stage schemes run iterations_1 steps only
_PHASES = {
    Scheme.ADA: ("ada",),
    Scheme.PST: ("pst",),
    Scheme.JOINT: ("joint",),
    Scheme.ADA_THEN_PST: ("ada", "pst"),
    Scheme.PST_THEN_ADA: ("pst", "ada"),
    Scheme.ADA_THEN_JOINT: ("ada", "joint"),
}


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    scheme: Scheme = Scheme.ADA_THEN_JOINT
    iterations_1: int = 200
    iterations_2: int = 200
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 16
    seed: int = 0
    grl: GrlConfig = field(default_factory=GrlConfig)
    eval_every: int = 0          # 0: evaluate only on the final iteration
    wallclock: bool = False      # real timings break bit-identical logs

    def __post_init__(self):
        if self.iterations_1 < 0 or self.iterations_2 < 0:
            raise ConfigError("iteration counts must be >= 0")
        if self.lr <= 0:
            raise ConfigError("learning rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")


@dataclass
class MetricRecord:
    iteration: int
    stage: int
    l_cls: float
    l_d: float
    acc_src: Optional[float]
    acc_tgt: Optional[float]
    seconds: float


class MetricLog:
    HEADER = "iter,stage,l_cls,l_d,acc_src,acc_tgt,seconds"

    def __init__(self):
        self.records: list[MetricRecord] = []

    def append(self, rec: MetricRecord):
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise ConfigError("metric iterations must be strictly increasing")
        self.records.append(rec)

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            f.write(self.HEADER + "\n")
            w = csv.writer(f)
            for r in self.records:
                w.writerow([r.iteration, r.stage,
                            f"{r.l_cls:.12g}", f"{r.l_d:.12g}",
                            "" if r.acc_src is None else f"{r.acc_src:.6f}",
                            "" if r.acc_tgt is None else f"{r.acc_tgt:.6f}",
                            f"{r.seconds:.6f}"])


def evaluate(model: VitSamb, dataset: Dataset, batch_size: int = 64) -> float:
    """Top-1 accuracy with Gumbel noise disabled."""
    if dataset.labels is None:
        raise ConfigError("evaluate needs a labeled dataset")
    correct = 0
    for batch in batch_iter(dataset, batch_size, seed=0, shuffle=False):
        out = model.forward(batch.images.data, train=False)
        pred = np.argmax(out.logits.data, axis=1)
        correct += int((pred == batch.labels).sum())
    T.clear_tape()
    return correct / len(dataset)


def _cycle(dataset: Dataset, batch_size: int, seed: int):
    """Endless shuffled batches; yields (batch, epoch, first_of_epoch)."""
    epoch = 0
    while True:
        first = True
        for batch in batch_iter(dataset, batch_size, seed, shuffle=True, epoch=epoch):
            yield batch, epoch, first
            first = False
        epoch += 1


class Trainer:
    def __init__(self, cfg: TrainConfig, source_train: Dataset,
                 target_train: Dataset, source_eval: Optional[Dataset] = None,
                 target_eval: Optional[Dataset] = None):
        self.cfg = cfg
        self.source_train = source_train
        # the trainer's target path never sees labels
        self.target_train = target_train.without_labels()
        self.source_eval = source_eval
        self.target_eval = target_eval

        children = np.random.SeedSequence(cfg.seed).spawn(4)
        self.model = VitSamb(cfg.model, np.random.default_rng(children[0]))
        self.disc = Discriminator(cfg.model.embed_dim, np.random.default_rng(children[1]))
        self.gumbel_rng = np.random.default_rng(children[2])
        data_seeds = children[3].generate_state(2)
        self._src_iter = _cycle(source_train, cfg.batch_size, int(data_seeds[0]))
        self._tgt_iter = _cycle(self.target_train, cfg.batch_size, int(data_seeds[1]))

        self.opt_state = SgdState()
        self.log = MetricLog()
        self.pseudo_labels: Optional[np.ndarray] = None
        self._global_step = 0

    # -- pieces -------------------------------------------------------------

    def _all_params(self):
        return self.model.params() + self.disc.params()

    def named_params(self):
        out = dict(self.model.named_params())
        out.update(self.disc.named_params())
        return out

    def save_checkpoint(self, path):
        T.save_checkpoint(path, self.named_params())

    def refresh_pseudo_labels(self):
        """Weighted k-means + one refinement over the full target train set."""
        feats, probs = [], []
        for batch in batch_iter(self.target_train, self.cfg.batch_size,
                                seed=0, shuffle=False):
            out = self.model.forward(batch.images.data, train=False)
            feats.append(out.feature.data)
            x = out.logits.data
            e = np.exp(x - x.max(axis=1, keepdims=True))
            probs.append(e / e.sum(axis=1, keepdims=True))
        T.clear_tape()
        feats = np.concatenate(feats)
        probs = np.concatenate(probs)
        table = build_table(feats, probs, self.target_train.sample_ids)
        if len(np.unique(table.labels)) == 1:
            print("warning: degenerate pseudo-labels (single class)", file=sys.stderr)
        labels = np.empty(len(self.target_train), dtype=np.int64)
        labels[table.sample_ids] = table.labels
        self.pseudo_labels = labels
        self.last_pseudo_table = table

    def _step(self, kind: str, lam: float):
        T.clear_tape()
        self.model.zero_grad()
        self.disc.zero_grad()
        sb, _, _ = next(self._src_iter)
        tb, epoch, first = next(self._tgt_iter)
        if kind in ("pst", "joint") and (first or self.pseudo_labels is None):
            self.refresh_pseudo_labels()

        out_s = self.model.forward(sb.images.data, train=True, rng=self.gumbel_rng)
        out_t = self.model.forward(tb.images.data, train=True, rng=self.gumbel_rng)
        total = T.cross_entropy(out_s.logits, sb.labels)
        l_cls = total.item()
        if kind in ("pst", "joint"):
            pl = self.pseudo_labels[tb.sample_ids]
            tgt_cls = T.cross_entropy(out_t.logits, pl)
            l_cls += tgt_cls.item()
            total = total + tgt_cls
        l_d = 0.0
        if kind in ("ada", "joint"):
            ld = domain_loss(grl(out_s.feature, lam), grl(out_t.feature, lam),
                             self.disc)
            l_d = ld.item()
            total = total + ld
        if not np.isfinite(total.item()):
            raise NumericError(
                f"non-finite loss at iteration {self._global_step + 1}: "
                f"l_cls={l_cls} l_d={l_d}")
        T.backward(total)
        T.sgd_step(self._all_params(), self.cfg.lr, self.cfg.momentum,
                   self.cfg.weight_decay, self.opt_state)
        return l_cls, l_d

    # -- the run ------------------------------------------------------------

    def run(self, out_dir=None) -> MetricLog:
        cfg = self.cfg
        phases = _PHASES[cfg.scheme]
        iters = [cfg.iterations_1, cfg.iterations_2][:len(phases)]
        total_steps = sum(iters)
        t0 = time.monotonic()
        for stage_idx, (kind, n_iter) in enumerate(zip(phases, iters), start=1):
            for _ in range(n_iter):
                progress = self._global_step / max(1, total_steps)
                lam = cfg.grl.lambda_at(progress) if kind in ("ada", "joint") else 0.0
                l_cls, l_d = self._step(kind, lam)
                self._global_step += 1
                last = self._global_step == total_steps
                do_eval = last or (cfg.eval_every and
                                   self._global_step % cfg.eval_every == 0)
                acc_s = acc_t = None
                if do_eval:
                    if self.source_eval is not None:
                        acc_s = evaluate(self.model, self.source_eval, cfg.batch_size)
                    if self.target_eval is not None:
                        acc_t = evaluate(self.model, self.target_eval, cfg.batch_size)
                seconds = time.monotonic() - t0 if cfg.wallclock else 0.0
                self.log.append(MetricRecord(self._global_step, stage_idx,
                                             l_cls, l_d, acc_s, acc_t, seconds))
            if out_dir is not None:
                self.save_checkpoint(f"{out_dir}/checkpoint_stage{stage_idx}.samb")
        if out_dir is not None:
            self.log.to_csv(f"{out_dir}/metrics.csv")
        T.clear_tape()
        return self.log
