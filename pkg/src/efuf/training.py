"""Unlearning trainer: token-level CE, the three-part loss, and the step loop.

The total objective is L_pos + lambda1 * L_neg + lambda2 * L_sent, where
L_neg is the negated CE over negative subsentences (gradient ascent), and
L_pos / L_sent are plain CE over positive subsentences and full sentences.
Loss is averaged over target tokens only; context tokens and padding are
masked out. Each epoch draws one batch per dataset per step, cycling the
shorter datasets so every step carries all three terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .curation import CuratedDatasets, Polarity, UnlearningSample
from .errors import ConfigurationError, TrainingError
from .model import BOS, EOS, PAD, ToyMLLM, ToyTokenizer, trainable_parameters

FeatureProvider = Callable[[str], np.ndarray]


@dataclass(frozen=True)
class LossWeights:
    """Unlearning weight (negative term) and sentence weight."""

    lambda1: float = 0.3
    lambda2: float = 0.2

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-2
    weight_decay: float = 0.0
    optimizer: str = "adamw"  # "plain-sgd" | "adamw"
    epochs: int = 1
    batch_pos: int = 8
    batch_neg: int = 8
    batch_sent: int = 8
    seed: int = 0
    grad_clip: float | None = None  # off by default; 1.0 is the conventional threshold
    trainable: tuple[str, ...] = ("image_projector",)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.optimizer not in ("plain-sgd", "adamw"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class StepReport:
    step: int
    l_pos: float
    l_neg: float
    l_sent: float
    l_total: float
    n_pos: int
    n_neg: int
    n_sent: int

    def to_record(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_record(cls, rec: dict) -> "StepReport":
        return cls(**{k: rec[k] for k in cls.__dataclass_fields__})


def encode_sample(tokenizer: ToyTokenizer, sample: UnlearningSample) -> tuple[list[int], list[int]]:
    """(context_ids, target_ids) for one sample.

    The begin-of-caption token always opens the text stream; sentence-polarity
    targets end the caption, so they get the end token as a learnable stop.
    """
    context_ids = [BOS] + tokenizer.encode(sample.context)
    target_ids = tokenizer.encode(sample.target)
    if sample.polarity == Polarity.SENTENCE:
        target_ids = target_ids + [EOS]
    if not target_ids:
        raise ValueError(f"sample target {sample.target!r} tokenizes to nothing")
    return context_ids, target_ids


def token_ce_loss(model: ToyMLLM, image_feature, context_ids, target_ids) -> torch.Tensor:
    """Mean cross-entropy of target tokens given image + context; context masked out."""
    context_ids = list(context_ids)
    target_ids = list(target_ids)
    if not target_ids:
        raise ValueError("target_ids must be nonempty")
    seq = torch.tensor(context_ids + target_ids, dtype=torch.long)
    lp = model.log_probs(image_feature, seq)
    positions = torch.arange(len(context_ids), len(seq))
    return -lp[positions, seq[positions]].mean()


def batch_ce_loss(
    model: ToyMLLM,
    tokenizer: ToyTokenizer,
    features: FeatureProvider,
    samples: Sequence[UnlearningSample],
) -> torch.Tensor:
    """Mean over samples of per-sample token CE, via one padded forward pass."""
    encoded = [encode_sample(tokenizer, s) for s in samples]
    seqs = [ctx + tgt for ctx, tgt in encoded]
    max_len = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), max_len), PAD, dtype=torch.long)
    target_mask = torch.zeros((len(seqs), max_len), dtype=torch.bool)
    for i, ((ctx, tgt), seq) in enumerate(zip(encoded, seqs)):
        ids[i, : len(seq)] = torch.tensor(seq, dtype=torch.long)
        target_mask[i, len(ctx) : len(seq)] = True
    feats = torch.stack(
        [torch.as_tensor(features(s.image_id), dtype=model.config.torch_dtype()) for s in samples]
    )
    lp = model.log_probs(feats, ids)
    token_lp = lp.gather(-1, ids.unsqueeze(-1)).squeeze(-1)
    per_sample = -(token_lp * target_mask).sum(dim=1) / target_mask.sum(dim=1)
    return per_sample.mean()


def efuf_losses(
    model: ToyMLLM,
    tokenizer: ToyTokenizer,
    features: FeatureProvider,
    batch_pos: Sequence[UnlearningSample],
    batch_neg: Sequence[UnlearningSample],
    batch_sent: Sequence[UnlearningSample],
    weights: LossWeights,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Total loss plus its three components; empty batches contribute zero."""
    if not (batch_pos or batch_neg or batch_sent):
        raise ValueError("all three batches are empty")
    zero = torch.zeros((), dtype=model.config.torch_dtype())
    l_pos = batch_ce_loss(model, tokenizer, features, batch_pos) if batch_pos else zero
    l_neg = -batch_ce_loss(model, tokenizer, features, batch_neg) if batch_neg else zero
    l_sent = batch_ce_loss(model, tokenizer, features, batch_sent) if batch_sent else zero
    total = l_pos + weights.lambda1 * l_neg + weights.lambda2 * l_sent
    return total, {"l_pos": l_pos, "l_neg": l_neg, "l_sent": l_sent}


class PlainSGD:
    """Bare gradient step with decoupled weight decay: theta <- theta(1 - lr*wd) - lr*g."""

    def __init__(self, params, lr: float, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self):
        for p in self.params:
            if self.weight_decay:
                p.mul_(1.0 - self.lr * self.weight_decay)
            if p.grad is not None:
                p.add_(p.grad, alpha=-self.lr)


def make_optimizer(model: ToyMLLM, config: TrainConfig):
    params = trainable_parameters(model)
    if config.optimizer == "plain-sgd":
        return PlainSGD(params, lr=config.lr, weight_decay=config.weight_decay)
    return torch.optim.AdamW(params or [torch.zeros(1)], lr=config.lr, weight_decay=config.weight_decay)


def train_step(
    model: ToyMLLM,
    tokenizer: ToyTokenizer,
    features: FeatureProvider,
    batches: tuple[Sequence[UnlearningSample], Sequence[UnlearningSample], Sequence[UnlearningSample]],
    weights: LossWeights,
    config: TrainConfig,
    optimizer,
    step_index: int = 0,
) -> StepReport:
    """One optimizer update on the combined loss over the three batches."""
    batch_pos, batch_neg, batch_sent = batches
    total, parts = efuf_losses(model, tokenizer, features, batch_pos, batch_neg, batch_sent, weights)

    for name, tensor in {**parts, "l_total": total}.items():
        if not math.isfinite(float(tensor.detach())):
            ids = {
                "l_pos": batch_pos,
                "l_neg": batch_neg,
                "l_sent": batch_sent,
                "l_total": batch_pos or batch_neg or batch_sent,
            }[name]
            raise TrainingError(
                f"non-finite {name} at step {step_index} "
                f"(images {[s.image_id for s in ids][:4]})"
            )

    params = trainable_parameters(model)
    if params and total.requires_grad:
        optimizer.zero_grad()
        total.backward()
        for p in params:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise TrainingError(f"non-finite gradient at step {step_index}")
        if config.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
        optimizer.step()

    return StepReport(
        step=step_index,
        l_pos=float(parts["l_pos"].detach()),
        l_neg=float(parts["l_neg"].detach()),
        l_sent=float(parts["l_sent"].detach()),
        l_total=float(total.detach()),
        n_pos=len(batch_pos),
        n_neg=len(batch_neg),
        n_sent=len(batch_sent),
    )


def _epoch_batches(n: int, batch_size: int, steps: int, order: np.ndarray) -> list[list[int]]:
    """Index batches for one epoch; a shorter dataset cycles through its order."""
    if n == 0:
        return [[] for _ in range(steps)]
    return [[int(order[(s * batch_size + j) % n]) for j in range(batch_size)] for s in range(steps)]


def run_epoch(
    model: ToyMLLM,
    tokenizer: ToyTokenizer,
    features: FeatureProvider,
    datasets: CuratedDatasets,
    weights: LossWeights,
    config: TrainConfig,
    optimizer,
    rng: np.random.Generator,
    start_step: int = 0,
    on_report: Callable[[StepReport], None] | None = None,
) -> list[StepReport]:
    """One pass driven by the largest dataset; shorter datasets cycle.

    Deterministic under a fixed rng state: batch composition depends only on
    the permutations drawn here.
    """
    groups = [
        (datasets.positive, config.batch_pos),
        (datasets.negative, config.batch_neg),
        (datasets.sentence, config.batch_sent),
    ]
    steps = max(
        (math.ceil(len(data) / bs) for data, bs in groups if data),
        default=0,
    )
    if steps == 0:
        raise ValueError("all datasets are empty; nothing to train on")

    plans = []
    for data, bs in groups:
        order = rng.permutation(len(data)) if data else np.empty(0, dtype=int)
        plans.append((data, _epoch_batches(len(data), bs, steps, order)))

    reports = []
    for s in range(steps):
        batches = tuple([data[i] for i in plan[s]] for data, plan in plans)
        report = train_step(
            model, tokenizer, features, batches, weights, config, optimizer, step_index=start_step + s
        )
        reports.append(report)
        if on_report is not None:
            on_report(report)
    return reports


def sft_datasets(records, prompt_field: str = "prompt") -> CuratedDatasets:
    """Wrap (prompt -> caption) records as a sentence-only dataset for plain SFT."""
    samples = [
        UnlearningSample(
            image_id=rec["image_id"],
            context=rec[prompt_field],
            target=rec["caption"],
            polarity=Polarity.SENTENCE,
            provenance_score=0.0,
        )
        for rec in records
    ]
    return CuratedDatasets(positive=[], negative=[], sentence=samples)
