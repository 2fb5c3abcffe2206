"""Downstream transfer: full fine-tuning and frozen-backbone linear
evaluation (optionally few-shot), with plateau lr scheduling, best-val model
selection, and run aggregation across seeds."""

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import EvalRecipe, eval_transform
from .checkpoint import Checkpoint, load_checkpoint, state_checksum
from .data import FewShotSpec, SplitSpec, few_shot_sample
from .errors import ConfigurationError, DegenerateInputError
from .models import BackboneSpec, build_backbone
from .pretrain import load_backbone_weights
from .rng import derive_seed, generator


@dataclass(frozen=True)
class PlateauConfig:
    """Reduce-on-plateau over a maximized metric: after `patience` consecutive
    evaluations without improvement the lr is multiplied by `factor` (floored
    at `min_lr`) and the counter restarts."""

    patience: int = 5
    factor: float = 0.1
    min_lr: float = 1e-6

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")
        if not (0.0 < self.factor < 1.0):
            raise ConfigurationError("factor must be in (0, 1)")
        if self.min_lr <= 0:
            raise ConfigurationError("min_lr must be positive")


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 0.0
    plateau: PlateauConfig = field(default_factory=PlateauConfig)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")


@dataclass(frozen=True)
class LinearEvalConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-2
    weight_decay: float = 0.0
    plateau: PlateauConfig = field(default_factory=PlateauConfig)
    seed: int = 0

    __post_init__ = FinetuneConfig.__post_init__


class PlateauTracker:
    def __init__(self, lr: float, config: PlateauConfig):
        self.lr = lr
        self.config = config
        self.best = -math.inf
        self.bad = 0

    def update(self, metric: float) -> float:
        """Feed one evaluation; returns the lr to use from now on."""
        if metric > self.best:
            self.best = metric
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.config.patience:
                self.lr = max(self.lr * self.config.factor, self.config.min_lr)
                self.bad = 0
        return self.lr


class ClassifierModel(nn.Module):
    """Backbone plus a linear head. With a frozen backbone the whole feature
    extractor is pinned: gradients off and permanently in eval mode, so its
    weights and batch-norm statistics cannot drift during head training."""

    def __init__(self, backbone: nn.Module, feature_dim: int, num_classes: int,
                 freeze_backbone: bool = False):
        super().__init__()
        self.backbone = backbone
        self.head = nn.Linear(feature_dim, num_classes)
        self.frozen_backbone = freeze_backbone
        if freeze_backbone:
            for p in self.backbone.parameters():
                p.requires_grad_(False)
            self.backbone.eval()

    def train(self, mode: bool = True):
        super().train(mode)
        if self.frozen_backbone:
            self.backbone.eval()
        return self

    def forward(self, x):
        return self.head(self.backbone(x))

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def backbone_checksum(self) -> str:
        return state_checksum(self.backbone.state_dict())


def build_classifier(
    num_classes: int,
    checkpoint=None,
    backbone_spec: BackboneSpec | None = None,
    freeze_backbone: bool = False,
    seed: int = 0,
) -> ClassifierModel:
    """Classifier with a pre-trained backbone (from a checkpoint) or a fresh
    random one (from a spec). The head is always freshly initialized."""
    if (checkpoint is None) == (backbone_spec is None):
        raise ConfigurationError("pass exactly one of checkpoint or backbone_spec")
    if num_classes < 2:
        raise ConfigurationError("num_classes must be >= 2")
    ckpt: Checkpoint | None = None
    if checkpoint is not None:
        ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
        backbone_spec = ckpt.encoder_spec.backbone
    torch.manual_seed(derive_seed(seed, "classifier-init"))
    backbone = build_backbone(backbone_spec)
    if ckpt is not None:
        load_backbone_weights(backbone, ckpt.state)
    return ClassifierModel(backbone, backbone_spec.feature_dim, num_classes,
                           freeze_backbone=freeze_backbone)


def global_accuracy(predictions, labels) -> float:
    """Micro accuracy: correct over total, all classes pooled."""
    if len(predictions) != len(labels):
        raise DegenerateInputError("predictions and labels lengths differ")
    if len(labels) == 0:
        raise DegenerateInputError("cannot compute accuracy of an empty set")
    correct = sum(int(p) == int(t) for p, t in zip(predictions, labels))
    return correct / len(labels)


@dataclass
class EvalOutcome:
    accuracy: float
    num_correct: int
    num_total: int
    per_class: dict[int, tuple[int, int]]  # label -> (correct, total)


@torch.no_grad()
def evaluate(model, dataset, indices, recipe: EvalRecipe, split: str,
             dataset_name: str = "", batch_size: int = 128) -> EvalOutcome:
    if not indices:
        raise DegenerateInputError(f"no samples in {split!r} set")
    model.eval()
    preds, labels = [], []
    for start in range(0, len(indices), batch_size):
        chunk = indices[start : start + batch_size]
        images, ys = [], []
        for i in chunk:
            img, y = dataset[i]
            images.append(eval_transform(img, recipe, split, dataset_name))
            ys.append(y)
        logits = model(torch.stack(images))
        preds.extend(logits.argmax(dim=1).tolist())
        labels.extend(ys)
    per_class: dict[int, tuple[int, int]] = {}
    for p, t in zip(preds, labels):
        c, n = per_class.get(t, (0, 0))
        per_class[t] = (c + int(p == t), n + 1)
    return EvalOutcome(
        accuracy=global_accuracy(preds, labels),
        num_correct=sum(c for c, _ in per_class.values()),
        num_total=len(labels),
        per_class=per_class,
    )


@dataclass
class TransferResult:
    best_val_accuracy: float
    test_accuracy: float
    val_curve: list[float]
    lr_curve: list[float]
    epochs_ran: int
    backbone_checksum: str


def _train_classifier(
    model: ClassifierModel,
    dataset,
    train_idx: list[int],
    val_idx: list[int],
    test_idx: list[int],
    recipe: EvalRecipe,
    epochs: int,
    batch_size: int,
    lr: float,
    weight_decay: float,
    plateau: PlateauConfig,
    seed: int,
    dataset_name: str = "",
) -> TransferResult:
    if not train_idx:
        raise DegenerateInputError("empty training set")
    params = model.trainable_parameters()
    if not params:
        raise ConfigurationError("model has no trainable parameters")
    opt = torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)
    tracker = PlateauTracker(lr, plateau)
    best_val, best_state = -math.inf, None
    val_curve, lr_curve = [], []

    for epoch in range(epochs):
        model.train()
        perm = torch.randperm(len(train_idx), generator=generator(seed, "epoch", epoch)).tolist()
        order = [train_idx[p] for p in perm]
        for start in range(0, len(order), batch_size):
            chunk = order[start : start + batch_size]
            images, ys = [], []
            for slot, i in enumerate(chunk):
                img, y = dataset[i]
                images.append(
                    eval_transform(img, recipe, "train", dataset_name,
                                   seed=derive_seed(seed, "flip", epoch, start + slot))
                )
                ys.append(y)
            loss = F.cross_entropy(model(torch.stack(images)), torch.tensor(ys))
            opt.zero_grad()
            loss.backward()
            opt.step()

        val_acc = evaluate(model, dataset, val_idx, recipe, "val", dataset_name).accuracy
        val_curve.append(val_acc)
        if val_acc > best_val:
            best_val = val_acc
            best_state = copy.deepcopy(model.state_dict())
        new_lr = tracker.update(val_acc)
        lr_curve.append(new_lr)
        for group in opt.param_groups:
            group["lr"] = new_lr

    if best_state is not None:
        model.load_state_dict(best_state)
    test_acc = (
        evaluate(model, dataset, test_idx, recipe, "test", dataset_name).accuracy
        if test_idx else float("nan")
    )
    return TransferResult(
        best_val_accuracy=best_val,
        test_accuracy=test_acc,
        val_curve=val_curve,
        lr_curve=lr_curve,
        epochs_ran=epochs,
        backbone_checksum=model.backbone_checksum(),
    )


def finetune(
    model: ClassifierModel,
    dataset,
    split: SplitSpec,
    config: FinetuneConfig,
    recipe: EvalRecipe,
    dataset_name: str = "",
) -> TransferResult:
    """End-to-end fine-tuning on the train split, best-val selection, final
    score on the test split."""
    return _train_classifier(
        model, dataset, split.train, split.val, split.test, recipe,
        config.epochs, config.batch_size, config.lr, config.weight_decay,
        config.plateau, config.seed, dataset_name,
    )


def linear_eval(
    model: ClassifierModel,
    dataset,
    split: SplitSpec,
    config: LinearEvalConfig,
    recipe: EvalRecipe,
    shots: int | None = None,
    dataset_name: str = "",
) -> TransferResult:
    """Linear probe on a frozen backbone. With `shots` the head trains on a
    deterministic n-per-class subset of the train split; val and test are
    untouched."""
    if not model.frozen_backbone:
        raise ConfigurationError("linear evaluation requires a frozen backbone")
    before = model.backbone_checksum()
    if shots is not None:
        train_idx = few_shot_sample(split, shots, config.seed).indices
    else:
        train_idx = split.train
    result = _train_classifier(
        model, dataset, train_idx, split.val, split.test, recipe,
        config.epochs, config.batch_size, config.lr, config.weight_decay,
        config.plateau, config.seed, dataset_name,
    )
    if result.backbone_checksum != before:
        raise ConfigurationError("frozen backbone changed during linear evaluation")
    return result


# --- bookkeeping across runs -------------------------------------------------


def config_hash(config) -> str:
    """Hash of a run config with the seed removed, so repeats of one
    experiment under different seeds share an identity."""
    blob = asdict(config) if not isinstance(config, dict) else dict(config)
    blob.pop("seed", None)
    return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class RunResult:
    kind: str  # "finetune" or "linear_eval"
    dataset: str
    seed: int
    accuracy: float
    val_accuracy: float
    config_hash: str
    checkpoint_hash: str = ""
    shots: int | None = None


@dataclass(frozen=True)
class AggregateResult:
    mean: float
    std: float
    n: int
    accuracies: tuple[float, ...]
    single_run: bool


def aggregate_runs(runs) -> AggregateResult:
    """Mean and sample standard deviation of run accuracies; a lone run gets
    std 0.0 and is flagged."""
    accs = [r.accuracy if isinstance(r, RunResult) else float(r) for r in runs]
    if not accs:
        raise DegenerateInputError("no runs to aggregate")
    mean = sum(accs) / len(accs)
    if len(accs) == 1:
        return AggregateResult(mean, 0.0, 1, tuple(accs), True)
    var = sum((a - mean) ** 2 for a in accs) / (len(accs) - 1)
    return AggregateResult(mean, math.sqrt(var), len(accs), tuple(accs), False)
