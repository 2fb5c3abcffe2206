"""Siamese pre-training loop: explicit momentum SGD, step-decayed lr,
deterministic batch sampling and per-image augmentation seeding, JSONL trace,
periodic checkpoints."""

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .augment import SslRecipe, make_ssl_views
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigurationError, TrainingDiverged
from .models import (
    EncoderSpec,
    PredictorSpec,
    SimSiamModel,
    build_encoder,
    build_predictor,
    collapse_statistic,
    symmetric_loss,
)
from .rng import derive_seed, generator

INIT_RANDOM = "random"
INIT_EXTERNAL = "external"

BACKBONE_PREFIX = "encoder.backbone."


@dataclass(frozen=True)
class PretrainConfig:
    batch_size: int = 128
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-5
    total_iterations: int = 100_000
    milestones: tuple[int, ...] | None = None  # None -> (0.6 T, 0.8 T)
    gamma: float = 0.1
    init: str = INIT_RANDOM
    init_weights: str | None = None
    seed: int = 0
    checkpoint_every: int = 0  # 0 -> final checkpoint only
    use_stop_gradient: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2")
        if self.total_iterations < 1:
            raise ConfigurationError("total_iterations must be >= 1")
        if self.base_lr <= 0:
            raise ConfigurationError("base_lr must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigurationError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if not (0.0 < self.gamma <= 1.0):
            raise ConfigurationError("gamma must be in (0, 1]")
        if self.init not in (INIT_RANDOM, INIT_EXTERNAL):
            raise ConfigurationError(f"init must be {INIT_RANDOM!r} or {INIT_EXTERNAL!r}")
        if self.init == INIT_EXTERNAL and not self.init_weights:
            raise ConfigurationError("init='external' requires init_weights")
        if self.milestones is not None:
            ms = tuple(int(m) for m in self.milestones)
            if list(ms) != sorted(ms):
                raise ConfigurationError("milestones must be sorted")
            object.__setattr__(self, "milestones", ms)

    def resolved_milestones(self) -> tuple[int, ...]:
        if self.milestones is not None:
            return self.milestones
        t = self.total_iterations
        return (int(0.6 * t), int(0.8 * t))


def lr_at(config: PretrainConfig, iteration: int) -> float:
    """Step schedule: base_lr scaled by gamma once per milestone passed."""
    passed = sum(1 for m in config.resolved_milestones() if iteration >= m)
    return config.base_lr * (config.gamma ** passed)


class MomentumSGD:
    """Classic momentum SGD with decoupled-from-nothing L2: the weight-decay
    term is added to the raw gradient before the velocity update.

        v <- momentum * v + (g + wd * p);  p <- p - lr * v
    """

    def __init__(self, named_params, momentum: float, weight_decay: float):
        self.params = [(n, p) for n, p in named_params if p.requires_grad]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {n: torch.zeros_like(p) for n, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self, lr: float, iteration: int | None = None):
        for name, p in self.params:
            if p.grad is None:
                continue
            if not torch.isfinite(p.grad).all():
                raise TrainingDiverged(f"non-finite gradient in {name}", iteration=iteration)
            g = p.grad + self.weight_decay * p
            v = self.velocity[name]
            v.mul_(self.momentum).add_(g)
            p.add_(v, alpha=-lr)


def extract_backbone_state(state: dict) -> dict:
    """Backbone tensors from a pre-training state dict, prefix stripped."""
    out = {k[len(BACKBONE_PREFIX):]: v for k, v in state.items() if k.startswith(BACKBONE_PREFIX)}
    if not out:
        raise ConfigurationError("state dict contains no backbone weights")
    return out


def load_backbone_weights(backbone: torch.nn.Module, state: dict):
    """Copy backbone weights from a pre-training state dict into a bare
    backbone module, insisting on an exact topology match."""
    src = extract_backbone_state(state)
    dst = backbone.state_dict()
    for key, tensor in dst.items():
        if key not in src:
            raise ConfigurationError(f"checkpoint is missing backbone weight {key!r}")
        if tuple(src[key].shape) != tuple(tensor.shape):
            raise ConfigurationError(
                f"backbone weight {key!r}: model expects shape {tuple(tensor.shape)}, "
                f"checkpoint has {tuple(src[key].shape)}"
            )
    backbone.load_state_dict({k: src[k] for k in dst})


def init_model(
    config: PretrainConfig, encoder_spec: EncoderSpec, predictor_spec: PredictorSpec
) -> SimSiamModel:
    """Fresh model, seeded deterministically from config.seed. With
    init='external' the backbone weights are replaced from a checkpoint;
    projector and predictor stay randomly initialized."""
    torch.manual_seed(derive_seed(config.seed, "init"))
    model = SimSiamModel(build_encoder(encoder_spec), build_predictor(predictor_spec))
    if config.init == INIT_EXTERNAL:
        ckpt = load_checkpoint(config.init_weights)
        load_backbone_weights(model.encoder.backbone, ckpt.state)
    return model


@dataclass
class PretrainResult:
    trace: list[dict] = field(default_factory=list)
    checkpoint_paths: list[Path] = field(default_factory=list)
    final_checkpoint: Path | None = None
    content_hash: str | None = None


def _make_batch(dataset, indices, recipe: SslRecipe, seed: int, iteration: int):
    v1s, v2s = [], []
    for slot, idx in enumerate(indices):
        item = dataset[idx]
        image = item[0] if isinstance(item, (tuple, list)) else item
        v1, v2 = make_ssl_views(image, recipe, derive_seed(seed, "aug", iteration, slot))
        v1s.append(v1)
        v2s.append(v2)
    return torch.stack(v1s), torch.stack(v2s)


def pretrain(
    model: SimSiamModel,
    dataset,
    config: PretrainConfig,
    recipe: SslRecipe,
    encoder_spec: EncoderSpec,
    predictor_spec: PredictorSpec,
    out_dir=None,
    trace_path=None,
    dataset_name: str = "",
    log_every: int = 0,
) -> PretrainResult:
    """Run the full pre-training schedule. Batches are drawn with replacement
    per iteration; every random choice derives from config.seed, so reruns
    with the same inputs reproduce the loss trace and checkpoints exactly."""
    if len(dataset) == 0:
        raise ConfigurationError("pre-training dataset is empty")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    model.train()
    opt = MomentumSGD(model.named_parameters(), config.momentum, config.weight_decay)
    result = PretrainResult()
    trace_file = open(trace_path, "w") if trace_path is not None else None

    try:
        for it in range(config.total_iterations):
            t0 = time.perf_counter()
            idx = torch.randint(
                len(dataset), (config.batch_size,), generator=generator(config.seed, "batch", it)
            ).tolist()
            view1, view2 = _make_batch(dataset, idx, recipe, config.seed, it)

            lr = lr_at(config, it)
            opt.zero_grad()
            fwd = model(view1, view2)
            loss = symmetric_loss(fwd, use_stop_gradient=config.use_stop_gradient)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss.item()} at iteration {it}",
                    iteration=it,
                    batch_ids=idx,
                    collapse_stat=collapse_statistic(fwd.z1.detach()),
                )
            loss.backward()
            opt.step(lr, iteration=it)

            record = {
                "iteration": it,
                "lr": lr,
                "loss": float(loss.item()),
                "collapse_stat": collapse_statistic(fwd.z1.detach()),
                "wall_ms": (time.perf_counter() - t0) * 1e3,
            }
            result.trace.append(record)
            if trace_file is not None:
                trace_file.write(json.dumps(record) + "\n")
            if log_every and (it % log_every == 0 or it == config.total_iterations - 1):
                print(
                    f"iter {it:>7d}  lr {lr:.5f}  loss {record['loss']:+.4f}  "
                    f"z-std {record['collapse_stat']:.4f}"
                )

            if (
                out_dir is not None
                and config.checkpoint_every > 0
                and (it + 1) % config.checkpoint_every == 0
                and (it + 1) < config.total_iterations
            ):
                p = out_dir / f"checkpoint_{it + 1:08d}.rssl"
                save_checkpoint(p, model.state_dict(), encoder_spec, predictor_spec,
                                iteration=it + 1, dataset=dataset_name)
                result.checkpoint_paths.append(p)
    finally:
        if trace_file is not None:
            trace_file.close()

    if out_dir is not None:
        p = out_dir / "checkpoint_final.rssl"
        result.content_hash = save_checkpoint(
            p, model.state_dict(), encoder_spec, predictor_spec,
            iteration=config.total_iterations, dataset=dataset_name,
        )
        result.checkpoint_paths.append(p)
        result.final_checkpoint = p
    return result
