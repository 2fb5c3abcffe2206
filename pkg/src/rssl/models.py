"""Siamese model core: backbone, projection head, predictor, and the
negative-cosine objective with stop-gradient.

The encoder f maps an image batch to embeddings z through a backbone plus a
three-layer projection MLP (batch norm after every linear layer, output
included). The predictor h is a two-layer MLP with batch norm on its hidden
layer only, and maps z back to the same width. Both branches of the Siamese
graph share one parameter set; the loss couples p_i = h(z_i) with the
detached embedding of the opposite view.
"""

from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .errors import ConfigurationError, DegenerateInputError, DimensionError

BACKBONE_RESNET50 = "reference-resnet50"
BACKBONE_TOY = "toy-cnn"

RESNET50_FEATURE_DIM = 2048

# Added to each L2 norm inside the batched loss so a mid-training zero vector
# degrades smoothly instead of producing NaNs.
NORM_EPS = 1e-12


@dataclass(frozen=True)
class BackboneSpec:
    """Feature extractor choice. `conv_channels` only applies to the toy CNN."""

    kind: str = BACKBONE_RESNET50
    input_size: int = 224
    feature_dim: int = RESNET50_FEATURE_DIM
    conv_channels: tuple[int, ...] = (8,)

    def __post_init__(self):
        if self.kind not in (BACKBONE_RESNET50, BACKBONE_TOY):
            raise ConfigurationError(f"unknown backbone kind: {self.kind!r}")
        if self.feature_dim <= 0:
            raise ConfigurationError("feature_dim must be positive")
        if self.kind == BACKBONE_RESNET50 and self.feature_dim != RESNET50_FEATURE_DIM:
            raise ConfigurationError(
                f"{BACKBONE_RESNET50} has feature_dim {RESNET50_FEATURE_DIM}, "
                f"got {self.feature_dim}"
            )
        if self.kind == BACKBONE_TOY:
            if self.input_size < 16:
                raise ConfigurationError("toy-cnn requires input_size >= 16")
            if not self.conv_channels or any(c <= 0 for c in self.conv_channels):
                raise ConfigurationError("conv_channels must be positive widths")


@dataclass(frozen=True)
class EncoderSpec:
    """Backbone plus projection head. The projection head always has exactly
    three linear layers, so `proj_hidden` must list the two hidden widths."""

    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    proj_hidden: tuple[int, ...] = (1024, 512)
    proj_out_dim: int = 2048
    batchnorm_on_output: bool = True

    def __post_init__(self):
        if len(self.proj_hidden) != 2:
            raise ConfigurationError(
                "projection head has exactly 3 linear layers; proj_hidden must "
                f"have 2 widths, got {len(self.proj_hidden)}"
            )
        if any(w <= 0 for w in self.proj_hidden) or self.proj_out_dim <= 0:
            raise ConfigurationError("projection widths must be positive")


@dataclass(frozen=True)
class PredictorSpec:
    """Two-layer prediction MLP; output width must equal input width."""

    in_dim: int = 2048
    hidden: int = 256
    out_dim: int = 2048
    batchnorm_on_hidden: bool = True

    def __post_init__(self):
        if self.in_dim <= 0 or self.hidden <= 0 or self.out_dim <= 0:
            raise ConfigurationError("predictor widths must be positive")
        if self.in_dim != self.out_dim:
            raise ConfigurationError(
                f"predictor output dim must equal input dim "
                f"({self.in_dim} != {self.out_dim})"
            )


@dataclass
class ViewPair:
    """Two augmented batches of the same source images, index-aligned.
    Tensors are (B, 3, H, W) float."""

    view1: Tensor
    view2: Tensor

    def __post_init__(self):
        if self.view1.shape != self.view2.shape:
            raise DimensionError(
                f"views must share a shape: {tuple(self.view1.shape)} vs "
                f"{tuple(self.view2.shape)}"
            )


@dataclass
class SimSiamForward:
    """Branch outputs for one step: embeddings z_i and predictions p_i = h(z_i),
    all (B, out_dim)."""

    z1: Tensor
    z2: Tensor
    p1: Tensor
    p2: Tensor


class ToyCNN(nn.Module):
    """Small stride-2 conv stack with global average pooling. Fully
    parameterized so tests can count parameters in closed form:
    sum over conv layers of (9 * c_in * c_out + c_out)."""

    def __init__(self, conv_channels, feature_dim):
        super().__init__()
        widths = [3, *conv_channels, feature_dim]
        layers = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            layers.append(nn.Conv2d(cin, cout, kernel_size=3, stride=2, padding=1))
            layers.append(nn.ReLU(inplace=True))
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        return self.pool(self.features(x)).flatten(1)


def build_backbone(spec: BackboneSpec) -> nn.Module:
    """Instantiate the feature extractor; output is (B, feature_dim)."""
    if spec.kind == BACKBONE_RESNET50:
        import torchvision.models

        net = torchvision.models.resnet50(weights=None)
        net.fc = nn.Identity()
        return net
    return ToyCNN(spec.conv_channels, spec.feature_dim)


class ProjectionHead(nn.Module):
    """Three linear layers; batch norm after each, the output layer included
    when `batchnorm_on_output` (ReLU only on the two hidden layers)."""

    def __init__(self, in_dim, hidden, out_dim, batchnorm_on_output=True):
        super().__init__()
        widths = [in_dim, *hidden, out_dim]
        layers = []
        n_linear = len(widths) - 1
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            layers.append(nn.Linear(a, b))
            if i < n_linear - 1:
                layers.extend([nn.BatchNorm1d(b), nn.ReLU(inplace=True)])
            elif batchnorm_on_output:
                layers.append(nn.BatchNorm1d(b))
        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        return self.layers(x)


class Encoder(nn.Module):
    """f: image batch -> embedding batch (backbone features -> projection)."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        self.backbone = build_backbone(spec.backbone)
        self.projector = ProjectionHead(
            spec.backbone.feature_dim,
            spec.proj_hidden,
            spec.proj_out_dim,
            spec.batchnorm_on_output,
        )
        self.feature_dim = spec.backbone.feature_dim
        self.out_dim = spec.proj_out_dim

    def forward(self, x):
        return self.projector(self.backbone(x))


class Predictor(nn.Module):
    """h: embedding batch -> prediction batch, same width in and out."""

    def __init__(self, spec: PredictorSpec):
        super().__init__()
        self.spec = spec
        layers = [nn.Linear(spec.in_dim, spec.hidden)]
        if spec.batchnorm_on_hidden:
            layers.append(nn.BatchNorm1d(spec.hidden))
        layers.append(nn.ReLU(inplace=True))
        layers.append(nn.Linear(spec.hidden, spec.out_dim))
        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        return self.layers(x)


def build_encoder(spec: EncoderSpec) -> Encoder:
    return Encoder(spec)


def build_predictor(spec: PredictorSpec) -> Predictor:
    return Predictor(spec)


class SimSiamModel(nn.Module):
    """One parameter set serving both branches. `predictor` may be any module
    mapping (B, D) -> (B, D); tests substitute nn.Identity() to probe the
    loss minimum."""

    def __init__(self, encoder: Encoder, predictor: nn.Module):
        super().__init__()
        self.encoder = encoder
        self.predictor = predictor

    def forward(self, view1: Tensor, view2: Tensor) -> SimSiamForward:
        if view1.shape != view2.shape:
            raise DimensionError(
                f"views must share a shape: {tuple(view1.shape)} vs "
                f"{tuple(view2.shape)}"
            )
        z1 = self.encoder(view1)
        z2 = self.encoder(view2)
        p1 = self.predictor(z1)
        p2 = self.predictor(z2)
        return SimSiamForward(z1=z1, z2=z2, p1=p1, p2=p2)

    def forward_pair(self, views: ViewPair) -> SimSiamForward:
        return self.forward(views.view1, views.view2)


def stop_gradient(z: Tensor) -> Tensor:
    """Value passthrough that contributes zero to all parameter gradients."""
    return z.detach()


def negative_cosine(p: Tensor, z: Tensor) -> float:
    """-(p.z)/(|p||z|) for a single pair of vectors; in [-1, 1].

    The standalone op keeps a sharp contract and raises on zero-norm input;
    the batched loss path below uses an epsilon guard instead.
    """
    p = torch.as_tensor(p, dtype=torch.get_default_dtype()).flatten()
    z = torch.as_tensor(z, dtype=torch.get_default_dtype()).flatten()
    if p.shape != z.shape:
        raise DimensionError(f"p and z lengths differ: {p.numel()} vs {z.numel()}")
    np_, nz = torch.linalg.vector_norm(p), torch.linalg.vector_norm(z)
    if np_ == 0 or nz == 0:
        raise DegenerateInputError("negative_cosine is undefined for zero-norm input")
    return float(-(p @ z) / (np_ * nz))


def batched_negative_cosine(p: Tensor, z: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Per-sample -(p_i.z_i)/((|p_i|+eps)(|z_i|+eps)) over a (B, D) batch."""
    if p.shape != z.shape:
        raise DimensionError(
            f"p and z shapes differ: {tuple(p.shape)} vs {tuple(z.shape)}"
        )
    np_ = torch.linalg.vector_norm(p, dim=1)
    nz = torch.linalg.vector_norm(z, dim=1)
    return -(p * z).sum(dim=1) / ((np_ + eps) * (nz + eps))


def symmetric_loss(fwd: SimSiamForward, use_stop_gradient: bool = True) -> Tensor:
    """0.5 * D(p1, sg(z2)) + 0.5 * D(p2, sg(z1)), per sample, then batch mean.

    `use_stop_gradient=False` is a test-harness switch that lets gradients
    flow into the z branches; it exists to demonstrate representational
    collapse and is never used by the trainer.
    """
    if fwd.p1.shape[0] == 0:
        raise DegenerateInputError("symmetric_loss over an empty batch")
    z1, z2 = fwd.z1, fwd.z2
    if use_stop_gradient:
        z1, z2 = stop_gradient(z1), stop_gradient(z2)
    per_sample = 0.5 * batched_negative_cosine(fwd.p1, z2) + 0.5 * batched_negative_cosine(fwd.p2, z1)
    return per_sample.mean()


def collapse_statistic(z: Tensor) -> float:
    """Training-health monitor: mean over dimensions of the per-dimension
    standard deviation of L2-normalized embeddings. Near zero means the batch
    has collapsed onto one direction; isotropic unit vectors give ~1/sqrt(d).
    """
    if z.ndim != 2:
        raise DimensionError(f"expected (B, D) embeddings, got shape {tuple(z.shape)}")
    if z.shape[0] < 2:
        raise DegenerateInputError("collapse_statistic needs a batch of >= 2")
    with torch.no_grad():
        norms = torch.linalg.vector_norm(z, dim=1, keepdim=True)
        unit = z / (norms + NORM_EPS)
        return float(unit.std(dim=0).mean())
