"""Patch CNN with optional patch-attention blocks and a GRU aggregation head.

Inputs arrive as ``N_B x N_C x h x w x C`` (channels last). All patches are
stacked into the batch dimension and processed by one shared backbone. An
attention block unstacks the patch axis, pools each patch to a scalar, mixes
the ``N_C`` scalars through an ``N_C x N_C`` affine layer, squashes with a
sigmoid and rescales each patch's feature maps by its coefficient.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from patchattn import diffcore as dc

AGGREGATORS = ("average", "gru", "attention")
PLACEMENTS = ("initial", "end")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    stages: tuple[tuple[int, int], ...] = ((16, 2), (32, 2), (64, 2), (128, 2))
    n_classes: int = 7
    in_channels: int = 3
    kernel_size: int = 3
    patch_size: int = 64

    @property
    def classifier_features(self) -> int:
        return self.stages[-1][0]

    def final_extent(self) -> int:
        extent = self.patch_size
        pad = self.kernel_size // 2
        for _, stride in self.stages:
            extent = (extent + 2 * pad - self.kernel_size) // stride + 1
        return extent

    def validate(self) -> None:
        if not self.stages:
            raise ConfigError("backbone needs at least one stage")
        if any(ch < 1 or stride < 1 for ch, stride in self.stages):
            raise ConfigError(f"stage channels and strides must be positive: {self.stages}")
        if self.final_extent() < 1:
            raise ConfigError(f"patch size {self.patch_size} collapses below 1x1 after {len(self.stages)} stages")


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    aggregator: str = "average"
    attention_placement: tuple[str, ...] = ()
    n_crops: int = 9
    gru_hidden: int = 128

    def __post_init__(self):
        object.__setattr__(self, "attention_placement", tuple(p for p in PLACEMENTS if p in self.attention_placement))

    def validate(self) -> None:
        self.backbone.validate()
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")
        if self.aggregator == "attention" and not self.attention_placement:
            raise ConfigError("aggregator=attention requires at least one attention placement")
        if self.aggregator != "attention" and self.attention_placement:
            raise ConfigError(f"attention_placement is set but aggregator is {self.aggregator!r}")
        if self.n_crops < 1:
            raise ConfigError("n_crops must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"]["stages"] = [list(s) for s in self.backbone.stages]
        d["attention_placement"] = list(self.attention_placement)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        bb = dict(d["backbone"])
        bb["stages"] = tuple(tuple(s) for s in bb["stages"])
        return cls(
            backbone=BackboneConfig(**bb),
            aggregator=d["aggregator"],
            attention_placement=tuple(d["attention_placement"]),
            n_crops=d["n_crops"],
            gru_hidden=d["gru_hidden"],
        )

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Functional attention
# ---------------------------------------------------------------------------


def attention_forward(
    features: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Reweight stacked patch features ``[N_B*N_C, ...]``.

    Returns the rescaled features (same shape as the input) and the attention
    coefficients ``[N_B, N_C]``. The pooling covers every non-patch axis, so
    the result is independent of channel ordering.
    """
    n_c = weight.shape[0]
    if weight.shape != (n_c, n_c) or bias.shape != (n_c,):
        raise dc.ShapeError(f"attention parameters must be [N_C, N_C] and [N_C], got {tuple(weight.shape)}")
    x = dc.unstack_patches(features, n_c)
    pooled = dc.global_average_pool(x, axes=list(range(2, x.dim())))
    coeff = dc.sigmoid(dc.dense(pooled, weight, bias))
    scaled = x * coeff.reshape(*coeff.shape, *([1] * (x.dim() - 2)))
    return dc.stack_patches(scaled), coeff


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------


class ConvStage(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel_size: int, stride: int, gen: torch.Generator):
        super().__init__()
        std = math.sqrt(2.0 / (c_in * kernel_size * kernel_size))
        self.weight = nn.Parameter(torch.randn(c_out, c_in, kernel_size, kernel_size, generator=gen) * std)
        self.bias = nn.Parameter(torch.zeros(c_out))
        self.stride = stride
        self.padding = kernel_size // 2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return dc.relu(dc.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding))


class AttentionBlock(nn.Module):
    """``N_C x N_C`` patch-interaction layer. Starts at zero, i.e. every coefficient 0.5."""

    def __init__(self, n_crops: int, placement: str):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(n_crops, n_crops))
        self.bias = nn.Parameter(torch.zeros(n_crops))
        self.placement = placement

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return attention_forward(x, self.weight, self.bias)


class GRUAggregator(nn.Module):
    def __init__(self, n_in: int, hidden: int, gen: torch.Generator):
        super().__init__()
        bound = 1.0 / math.sqrt(hidden)

        def uniform(*shape):
            return nn.Parameter((torch.rand(*shape, generator=gen) * 2 - 1) * bound)

        for gate in ("z", "r", "n"):
            setattr(self, f"w_{gate}", uniform(n_in, hidden))
            setattr(self, f"u_{gate}", uniform(hidden, hidden))
            setattr(self, f"b_{gate}", nn.Parameter(torch.zeros(hidden)))

    def params(self) -> dc.GRUParams:
        return dc.GRUParams(
            self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r, self.w_n, self.u_n, self.b_n
        )

    def forward(self, patch_features: torch.Tensor) -> torch.Tensor:
        return gru_aggregate(patch_features, self.params())


def gru_aggregate(patch_features: torch.Tensor, params: dc.GRUParams) -> torch.Tensor:
    """Final GRU state after consuming patches ``[N_B, N_C, F]`` in canonical grid order."""
    return dc.gru_unroll(patch_features, params)


class PatchModel(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        bb = config.backbone
        gen = torch.Generator().manual_seed(seed)
        stages = []
        c_in = bb.in_channels
        for c_out, stride in bb.stages:
            stages.append(ConvStage(c_in, c_out, bb.kernel_size, stride, gen))
            c_in = c_out
        self.backbone = nn.ModuleList(stages)
        self.attention = nn.ModuleDict({p: AttentionBlock(config.n_crops, p) for p in config.attention_placement})
        head_in = bb.classifier_features
        if config.aggregator == "gru":
            self.gru = GRUAggregator(bb.classifier_features, config.gru_hidden, gen)
            head_in = config.gru_hidden
        std = math.sqrt(2.0 / head_in)
        self.classifier_weight = nn.Parameter(torch.randn(head_in, bb.n_classes, generator=gen) * std)
        self.classifier_bias = nn.Parameter(torch.zeros(bb.n_classes))

    @property
    def uses_patch_axis(self) -> bool:
        return self.config.aggregator in ("gru", "attention")

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def patch_features(self, x: torch.Tensor) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
        """Backbone over stacked patches; returns pooled features ``[N_B*N_C, F]`` and attention coefficients."""
        n_b, n_c = x.shape[:2]
        h = dc.stack_patches(x).permute(0, 3, 1, 2)
        coeffs: dict[str, torch.Tensor] = {}
        last = len(self.backbone) - 1
        for i, stage in enumerate(self.backbone):
            h = stage(h)
            if i == 0 and "initial" in self.attention:
                h, coeffs["initial"] = self.attention["initial"](h)
            if i == last and "end" in self.attention:
                h, coeffs["end"] = self.attention["end"](h)
        return dc.global_average_pool(h, axes=[2, 3]), coeffs

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, dict]:
        """Class log-probabilities ``[N_B, n_classes]`` plus diagnostics.

        ``x`` is ``[N_B, N_C, h, w, C]``. For the averaging paths the output is
        ``log(mean_p softmax(z_p))``; with ``N_C == 1`` this is exactly the
        single-patch log-softmax.
        """
        if x.dim() != 5:
            raise dc.ShapeError(f"model input must be [N_B, N_C, h, w, C], got {tuple(x.shape)}")
        n_b, n_c = x.shape[:2]
        if self.uses_patch_axis and n_c != self.config.n_crops:
            raise ConfigError(
                f"aggregator={self.config.aggregator} was built for n_crops={self.config.n_crops}, got {n_c} patches"
            )
        feats, coeffs = self.patch_features(x)
        diagnostics: dict = {"attention": coeffs}
        if self.config.aggregator == "gru":
            state = self.gru(dc.unstack_patches(feats, n_c))
            logits = dc.dense(state, self.classifier_weight, self.classifier_bias)
            return dc.log_softmax(logits), diagnostics
        patch_logits = dc.dense(feats, self.classifier_weight, self.classifier_bias)
        patch_logp = dc.unstack_patches(dc.log_softmax(patch_logits), n_c)
        diagnostics["patch_log_probs"] = patch_logp
        return torch.logsumexp(patch_logp, dim=1) - math.log(n_c), diagnostics


def attention_weight_report(
    model: PatchModel,
    x: torch.Tensor,
    offsets,
    sample_ids,
    placement: str | None = None,
) -> list[tuple[str, int, int, int, float]]:
    """Rows ``(sample_id, patch_index, x, y, weight)`` for every patch in the batch.

    Defaults to the end block when both placements are present.
    """
    if not model.config.attention_placement:
        raise ConfigError("model has no attention block to report on")
    placement = placement or model.config.attention_placement[-1]
    if placement not in model.config.attention_placement:
        raise ConfigError(f"model has no {placement!r} attention block")
    with torch.no_grad():
        _, diag = model(x)
    coeff = diag["attention"][placement].double().numpy()
    rows = []
    for b, sid in enumerate(sample_ids):
        for p, (ox, oy) in enumerate(offsets):
            rows.append((str(sid), p, int(ox), int(oy), float(coeff[b, p])))
    return rows


def state_arrays(model: nn.Module) -> list[tuple[str, np.ndarray]]:
    return [(name, p.detach().cpu().numpy()) for name, p in model.named_parameters()]
