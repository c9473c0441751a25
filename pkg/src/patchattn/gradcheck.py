"""Finite-difference checks of every trainable component on tiny float64 models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from patchattn import diffcore as dc
from patchattn.model import BackboneConfig, ModelConfig, PatchModel

COMPONENTS = ("backbone", "attention_initial", "attention_end", "attention_dual", "gru", "cross_entropy")
RELU_TOL = 1e-4
SMOOTH_TOL = 1e-6


@dataclass
class ComponentReport:
    component: str
    max_rel_error: float
    n_probed: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.component:<18} max_rel_err={self.max_rel_error:.3e} probed={self.n_probed:<4d} tol={self.tol:.0e} {status}"


def tiny_config(aggregator: str = "average", placement: tuple[str, ...] = (), n_crops: int = 5) -> ModelConfig:
    return ModelConfig(
        backbone=BackboneConfig(stages=((4, 2), (6, 2)), n_classes=4, patch_size=8),
        aggregator=aggregator,
        attention_placement=placement,
        n_crops=n_crops,
        gru_hidden=5,
    )


def _model_loss(config: ModelConfig, seed: int):
    torch.manual_seed(seed)
    model = PatchModel(config, seed=seed).double()
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for block in model.attention.values():
            block.weight.copy_(torch.randn(block.weight.shape, generator=gen, dtype=torch.float64) * 0.5)
            block.bias.copy_(torch.randn(block.bias.shape, generator=gen, dtype=torch.float64) * 0.5)
        for p in model.parameters():
            if p.dim() == 1 and not p.abs().sum():
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.1)
    n_b = 2
    bb = config.backbone
    x = torch.randn(n_b, config.n_crops, bb.patch_size, bb.patch_size, bb.in_channels, generator=gen, dtype=torch.float64)
    labels = np.arange(n_b) % bb.n_classes
    weights = np.linspace(0.5, 2.0, n_b)

    def loss():
        logp, _ = model(x)
        return dc.weighted_cross_entropy(logp, labels, weights)

    return model, loss


def check_component(component: str, n_probe: int = 20, seed: int = 0, h: float = 1e-5) -> ComponentReport:
    if component == "cross_entropy":
        gen = torch.Generator().manual_seed(seed)
        logits = torch.randn(6, 7, generator=gen, dtype=torch.float64)
        labels = np.arange(6) % 7
        weights = np.linspace(0.3, 3.0, 6)
        res = dc.grad_check(lambda: dc.weighted_cross_entropy(logits, labels, weights), [logits], h=h,
                            n_probe=n_probe, seed=seed)
        return ComponentReport(component, res.max_rel_error, res.n_probed, SMOOTH_TOL)

    if component == "backbone":
        config = tiny_config()
    elif component.startswith("attention_"):
        place = component.split("_", 1)[1]
        config = tiny_config("attention", ("initial", "end") if place == "dual" else (place,))
    elif component == "gru":
        config = tiny_config("gru")
    else:
        raise ValueError(f"unknown component {component!r}; choose from {COMPONENTS}")
    model, loss = _model_loss(config, seed)
    if component == "backbone":
        params = [p for n, p in model.named_parameters() if n.startswith("backbone.")]
    elif component == "gru":
        params = list(model.gru.parameters())
    else:
        params = list(model.attention.parameters())
    # the probed path always crosses a relu somewhere in the backbone
    res = dc.grad_check(loss, params, h=h, n_probe=n_probe, seed=seed)
    return ComponentReport(component, res.max_rel_error, res.n_probed, RELU_TOL)


def components_for(aggregator: str, placement: tuple[str, ...]) -> list[str]:
    comps = ["backbone"]
    if aggregator == "attention":
        comps.append("attention_dual" if len(placement) == 2 else f"attention_{placement[0]}")
    if aggregator == "gru":
        comps.append("gru")
    comps.append("cross_entropy")
    return comps


def run_gradcheck(components=COMPONENTS, n_probe: int = 20, seed: int = 0) -> list[ComponentReport]:
    return [check_component(c, n_probe=n_probe, seed=seed) for c in components]
