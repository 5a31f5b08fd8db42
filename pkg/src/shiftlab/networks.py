"""The three small networks: feature extractor, classifier, discriminator.

The extractor is an MLP ending in a linear bottleneck (no final relu, so
features can occupy all orthants). The classifier is a single linear
layer plus softmax. The discriminator sees features through a gradient
reversal and emits a probability-of-target via a logistic output.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ShapeError,
    Tape,
    Tensor,
    add_bias,
    grad_reverse,
    init_velocity,
    matmul,
    relu,
    sigmoid,
    softmax,
)

__all__ = ["ModelConfig", "ModelState", "init_model", "features", "classify",
           "discriminate", "save_checkpoint", "load_checkpoint"]


@dataclass
class ModelConfig:
    input_dim: int
    num_classes: int
    hidden_dims: list[int] = field(default_factory=lambda: [64, 64])
    bottleneck_dim: int = 16
    discriminator_hidden_dims: list[int] = field(default_factory=lambda: [32])

    def __post_init__(self) -> None:
        self.hidden_dims = [int(h) for h in self.hidden_dims]
        self.discriminator_hidden_dims = [int(h) for h in self.discriminator_hidden_dims]
        dims = [self.input_dim, self.num_classes, self.bottleneck_dim]
        dims += self.hidden_dims + self.discriminator_hidden_dims
        if any(d <= 0 for d in dims):
            raise ValueError(f"all dimensions must be positive: {self}")
        if self.bottleneck_dim < 2:
            raise ValueError(f"bottleneck_dim must be >= 2, got {self.bottleneck_dim}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")


@dataclass
class ModelState:
    """All trainable parameters plus optimizer velocity slots."""

    config: ModelConfig
    extractor: list[tuple[Tensor, Tensor]]      # (weight, bias) per layer
    classifier: tuple[Tensor, Tensor]
    discriminator: list[tuple[Tensor, Tensor]]
    velocity: list[np.ndarray]
    init_seed: int

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for w, b in self.extractor:
            params += [w, b]
        params += list(self.classifier)
        for w, b in self.discriminator:
            params += [w, b]
        return params


def _init_layer(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[Tensor, Tensor]:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    weight = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    bias = Tensor(np.zeros((1, fan_out)))
    return weight, bias


def init_model(cfg: ModelConfig, seed: int) -> ModelState:
    """Uniform fan-scaled weights (bound sqrt(6/(fan_in+fan_out))), zero biases."""
    rng = np.random.default_rng(seed)
    ext_dims = [cfg.input_dim] + cfg.hidden_dims + [cfg.bottleneck_dim]
    extractor = [_init_layer(rng, a, b) for a, b in zip(ext_dims, ext_dims[1:])]
    classifier = _init_layer(rng, cfg.bottleneck_dim, cfg.num_classes)
    dis_dims = [cfg.bottleneck_dim] + cfg.discriminator_hidden_dims + [1]
    discriminator = [_init_layer(rng, a, b) for a, b in zip(dis_dims, dis_dims[1:])]
    state = ModelState(cfg, extractor, classifier, discriminator, [], seed)
    state.velocity = init_velocity(state.parameters())
    return state


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def features(state: ModelState, x, tape: Tape | None = None) -> Tensor:
    """Extractor forward: affine+relu stacks, final affine to the bottleneck."""
    h = _as_tensor(x)
    if h.shape[1] != state.config.input_dim:
        raise ShapeError(
            f"input has {h.shape[1]} columns, model expects {state.config.input_dim}"
        )
    last = len(state.extractor) - 1
    for i, (w, b) in enumerate(state.extractor):
        h = add_bias(tape, matmul(tape, h, w), b)
        if i != last:
            h = relu(tape, h)
    return h


def classify(state: ModelState, feats: Tensor, tape: Tape | None = None) -> Tensor:
    """Linear layer then row-wise softmax; rows sum to 1."""
    w, b = state.classifier
    return softmax(tape, add_bias(tape, matmul(tape, feats, w), b))


def discriminate(
    state: ModelState, feats: Tensor, grl_coeff: float, tape: Tape | None = None
) -> Tensor:
    """Probability-of-target per sample, with reversed gradients into feats."""
    h = grad_reverse(tape, feats, grl_coeff)
    last = len(state.discriminator) - 1
    for i, (w, b) in enumerate(state.discriminator):
        h = add_bias(tape, matmul(tape, h, w), b)
        if i != last:
            h = relu(tape, h)
    return sigmoid(tape, h)


def save_checkpoint(state: ModelState, path) -> None:
    """JSON checkpoint; float repr round-trips bit-exact."""

    def dump_layers(layers):
        return [{"weight": w.values.tolist(), "bias": b.values.tolist()} for w, b in layers]

    doc = {
        "config": {
            "input_dim": state.config.input_dim,
            "num_classes": state.config.num_classes,
            "hidden_dims": state.config.hidden_dims,
            "bottleneck_dim": state.config.bottleneck_dim,
            "discriminator_hidden_dims": state.config.discriminator_hidden_dims,
        },
        "init_seed": state.init_seed,
        "extractor": dump_layers(state.extractor),
        "classifier": dump_layers([state.classifier]),
        "discriminator": dump_layers(state.discriminator),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> ModelState:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    cfg = ModelConfig(**doc["config"])

    def load_layers(entries):
        return [(Tensor(e["weight"]), Tensor(e["bias"])) for e in entries]

    state = ModelState(
        cfg,
        load_layers(doc["extractor"]),
        load_layers(doc["classifier"])[0],
        load_layers(doc["discriminator"]),
        [],
        int(doc["init_seed"]),
    )
    state.velocity = init_velocity(state.parameters())
    expected = [cfg.input_dim] + cfg.hidden_dims + [cfg.bottleneck_dim]
    got = [state.extractor[0][0].shape[0]] + [w.shape[1] for w, _ in state.extractor]
    if got != expected:
        raise ValueError(f"checkpoint layer shapes {got} do not match config {expected}")
    return state
