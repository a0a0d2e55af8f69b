"""Model container: an ordered chain of named layers with optional skip-adds.

The chain executes in order; a skip entry ``{"dec2.up": "enc2.relu"}`` adds the
(post-skip) output of node ``enc2.relu`` to the output of node ``dec2.up``.
That is enough structure for the default encoder-decoder backbone while
keeping plain sequential stacks trivial.
"""

from __future__ import annotations

import copy

import numpy as np

from .layers import AvgPool2D, BatchNorm2D, Conv2D, Layer, NonFiniteError, ReLU, Upsample2D
from .loss import softmax_cross_entropy
from .params import GradientVector, ParameterLayout, flatten_per_sample_grads, model_layout


class Model:
    def __init__(self, nodes: list[tuple[str, Layer]], skip_add: dict[str, str] | None = None):
        names = [n for n, _ in nodes]
        if len(set(names)) != len(names):
            raise ValueError("duplicate node names")
        self.nodes = list(nodes)
        self.skip_add = dict(skip_add or {})
        for target, source in self.skip_add.items():
            if names.index(source) >= names.index(target):
                raise ValueError(f"skip source {source} must precede target {target}")
        self._layers = dict(self.nodes)
        self._layout: ParameterLayout | None = None

    def layer(self, name: str) -> Layer:
        return self._layers[name]

    def layout(self) -> ParameterLayout:
        if self._layout is None:
            self._layout = model_layout(self)
        return self._layout

    def copy(self) -> "Model":
        clone = copy.deepcopy(self)
        for _, layer in clone.nodes:
            layer._cache = None
            layer.grads = {}
        return clone

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        """Run the chain; raises on non-finite output."""
        skip_sources = set(self.skip_add.values())
        outs: dict[str, np.ndarray] = {}
        cur = x
        for name, layer in self.nodes:
            cur = layer.forward(cur, train=train)
            if name in self.skip_add:
                cur = cur + outs[self.skip_add[name]]
            if name in skip_sources:
                outs[name] = cur
        if not np.all(np.isfinite(cur)):
            raise NonFiniteError("non-finite values in forward output")
        return cur

    def backward(self, dout: np.ndarray, per_sample: bool = False) -> np.ndarray:
        """Backpropagate from the output gradient; fills each layer's grads."""
        pending: dict[str, np.ndarray] = {}
        g = dout
        for name, layer in reversed(self.nodes):
            if name in pending:
                g = g + pending.pop(name)
            if name in self.skip_add:
                src = self.skip_add[name]
                pending[src] = pending[src] + g if src in pending else g
            g = layer.backward(g, per_sample=per_sample)
        return g

    def loss_and_grad(
        self, batch: np.ndarray, labels: np.ndarray, train: bool = False
    ) -> tuple[float, GradientVector]:
        """Mean softmax cross-entropy over the batch plus the flat gradient."""
        logits = self.forward(batch, train=train)
        loss, dlogits = softmax_cross_entropy(logits, labels)
        self.backward(dlogits)
        layout = self.layout()
        values = np.empty(layout.total)
        for entry in layout.entries:
            g = self.layer(entry.layer).grads[entry.name]
            values[entry.offset : entry.offset + entry.length] = g.ravel()
        if not np.isfinite(loss) or not np.all(np.isfinite(values)):
            raise NonFiniteError("non-finite loss or gradient")
        return loss, GradientVector(values, layout)

    def per_sample_loss_and_grads(
        self, batch: np.ndarray, labels: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Per-sample losses and a (batch, params) gradient matrix, eval mode."""
        logits = self.forward(batch, train=False)
        losses, dlogits = softmax_cross_entropy(logits, labels, per_sample=True)
        self.backward(dlogits, per_sample=True)
        grads = flatten_per_sample_grads(self, batch.shape[0])
        if not np.all(np.isfinite(grads)):
            raise NonFiniteError("non-finite per-sample gradients")
        return losses, grads


def build_unet(in_channels: int = 1, num_classes: int = 2, width: int = 8) -> Model:
    """Four-level encoder-decoder segmentation backbone (~50k parameters at width 8).

    Channel widths run width/2w/4w/8w down the encoder; 2x average pooling
    between levels, nearest upsampling back up, additive skip connections,
    and a 3x3 convolution as the classifier head. Spatial dims must be
    divisible by 8. Layer ids are dotted block names (input.conv, enc1.bn,
    ...) so masking statistics can be grouped per block.
    """
    rng = np.random.default_rng(0)  # placeholder weights; callers reseed via init_parameters
    w = width
    nodes: list[tuple[str, Layer]] = [
        ("input.conv", Conv2D(in_channels, w, rng)),
        ("input.bn", BatchNorm2D(w)),
        ("input.relu", ReLU()),
        ("enc1.pool", AvgPool2D()),
        ("enc1.conv", Conv2D(w, 2 * w, rng)),
        ("enc1.bn", BatchNorm2D(2 * w)),
        ("enc1.relu", ReLU()),
        ("enc2.pool", AvgPool2D()),
        ("enc2.conv", Conv2D(2 * w, 4 * w, rng)),
        ("enc2.bn", BatchNorm2D(4 * w)),
        ("enc2.relu", ReLU()),
        ("enc3.pool", AvgPool2D()),
        ("enc3.conv", Conv2D(4 * w, 8 * w, rng)),
        ("enc3.bn", BatchNorm2D(8 * w)),
        ("enc3.relu", ReLU()),
        ("dec2.conv", Conv2D(8 * w, 4 * w, rng)),
        ("dec2.bn", BatchNorm2D(4 * w)),
        ("dec2.relu", ReLU()),
        ("dec2.up", Upsample2D()),
        ("dec1.conv", Conv2D(4 * w, 2 * w, rng)),
        ("dec1.bn", BatchNorm2D(2 * w)),
        ("dec1.relu", ReLU()),
        ("dec1.up", Upsample2D()),
        ("dec0.conv", Conv2D(2 * w, w, rng)),
        ("dec0.bn", BatchNorm2D(w)),
        ("dec0.relu", ReLU()),
        ("dec0.up", Upsample2D()),
        ("classifier", Conv2D(w, num_classes, rng)),
    ]
    skip_add = {"dec2.up": "enc2.relu", "dec1.up": "enc1.relu", "dec0.up": "input.relu"}
    return Model(nodes, skip_add)


def init_parameters(model: Model, seed: int) -> None:
    """Reinitialize all weights from one seeded draw (biases zero, BN identity)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    for _, layer in model.nodes:
        if isinstance(layer, Conv2D):
            layer.params["weight"] = he_weight(rng, layer)
            layer.params["bias"] = np.zeros(layer.out_channels)
        elif isinstance(layer, BatchNorm2D):
            layer.params["gamma"] = np.ones(layer.channels)
            layer.params["beta"] = np.zeros(layer.channels)
            layer.running_mean = np.zeros(layer.channels)
            layer.running_var = np.ones(layer.channels)
        elif layer.param_order:
            for pname in layer.param_order:
                arr = layer.params[pname]
                fan_in = arr.shape[0] if arr.ndim > 1 else arr.size
                layer.params[pname] = (
                    rng.normal(0.0, np.sqrt(2.0 / fan_in), size=arr.shape)
                    if arr.ndim > 1
                    else np.zeros(arr.shape)
                )
    model._layout = None


def he_weight(rng: np.random.Generator, conv: Conv2D) -> np.ndarray:
    fan_in = 9 * conv.in_channels
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(3, 3, conv.in_channels, conv.out_channels))
