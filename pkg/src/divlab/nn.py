"""Plain ReLU multilayer perceptrons evaluated on ParamVectors.

A network is split into a backbone (hidden layers, slots ``w0, b0, w1, ...``)
and a linear head (slots ``w, b``). Both the probe and the learners use it.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import DimensionError
from .params import ParamVector


def init_backbone(widths, rng):
    """He-initialised hidden layers for ``widths = (input, h1, h2, ...)``."""
    arrays = {}
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        arrays[f"w{i}"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        arrays[f"b{i}"] = np.zeros(fan_out)
    return ParamVector.from_arrays(arrays)


def init_head(fan_in, n_out, rng, std=None):
    std = np.sqrt(1.0 / fan_in) if std is None else std
    return ParamVector.from_arrays(
        {"w": rng.normal(0.0, std, size=(fan_in, n_out)), "b": np.zeros(n_out)}
    )


def n_layers(backbone):
    return sum(1 for name in backbone.names if name.startswith("w"))


def backbone_forward(backbone, x, return_preacts=False):
    """Features of ``x`` (rows are samples). Optionally also the pre-activations."""
    h = ad.as_tensor(x)
    preacts = []
    for i in range(n_layers(backbone)):
        w = backbone[f"w{i}"]
        if h.shape[1] != w.shape[0]:
            raise DimensionError("backbone input", h.shape, w.shape)
        z = h @ w + backbone[f"b{i}"]
        preacts.append(z)
        h = ad.relu(z)
    return (h, preacts) if return_preacts else h


def head_forward(head, features):
    return features @ head["w"] + head["b"]


def logits(backbone, head, x):
    return head_forward(head, backbone_forward(backbone, x))


def predict(backbone, head, x):
    with ad.no_grad():
        return logits(backbone, head, x).data.argmax(axis=1)
