"""Python bindings for prunekit."""

from . import _prunekit
from ._prunekit import (
    Dataset,
    Network,
    PrunekitError,
    evaluate,
    generate_synthetic,
    load_checkpoint,
    load_dataset,
)

__all__ = [
    "Dataset",
    "Network",
    "PrunekitError",
    "build_model",
    "evaluate",
    "generate_synthetic",
    "load_checkpoint",
    "load_dataset",
    "prune",
    "train",
]


def _config(options):
    # Values go through the same key=value parser as config files.
    out = {}
    for key, value in options.items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        out[key] = str(value)
    return out


def build_model(data, seed=1, **options):
    """Initialize a model, e.g. build_model(data, arch="plain", widths=[16, 32])."""
    return _prunekit.build_model(_config(options), data, seed)


def train(net, data, **options):
    """Train in place; returns the mean loss of every epoch."""
    return _prunekit.train(net, data, _config(options))


def prune(baseline, data, **options):
    """Run the pruning pipeline, e.g. prune(net, data, mode="tick-tock", flops_target=0.6)."""
    return _prunekit.prune(baseline, data, _config(options))
