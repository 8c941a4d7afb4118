"""Run configuration: flat ``key = value`` files with documented defaults.

Unknown keys are rejected.  The fully resolved configuration is echoed
into the run directory so every run is reproducible from its artifacts.
"""

from __future__ import annotations

import os

from .errors import ParameterError
from .training import TrainConfig

# key -> (type, default, description); covers TrainConfig plus eval options
CONFIG_KEYS = {
    "lam": (float, 0.8, "weight of the hard cross-entropy term, (0, 1]"),
    "tau": (float, 1.0, "softmax temperature for labels and probabilities"),
    "learning_rate": (float, 1e-4, "SGD step size"),
    "epochs": (int, 50, "number of training epochs"),
    "batch_size": (int, 32, "triplets per step (remainder dropped)"),
    "gem_p": (float, 3.0, "generalized-mean pooling exponent"),
    "dim": (int, 32, "shared embedding width (image channels = text width)"),
    "model_seed": (int, 0, "parameter initialization seed"),
    "shuffle_seed": (int, 0, "epoch shuffling seed"),
    "no_emd": (bool, False, "ablation: replace the editors/combiner with pooled summation"),
    "no_ssg": (bool, False, "ablation: hard labels only (lam = 1)"),
    "no_distill": (bool, False, "ablation: drop the distillation loss"),
    "single_stream": (bool, False, "ablation: train the trainable stream alone"),
    "soft_label_kernel": (str, "dot", "soft-label similarity kernel: dot | euclidean | sigmoid"),
    "alternation": (str, "step", "stream alternation granularity: step | epoch"),
    "integration": (str, "mean", "two-stream score integration: mean | concat"),
}


def _coerce(key, raw):
    kind = CONFIG_KEYS[key][0]
    if kind is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ParameterError(f"key {key!r} needs a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError as err:
        raise ParameterError(f"key {key!r} needs {kind.__name__}, got {raw!r}") from err


def default_config():
    return {key: spec[1] for key, spec in CONFIG_KEYS.items()}


def parse_config(path):
    """Read a key = value file into a fully resolved configuration dict."""
    resolved = default_config()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParameterError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in CONFIG_KEYS:
                raise ParameterError(f"{path}:{lineno}: unknown key {key!r}")
            resolved[key] = _coerce(key, value.strip())
    return resolved


def echo_config(resolved, out_dir):
    """Write the resolved configuration next to the run's other artifacts."""
    path = os.path.join(out_dir, "config.kv")
    with open(path, "w", encoding="utf-8") as fh:
        for key in CONFIG_KEYS:
            fh.write(f"{key} = {resolved[key]}\n")
    return path


def to_train_config(resolved):
    kwargs = {k: v for k, v in resolved.items() if k != "integration"}
    return TrainConfig(**kwargs).validate()
