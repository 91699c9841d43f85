"""Input checks shared by the estimators and the command line."""
from __future__ import annotations

from .preprocessing import MixConfig
from .volume import DectPair, LabelVolume, Volume


def check_alpha(alpha, name="alpha"):
    try:
        value = float(alpha)
    except (TypeError, ValueError):
        raise ValueError(f"{name} must be a number, got {alpha!r}") from None
    try:
        MixConfig(value)
    except ValueError:
        raise ValueError(f"{name} must lie in [0, 1], got {value}") from None
    return value


def check_pairs(X):
    """Accept a DectPair, a (low, high) tuple or a sequence of either; return a list of pairs."""
    if isinstance(X, DectPair):
        return [X]
    if isinstance(X, tuple) and len(X) == 2 and all(isinstance(v, Volume) for v in X):
        return [DectPair(X[0], X[1], "case000")]
    pairs = []
    for i, item in enumerate(X):
        if isinstance(item, DectPair):
            pairs.append(item)
        elif isinstance(item, (tuple, list)) and len(item) == 2 and all(isinstance(v, Volume) for v in item):
            pairs.append(DectPair(item[0], item[1], f"case{i:03d}"))
        else:
            raise TypeError(f"item {i}: expected a DectPair or (low, high) volumes, got {type(item).__name__}")
    if not pairs:
        raise ValueError("no cases given")
    return pairs


def check_labels(y, pairs):
    if isinstance(y, LabelVolume):
        y = [y]
    y = list(y)
    if len(y) != len(pairs):
        raise ValueError(f"{len(pairs)} cases but {len(y)} label volumes")
    for i, (pair, labels) in enumerate(zip(pairs, y)):
        if not isinstance(labels, LabelVolume):
            raise TypeError(f"labels {i}: expected a LabelVolume, got {type(labels).__name__}")
        if labels.dims != pair.dims:
            raise ValueError(f"labels {i}: dims {labels.dims} != image dims {pair.dims}")
    return y
