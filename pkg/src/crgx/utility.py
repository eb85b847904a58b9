"""Scalar utilities over logits: the quantity a heatmap explains.

One implementation serves both plain arrays and taped nodes (the autodiff
ops dispatch on their input), so the value a game enumerates and the value
a gradient is taken of are computed by the identical arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

UTILITY_KINDS = ("pre-softmax", "post-softmax", "log-softmax", "rest")


@dataclass(frozen=True)
class UtilitySpec:
    """Which scalar to explain: a target class plus a logit transform.

    pre-softmax   y_c
    post-softmax  softmax(y)_c
    log-softmax   ln softmax(y)_c
    rest          y_c + ln softmax(y)_c, i.e. 2*y_c - logsumexp(y)
    """

    target_class: int
    kind: str = "rest"

    def __post_init__(self):
        if self.kind not in UTILITY_KINDS:
            raise ValueError(f"unknown utility kind {self.kind!r}; "
                             f"expected one of {UTILITY_KINDS}")
        if self.target_class < 0:
            raise ValueError(f"target_class must be non-negative, got {self.target_class}")


def utility_node(logits, spec: UtilitySpec):
    """Utility as a node graph (or a raw scalar array if `logits` is one)."""
    n = logits.shape[0] if logits.ndim == 1 else -1
    if logits.ndim != 1:
        raise ValueError(f"utility: logits must be 1-D, got shape {logits.shape}")
    if spec.target_class >= n:
        raise ValueError(f"target_class {spec.target_class} out of range "
                         f"for {n} classes")
    c = spec.target_class
    if spec.kind == "pre-softmax":
        return ad.index(logits, c)
    if spec.kind == "post-softmax":
        return ad.index(ad.softmax(logits), c)
    if spec.kind == "log-softmax":
        return ad.sub(ad.index(logits, c), ad.logsumexp(logits))
    # rest: the logit plus its log-probability, fused through logsumexp
    return ad.sub(ad.mul(2.0, ad.index(logits, c)), ad.logsumexp(logits))


def compute_utility(logits, spec: UtilitySpec) -> float:
    """Scalar utility of a plain logits vector."""
    value = utility_node(ad.as_tensor(logits), spec)
    return float(value)
