"""Attaching a new modality to an already-trained model.

Everything the old modalities learned stays frozen: the shared prompt,
their aligners, projections, and adapters.  The new branch gets a fresh
aligner, a fresh projection head, and a linear adapter only when its
encoder width differs from the shared width.  It then trains against a
single anchor modality with the usual paired objective; alignment with
the other old modalities comes for free through the shared prompt.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .checkpoint import snapshot
from .errors import ConfigError, LineageError
from .model import Rng, SpanerModel, TrainConfig, TrainHistory, fit


@dataclass(frozen=True)
class ExtensionConfig:
    """What to attach and how to train it."""

    new_tag: str
    new_input_dim: int
    anchor_tag: str
    train: TrainConfig = TrainConfig()

    def __post_init__(self):
        if not self.new_tag:
            raise ConfigError("new modality tag must be non-empty")
        if self.new_input_dim < 1:
            raise ConfigError(
                f"new modality input dim must be positive, got {self.new_input_dim}")
        if self.new_tag == self.anchor_tag:
            raise ConfigError(
                f"new tag and anchor tag are both {self.new_tag!r}")


def extend(model: SpanerModel, config: ExtensionConfig,
           data: Mapping[str, np.ndarray],
           rng: Rng | None = None) -> tuple[TrainHistory, list[str]]:
    """Train a new modality branch against the anchor, in place.

    `data` pairs rows of the new modality with rows of the anchor.
    Returns the training history and the names of every frozen
    parameter, verified bitwise unchanged after training.
    """
    if config.anchor_tag not in model.modalities:
        raise ConfigError(f"anchor modality {config.anchor_tag!r} is not registered; "
                          f"registered: {sorted(model.modalities)}")
    if config.new_tag in model.modalities:
        raise ConfigError(f"modality {config.new_tag!r} is already registered")
    if rng is None:
        rng = Rng(config.train.seed)
    model.freeze_all()
    frozen_names = [p.name for p in model.parameters()]
    before = snapshot(model)
    branch_rng, fit_rng = rng.split(2)
    model.register_modality(config.new_tag, config.new_input_dim, branch_rng)
    history = fit(model, data, (config.new_tag, config.anchor_tag),
                  config.train, rng=fit_rng)
    drifted = assert_frozen_unchanged(before, snapshot(model), frozen_names)
    return history, drifted


def assert_frozen_unchanged(before: Mapping[str, np.ndarray],
                            after: Mapping[str, np.ndarray],
                            frozen_names: Iterable[str]) -> list[str]:
    """Names of frozen parameters whose bytes changed between snapshots.

    An empty list is the pass condition.  A frozen name absent from
    either snapshot means the two do not describe the same model.
    """
    drifted: list[str] = []
    for name in frozen_names:
        if name not in before or name not in after:
            raise LineageError(f"frozen parameter {name!r} missing from "
                               f"{'before' if name not in before else 'after'} snapshot")
        if np.asarray(before[name]).tobytes() != np.asarray(after[name]).tobytes():
            drifted.append(name)
    return drifted
