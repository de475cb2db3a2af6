"""Shared-prompt alignment model.

One block of prompt tokens is shared by every modality.  Each modality
owns an attention aligner that mixes its encoder output with the prompt,
plus a linear projection head applied to the raw (pre-aligner) features.
Training pulls paired batches together with two contrastive terms: one
on the projected features, one on the max-pooled aligner output, the
latter weighted by ``ca_weight``.

Modalities whose encoder width differs from the shared width get a
linear adapter in front of everything else; matching widths get none.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .losses import ContrastiveConfig, contrastive_loss
from .tensor import (Parameter, Rng, Tensor, as_tensor, broadcast_rows, concat,
                     elementwise_max_over_tokens, layer_norm, matmul, narrow,
                     reshape, scale, softmax_last, transpose)

PROMPT_INIT_STD = 0.02


@dataclass(frozen=True)
class TrainConfig:
    """Model geometry plus optimization settings.

    proj_dim of None means the projection heads keep the shared width.
    """

    embed_dim: int = 32
    prompt_tokens: int = 4
    heads: int = 2
    proj_dim: int | None = None
    ca_weight: float = 0.5
    temperature: float = 1.0
    symmetric: bool = False
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be positive, got {self.embed_dim}")
        if self.prompt_tokens < 1:
            raise ConfigError(f"prompt_tokens must be positive, got {self.prompt_tokens}")
        if self.heads < 1:
            raise ConfigError(f"heads must be positive, got {self.heads}")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.proj_dim is not None and self.proj_dim < 1:
            raise ConfigError(f"proj_dim must be positive, got {self.proj_dim}")
        if self.ca_weight < 0.0:
            raise ConfigError(f"ca_weight must be non-negative, got {self.ca_weight}")
        if not (self.temperature > 0.0):
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.learning_rate < 0.0:
            raise ConfigError(
                f"learning_rate must be non-negative, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not (0.0 <= v < 1.0):
                raise ConfigError(f"{name} must lie in [0, 1), got {v}")
        if not (self.adam_eps > 0.0):
            raise ConfigError(f"adam_eps must be positive, got {self.adam_eps}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be at least 2, got {self.batch_size}")

    @property
    def projection_dim(self) -> int:
        return self.embed_dim if self.proj_dim is None else self.proj_dim


@dataclass
class SharedPrompt:
    """The learnable tokens every modality attends over."""

    tokens: Parameter

    @property
    def count(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]


@dataclass
class CrossAttentionAligner:
    """Pre-norm multi-head attention with a residual connection."""

    heads: int
    norm_gain: Parameter
    norm_bias: Parameter
    w_query: Parameter
    w_key: Parameter
    w_value: Parameter
    w_out: Parameter

    @property
    def width(self) -> int:
        return self.w_query.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.norm_gain, self.norm_bias, self.w_query, self.w_key,
                self.w_value, self.w_out]


@dataclass
class ProjectionHead:
    """Linear map from pre-aligner features to the alignment space."""

    weight: Parameter
    bias: Parameter

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


@dataclass
class BranchOutput:
    """Per-modality forward results: pooled aligner output and projection."""

    pooled: Tensor
    projected: Tensor


class SpanerModel:
    """Shared prompt plus per-modality aligners, projections, adapters."""

    def __init__(self, prompt: SharedPrompt, heads: int, proj_dim: int,
                 ca_weight: float, loss_config: ContrastiveConfig):
        self.prompt = prompt
        self.heads = heads
        self.proj_dim = proj_dim
        self.ca_weight = float(ca_weight)
        self.loss_config = loss_config
        self.modalities: dict[str, int] = {}
        self.aligners: dict[str, CrossAttentionAligner] = {}
        self.projections: dict[str, ProjectionHead] = {}
        self.adapters: dict[str, Parameter] = {}

    @property
    def width(self) -> int:
        return self.prompt.width

    def register_modality(self, tag: str, input_dim: int, rng: Rng) -> None:
        """Add one modality branch, drawing fresh weights from `rng`."""
        if tag in self.modalities:
            raise ConfigError(f"modality tag {tag!r} registered twice")
        if input_dim < 1:
            raise ConfigError(f"modality {tag!r} input dim must be positive, "
                              f"got {input_dim}")
        d = self.width
        adapter_rng, aligner_rng, proj_rng = rng.split(3)
        if input_dim != d:
            self.adapters[tag] = Parameter(adapter_rng.glorot(input_dim, d),
                                           name=f"adapter.{tag}.weight")
        self.aligners[tag] = CrossAttentionAligner(
            heads=self.heads,
            norm_gain=Parameter(np.ones(d), name=f"aligner.{tag}.norm_gain"),
            norm_bias=Parameter(np.zeros(d), name=f"aligner.{tag}.norm_bias"),
            w_query=Parameter(aligner_rng.glorot(d, d), name=f"aligner.{tag}.w_query"),
            w_key=Parameter(aligner_rng.glorot(d, d), name=f"aligner.{tag}.w_key"),
            w_value=Parameter(aligner_rng.glorot(d, d), name=f"aligner.{tag}.w_value"),
            w_out=Parameter(aligner_rng.glorot(d, d), name=f"aligner.{tag}.w_out"),
        )
        self.projections[tag] = ProjectionHead(
            weight=Parameter(proj_rng.glorot(d, self.proj_dim),
                             name=f"projection.{tag}.weight"),
            bias=Parameter(np.zeros(self.proj_dim), name=f"projection.{tag}.bias"),
        )
        self.modalities[tag] = input_dim

    def parameters(self) -> list[Parameter]:
        """Every parameter in a stable order: prompt, then each modality."""
        out: list[Parameter] = [self.prompt.tokens]
        for tag in self.modalities:
            if tag in self.adapters:
                out.append(self.adapters[tag])
            out.extend(self.aligners[tag].parameters())
            out.extend(self.projections[tag].parameters())
        return out

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if not p.frozen]

    def freeze_all(self) -> None:
        for p in self.parameters():
            p.freeze()

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def init_model(config: TrainConfig, modalities: Sequence[tuple[str, int]],
               rng: Rng | None = None) -> SpanerModel:
    """Build a fresh model over at least two modalities.

    Prompt tokens start small-Gaussian; attention and projection weights
    are Glorot-uniform; norm gains start at one, every bias at zero.
    Only spawned child streams are consumed, never `rng` itself, so
    callers may keep drawing from the root without disturbing init.
    """
    if len(modalities) < 2:
        raise ConfigError(f"need at least two modalities, got {len(modalities)}")
    tags = [tag for tag, _ in modalities]
    if len(set(tags)) != len(tags):
        raise ConfigError(f"duplicate modality tags in {tags}")
    if rng is None:
        rng = Rng(config.seed)
    streams = rng.split(1 + len(modalities))
    prompt = SharedPrompt(Parameter(
        streams[0].normal((config.prompt_tokens, config.embed_dim), std=PROMPT_INIT_STD),
        name="prompt.tokens"))
    model = SpanerModel(prompt, config.heads, config.projection_dim,
                        config.ca_weight,
                        ContrastiveConfig(config.temperature, config.symmetric))
    for (tag, input_dim), stream in zip(modalities, streams[1:]):
        model.register_modality(tag, input_dim, stream)
    return model


def _split_heads(t: Tensor, heads: int) -> Tensor:
    batch, tokens, width = t.shape
    return transpose(reshape(t, (batch, tokens, heads, width // heads)), (0, 2, 1, 3))


def aligner_forward(aligner: CrossAttentionAligner, prompt: SharedPrompt,
                    x) -> tuple[Tensor, Tensor]:
    """Run one batch through a modality's aligner.

    The batch row and the shared prompt tokens are stacked into one
    sequence, normalized, self-attended, and added back residually.
    Returns the updated batch rows [B x d] and prompt tokens [B x n x d].
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"aligner input must be [batch x width], got {x.shape}")
    d = aligner.width
    if x.shape[1] != d or prompt.width != d:
        raise DimensionError(
            f"width mismatch: input {x.shape}, prompt {prompt.tokens.shape}, "
            f"aligner width {d}")
    batch = x.shape[0]
    tokens = 1 + prompt.count
    seq = concat([reshape(x, (batch, 1, d)),
                  broadcast_rows(prompt.tokens, batch)], axis=1)
    normed = layer_norm(seq, aligner.norm_gain, aligner.norm_bias)
    q = _split_heads(matmul(normed, aligner.w_query), aligner.heads)
    k = _split_heads(matmul(normed, aligner.w_key), aligner.heads)
    v = _split_heads(matmul(normed, aligner.w_value), aligner.heads)
    head_dim = d // aligner.heads
    probs = softmax_last(scale(matmul(q, transpose(k, (0, 1, 3, 2))),
                               1.0 / math.sqrt(head_dim)))
    context = reshape(transpose(matmul(probs, v), (0, 2, 1, 3)), (batch, tokens, d))
    updated = seq + matmul(context, aligner.w_out)
    x_out = reshape(narrow(updated, 1, 0, 1), (batch, d))
    prompt_out = narrow(updated, 1, 1, prompt.count)
    return x_out, prompt_out


def pooled_embedding(x_out: Tensor, prompt_out: Tensor) -> Tensor:
    """Coordinate-wise max over the updated batch row and prompt tokens."""
    x_out, prompt_out = as_tensor(x_out), as_tensor(prompt_out)
    if x_out.ndim != 2 or prompt_out.ndim != 3 or \
            x_out.shape[0] != prompt_out.shape[0] or \
            x_out.shape[1] != prompt_out.shape[2]:
        raise DimensionError(
            f"pooling shapes disagree: {x_out.shape} and {prompt_out.shape}")
    batch, d = x_out.shape
    seq = concat([reshape(x_out, (batch, 1, d)), prompt_out], axis=1)
    return elementwise_max_over_tokens(seq)


def forward(model: SpanerModel, batch: Mapping[str, object]) -> dict[str, BranchOutput]:
    """Embed a batch through every requested modality branch.

    Every tag must be registered and every modality must supply the same
    number of rows.  The projection head reads the adapted pre-aligner
    features; the pooled embedding reads the aligner output.
    """
    if not batch:
        raise ConfigError("forward needs at least one modality in the batch")
    for tag in batch:
        if tag not in model.modalities:
            raise ConfigError(f"unknown modality tag {tag!r}; "
                              f"registered: {sorted(model.modalities)}")
    rows = {tag: as_tensor(v) for tag, v in batch.items()}
    counts = {tag: t.shape[0] for tag, t in rows.items()}
    if len(set(counts.values())) != 1:
        raise DimensionError(f"modalities disagree on batch size: {counts}")
    out: dict[str, BranchOutput] = {}
    for tag in model.modalities:
        if tag not in rows:
            continue
        x = rows[tag]
        if x.ndim != 2 or x.shape[1] != model.modalities[tag]:
            raise DimensionError(
                f"modality {tag!r} expects [batch x {model.modalities[tag]}], "
                f"got {x.shape}")
        if tag in model.adapters:
            x = matmul(x, model.adapters[tag])
        x_out, prompt_out = aligner_forward(model.aligners[tag], model.prompt, x)
        proj = model.projections[tag]
        out[tag] = BranchOutput(
            pooled=pooled_embedding(x_out, prompt_out),
            projected=matmul(x, proj.weight) + proj.bias,
        )
    return out


class Adam:
    """Adam with bias correction and no weight decay.

    Frozen parameters are skipped outright, so their bytes and their
    moment slots never change.
    """

    def __init__(self, params: Iterable[Parameter], learning_rate: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.steps = 0
        self._m = {id(p): np.zeros_like(p.data) for p in self.params}
        self._v = {id(p): np.zeros_like(p.data) for p in self.params}

    @classmethod
    def from_config(cls, params: Iterable[Parameter], config: TrainConfig) -> "Adam":
        return cls(params, config.learning_rate, config.beta1, config.beta2,
                   config.adam_eps)

    def step(self) -> None:
        self.steps += 1
        correct1 = 1.0 - self.beta1 ** self.steps
        correct2 = 1.0 - self.beta2 ** self.steps
        for p in self.params:
            if p.frozen:
                continue
            g = p.grad
            m = self._m[id(p)]
            v = self._v[id(p)]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.learning_rate * (m / correct1) / (
                np.sqrt(v / correct2) + self.eps)


@dataclass
class StepLosses:
    """One training step's loss values."""

    step: int
    total: float
    align: float
    cross_attention: float


@dataclass
class TrainHistory:
    """Per-step loss record for one fit call."""

    ca_weight: float
    rows: list[StepLosses] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)


def training_step(model: SpanerModel, batch: Mapping[str, object],
                  pair: tuple[str, str], optimizer: Adam,
                  step: int = 0) -> StepLosses:
    """One gradient update on a paired batch.

    The total loss is the projected-feature alignment term plus
    ca_weight times the pooled cross-attention term, both using the
    model's contrastive settings.
    """
    first, second = pair
    for tag in pair:
        if tag not in batch:
            raise ConfigError(f"training pair tag {tag!r} missing from batch")
    outs = forward(model, {first: batch[first], second: batch[second]})
    if outs[first].pooled.shape[0] < 2:
        raise DimensionError(
            f"training needs at least 2 paired rows, got {outs[first].pooled.shape[0]}")
    ca_loss = contrastive_loss(outs[first].pooled, outs[second].pooled,
                               model.loss_config)
    align_loss = contrastive_loss(outs[first].projected, outs[second].projected,
                                  model.loss_config)
    total_loss = align_loss + scale(ca_loss, model.ca_weight)
    align, ca, total = align_loss.item(), ca_loss.item(), total_loss.item()
    if not math.isfinite(total):
        raise NumericError(f"non-finite loss {total} at step {step}")
    model.zero_grads()
    total_loss.backward()
    optimizer.step()
    return StepLosses(step, total, align, ca)


def fit(model: SpanerModel, data: Mapping[str, np.ndarray], pair: tuple[str, str],
        config: TrainConfig, rng: Rng | None = None) -> TrainHistory:
    """Train on paired rows from two modalities.

    Rows are shuffled every epoch; a trailing slice of fewer than two
    rows is dropped.  The model's loss weights are reset from `config`,
    so the same call drives both initial training and extension.
    """
    first, second = pair
    for tag in pair:
        if tag not in model.modalities:
            raise ConfigError(f"cannot train unregistered modality {tag!r}")
        if tag not in data:
            raise ConfigError(f"training data is missing modality {tag!r}")
    n = int(np.asarray(data[first]).shape[0])
    if n != int(np.asarray(data[second]).shape[0]):
        raise DimensionError(
            f"paired modalities disagree on row count: "
            f"{n} vs {np.asarray(data[second]).shape[0]}")
    if n < 2:
        raise ConfigError(f"training needs at least 2 paired rows, got {n}")
    if rng is None:
        rng = Rng(config.seed)
    model.ca_weight = config.ca_weight
    model.loss_config = ContrastiveConfig(config.temperature, config.symmetric)
    optimizer = Adam.from_config(model.trainable_parameters(), config)
    history = TrainHistory(ca_weight=config.ca_weight)
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            chosen = order[start:start + config.batch_size]
            if chosen.shape[0] < 2:
                continue
            batch = {first: np.asarray(data[first])[chosen],
                     second: np.asarray(data[second])[chosen]}
            history.rows.append(training_step(model, batch, pair, optimizer, step))
            step += 1
    return history
