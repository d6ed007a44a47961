"""Detector architectures: the hierarchical inspector and its comparison variants.

``proposed``         shared-weight inspector over all 31 pyramid nodes, max-pooled, then master
``flat_sequential``  the same network over the 16 leaf chunks only
``flattened_ff``     the 16x1024 chunk tensor rasterised into one 16384 vector, dense blocks, master
``ff_bot``           the same feed-forward stack over the flat 16384-bin bag of tokens
``lr_bot``           a single affine map from the flat bag to the 26 heads
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from . import nncore
from .hashing import HASH_VARIANT, N_BINS
from .nncore import Block, Dense, Module, Sequential, masked_bce, sigmoid
from .pyramid import n_nodes, pyramid_nodes
from .tokenizer import N_CHUNKS

N_HEADS = 26
MALICIOUS_HEAD = 0

VARIANTS = ("proposed", "flat_sequential", "flattened_ff", "ff_bot", "lr_bot")
NEURAL_VARIANTS = VARIANTS[:4]
FLAT_INPUT_VARIANTS = ("ff_bot", "lr_bot")

# what each variant consumes
INPUT_KIND = {
    "proposed": "pyramid",
    "flat_sequential": "leaves",
    "flattened_ff": "rasterized",
    "ff_bot": "flat_bag",
    "lr_bot": "flat_bag",
}


@dataclass(frozen=True)
class ArchConfig:
    n_leaves: int = N_CHUNKS
    n_bins: int = N_BINS
    hidden: int = 1024
    master_hidden: int = 1024
    n_heads: int = N_HEADS
    dropout: float = 0.2

    @property
    def flat_dims(self) -> int:
        return self.n_leaves * self.n_bins


@dataclass
class DocFeatures:
    """A batch of model inputs tagged with the representation they hold."""

    kind: str
    array: np.ndarray


def prepare_inputs(tag: str, chunked: Optional[np.ndarray] = None,
                   flat: Optional[np.ndarray] = None, dtype=np.float64) -> DocFeatures:
    """Turn chunk counts ``(B, leaves, bins)`` or flat bags ``(B, dims)`` into a variant's input."""
    kind = INPUT_KIND[tag]
    if kind == "flat_bag":
        if flat is None:
            raise ValueError(f"{tag} needs flat bag-of-token features")
        return DocFeatures(kind, np.asarray(flat, dtype=dtype))
    if chunked is None:
        raise ValueError(f"{tag} needs chunked features")
    chunked = np.asarray(chunked, dtype=dtype)
    if kind == "pyramid":
        return DocFeatures(kind, pyramid_nodes(chunked))
    if kind == "leaves":
        return DocFeatures(kind, chunked)
    return DocFeatures(kind, chunked.reshape(chunked.shape[0], -1))


class Detector(Module):
    """Common surface: logits, probabilities, backward from logit gradients."""

    tag: str = ""

    def __init__(self, config: ArchConfig) -> None:
        super().__init__()
        self.config = config

    @property
    def input_kind(self) -> str:
        return INPUT_KIND[self.tag]

    def forward(self, features: DocFeatures, training=False, rng=None, record=False):
        """Head probabilities for a batch; rejects inputs meant for another variant."""
        if not isinstance(features, DocFeatures):
            raise TypeError("forward expects DocFeatures; use logits() for raw arrays")
        if features.kind != self.input_kind:
            raise ValueError(f"{self.tag} consumes {self.input_kind} features, got {features.kind}")
        return sigmoid(self.logits(features.array, training, rng, record))

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return sigmoid(self.logits(x))

    def logits(self, x, training=False, rng=None, record=False):
        raise NotImplementedError

    def loss_and_backward(self, x, targets, mask=None, rng=None) -> float:
        """One recorded training-mode pass; leaves gradients in ``self.grads``."""
        self.zero_grad()
        z = self.logits(x, training=True, rng=rng, record=True)
        loss, dz = masked_bce(z, targets, mask)
        self.backward(dz)
        return loss


def _master(config: ArchConfig, n_in: int, rng, dtype) -> Sequential:
    return Sequential(
        ("block0", Block(n_in, config.master_hidden, config.dropout, rng, dtype)),
        ("block1", Block(config.master_hidden, config.master_hidden, config.dropout, rng, dtype)),
    )


class HierarchicalInspector(Detector):
    """Shared-weight inspector applied to every node, per-neuron max, master, sigmoid heads."""

    def __init__(self, config: ArchConfig = ArchConfig(), rng=None, use_pyramid: bool = True,
                 dtype=np.float64) -> None:
        super().__init__(config)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.tag = "proposed" if use_pyramid else "flat_sequential"
        self.n_nodes = n_nodes(config.n_leaves) if use_pyramid else config.n_leaves
        self.inspector = self.add_child("inspector", Sequential(
            ("block0", Block(config.n_bins, config.hidden, config.dropout, rng, dtype)),
            ("block1", Block(config.hidden, config.hidden, config.dropout, rng, dtype)),
        ))
        self.master = self.add_child("master", _master(config, config.hidden, rng, dtype))
        self.head = self.add_child("head", Dense(config.master_hidden, config.n_heads, rng, dtype))

    def inspect(self, nodes, training=False, rng=None, record=False):
        """Inspector outputs per node ``(B, K, H)`` and their per-neuron max ``(B, H)``."""
        if nodes.ndim != 3 or nodes.shape[1:] != (self.n_nodes, self.config.n_bins):
            raise ValueError(f"{self.tag} expects nodes of shape (B, {self.n_nodes}, "
                             f"{self.config.n_bins}), got {nodes.shape}")
        h = self.inspector.forward(nodes, training, rng, record)
        # argmax returns the first maximum: ties go to the lowest node index
        winner = h.argmax(axis=1)
        pooled = np.take_along_axis(h, winner[:, None, :], axis=1)[:, 0, :]
        return h, pooled, winner

    def logits(self, x, training=False, rng=None, record=False):
        h, pooled, winner = self.inspect(x, training, rng, record)
        if record:
            self._cache = (h.shape, winner)
        z = self.master.forward(pooled, training, rng, record)
        return self.head.forward(z, training, rng, record)

    def backward(self, dlogits):
        shape, winner = self._need_cache()
        dz = self.master.backward(self.head.backward(dlogits))
        dh = np.zeros(shape, dtype=dz.dtype)
        np.put_along_axis(dh, winner[:, None, :], dz[:, None, :], axis=1)
        return self.inspector.backward(dh)


class FeedForward(Detector):
    """Dense blocks over a single 16384-dim vector (rasterised chunks or flat bag)."""

    def __init__(self, config: ArchConfig = ArchConfig(), rng=None, tag: str = "ff_bot",
                 dtype=np.float64) -> None:
        super().__init__(config)
        if tag not in ("flattened_ff", "ff_bot"):
            raise ValueError(f"FeedForward builds flattened_ff or ff_bot, not {tag}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.tag = tag
        self.body = self.add_child("body", Sequential(
            ("block0", Block(config.flat_dims, config.hidden, config.dropout, rng, dtype)),
            ("block1", Block(config.hidden, config.hidden, config.dropout, rng, dtype)),
        ))
        self.master = self.add_child("master", _master(config, config.hidden, rng, dtype))
        self.head = self.add_child("head", Dense(config.master_hidden, config.n_heads, rng, dtype))

    def logits(self, x, training=False, rng=None, record=False):
        if x.ndim != 2 or x.shape[1] != self.config.flat_dims:
            raise ValueError(f"{self.tag} expects (B, {self.config.flat_dims}), got {x.shape}")
        z = self.body.forward(x, training, rng, record)
        z = self.master.forward(z, training, rng, record)
        return self.head.forward(z, training, rng, record)

    def backward(self, dlogits):
        return self.body.backward(self.master.backward(self.head.backward(dlogits)))


class LogisticBoT(Detector):
    """Affine map from the flat bag of tokens to the heads."""

    tag = "lr_bot"

    def __init__(self, config: ArchConfig = ArchConfig(), rng=None, dtype=np.float64) -> None:
        super().__init__(config)
        self.head = self.add_child("head", Dense(config.flat_dims, config.n_heads, rng, dtype))
        self.head.weight[...] = 0.0

    def logits(self, x, training=False, rng=None, record=False):
        if x.ndim != 2 or x.shape[1] != self.config.flat_dims:
            raise ValueError(f"lr_bot expects (B, {self.config.flat_dims}), got {x.shape}")
        return self.head.forward(x, training, rng, record)

    def backward(self, dlogits):
        return self.head.backward(dlogits)


def build_model(tag: str, config: ArchConfig = ArchConfig(), seed: int = 0,
                dtype=np.float64) -> Detector:
    rng = np.random.default_rng(seed)
    if tag == "proposed":
        return HierarchicalInspector(config, rng, use_pyramid=True, dtype=dtype)
    if tag == "flat_sequential":
        return HierarchicalInspector(config, rng, use_pyramid=False, dtype=dtype)
    if tag in ("flattened_ff", "ff_bot"):
        return FeedForward(config, rng, tag=tag, dtype=dtype)
    if tag == "lr_bot":
        return LogisticBoT(config, rng, dtype=dtype)
    raise ValueError(f"unknown variant {tag!r}; expected one of {VARIANTS}")


def param_count(model_or_tag: Union[Detector, str], config: ArchConfig = ArchConfig()) -> int:
    if isinstance(model_or_tag, Detector):
        return model_or_tag.n_params()
    c = config
    block = lambda n_in, n_out: 2 * n_in + n_in * n_out + n_out  # noqa: E731
    master = block(c.hidden, c.master_hidden) + block(c.master_hidden, c.master_hidden)
    head = c.master_hidden * c.n_heads + c.n_heads
    if model_or_tag in ("proposed", "flat_sequential"):
        return block(c.n_bins, c.hidden) + block(c.hidden, c.hidden) + master + head
    if model_or_tag in ("flattened_ff", "ff_bot"):
        return block(c.flat_dims, c.hidden) + block(c.hidden, c.hidden) + master + head
    if model_or_tag == "lr_bot":
        return c.flat_dims * c.n_heads + c.n_heads
    raise ValueError(f"unknown variant {model_or_tag!r}")


def save_model(model: Detector, path: Union[str, Path], extra: Optional[dict] = None) -> None:
    header = {
        "variant": model.tag,
        "arch": asdict(model.config),
        "hash_variant": HASH_VARIANT,
        "extra": extra or {},
    }
    nncore.save_params(path, model.parameters(), header)


def load_model(path: Union[str, Path], dtype=np.float64) -> Detector:
    header, params = nncore.load_params(path)
    if header.get("hash_variant") != HASH_VARIANT:
        raise nncore.ModelFormatError(
            f"model was built with hash variant {header.get('hash_variant')!r}, "
            f"this build uses {HASH_VARIANT!r}")
    model = build_model(header["variant"], ArchConfig(**header["arch"]), dtype=dtype)
    model.load_parameters(params)
    model.metadata = header.get("extra", {})
    return model
