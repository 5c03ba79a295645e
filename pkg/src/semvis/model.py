"""The two-path model: named parameters plus encode calls for both modalities."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import text as text_mod
from . import visual as vis
from .autodiff import Tensor
from .errors import CheckpointError
from .text import SruLayer, SruParams, Vocab
from .visual import (AdaptParams, BackboneParams, ConvBlock, ProjectionParams,
                     VisualConfig, VisualParams)

MINE_HARD = "hard"
MINE_RANDOM = "random"

_INIT_SALT = 7


@dataclass
class ModelConfig:
    """Every architectural knob in one flat record.

    The defaults are desk-scale; the full-scale configuration
    (backbone_channels=2048, adapt_channels=embed_dim=2400, word_dim=620,
    sru_layers=4, top_k=180) is accepted unchanged.
    """

    backbone_channels: int = 64
    hidden_channels: tuple[int, ...] = (16, 32, 64)
    adapt_channels: int = 64
    embed_dim: int = 64
    word_dim: int = 64
    sru_layers: int = 2
    pooling: str = vis.POOL_MAX_MIN
    visual_dropout: float = 0.5
    sru_dropout: float = 0.25
    margin: float = 0.2
    mining: str = MINE_RANDOM
    top_k: int | None = None   # None -> max(1, round(0.075 * embed_dim))

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if self.mining not in (MINE_HARD, MINE_RANDOM):
            raise ValueError(f"mining must be {MINE_HARD!r} or {MINE_RANDOM!r}, got {self.mining!r}")
        if min(self.word_dim, self.sru_layers) < 1:
            raise ValueError("word_dim and sru_layers must be >= 1")
        if self.top_k is not None and not 1 <= self.top_k <= self.embed_dim:
            raise ValueError(f"top_k must be in [1, {self.embed_dim}], got {self.top_k}")

    def visual_config(self) -> VisualConfig:
        return VisualConfig(self.backbone_channels, tuple(self.hidden_channels),
                            self.adapt_channels, self.embed_dim, self.pooling,
                            self.visual_dropout)

    def effective_top_k(self) -> int:
        if self.top_k is not None:
            return self.top_k
        return max(1, round(0.075 * self.embed_dim))


class Model:
    """Bundles the visual params, the word table and the recurrent text encoder.

    ``params`` maps stable names to the trainable tensors; the optimizer and
    the checkpoint format address parameters by these names.
    """

    def __init__(self, cfg: ModelConfig, vocab: Vocab, visual: VisualParams,
                 word_table: Tensor, sru: SruParams):
        self.cfg = cfg
        self.vocab = vocab
        self.visual = visual
        self.word_table = word_table
        self.sru = sru
        self.params = self._name_params()

    @classmethod
    def initialize(cls, cfg: ModelConfig, vocab: Vocab, seed: int) -> "Model":
        rng = np.random.default_rng((seed, _INIT_SALT))
        visual = vis.init_visual(cfg.visual_config(), rng)
        word_table = text_mod.init_word_table(len(vocab), cfg.word_dim, rng)
        sru = text_mod.init_sru(cfg.word_dim, cfg.embed_dim, cfg.sru_layers, rng)
        return cls(cfg, vocab, visual, word_table, sru)

    def _name_params(self) -> dict[str, Tensor]:
        named: dict[str, Tensor] = {}
        for i, block in enumerate(self.visual.backbone.blocks):
            named[f"backbone.{i}.kernel"] = block.kernel
            named[f"backbone.{i}.bias"] = block.bias
        named["adapt.kernel"] = self.visual.adapt.kernel
        named["adapt.bias"] = self.visual.adapt.bias
        named["proj.weight"] = self.visual.proj.weight
        named["proj.bias"] = self.visual.proj.bias
        named["word.table"] = self.word_table
        for i, layer in enumerate(self.sru.layers):
            named[f"sru.{i}.weight"] = layer.weight
            named[f"sru.{i}.bias_f"] = layer.bias_f
            named[f"sru.{i}.bias_r"] = layer.bias_r
            if layer.proj is not None:
                named[f"sru.{i}.proj"] = layer.proj
        return named

    @classmethod
    def from_params(cls, cfg: ModelConfig, vocab: Vocab,
                    params: dict[str, np.ndarray]) -> "Model":
        """Rebuild a model from named arrays (the checkpoint loader's path)."""
        model = cls.initialize(cfg, vocab, seed=0)
        expected = set(model.params)
        got = set(params)
        if got != expected:
            missing = sorted(expected - got)
            unknown = sorted(got - expected)
            raise CheckpointError(f"parameter names mismatch: missing={missing} unknown={unknown}")
        for name, tensor in model.params.items():
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != tensor.data.shape:
                raise CheckpointError(f"{name}: shape {arr.shape} != expected {tensor.data.shape}")
            tensor.data = arr
        return model

    # -- encoding ----------------------------------------------------------

    def encode_image(self, image, training: bool = False,
                     rng_key: tuple = ()) -> tuple[Tensor, Tensor]:
        """(embedding, feature stack) for a uint8 or float (3, H, W) image."""
        img = image if isinstance(image, Tensor) else vis.image_to_tensor(image)
        return vis.encode_image(img, self.visual, self.cfg.visual_config(),
                                training=training, rng_key=rng_key)

    def encode_text(self, text, training: bool = False, rng_key: tuple = ()) -> Tensor:
        """Embed a caption string, or a pre-tokenized list of token indices."""
        token_ids = text_mod.tokenize(text, self.vocab) if isinstance(text, str) else list(text)
        return text_mod.encode_text(token_ids, self.word_table, self.sru,
                                    dropout_p=self.cfg.sru_dropout,
                                    training=training, rng_key=rng_key)

    def clone_config(self, **overrides) -> ModelConfig:
        return replace(self.cfg, **overrides)
