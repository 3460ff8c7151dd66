"""The captioning model: one object owning every trainable tensor and the
per-timestep pipeline (word embedding -> attention LSTM -> context-aware
attributes -> stacked consolidation -> peephole decoder -> word distribution).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import AttentionContext, LstmCell, attention_lstm_step, caa_attend, mean_pool_regions
from .autodiff import ParameterStore, Tensor
from .consolidation import CfcLayerParams, scfc_forward
from .decoder import DecoderState, PeepholeLstmCell
from .frontend import AttributeCatalog


@dataclass
class ModelConfig:
    """Structural hyperparameters; defaults mirror the full-scale setup.

    attention_size defaults to decoder_size when left at 0 (the reference
    configuration uses 2048 for both hidden states).
    """
    vocab_size: int
    begin_id: int
    end_id: int
    embed_dim: int = 1000
    region_dim: int = 2048
    joint_dim: int = 512
    decoder_size: int = 2048
    attention_size: int = 0
    cfc_layers: int = 3
    attribute_count: int = 1000
    region_count: int = 36

    def __post_init__(self):
        if self.attention_size == 0:
            self.attention_size = self.decoder_size
        for name in ("vocab_size", "embed_dim", "region_dim", "joint_dim",
                     "decoder_size", "attention_size", "cfc_layers",
                     "attribute_count", "region_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def dims_fingerprint(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "embed_dim": self.embed_dim,
            "region_dim": self.region_dim,
            "joint_dim": self.joint_dim,
            "decoder_size": self.decoder_size,
            "attention_size": self.attention_size,
            "cfc_layers": self.cfc_layers,
            "attribute_count": self.attribute_count,
        }


@dataclass
class ModelState:
    attention: AttentionContext
    decoder: DecoderState


@dataclass
class StepOutput:
    """Everything one timestep produces, intermediates included."""
    log_probs: Tensor      # (|vocab|,)
    caa: object            # CaaResult
    consolidated: object   # ConsolidatedFeature


class CaptionModel:
    """Owns the parameter store and runs the per-step caption pipeline."""

    def __init__(self, config: ModelConfig, catalog: AttributeCatalog,
                 rng, store: ParameterStore | None = None):
        if catalog.count != config.attribute_count:
            raise ValueError(f"catalog has {catalog.count} attributes, "
                             f"config says {config.attribute_count}")
        if catalog.vocab_size != config.vocab_size:
            raise ValueError("catalog and config disagree on vocabulary size")
        self.config = config
        self.catalog = catalog
        self.store = store if store is not None else ParameterStore()
        c = config
        self.embedding = self.store.add("embedding", ad.uniform_init(
            (c.embed_dim, c.vocab_size), c.vocab_size, c.embed_dim, rng))
        self.attention_cell = LstmCell(
            self.store, "attention_lstm",
            input_dim=c.decoder_size + c.region_dim + c.embed_dim,
            hidden_dim=c.attention_size, rng=rng)
        self.w_context = self.store.add("caa.w_context", ad.uniform_init(
            (c.embed_dim, c.attention_size), c.attention_size, c.embed_dim, rng))
        self.cfc = [CfcLayerParams.create(
            self.store, f"cfc{s}", region_dim=c.region_dim,
            carrier_dim=c.embed_dim, joint_dim=c.joint_dim, rng=rng)
            for s in range(1, c.cfc_layers + 1)]
        self.decoder_cell = PeepholeLstmCell(
            self.store, "decoder", input_dim=c.embed_dim,
            hidden_dim=c.decoder_size,
            inject_dim=c.embed_dim + c.attention_size, rng=rng)
        self.w_output = self.store.add("output.w", ad.uniform_init(
            (c.vocab_size, c.decoder_size), c.decoder_size, c.vocab_size, rng))

    def attribute_embeddings(self) -> Tensor:
        """Shared-embedding columns for the attribute catalog, (e, c)."""
        return self.catalog.embeddings(self.embedding)

    def initial_state(self) -> ModelState:
        return ModelState(attention=self.attention_cell.initial_state(),
                          decoder=self.decoder_cell.initial_state())

    def step(self, state: ModelState, token_id: int, v: Tensor, *,
             attribute_embeddings: Tensor | None = None,
             dropout_rate: float = 0.0, rng=None):
        """Advance one timestep given the previous word; returns (state, StepOutput)."""
        if not 0 <= token_id < self.config.vocab_size:
            raise ValueError(f"token id {token_id} outside vocabulary")
        ea = attribute_embeddings if attribute_embeddings is not None \
            else self.attribute_embeddings()
        x = ad.column(self.embedding, token_id)
        pooled = mean_pool_regions(v)
        att_in = ad.concat([state.decoder.h, pooled, x])
        if dropout_rate > 0.0:
            att_in = ad.dropout(att_in, dropout_rate, rng)
        attention = self.attention_cell.step(att_in, state.attention)
        caa = caa_attend(attention.h, ea, self.w_context)
        consolidated = scfc_forward(v, caa.vector, attention.h, self.cfc)
        decoder = self.decoder_cell.step(x, consolidated.fused, state.decoder)
        head_in = decoder.h
        if dropout_rate > 0.0:
            head_in = ad.dropout(head_in, dropout_rate, rng)
        log_probs = ad.log_softmax(self.w_output @ head_in)
        new_state = ModelState(attention=attention, decoder=decoder)
        return new_state, StepOutput(log_probs=log_probs, caa=caa,
                                     consolidated=consolidated)

    def sequence_log_probs(self, v: Tensor, target_ids, *,
                           dropout_rate: float = 0.0, rng=None):
        """Teacher-forced per-step log p(target_t); targets must end with end_id."""
        target_ids = list(target_ids)
        if not target_ids or target_ids[-1] != self.config.end_id:
            raise ValueError("target sequence must end with the end token")
        for t in target_ids:
            if not 0 <= t < self.config.vocab_size:
                raise ValueError(f"target id {t} outside vocabulary")
        ea = self.attribute_embeddings()
        state = self.initial_state()
        inputs = [self.config.begin_id] + target_ids[:-1]
        picked = []
        for inp, tgt in zip(inputs, target_ids):
            state, out = self.step(state, inp, v, attribute_embeddings=ea,
                                   dropout_rate=dropout_rate, rng=rng)
            picked.append(ad.pick(out.log_probs, tgt))
        return picked
