"""Context-aware attribute weighting driven by an attention LSTM.

The attention LSTM watches the language state, the mean-pooled image, and the
previous word. Its hidden state is projected into embedding space and
correlated elementwise with each attribute embedding; the per-attribute
correlation vectors reduce (by summation) to scalar scores, and their softmax
mixes the attribute embeddings into one context-aware vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor


@dataclass
class AttentionContext:
    """Hidden and cell state of the attention LSTM."""
    h: Tensor
    c: Tensor


class LstmCell:
    """Standard LSTM cell (no peepholes), one weight set per gate."""

    GATES = ("i", "f", "o", "g")

    def __init__(self, store: ParameterStore, prefix: str,
                 input_dim: int, hidden_dim: int, rng):
        self.hidden_dim = hidden_dim
        self.w = {}
        self.r = {}
        self.b = {}
        for gate in self.GATES:
            self.w[gate] = store.add(f"{prefix}.w_{gate}", ad.uniform_init(
                (hidden_dim, input_dim), input_dim, hidden_dim, rng))
            self.r[gate] = store.add(f"{prefix}.r_{gate}", ad.uniform_init(
                (hidden_dim, hidden_dim), hidden_dim, hidden_dim, rng))
            self.b[gate] = store.add(f"{prefix}.b_{gate}", np.zeros(hidden_dim))

    def initial_state(self) -> AttentionContext:
        z = np.zeros(self.hidden_dim)
        return AttentionContext(h=Tensor(z.copy()), c=Tensor(z.copy()))

    def step(self, x: Tensor, state: AttentionContext) -> AttentionContext:
        if x.data.shape != (self.w["i"].data.shape[1],):
            raise ValueError(f"lstm input dim {x.shape}, expected "
                             f"({self.w['i'].data.shape[1]},)")
        pre = {gate: self.w[gate] @ x + self.r[gate] @ state.h + self.b[gate]
               for gate in self.GATES}
        i = ad.sigmoid(pre["i"])
        f = ad.sigmoid(pre["f"])
        o = ad.sigmoid(pre["o"])
        g = ad.tanh(pre["g"])
        c = f * state.c + i * g
        h = o * ad.tanh(c)
        return AttentionContext(h=h, c=c)


def mean_pool_regions(v: Tensor) -> Tensor:
    """Mean of the region descriptors, (n, h) -> (h,).

    Uses the order-canonical reduction so the pooled vector is bitwise
    invariant to region ordering.
    """
    if v.data.ndim != 2 or v.data.shape[0] < 1:
        raise ValueError(f"need at least one region row, got shape {v.shape}")
    return ad.sorted_sum(v, axis=0) * (1.0 / v.data.shape[0])


def attention_lstm_step(cell: LstmCell, language_h: Tensor, pooled_image: Tensor,
                        word_embedding: Tensor, state: AttentionContext) -> AttentionContext:
    """One attention-LSTM step on [language state | mean image | word]."""
    return cell.step(ad.concat([language_h, pooled_image, word_embedding]), state)


@dataclass
class CaaResult:
    """Per-attribute activations, their softmax weights, and the mixed vector."""
    activations: Tensor  # (e, c), column j is context (*) attribute-j embedding
    weights: Tensor      # (c,), sums to 1
    vector: Tensor       # (e,), convex combination of attribute embeddings


def caa_attend(context_h: Tensor, attribute_embeddings: Tensor,
               w_context: Tensor) -> CaaResult:
    """Context-aware attribute vector for the current step.

    context_h is projected (bias-free, so zero context keeps activations
    exactly zero) into embedding space; each attribute's activation is the
    elementwise product with its embedding; scores are the activation sums.
    """
    if attribute_embeddings.data.ndim != 2 or attribute_embeddings.data.shape[1] < 1:
        raise ValueError("need at least one attribute embedding column")
    projected = w_context @ context_h                       # (e,)
    activations = ad.scale_rows(attribute_embeddings, projected)
    scores = ad.sum_(activations, axis=0)                   # (c,)
    weights = ad.softmax(scores)
    vector = attribute_embeddings @ weights                 # (e,)
    return CaaResult(activations=activations, weights=weights, vector=vector)
