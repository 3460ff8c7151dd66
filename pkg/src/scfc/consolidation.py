"""Stacked cross-modal feature consolidation.

Each layer measures the relevance of every region to the current textual
carrier, attends the regions with the resulting distribution, and adds the
projected attended visual back onto the carrier. Stacking the layers iterates
that consolidation; the final carrier is concatenated with the attention
state to form the feature injected into the decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor


@dataclass
class CfcLayerParams:
    """One consolidation layer's weights; layers never share parameters."""
    visual: Tensor    # (d, h) region projection
    textual: Tensor   # (d, e) carrier projection
    score: Tensor     # (d,) relevance read-out
    project: Tensor   # (e, h) attended-visual projection into carrier space

    @classmethod
    def create(cls, store: ParameterStore, prefix: str,
               region_dim: int, carrier_dim: int, joint_dim: int, rng):
        return cls(
            visual=store.add(f"{prefix}.visual", ad.uniform_init(
                (joint_dim, region_dim), region_dim, joint_dim, rng)),
            textual=store.add(f"{prefix}.textual", ad.uniform_init(
                (joint_dim, carrier_dim), carrier_dim, joint_dim, rng)),
            score=store.add(f"{prefix}.score", ad.uniform_init(
                (joint_dim,), joint_dim, 1, rng)),
            project=store.add(f"{prefix}.project", ad.uniform_init(
                (carrier_dim, region_dim), region_dim, carrier_dim, rng)),
        )


def cfc_relevance(v: Tensor, carrier: Tensor, params: CfcLayerParams) -> Tensor:
    """Relevance distribution over the n regions given the textual carrier."""
    if v.data.ndim != 2 or v.data.shape[0] < 1:
        raise ValueError("need at least one region")
    vis = params.visual @ v.T                 # (d, n)
    txt = params.textual @ carrier            # (d,)
    correlations = ad.tanh(ad.scale_rows(vis, txt))   # (d, n), entries in (-1, 1)
    scores = correlations.T @ params.score            # (n,)
    return ad.softmax(scores)


def cfc_consolidate(relevance: Tensor, v: Tensor, carrier: Tensor,
                    params: CfcLayerParams):
    """Attend the regions and fold them into the carrier.

    Returns (attended, fused): attended is the relevance-weighted sum of
    region rows; fused = project(attended) + carrier stays in carrier space.
    """
    if relevance.data.shape != (v.data.shape[0],):
        raise ValueError(f"relevance length {relevance.shape} vs {v.data.shape[0]} regions")
    weighted = ad.scale_rows(v, relevance)              # (n, h)
    attended = ad.sorted_sum(weighted, axis=0)          # order-canonical over regions
    fused = params.project @ attended + carrier
    return attended, fused


@dataclass
class ConsolidatedFeature:
    """All per-layer intermediates plus the decoder-ready fused feature."""
    relevances: list      # one (n,) distribution per layer
    attended: list        # one (h,) attended visual per layer
    intermediates: list   # one (e,) carrier per layer
    fused: Tensor         # (e + attention_dim,)


def scfc_forward(v: Tensor, caa_vector: Tensor, context_h: Tensor,
                 layers: list[CfcLayerParams]) -> ConsolidatedFeature:
    """Run all consolidation layers, seeding the carrier with the CAA vector."""
    if not layers:
        raise ValueError("need at least one consolidation layer")
    carrier = caa_vector
    relevances, attended_all, intermediates = [], [], []
    for params in layers:
        relevance = cfc_relevance(v, carrier, params)
        attended, carrier = cfc_consolidate(relevance, v, carrier, params)
        relevances.append(relevance)
        attended_all.append(attended)
        intermediates.append(carrier)
    fused = ad.concat([carrier, context_h])
    return ConsolidatedFeature(relevances=relevances, attended=attended_all,
                               intermediates=intermediates, fused=fused)
