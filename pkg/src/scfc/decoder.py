"""Caption generator: peephole LSTM with consolidated-feature injection,
word distribution head, and greedy/beam decoding.

The injection enters through the candidate gate, so setting its weight matrix
to zero (or passing no injection) recovers the plain peephole LSTM exactly;
that identity is what the decoder ablation relies on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor


@dataclass
class DecoderState:
    h: Tensor
    c: Tensor


class PeepholeLstmCell:
    """LSTM whose gates read the cell state through diagonal peephole weights.

    Input and forget gates see the previous cell state; the output gate sees
    the current one. The candidate gate optionally adds a projection of an
    injected feature vector.
    """

    def __init__(self, store: ParameterStore, prefix: str, input_dim: int,
                 hidden_dim: int, inject_dim: int | None, rng):
        self.hidden_dim = hidden_dim
        self.w = {}
        self.r = {}
        self.b = {}
        for gate in ("i", "f", "o", "g"):
            self.w[gate] = store.add(f"{prefix}.w_{gate}", ad.uniform_init(
                (hidden_dim, input_dim), input_dim, hidden_dim, rng))
            self.r[gate] = store.add(f"{prefix}.r_{gate}", ad.uniform_init(
                (hidden_dim, hidden_dim), hidden_dim, hidden_dim, rng))
            self.b[gate] = store.add(f"{prefix}.b_{gate}", np.zeros(hidden_dim))
        self.p = {gate: store.add(f"{prefix}.p_{gate}", np.zeros(hidden_dim))
                  for gate in ("i", "f", "o")}
        self.w_inject = None
        if inject_dim is not None:
            self.w_inject = store.add(f"{prefix}.w_inject", ad.uniform_init(
                (hidden_dim, inject_dim), inject_dim, hidden_dim, rng))

    def initial_state(self) -> DecoderState:
        z = np.zeros(self.hidden_dim)
        return DecoderState(h=Tensor(z.copy()), c=Tensor(z.copy()))

    def step(self, x: Tensor, injection: Tensor | None,
             state: DecoderState) -> DecoderState:
        if injection is not None and self.w_inject is None:
            raise ValueError("cell was built without an injection path")
        i = ad.sigmoid(self.w["i"] @ x + self.r["i"] @ state.h
                       + self.p["i"] * state.c + self.b["i"])
        f = ad.sigmoid(self.w["f"] @ x + self.r["f"] @ state.h
                       + self.p["f"] * state.c + self.b["f"])
        g_pre = self.w["g"] @ x + self.r["g"] @ state.h + self.b["g"]
        if injection is not None:
            g_pre = g_pre + self.w_inject @ injection
        g = ad.tanh(g_pre)
        c = f * state.c + i * g
        o = ad.sigmoid(self.w["o"] @ x + self.r["o"] @ state.h
                       + self.p["o"] * c + self.b["o"])
        return DecoderState(h=o * ad.tanh(c), c=c)


def word_distribution(state_h: Tensor, w_output: Tensor) -> Tensor:
    """Probability vector over the whole vocabulary."""
    if w_output.data.shape[0] < 1:
        raise ValueError("empty vocabulary")
    return ad.softmax(w_output @ state_h)


def word_log_distribution(state_h: Tensor, w_output: Tensor) -> Tensor:
    if w_output.data.shape[0] < 1:
        raise ValueError("empty vocabulary")
    return ad.log_softmax(w_output @ state_h)


# -- decoding -----------------------------------------------------------------

@dataclass
class DecodedSequence:
    """A finished caption: token ids (specials excluded) and its log probability."""
    tokens: list
    log_prob: float


@dataclass
class BeamHypothesis:
    tokens: tuple
    log_prob: float
    state: object
    finished: bool = False


def greedy_decode(model, v: Tensor, max_len: int = 20) -> DecodedSequence:
    """Argmax decoding; ties break toward the lowest token id."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    end_id = model.config.end_id
    with ad.no_grad():
        state = model.initial_state()
        token = model.config.begin_id
        tokens = []
        total = 0.0
        for _ in range(max_len):
            state, out = model.step(state, token, v)
            logp = out.log_probs.data
            token = int(np.argmax(logp))
            total += float(logp[token])
            if token == end_id:
                break
            tokens.append(token)
    return DecodedSequence(tokens=tokens, log_prob=total)


def beam_search_decode(model, v: Tensor, beam_k: int = 3, max_len: int = 20):
    """Length-synchronous beam search over summed log probabilities.

    Finished hypotheses retire to a pool; at max_len the surviving beams are
    retired as-is. Returns (best, pool) where ties prefer the
    lexicographically smallest token sequence. Deterministic throughout.
    """
    if beam_k < 1:
        raise ValueError("beam_k must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    begin_id = model.config.begin_id
    end_id = model.config.end_id
    with ad.no_grad():
        live = [BeamHypothesis(tokens=(), log_prob=0.0, state=model.initial_state())]
        pool = []
        for _ in range(max_len):
            candidates = []
            for hyp in live:
                last = hyp.tokens[-1] if hyp.tokens else begin_id
                state, out = model.step(hyp.state, last, v)
                logp = out.log_probs.data
                for tok in range(logp.size):
                    candidates.append(BeamHypothesis(
                        tokens=hyp.tokens + (tok,),
                        log_prob=hyp.log_prob + float(logp[tok]),
                        state=state))
            candidates.sort(key=lambda h: (-h.log_prob, h.tokens))
            live = []
            for cand in candidates[:beam_k]:
                if cand.tokens[-1] == end_id:
                    pool.append(BeamHypothesis(tokens=cand.tokens[:-1],
                                               log_prob=cand.log_prob,
                                               state=None, finished=True))
                else:
                    live.append(cand)
            if not live:
                break
        for hyp in live:  # ran out of length; retire without an end token
            pool.append(BeamHypothesis(tokens=hyp.tokens, log_prob=hyp.log_prob,
                                       state=None, finished=True))
    pool.sort(key=lambda h: (-h.log_prob, h.tokens))
    best = pool[0]
    return DecodedSequence(tokens=list(best.tokens), log_prob=best.log_prob), pool
