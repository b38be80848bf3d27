"""Caption decoder: dual attention, tensor-product gate, three-input LSTM cell.

One decode step, given the previous token and a scene's region features:

1. attend over attribute rows and interaction rows of the scene to get a
   visual context q (Early fusion: one softmax per row family, averaged;
   Late fusion: a single joint softmax);
2. embed the previous token to get a word context p;
3. optionally sharpen q and/or p against a per-scene semantic summary S
   by a learned multiplicative correction;
4. form the tensor-product gate T from the hidden state, the running sum
   of consumed word embeddings, and a pooled visual vector;
5. feed (p, q, T) through an LSTM-style cell with one weight matrix per
   (input, gate) pair; project the new hidden state to vocabulary logits.

Greedy emission takes the argmax (ties resolve to the lowest id; the
padding and start-of-sequence ids are never emitted).  The ablation
switches in :class:`VariantFlags` turn the two corrections of step 3 on
and off; every variant and both fusion modes run the identical cell.

All arithmetic goes through :mod:`aitpr.autodiff`, so a teacher-forced
pass recorded on a graph yields gradients for every parameter.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .errors import (
    ConfigError,
    DegenerateBranchError,
    DimensionError,
    NumericError,
)
from .scenes import BOS_ID, EOS_ID, PAD_ID, RegionFeatureSet, TokenSequence

INIT_SCALE = 0.08  # uniform init half-width for every learnable array


class FusionMode(enum.Enum):
    EARLY = "early"
    LATE = "late"

    @classmethod
    def parse(cls, name: str) -> "FusionMode":
        try:
            return cls(name.lower())
        except ValueError:
            raise ConfigError(f"unknown fusion mode {name!r}, expected early or late") from None


@dataclass(frozen=True)
class VariantFlags:
    """Ablation switches: correct the attended context, correct the word context."""

    correct_attend: bool
    correct_word: bool

    @classmethod
    def variant(cls, n: int) -> "VariantFlags":
        table = {1: (False, False), 2: (True, True), 3: (True, False)}
        if n not in table:
            raise ConfigError(f"variant must be 1, 2 or 3, got {n}")
        return cls(*table[n])


@dataclass(frozen=True)
class ModelDims:
    feat_dim: int    # D, dimension of region feature vectors
    hidden: int      # d, cell state width
    embed: int       # e, word embedding width
    att: int         # attention bottleneck width
    vocab_size: int

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ConfigError(f"{f.name} must be positive, got {getattr(self, f.name)}")
        if self.vocab_size <= 4:
            raise ConfigError(f"vocab_size must exceed the 4 reserved ids, got {self.vocab_size}")


# (name, shape builder) for every learnable array, in a fixed order.
_PARAM_SHAPES = (
    # state init maps
    ("w_init_h", lambda m: (m.feat_dim, m.hidden)),
    ("w_init_c", lambda m: (m.feat_dim, m.hidden)),
    # attention: hidden -> bottleneck -> query in feature space
    ("w_att_hidden", lambda m: (m.hidden, m.att)),
    ("w_att_query", lambda m: (m.att, m.feat_dim)),
    # word embedding
    ("w_embed", lambda m: (m.vocab_size, m.embed)),
    # tensor-product gate, first factor
    ("w_gate1_h", lambda m: (m.hidden, m.hidden)),
    ("w_gate1_sum", lambda m: (m.embed, m.hidden)),
    ("b_gate1", lambda m: (m.hidden,)),
    ("w_gate1_out", lambda m: (m.hidden, m.hidden)),
    # tensor-product gate, second factor
    ("w_gate2_h", lambda m: (m.hidden, m.hidden)),
    ("w_gate2_sum", lambda m: (m.embed, m.hidden)),
    ("b_gate2", lambda m: (m.hidden,)),
    ("w_gate2_out", lambda m: (m.hidden, m.hidden)),
    ("b_gate2_out", lambda m: (m.hidden,)),
    # pooled per-scene vectors
    ("w_semantic", lambda m: (m.feat_dim, m.hidden)),
    ("w_visual", lambda m: (m.feat_dim, m.hidden)),
    # semantic correction, one pair per correction site
    ("w_fix_gate_attend", lambda m: (m.hidden, m.feat_dim)),
    ("w_fix_mix_attend", lambda m: (m.feat_dim, m.feat_dim)),
    ("w_fix_gate_word", lambda m: (m.hidden, m.embed)),
    ("w_fix_mix_word", lambda m: (m.embed, m.embed)),
    # cell gates: input, forget, output, candidate
    ("w_input_word", lambda m: (m.embed, m.hidden)),
    ("w_input_attend", lambda m: (m.feat_dim, m.hidden)),
    ("w_input_tpr", lambda m: (m.hidden, m.hidden)),
    ("b_input", lambda m: (m.hidden,)),
    ("w_forget_word", lambda m: (m.embed, m.hidden)),
    ("w_forget_attend", lambda m: (m.feat_dim, m.hidden)),
    ("w_forget_tpr", lambda m: (m.hidden, m.hidden)),
    ("b_forget", lambda m: (m.hidden,)),
    ("w_output_word", lambda m: (m.embed, m.hidden)),
    ("w_output_attend", lambda m: (m.feat_dim, m.hidden)),
    ("w_output_tpr", lambda m: (m.hidden, m.hidden)),
    ("b_output", lambda m: (m.hidden,)),
    ("w_cand_word", lambda m: (m.embed, m.hidden)),
    ("w_cand_attend", lambda m: (m.feat_dim, m.hidden)),
    ("w_cand_tpr", lambda m: (m.hidden, m.hidden)),
    ("b_cand", lambda m: (m.hidden,)),
    # vocabulary projection
    ("w_logits", lambda m: (m.hidden, m.vocab_size)),
)


class ModelParams:
    """Every learnable array of the decoder, as autodiff parameters.

    Attribute names say what each array does; shapes follow from the
    configured :class:`ModelDims`.  Iteration order of
    :meth:`named_params` is fixed, which checkpointing relies on.
    """

    __slots__ = ("dims",) + tuple(name for name, _ in _PARAM_SHAPES)

    def __init__(self, dims: ModelDims, arrays: dict):
        self.dims = dims
        for name, shape_of in _PARAM_SHAPES:
            want = shape_of(dims)
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != want:
                raise DimensionError(
                    f"parameter {name} has shape {arr.shape}, expected {want}"
                )
            if not np.isfinite(arr).all():
                raise NumericError(f"parameter {name} contains non-finite values")
            setattr(self, name, ad.parameter(arr))

    def named_params(self):
        return [(name, getattr(self, name)) for name, _ in _PARAM_SHAPES]

    def param_list(self):
        return [t for _, t in self.named_params()]


def init_params(dims: ModelDims, seed: int) -> ModelParams:
    """Seeded uniform init in [-0.08, 0.08] for every array."""
    rng = np.random.default_rng(seed)
    arrays = {
        name: rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape_of(dims))
        for name, shape_of in _PARAM_SHAPES
    }
    return ModelParams(dims, arrays)


@dataclass(frozen=True)
class DecoderState:
    """h, c: cell state; embed_sum: sum of embeddings of consumed tokens."""

    h: ad.Tensor
    c: ad.Tensor
    embed_sum: ad.Tensor
    t: int


@dataclass(frozen=True)
class SemanticVector:
    """Pooled per-scene semantic summary, fixed during a rollout."""

    s: ad.Tensor


def init_state(v_bar, params: ModelParams) -> DecoderState:
    """h0 and c0 are linear maps of the mean attribute feature."""
    vb = v_bar if isinstance(v_bar, ad.Tensor) else ad.tensor(v_bar)
    h0 = ad.matmul(vb, params.w_init_h)
    c0 = ad.matmul(vb, params.w_init_c)
    zero_sum = ad.tensor(np.zeros(params.dims.embed))
    return DecoderState(h=h0, c=c0, embed_sum=zero_sum, t=0)


def _pooled_rows(feats: RegionFeatureSet) -> np.ndarray:
    rows = np.vstack([feats.v, feats.v_prime]) if feats.v_prime.shape[0] else feats.v
    return rows.mean(axis=0)


def compute_semantic_vector(feats: RegionFeatureSet, params: ModelParams) -> SemanticVector:
    """S = tanh(projection of the mean over all attribute and interaction rows)."""
    pooled = ad.tensor(_pooled_rows(feats))
    return SemanticVector(s=ad.tanh(ad.matmul(pooled, params.w_semantic)))


def compute_visual_context(feats: RegionFeatureSet, params: ModelParams) -> ad.Tensor:
    """v_x: the same pooled mean, projected to cell width for the gate."""
    pooled = ad.tensor(_pooled_rows(feats))
    return ad.matmul(pooled, params.w_visual)


def attend(h_prev: ad.Tensor, feats: RegionFeatureSet, mode: FusionMode,
           params: ModelParams, allow_attribute_only: bool = False):
    """Score regions against a query from the hidden state; mix their features.

    Returns ``(alpha, v_hat)``.  Late fusion: ``alpha`` is one distribution
    over all k1+k2 rows.  Early fusion: ``alpha`` is an ``(attr, inter)``
    pair of distributions and v_hat averages the two mixed vectors.
    """
    query = ad.matmul(ad.tanh(ad.matmul(h_prev, params.w_att_hidden)), params.w_att_query)
    k2 = feats.v_prime.shape[0]

    if mode is FusionMode.LATE:
        rows = np.vstack([feats.v, feats.v_prime]) if k2 else feats.v
        rows_t = ad.tensor(rows)
        alpha = ad.softmax(ad.matmul(rows_t, query))
        return alpha, ad.matmul(alpha, rows_t)

    attr_t = ad.tensor(feats.v)
    alpha_attr = ad.softmax(ad.matmul(attr_t, query))
    mixed_attr = ad.matmul(alpha_attr, attr_t)
    if k2 == 0:
        if not allow_attribute_only:
            raise DegenerateBranchError(
                "early fusion needs at least one interaction row "
                "(pass allow_attribute_only to fall back to attributes alone)"
            )
        return (alpha_attr, None), mixed_attr
    inter_t = ad.tensor(feats.v_prime)
    alpha_inter = ad.softmax(ad.matmul(inter_t, query))
    mixed_inter = ad.matmul(alpha_inter, inter_t)
    v_hat = ad.scale(ad.add(mixed_attr, mixed_inter), 0.5)
    return (alpha_attr, alpha_inter), v_hat


def semantic_correct(x: ad.Tensor, s: SemanticVector, w_gate: ad.Tensor,
                     w_mix: ad.Tensor) -> ad.Tensor:
    """Multiplicative correction: (gate drawn from S) elementwise (mix of x)."""
    return ad.mul(ad.matmul(s.s, w_gate), ad.matmul(x, w_mix))


def compute_tpr_gate(state: DecoderState, v_x: ad.Tensor, params: ModelParams) -> ad.Tensor:
    """Two gated factors bound elementwise; the word-history sum feeds both."""
    word_ctx = ad.sigmoid(
        ad.add(ad.add(ad.matmul(state.h, params.w_gate1_h),
                      ad.matmul(state.embed_sum, params.w_gate1_sum)),
               params.b_gate1)
    )
    factor1 = ad.matmul(word_ctx, params.w_gate1_out)
    vis_ctx = ad.sigmoid(
        ad.add(ad.add(ad.matmul(state.h, params.w_gate2_h),
                      ad.matmul(state.embed_sum, params.w_gate2_sum)),
               params.b_gate2)
    )
    bound = ad.mul(v_x, vis_ctx)
    factor2 = ad.tanh(ad.add(ad.matmul(bound, params.w_gate2_out), params.b_gate2_out))
    return ad.mul(factor1, factor2)


def _gate(p, q, T, w_word, w_attend, w_tpr, bias, squash):
    pre = ad.add(ad.add(ad.matmul(p, w_word), ad.matmul(q, w_attend)),
                 ad.add(ad.matmul(T, w_tpr), bias))
    return squash(pre)


def cell_step(p: ad.Tensor, q: ad.Tensor, T: ad.Tensor, state: DecoderState,
              params: ModelParams, consumed_token: int):
    """One cell update over the three contexts; returns (logits, new state).

    ``consumed_token`` is the id whose embedding p was derived from; its
    raw embedding row joins the running sum regardless of any correction
    applied to p itself, keeping the sum a pure function of the token
    history.
    """
    i = _gate(p, q, T, params.w_input_word, params.w_input_attend,
              params.w_input_tpr, params.b_input, ad.sigmoid)
    f = _gate(p, q, T, params.w_forget_word, params.w_forget_attend,
              params.w_forget_tpr, params.b_forget, ad.sigmoid)
    o = _gate(p, q, T, params.w_output_word, params.w_output_attend,
              params.w_output_tpr, params.b_output, ad.sigmoid)
    g = _gate(p, q, T, params.w_cand_word, params.w_cand_attend,
              params.w_cand_tpr, params.b_cand, ad.tanh)

    c_new = ad.add(ad.mul(f, state.c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    logits = ad.matmul(h_new, params.w_logits)
    if not (np.isfinite(h_new.data).all() and np.isfinite(logits.data).all()):
        raise NumericError(f"non-finite cell output at step {state.t}")

    embed_sum = ad.add(state.embed_sum, ad.row(params.w_embed, consumed_token))
    new_state = DecoderState(h=h_new, c=c_new, embed_sum=embed_sum, t=state.t + 1)
    return logits, new_state


def step_logits(state: DecoderState, feats: RegionFeatureSet, s: SemanticVector,
                v_x: ad.Tensor, prev_token: int, mode: FusionMode,
                flags: VariantFlags, params: ModelParams,
                allow_attribute_only: bool = False, trace: list = None):
    """Full step: attention, contexts, corrections, gate, cell.

    When ``trace`` is a list, a dict of detached numpy copies of the
    step's intermediates is appended to it.
    """
    if not 0 <= prev_token < params.dims.vocab_size:
        raise ConfigError(f"token id {prev_token} outside vocabulary of size {params.dims.vocab_size}")
    alpha, q_raw = attend(state.h, feats, mode, params, allow_attribute_only)
    p_raw = ad.row(params.w_embed, prev_token)

    q = semantic_correct(q_raw, s, params.w_fix_gate_attend,
                         params.w_fix_mix_attend) if flags.correct_attend else q_raw
    p = semantic_correct(p_raw, s, params.w_fix_gate_word,
                         params.w_fix_mix_word) if flags.correct_word else p_raw

    T = compute_tpr_gate(state, v_x, params)
    logits, new_state = cell_step(p, q, T, state, params, consumed_token=prev_token)

    if trace is not None:
        def _np(x):
            if x is None:
                return None
            if isinstance(x, tuple):
                return tuple(_np(e) for e in x)
            return np.array(x.data)
        trace.append({
            "alpha": _np(alpha), "q_raw": _np(q_raw), "q": _np(q),
            "p_raw": _np(p_raw), "p": _np(p), "T": _np(T),
            "h": _np(new_state.h), "logits": _np(logits),
            "embed_sum": _np(new_state.embed_sum),
        })
    return logits, new_state


def emit_token(logits: ad.Tensor) -> int:
    """Greedy emission: argmax over ids, ties to the lowest id.

    The padding and start ids are excluded so emitted sequences always
    satisfy the framing invariants.
    """
    scores = np.array(logits.data)
    scores[PAD_ID] = -np.inf
    scores[BOS_ID] = -np.inf
    return int(np.argmax(scores))


def decode_step(state: DecoderState, feats: RegionFeatureSet, s: SemanticVector,
                prev_token: int, mode: FusionMode, flags: VariantFlags,
                params: ModelParams, allow_attribute_only: bool = False):
    """One greedy decoding step; recomputes the pooled visual context."""
    v_x = compute_visual_context(feats, params)
    logits, new_state = step_logits(state, feats, s, v_x, prev_token, mode,
                                    flags, params, allow_attribute_only)
    return emit_token(logits), new_state


def generate_caption(feats: RegionFeatureSet, mode: FusionMode, flags: VariantFlags,
                     params: ModelParams, max_len: int,
                     allow_attribute_only: bool = False) -> TokenSequence:
    """Greedy rollout from BOS; stops at EOS or after max_len total ids."""
    if max_len < 2:
        raise ConfigError(f"max_len must be at least 2, got {max_len}")
    s = compute_semantic_vector(feats, params)
    v_x = compute_visual_context(feats, params)
    state = init_state(feats.v_bar, params)
    ids = [BOS_ID]
    prev = BOS_ID
    while len(ids) < max_len - 1:
        logits, state = step_logits(state, feats, s, v_x, prev, mode, flags,
                                    params, allow_attribute_only)
        tok = emit_token(logits)
        if tok == EOS_ID:
            break
        ids.append(tok)
        prev = tok
    ids.append(EOS_ID)
    return TokenSequence(ids=tuple(ids))
