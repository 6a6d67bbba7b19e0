"""Question encoding and instruction generation.

A trainable token table stands in for a pretrained sentence encoder; the
instruction generator only sees token vectors ``x_t`` and their mean
``q_lm``, so any encoder producing those can be swapped in.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import INV_TOKEN, SELF_LOOP_TOKEN, TokenVocab, relation_tokens
from .graph import RelationVocab
from .tensor import DimensionError, Tensor


class EncoderError(ValueError):
    pass


@dataclass
class IGParams:
    steps: list  # W^(i), each D x 4D
    attention: Tensor  # W_a, D x D
    update: Optional[Tensor] = None  # D x D, maps a pass summary to the next q^(0)

    @property
    def dim(self) -> int:
        return self.attention.shape[0]


@dataclass
class InstructionSet:
    expansion: list  # N tensors, each B x D
    backup: list  # M tensors, each B x D
    attention_maps: list  # per instruction, attention over the flattened tokens


@dataclass
class EncodedQuestions:
    tokens: Tensor  # sum(T_b) x D
    segments: np.ndarray  # question index per token
    q_lm: Tensor  # B x D

    @property
    def num_questions(self) -> int:
        return self.q_lm.shape[0]


def encode_questions(questions: Sequence[Sequence[int]], embedding: Tensor,
                     positions: Optional[Tensor] = None) -> EncodedQuestions:
    """Token rows and mean-pooled sentence vectors for a batch of questions.

    With ``positions`` the row for the t-th token is added to its vector
    (positions past the table reuse the last row).
    """
    lengths = np.array([len(q) for q in questions], dtype=np.int64)
    if len(lengths) == 0 or np.any(lengths == 0):
        raise EncoderError("empty token sequence")
    ids = np.concatenate([np.asarray(q, dtype=np.int64) for q in questions])
    if ids.min() < 0 or ids.max() >= embedding.shape[0]:
        raise EncoderError("token id outside the embedding table")
    segments = np.repeat(np.arange(len(lengths)), lengths)
    xs = T.take_rows(embedding, ids)
    if positions is not None:
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        pos = np.minimum(np.arange(len(ids)) - starts[segments], positions.shape[0] - 1)
        xs = xs + T.take_rows(positions, pos)
    weights = Tensor((1.0 / lengths[segments]).astype(embedding.dtype).reshape(-1, 1))
    q_lm = T.index_add(xs * weights, segments, len(lengths))
    return EncodedQuestions(xs, segments, q_lm)


def encode_question(tokens: Sequence[int], embedding: Tensor,
                    positions: Optional[Tensor] = None) -> tuple[Tensor, Tensor]:
    enc = encode_questions([tokens], embedding, positions)
    return enc.tokens, enc.q_lm


def generate_instructions(enc: EncodedQuestions, params: IGParams, count: int,
                          q0: Optional[Tensor] = None) -> tuple[list, list]:
    """Run the instruction recurrence ``count`` times.

    q^(i) = W^(i) [q^(i-1) ; q_lm ; q_lm - q^(i-1) ; q_lm * q^(i-1)], each token
    is scored by the summed entries of W_a (q^(i) * x_t), and the instruction is
    the attention-weighted sum of token vectors.
    """
    if count < 1:
        raise EncoderError("instruction count must be >= 1")
    if count > len(params.steps):
        raise EncoderError(f"{count} instructions requested, {len(params.steps)} step matrices")
    B, D = enc.q_lm.shape
    if params.dim != D:
        raise DimensionError(f"instruction generator dim {params.dim} != embedding dim {D}")
    q_lm = enc.q_lm
    q = Tensor(np.zeros((B, D), dtype=q_lm.dtype)) if q0 is None else q0
    W_a_t = T.transpose(params.attention)
    outs, maps = [], []
    for i in range(count):
        z = T.concat([q, q_lm, q_lm - q, q_lm * q], axis=1)
        q = T.matmul(z, T.transpose(params.steps[i]))
        per_token = T.take_rows(q, enc.segments) * enc.tokens
        scores = T.matmul(per_token, W_a_t).sum(axis=1)
        att = T.segment_softmax(scores, enc.segments, B)
        inst = T.index_add(enc.tokens * T.reshape(att, (-1, 1)), enc.segments, B)
        outs.append(inst)
        maps.append(att)
    return outs, maps


def make_instruction_set(enc: EncodedQuestions, exp_params: IGParams, bak_params: IGParams,
                         N: int, M: int, q0_exp: Optional[Tensor] = None,
                         q0_bak: Optional[Tensor] = None) -> InstructionSet:
    exp, exp_maps = generate_instructions(enc, exp_params, N, q0_exp)
    bak, bak_maps = generate_instructions(enc, bak_params, M, q0_bak)
    return InstructionSet(exp, bak, exp_maps + bak_maps)


def relation_token_matrix(vocab: RelationVocab, tokens: TokenVocab) -> np.ndarray:
    """Averaging matrix A with R = A @ embedding (one row per augmented relation)."""
    A = np.zeros((vocab.size, len(tokens)))
    for rel in range(vocab.size):
        if rel == vocab.self_loop:
            words = [SELF_LOOP_TOKEN]
        elif rel >= vocab.num_base:
            words = [INV_TOKEN] + relation_tokens(vocab.base_names[rel - vocab.num_base])
        else:
            words = relation_tokens(vocab.base_names[rel])
        for w in words:
            A[rel, tokens.id(w)] += 1.0 / len(words)
    return A


def encode_relations(vocab: RelationVocab, tokens: TokenVocab, embedding: Tensor) -> Tensor:
    if vocab.size == 0:
        raise EncoderError("empty relation vocabulary")
    A = Tensor(relation_token_matrix(vocab, tokens).astype(embedding.dtype))
    return T.matmul(A, embedding)
