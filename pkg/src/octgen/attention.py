"""Single-head scaled dot-product attention blocks over node feature sets.

Cross-attention: queries from per-node features (width C), keys/values from
per-part features (width F), with a boolean part mask. Self-attention:
queries/keys/values all from the node features. Both end with an output
projection that is zero-initialized, so a freshly built block is exactly the
identity map and conditioning switches on smoothly during training.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T

_MASK_OFF = -1e30  # additive logit for masked parts; exp underflows to exactly 0


class AttentionParams:
    """Projections for one attention block.

    query: C -> d_k, key: F -> d_k, value: F -> C, output: C -> C (zero-init).
    The key projection carries no bias: a constant key shift adds the same
    amount to every logit in a row, which the softmax cancels exactly, so
    such a bias would be a dead parameter. For self-attention pass
    ``key_width=node_width``.
    """

    def __init__(self, node_width, key_width, d_k, init_seed=0, prefix="attn"):
        self.node_width = node_width
        self.key_width = key_width
        self.d_k = d_k

        def affine(tag, fin, fout, zero=False, bias=True):
            wn, bn = f"{prefix}/{tag}/w", f"{prefix}/{tag}/b"
            if zero:
                w = T.Parameter(wn, np.zeros((fin, fout)))
            else:
                s = 1.0 / np.sqrt(fin)
                w = T.Parameter(wn, T.init_rng(wn, init_seed).uniform(-s, s, (fin, fout)))
            return (w, T.Parameter(bn, np.zeros(fout))) if bias else (w,)

        self.wq, self.bq = affine("q", node_width, d_k)
        (self.wk,) = affine("k", key_width, d_k, bias=False)
        self.wv, self.bv = affine("v", key_width, node_width)
        self.wo, self.bo = affine("o", node_width, node_width, zero=True)

    def parameters(self) -> list[T.Parameter]:
        return [self.wq, self.bq, self.wk, self.wv, self.bv, self.wo, self.bo]


def _canonical_part_order(part_feats: T.Tensor) -> np.ndarray:
    """Lexicographic order of part feature rows.

    Reductions over parts (softmax normalizer, value mixing) follow this
    order instead of input order, so permuting the parts permutes nothing
    downstream and the block output is bit-identical. Identical rows are
    interchangeable: their keys and values coincide exactly.
    """
    return np.lexsort(part_feats.data.T[::-1])


def _weights(node_feats: T.Tensor, key_feats: T.Tensor, mask, params: AttentionParams) -> T.Tensor:
    q = T.matmul(node_feats, params.wq.value) + params.bq.value
    k = T.matmul(key_feats, params.wk.value)
    logits = T.matmul(q, k.T) * (1.0 / np.sqrt(params.d_k))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (key_feats.shape[0],):
            raise ValueError("mask length must equal part count")
        if not mask.any():
            raise ValueError("all parts masked")
        logits = logits + T.tensor(np.where(mask, 0.0, _MASK_OFF))
    return T.softmax(logits, axis=1)


def attention_weights(node_feats, part_feats, mask, params: AttentionParams) -> T.Tensor:
    """Row-stochastic N x P matching matrix (exposed for tests and dumps)."""
    perm = _canonical_part_order(part_feats)
    pf = T.gather_rows(part_feats, perm)
    pmask = None if mask is None else np.asarray(mask, dtype=bool)[perm]
    w = _weights(node_feats, pf, pmask, params)
    # report columns in the caller's part order
    return T.transpose(T.gather_rows(T.transpose(w), np.argsort(perm)))


def cross_attention(node_feats, part_feats, mask, params: AttentionParams) -> T.Tensor:
    """Residual cross-attention update of node features against part features.

    Parts are reordered canonically first (see ``_canonical_part_order``),
    making the output exactly invariant to part permutations.
    """
    if node_feats.shape[1] != params.node_width or part_feats.shape[1] != params.key_width:
        raise ValueError("feature widths do not match attention projections")
    perm = _canonical_part_order(part_feats)
    pf = T.gather_rows(part_feats, perm)
    pmask = None if mask is None else np.asarray(mask, dtype=bool)[perm]
    w = _weights(node_feats, pf, pmask, params)
    v = T.matmul(pf, params.wv.value) + params.bv.value
    update = T.matmul(T.matmul(w, v), params.wo.value) + params.bo.value
    return node_feats + update


def self_attention(node_feats, params: AttentionParams) -> T.Tensor:
    """Residual single-head self-attention over the node set."""
    w = _weights(node_feats, node_feats, None, params)
    v = T.matmul(node_feats, params.wv.value) + params.bv.value
    update = T.matmul(T.matmul(w, v), params.wo.value) + params.bo.value
    return node_feats + update


def dump_weights(path, weights: np.ndarray) -> None:
    """Write an N x P weight matrix as text (one node per line)."""
    with open(path, "w") as f:
        f.write("# attention weights: rows are nodes, columns are parts\n")
        for row in weights:
            f.write(" ".join(f"{v:.17g}" for v in row) + "\n")
