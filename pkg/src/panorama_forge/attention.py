"""Decomposed 4D attention over (frame, view, spatial) token grids.

A token grid is a tensor of shape ``(T, V, S, c)``. The three kernels each
restrict which keys a query sees:

* intra-view:  same frame, same view (all spatial positions)
* cross-view:  same frame, adjacent views only (own view excluded)
* cross-frame: same view, same spatial position, all frames

``joint_attention_oracle`` is the dense reference: softmax over all
``T*V*S`` tokens with a boolean mask. Every kernel can also return its
attention weights scattered into that dense ``(heads, N, N)`` layout, with
flat index ``(t * V + v) * S + s``.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import torch

from . import tensorio

# Rough cap on logits elements materialised at once by a single kernel call.
_CHUNK_ELEMS = 1 << 23


class AttentionShapeError(ValueError):
    pass


def _check(q, k, v, heads):
    if q.dim() != 4:
        raise AttentionShapeError(f"token grids must be (T, V, S, c), got {tuple(q.shape)}")
    if q.shape != k.shape or q.shape != v.shape:
        raise AttentionShapeError(f"q/k/v shapes differ: {tuple(q.shape)}, {tuple(k.shape)}, {tuple(v.shape)}")
    c = q.shape[-1]
    if c < 1 or c % heads:
        raise AttentionShapeError(f"channel width {c} not divisible by {heads} heads")


def _split_heads(x, heads):
    # (..., c) -> (heads, ..., c/heads)
    *lead, c = x.shape
    return x.reshape(*lead, heads, c // heads).movedim(-2, 0)


def _merge_heads(x):
    return x.movedim(0, -2).flatten(-2)


def _softmax(logits):
    logits = logits - logits.amax(dim=-1, keepdim=True)
    w = torch.exp(logits)
    return w / w.sum(dim=-1, keepdim=True)


def _attend(q, k, v):
    """softmax(q k^T / sqrt(d)) v over the last two axes; returns (out, weights)."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    w = _softmax(torch.matmul(q, k.transpose(-1, -2)) * scale)
    return torch.matmul(w, v), w


def _attend_chunked(q, k, v):
    """Like ``_attend`` but chunked along axis 1 to bound memory; no weights."""
    n_lead = q.shape[1]
    per = max(1, q.shape[0] * q.shape[-2] * k.shape[-2])
    step = max(1, _CHUNK_ELEMS // per)
    if step >= n_lead:
        return _attend(q, k, v)[0]
    return torch.cat([_attend(q[:, i:i + step], k[:, i:i + step], v[:, i:i + step])[0] for i in range(0, n_lead, step)], 1)


def cyclic_adjacency(views: int) -> list:
    """Neighbour lists for a 360-degree rig: v-1 and v+1 modulo V, deduplicated."""
    out = []
    for v in range(views):
        nbrs = []
        for u in ((v - 1) % views, (v + 1) % views):
            if u != v and u not in nbrs:
                nbrs.append(u)
        out.append(nbrs)
    return out


def _flat(T, V, S):
    return torch.arange(T * V * S).reshape(T, V, S)


def intra_view_attention(q, k, v, heads: int = 1, return_weights: bool = False):
    _check(q, k, v, heads)
    T, V, S, _ = q.shape
    qh, kh, vh = (_split_heads(x, heads) for x in (q, k, v))  # (h, T, V, S, d)
    if not return_weights:
        h, _, _, _, d = qh.shape
        out = _attend_chunked(qh.reshape(h, T * V, S, d), kh.reshape(h, T * V, S, d), vh.reshape(h, T * V, S, d))
        return _merge_heads(out.reshape(h, T, V, S, d))
    out, w = _attend(qh, kh, vh)  # w: (h, T, V, S, S)
    dense = q.new_zeros((heads, T * V * S, T * V * S))
    idx = _flat(T, V, S)
    rows = idx[..., :, None].expand(T, V, S, S)
    cols = idx[..., None, :].expand(T, V, S, S)
    dense[:, rows.reshape(-1), cols.reshape(-1)] = w.reshape(heads, -1)
    return _merge_heads(out), dense


def cross_view_attention(q, k, v, adjacency: Optional[Sequence[Sequence[int]]] = None, heads: int = 1,
                         return_weights: bool = False):
    """Each view's queries attend over the concatenated tokens of its neighbours.

    Views without neighbours (e.g. V=1) pass their query tokens through.
    """
    _check(q, k, v, heads)
    T, V, S, _ = q.shape
    adjacency = cyclic_adjacency(V) if adjacency is None else [list(a) for a in adjacency]
    if len(adjacency) != V:
        raise AttentionShapeError(f"adjacency lists {len(adjacency)} views, grid has {V}")
    for vi, nbrs in enumerate(adjacency):
        if any(not 0 <= u < V or u == vi for u in nbrs):
            raise AttentionShapeError(f"invalid neighbours {nbrs} for view {vi}")
    qh, kh, vh = (_split_heads(x, heads) for x in (q, k, v))
    outs = []
    dense = q.new_zeros((heads, T * V * S, T * V * S)) if return_weights else None
    idx = _flat(T, V, S)
    for vi, nbrs in enumerate(adjacency):
        if not nbrs:
            outs.append(qh[:, :, vi])
            if return_weights:
                dense[:, idx[:, vi].reshape(-1), idx[:, vi].reshape(-1)] = 1.0
            continue
        h, d = qh.shape[0], qh.shape[-1]
        keys = kh[:, :, nbrs].reshape(h, T, len(nbrs) * S, d)
        vals = vh[:, :, nbrs].reshape(h, T, len(nbrs) * S, d)
        if return_weights:
            o, w = _attend(qh[:, :, vi], keys, vals)  # w: (h, T, S, n*S)
            rows = idx[:, vi][:, :, None].expand(T, S, len(nbrs) * S)
            cols = idx[:, nbrs].reshape(T, 1, len(nbrs) * S).expand(T, S, len(nbrs) * S)
            dense[:, rows.reshape(-1), cols.reshape(-1)] = w.reshape(heads, -1)
        else:
            o = _attend_chunked(qh[:, :, vi], keys, vals)
        outs.append(o)
    out = _merge_heads(torch.stack(outs, dim=2))
    return (out, dense) if return_weights else out


def cross_frame_attention(q, k, v, heads: int = 1, return_weights: bool = False):
    """Each token attends over the same (view, position) across all frames."""
    _check(q, k, v, heads)
    T, V, S, _ = q.shape
    # (h, T, V, S, d) -> (h, V, S, T, d)
    qh, kh, vh = (_split_heads(x, heads).permute(0, 2, 3, 1, 4) for x in (q, k, v))
    if not return_weights:
        h, d = qh.shape[0], qh.shape[-1]
        out = _attend_chunked(qh.reshape(h, V * S, T, d), kh.reshape(h, V * S, T, d), vh.reshape(h, V * S, T, d))
        return _merge_heads(out.reshape(h, V, S, T, d).permute(0, 3, 1, 2, 4))
    out, w = _attend(qh, kh, vh)  # w: (h, V, S, T, T)
    idx = _flat(T, V, S).permute(1, 2, 0)  # (V, S, T)
    rows = idx[..., :, None].expand(V, S, T, T)
    cols = idx[..., None, :].expand(V, S, T, T)
    dense = q.new_zeros((heads, T * V * S, T * V * S))
    dense[:, rows.reshape(-1), cols.reshape(-1)] = w.reshape(heads, -1)
    return _merge_heads(out.permute(0, 3, 1, 2, 4)), dense


# -- oracle ----------------------------------------------------------------


class AttnMask:
    """Boolean admissibility of (query, key) pairs over flat (t, v, s) indices."""

    def __init__(self, predicate: Callable[[tuple, tuple], bool]):
        self.predicate = predicate

    def matrix(self, T: int, V: int, S: int) -> torch.Tensor:
        coords = [(t, v, s) for t in range(T) for v in range(V) for s in range(S)]
        return torch.tensor([[bool(self.predicate(a, b)) for b in coords] for a in coords], dtype=torch.bool)

    @classmethod
    def all(cls):
        return cls(lambda a, b: True)

    @classmethod
    def identity(cls):
        return cls(lambda a, b: a == b)

    @classmethod
    def intra_view(cls):
        return cls(lambda a, b: a[0] == b[0] and a[1] == b[1])

    @classmethod
    def cross_view(cls, adjacency):
        adjacency = [set(a) for a in adjacency]
        return cls(lambda a, b: a[0] == b[0] and b[1] in adjacency[a[1]])

    @classmethod
    def cross_frame(cls):
        return cls(lambda a, b: a[1] == b[1] and a[2] == b[2])


def joint_attention_oracle(q, k, v, mask, heads: int = 1, return_weights: bool = False):
    """Dense masked attention over every token of the grid.

    ``mask`` is an :class:`AttnMask` or a boolean ``(N, N)`` tensor.
    """
    _check(q, k, v, heads)
    T, V, S, c = q.shape
    n = T * V * S
    m = mask.matrix(T, V, S) if isinstance(mask, AttnMask) else torch.as_tensor(mask, dtype=torch.bool)
    if m.shape != (n, n):
        raise AttentionShapeError(f"mask shape {tuple(m.shape)} != {(n, n)}")
    empty = (~m).all(dim=1)
    if empty.any():
        raise ValueError(f"query {int(empty.nonzero()[0])} has no admissible key")
    qh, kh, vh = (_split_heads(x.reshape(n, c), heads) for x in (q, k, v))  # (h, n, d)
    logits = torch.matmul(qh, kh.transpose(-1, -2)) / math.sqrt(qh.shape[-1])
    logits = logits.masked_fill(~m, float("-inf"))
    w = torch.softmax(logits, dim=-1)
    out = _merge_heads(torch.matmul(w, vh)).reshape(T, V, S, c)
    return (out, w) if return_weights else out


def dump_weights(path, weights) -> None:
    """Write a dense ``(heads, N, N)`` weight matrix from ``return_weights=True`` as PNC1."""
    if weights.dim() != 3 or weights.shape[1] != weights.shape[2]:
        raise AttentionShapeError(f"expected (heads, N, N) weights, got {tuple(weights.shape)}")
    tensorio.save(path, weights)
