"""Multi-head voxel self-attention with relative positional encoding.

For a query ``i`` and attendees ``j``, each head ``h`` computes::

    E_ij = (p_i - p_j) W_pos[h]
    Q_i  = q_i W_q[h]
    K_j  = f_j W_k[h] + E_ij
    V_j  = f_j W_v[h] + E_ij
    a_ij = softmax_j(Q_i . K_j / sqrt(d_head))
    head_h = sum_j a_ij V_j

and the heads are concatenated and mapped back with ``W_out``. For
non-empty queries ``q_i = f_i``; at empty locations ``q_i`` is the
channelwise max over attendee features.

The batched entry points work on padded arrays: ``f_att`` is (N, B, d) with
a boolean ``mask`` (N, B) marking real attendees.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

CHUNK = 2048


@dataclass
class AttentionWeights:
    W_q: np.ndarray    # (H, d_model, d_head)
    W_k: np.ndarray    # (H, d_model, d_head)
    W_v: np.ndarray    # (H, d_model, d_head)
    W_pos: np.ndarray  # (H, 3, d_head)
    W_out: np.ndarray  # (H * d_head, d_model)

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.asarray(getattr(self, f.name), dtype=np.float64))
        H, d, e = self.W_q.shape
        for name in ("W_k", "W_v"):
            if getattr(self, name).shape != (H, d, e):
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {(H, d, e)}")
        if self.W_pos.shape != (H, 3, e):
            raise ValueError(f"W_pos has shape {self.W_pos.shape}, expected {(H, 3, e)}")
        if self.W_out.shape != (H * e, d):
            raise ValueError(f"W_out has shape {self.W_out.shape}, expected {(H * e, d)}")

    @property
    def n_heads(self) -> int:
        return self.W_q.shape[0]

    @property
    def d_model(self) -> int:
        return self.W_q.shape[1]

    @property
    def d_head(self) -> int:
        return self.W_q.shape[2]

    @classmethod
    def init(cls, d_model: int, n_heads: int = 4, rng=None) -> "AttentionWeights":
        """Uniform(+-sqrt(1/fan_in)) initialization."""
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        rng = np.random.default_rng(rng)
        e = d_model // n_heads

        def u(shape, fan_in):
            bound = np.sqrt(1.0 / fan_in)
            return rng.uniform(-bound, bound, size=shape)

        return cls(
            W_q=u((n_heads, d_model, e), d_model),
            W_k=u((n_heads, d_model, e), d_model),
            W_v=u((n_heads, d_model, e), d_model),
            W_pos=u((n_heads, 3, e), 3),
            W_out=u((n_heads * e, d_model), n_heads * e),
        )

    @classmethod
    def zeros(cls, d_model: int, n_heads: int = 4) -> "AttentionWeights":
        e = d_model // n_heads
        z = np.zeros
        return cls(z((n_heads, d_model, e)), z((n_heads, d_model, e)), z((n_heads, d_model, e)),
                   z((n_heads, 3, e)), z((n_heads * e, d_model)))

    def tensors(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "AttentionWeights":
        return AttentionWeights(**{k: v.copy() for k, v in self.tensors().items()})


@dataclass
class AttendedFeature:
    value: np.ndarray         # (d_model,)
    attn_weights: np.ndarray  # (H, n_attendees)


@dataclass
class GradientBundle:
    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray
    W_pos: np.ndarray
    W_out: np.ndarray
    f_query: np.ndarray
    f_attendees: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def positional_encoding(p_i, p_j, W_pos) -> np.ndarray:
    """``(p_i - p_j) @ W_pos``; ``W_pos`` may be one head (3, e) or all heads (H, 3, e)."""
    diff = np.asarray(p_i, dtype=np.float64) - np.asarray(p_j, dtype=np.float64)
    return diff @ np.asarray(W_pos, dtype=np.float64)


def pooled_query(f_att) -> np.ndarray:
    """Channelwise max over attendee features."""
    f = np.asarray(f_att, dtype=np.float64)
    if f.ndim != 2 or len(f) == 0:
        raise ValueError("pooled_query needs at least one attendee feature")
    return f.max(axis=0)


def _masked_max(f_att, mask):
    return np.where(mask[..., None], f_att, -np.inf).max(axis=1)


def _heads_cat(W: np.ndarray) -> np.ndarray:
    """(H, d, e) per-head matrices -> one (d, H * e) matrix, head-major columns."""
    H, d, e = W.shape
    return W.transpose(1, 0, 2).reshape(d, H * e)


def _forward(q_feat, f_att, rel, mask, w: AttentionWeights):
    """Padded forward for one chunk; returns the output and cached activations."""
    n, b, d = f_att.shape
    H, e = w.n_heads, w.d_head
    Q = (q_feat @ _heads_cat(w.W_q)).reshape(n, H, e)
    E = rel @ _heads_cat(w.W_pos)
    K = (f_att @ _heads_cat(w.W_k) + E).reshape(n, b, H, e).transpose(0, 2, 1, 3)
    V = (f_att @ _heads_cat(w.W_v) + E).reshape(n, b, H, e).transpose(0, 2, 1, 3)
    logits = (K @ Q[..., None])[..., 0] / np.sqrt(e)
    logits = np.where(mask[:, None, :], logits, -np.inf)
    logits -= logits.max(axis=2, keepdims=True)
    a = np.exp(logits)
    a /= a.sum(axis=2, keepdims=True)
    head = (a[:, :, None, :] @ V)[:, :, 0, :]
    concat = head.reshape(n, H * e)
    out = concat @ w.W_out
    return out, a, (Q, K, V, concat)


def attend_padded(q_feat, f_att, rel, mask, w: AttentionWeights, chunk: int = CHUNK):
    """Batched attention: returns outputs (N, d_model) and weights (N, H, B).

    ``rel`` holds ``p_i - p_j`` per attendee. Every row of ``mask`` must
    have at least one attendee.
    """
    q_feat = np.asarray(q_feat, dtype=np.float64)
    f_att = np.asarray(f_att, dtype=np.float64)
    rel = np.asarray(rel, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if len(mask) and not mask.any(axis=1).all():
        raise ValueError("every query needs at least one attendee")
    n = len(f_att)
    out = np.empty((n, w.d_model))
    weights = np.empty((n, w.n_heads, f_att.shape[1]))
    for s in range(0, n, chunk):
        sl = slice(s, s + chunk)
        out[sl], weights[sl], _ = _forward(q_feat[sl], f_att[sl], rel[sl], mask[sl], w)
    return out, weights


def attend_sparse_padded(f_att, rel, mask, w: AttentionWeights, chunk: int = CHUNK):
    """Batched attention at empty locations, queried by max-pooled attendees."""
    mask = np.asarray(mask, dtype=bool)
    if len(mask) and not mask.any(axis=1).all():
        raise ValueError("every query needs at least one attendee")
    q = _masked_max(np.asarray(f_att, dtype=np.float64), mask)
    return attend_padded(q, f_att, rel, mask, w, chunk)


def _single(f_att, p_att, p_i):
    f_att = np.asarray(f_att, dtype=np.float64)
    p_att = np.asarray(p_att, dtype=np.float64).reshape(-1, 3)
    if f_att.ndim != 2 or len(f_att) == 0:
        raise ValueError("attention needs at least one attendee")
    if len(p_att) != len(f_att):
        raise ValueError("attendee features and centers disagree in count")
    rel = np.asarray(p_i, dtype=np.float64).reshape(1, 3) - p_att
    return f_att[None], rel[None], np.ones((1, len(f_att)), dtype=bool)


def attend_one(f_i, f_att, p_i, p_att, w: AttentionWeights) -> AttendedFeature:
    """Attention output for a non-empty query voxel with feature ``f_i``."""
    f, rel, mask = _single(f_att, p_att, p_i)
    out, a, _ = _forward(np.asarray(f_i, dtype=np.float64)[None], f, rel, mask, w)
    return AttendedFeature(out[0], a[0])


def attend_sparse(p_i, f_att, p_att, w: AttentionWeights) -> AttendedFeature:
    """Attention output at an empty location; the query is ``pooled_query(f_att)``."""
    f, rel, mask = _single(f_att, p_att, p_i)
    out, a, _ = _forward(pooled_query(f[0])[None], f, rel, mask, w)
    return AttendedFeature(out[0], a[0])


def backward_padded(q_feat, f_att, rel, mask, w: AttentionWeights, grad_out):
    """Reverse-mode gradients of ``sum(grad_out * attend_padded(...))``.

    Returns a :class:`GradientBundle` whose weight gradients are summed over
    queries in row order and whose ``f_query``/``f_attendees`` are per query.
    """
    q_feat = np.asarray(q_feat, dtype=np.float64)
    f_att = np.asarray(f_att, dtype=np.float64)
    rel = np.asarray(rel, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    g = np.asarray(grad_out, dtype=np.float64)
    n = len(f_att)
    H, e = w.n_heads, w.d_head
    _, a, (Q, K, V, concat) = _forward(q_feat, f_att, rel, mask, w)
    scale = 1.0 / np.sqrt(e)

    dW_out = concat.T @ g
    dhead = (g @ w.W_out.T).reshape(n, H, e)
    dV = a[..., None] * dhead[:, :, None, :]
    da = np.einsum("nhe,nhbe->nhb", dhead, V)
    dlogit = a * (da - (a * da).sum(axis=2, keepdims=True))
    dQ = np.einsum("nhb,nhbe->nhe", dlogit, K) * scale
    dK = dlogit[..., None] * Q[:, :, None, :] * scale
    dE = dK + dV

    return GradientBundle(
        W_q=np.einsum("nd,nhe->hde", q_feat, dQ),
        W_k=np.einsum("nbd,nhbe->hde", f_att, dK),
        W_v=np.einsum("nbd,nhbe->hde", f_att, dV),
        W_pos=np.einsum("nbc,nhbe->hce", rel, dE),
        W_out=dW_out,
        f_query=np.einsum("nhe,hde->nd", dQ, w.W_q),
        f_attendees=(np.einsum("nhbe,hde->nbd", dK, w.W_k)
                     + np.einsum("nhbe,hde->nbd", dV, w.W_v)),
    )


def attend_backward(f_i, f_att, p_i, p_att, w: AttentionWeights, grad_out) -> GradientBundle:
    """Exact gradients of ``grad_out . attend_one(...).value``.

    ``f_query`` is the gradient for ``f_i`` (d_model,) and ``f_attendees``
    the gradient for each attendee feature (B, d_model).
    """
    f, rel, mask = _single(f_att, p_att, p_i)
    gb = backward_padded(np.asarray(f_i, dtype=np.float64)[None], f, rel, mask, w,
                         np.asarray(grad_out, dtype=np.float64)[None])
    gb.f_query = gb.f_query[0]
    gb.f_attendees = gb.f_attendees[0]
    return gb
