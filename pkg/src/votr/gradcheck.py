"""Finite-difference verification of the attention backward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionWeights, attend_backward, attend_one

EPS = 1e-4
TOLERANCE = 1e-4
# gradient entries below this magnitude are compared on an absolute scale
FLOOR = 1e-6


@dataclass
class Instance:
    f_i: np.ndarray
    f_att: np.ndarray
    p_i: np.ndarray
    p_att: np.ndarray
    weights: AttentionWeights
    grad_out: np.ndarray

    def inputs(self) -> dict[str, np.ndarray]:
        t = dict(self.weights.tensors())
        t["f_query"] = self.f_i
        t["f_attendees"] = self.f_att
        return t


def random_instance(rng, d_model: int | None = None, n_heads: int = 4,
                    n_attendees: int | None = None, zero_weights: bool = False) -> Instance:
    rng = np.random.default_rng(rng)
    if d_model is None:
        d_model = n_heads * int(rng.integers(1, 4))
    if n_attendees is None:
        n_attendees = int(rng.integers(1, 9))
    e = d_model // n_heads
    if zero_weights:
        w = AttentionWeights.zeros(d_model, n_heads)
    else:
        w = AttentionWeights(
            W_q=rng.normal(0, 0.5, (n_heads, d_model, e)),
            W_k=rng.normal(0, 0.5, (n_heads, d_model, e)),
            W_v=rng.normal(0, 0.5, (n_heads, d_model, e)),
            W_pos=rng.normal(0, 0.5, (n_heads, 3, e)),
            W_out=rng.normal(0, 0.5, (n_heads * e, d_model)),
        )
    p_i = rng.uniform(0, 4, 3)
    return Instance(
        f_i=rng.normal(size=d_model),
        f_att=rng.normal(size=(n_attendees, d_model)),
        p_i=p_i,
        p_att=p_i + rng.uniform(-2, 2, (n_attendees, 3)),
        weights=w,
        grad_out=rng.normal(size=d_model),
    )


def _loss(inst: Instance, tensors: dict[str, np.ndarray]) -> float:
    w = AttentionWeights(**{k: tensors[k] for k in ("W_q", "W_k", "W_v", "W_pos", "W_out")})
    out = attend_one(tensors["f_query"], tensors["f_attendees"], inst.p_i, inst.p_att, w).value
    return float(out @ inst.grad_out)


def numerical_gradients(inst: Instance, eps: float = EPS) -> dict[str, np.ndarray]:
    """Central differences of ``grad_out . attend_one(...)`` for every input entry."""
    base = {k: v.copy() for k, v in inst.inputs().items()}
    grads = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = _loss(inst, base)
            flat[i] = old - eps
            down = _loss(inst, base)
            flat[i] = old
            g.reshape(-1)[i] = (up - down) / (2 * eps)
        grads[name] = g
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> float:
    """Worst entrywise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / den).max())


@dataclass
class TrialResult:
    trial: int
    errors: dict[str, float]
    d_model: int
    n_attendees: int

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    @property
    def worst(self) -> str:
        return max(self.errors, key=self.errors.get)


def check_instance(inst: Instance, eps: float = EPS) -> dict[str, float]:
    analytic = attend_backward(inst.f_i, inst.f_att, inst.p_i, inst.p_att, inst.weights,
                               inst.grad_out).tensors()
    numeric = numerical_gradients(inst, eps)
    return {k: relative_error(analytic[k], numeric[k]) for k in numeric}


def run_gradcheck(trials: int = 100, seed: int = 0, eps: float = EPS,
                  zero_weights: bool = False) -> list[TrialResult]:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    results = []
    for t in range(trials):
        inst = random_instance(rng, zero_weights=zero_weights)
        results.append(TrialResult(t, check_instance(inst, eps), inst.weights.d_model,
                                   len(inst.f_att)))
    return results
