"""One-hidden-layer ReLU encoder with unit-normalised output and manual backprop."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

_PARAM_NAMES = ("w1", "b1", "w2", "b2")


class StaleCacheError(ValueError):
    pass


@dataclass
class EncoderParams:
    """``z = normalize(relu(x @ w1 + b1) @ w2 + b2)``.

    Shapes: ``w1`` is ``D_in x H``, ``b1`` is ``H``, ``w2`` is ``H x h``,
    ``b2`` is ``h``.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        for name in _PARAM_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        D, H = self.w1.shape
        if self.b1.shape != (H,) or self.w2.shape[0] != H or self.b2.shape != (self.w2.shape[1],):
            raise ValueError(
                f"inconsistent shapes w1={self.w1.shape} b1={self.b1.shape} w2={self.w2.shape} b2={self.b2.shape}"
            )

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.w1.shape[0], self.w1.shape[1], self.w2.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _PARAM_NAMES}

    def copy(self) -> "EncoderParams":
        return EncoderParams(*(a.copy() for a in self.arrays().values()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays().values())

    def to_dict(self) -> dict:
        return {
            "format": "encoder-params",
            "version": 1,
            "params": {
                name: {"shape": list(a.shape), "data": [float(v) for v in a.reshape(-1)]}
                for name, a in self.arrays().items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderParams":
        p = d["params"]
        return cls(*(np.asarray(p[n]["data"], dtype=np.float64).reshape(p[n]["shape"]) for n in _PARAM_NAMES))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "EncoderParams":
        return cls.from_dict(json.loads(s))


def init_params(d_in: int, hidden: int, h: int, seed: int = 0) -> EncoderParams:
    """He-scaled Gaussian weights, zero biases."""
    rng = np.random.default_rng(seed)
    return EncoderParams(
        rng.standard_normal((d_in, hidden)) * np.sqrt(2.0 / d_in),
        np.zeros(hidden),
        rng.standard_normal((hidden, h)) * np.sqrt(1.0 / hidden),
        np.zeros(h),
    )


@dataclass
class ForwardCache:
    params: EncoderParams
    x: np.ndarray
    a1: np.ndarray  # pre-activation of the hidden layer
    h1: np.ndarray
    u: np.ndarray  # output before normalisation
    norm: np.ndarray
    z: np.ndarray
    degenerate: np.ndarray


def forward(p: EncoderParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != p.w1.shape[0]:
        raise ValueError(f"input has {x.shape[1]} columns, encoder expects {p.w1.shape[0]}")
    a1 = x @ p.w1 + p.b1
    h1 = np.maximum(a1, 0.0)
    u = h1 @ p.w2 + p.b2
    norm = np.linalg.norm(u, axis=1)
    degenerate = norm == 0.0
    z = np.zeros_like(u)
    ok = ~degenerate
    z[ok] = u[ok] / norm[ok, None]
    # Zero vectors have no direction; map them to the first basis vector.
    z[degenerate, 0] = 1.0
    return z, ForwardCache(p, x, a1, h1, u, norm, z, degenerate)


def backward(p: EncoderParams, cache: ForwardCache, dZ: np.ndarray) -> EncoderParams:
    """Parameter gradients given ``dL/dz``; returned in an ``EncoderParams``."""
    if cache.params is not p:
        raise StaleCacheError("cache was produced by a different parameter object")
    dZ = np.asarray(dZ, dtype=np.float64)
    if dZ.shape != cache.z.shape:
        raise ValueError(f"dZ shape {dZ.shape} does not match features {cache.z.shape}")
    z = cache.z
    dU = np.zeros_like(dZ)
    ok = ~cache.degenerate
    # Jacobian of u / |u| is (I - z z^T) / |u|; degenerate rows pass no gradient.
    dU[ok] = (dZ[ok] - z[ok] * np.sum(z[ok] * dZ[ok], axis=1, keepdims=True)) / cache.norm[ok, None]
    gw2 = cache.h1.T @ dU
    gb2 = dU.sum(axis=0)
    dA1 = (dU @ p.w2.T) * (cache.a1 > 0)
    gw1 = cache.x.T @ dA1
    gb1 = dA1.sum(axis=0)
    return EncoderParams(gw1, gb1, gw2, gb2)


def zero_like(p: EncoderParams) -> EncoderParams:
    return EncoderParams(*(np.zeros_like(a) for a in p.arrays().values()))


def sgd_step(
    p: EncoderParams,
    grads: EncoderParams,
    lr: float,
    weight_decay: float = 0.0,
    momentum: float = 0.0,
    velocity: EncoderParams | None = None,
) -> tuple[EncoderParams, EncoderParams]:
    """Momentum SGD with coupled L2 decay: ``v = m v + (g + wd p)``, ``p -= lr v``.

    Returns the new parameters and the new velocity.
    """
    velocity = velocity if velocity is not None else zero_like(p)
    new_p, new_v = [], []
    for name in _PARAM_NAMES:
        w = getattr(p, name)
        g = getattr(grads, name) + weight_decay * w
        v = momentum * getattr(velocity, name) + g
        new_v.append(v)
        new_p.append(w - lr * v)
    return EncoderParams(*new_p), EncoderParams(*new_v)
