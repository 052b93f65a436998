"""Instruction projection and visual alignment adapters.

The linear adapter concatenates the n visual tokens with the m projected
instruction tokens and mixes them into n output tokens with one matrix
``W`` of shape [(n + m), n]. Every output token is a weighted sum of input
tokens with a single scalar per (input, output) pair, shared over all
channels. ``W`` starts as the identity on the visual block and zero on the
instruction block, so the adapted tokens equal the visual tokens exactly
until training moves it.

The cross-attention variant lets visual tokens attend to the projected
instruction tokens and adds the result back through a zero-initialised
output projection, which gives the same exact pass-through at step 0.
"""

from dataclasses import dataclass
from enum import Enum
import math

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .errors import ConfigError, DimensionError


class AdapterKind(str, Enum):
    NONE = "none"
    LINEAR = "linear"
    CROSS_ATTENTION = "cross_attention"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {"xattn": cls.CROSS_ATTENTION, "cross-attention": cls.CROSS_ATTENTION}
        try:
            return aliases.get(value) or cls(value)
        except ValueError:
            raise ConfigError(f"unknown adapter kind {value!r}; expected none, linear or xattn") from None


def param_shapes(kind, cfg):
    kind = AdapterKind.parse(kind)
    if kind is AdapterKind.NONE:
        return {}
    shapes = {"proj.w": (cfg.d_prime, cfg.d), "proj.b": (cfg.d,)}
    if kind is AdapterKind.LINEAR:
        shapes["align.W"] = (cfg.n + cfg.m, cfg.n)
    else:
        for name in ("q", "k", "v", "o"):
            shapes[f"xattn.{name}"] = (cfg.d, cfg.d)
    return shapes


def adapter_param_count(kind, cfg):
    """Trainable adapter parameters; the encoders are not counted.

    linear: (n + m) * n + d' * d + d. cross_attention: four bias-free d x d
    projections plus the same instruction projection. none: 0.
    """
    return sum(math.prod(shape) for shape in param_shapes(kind, cfg).values())


def alignment_init(n, m):
    """Identity over the visual rows, zeros over the instruction rows."""
    return np.concatenate([np.eye(n), np.zeros((m, n))], axis=0)


class Adapter:
    def __init__(self, kind, cfg, params):
        self.kind = AdapterKind.parse(kind)
        self.cfg = cfg
        expected = param_shapes(self.kind, cfg)
        if set(params) != set(expected):
            raise ConfigError(f"adapter parameters do not match kind {self.kind.value}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise DimensionError(f"{name}: expected {shape}, got {params[name].shape}")
        self.params = params

    @classmethod
    def init(cls, kind, cfg, seed, dtype=np.float32):
        kind = AdapterKind.parse(kind)
        rng = rngmod.stream(seed, "adapter-init", kind.value)
        values = {}
        for name, shape in param_shapes(kind, cfg).items():
            if name == "align.W":
                values[name] = alignment_init(cfg.n, cfg.m)
            elif name in ("proj.b", "xattn.o"):
                values[name] = np.zeros(shape)
            else:
                values[name] = rng.standard_normal(shape) / math.sqrt(shape[0])
        return cls(kind, cfg, {k: T.Tensor(v, requires_grad=True, dtype=dtype) for k, v in values.items()})

    def astype(self, dtype):
        return Adapter(
            self.kind, self.cfg, {k: T.Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, dtype=dtype) for k, v in self.params.items()}
        )

    def __call__(self, v, t):
        return adapt(self, v, t)


def project_instruction(weight, bias, t):
    """Map every instruction token from width d' to width d."""
    if t.shape[-1] != weight.shape[0]:
        raise DimensionError(f"instruction width {t.shape[-1]} does not match projection input {weight.shape[0]}")
    return T.linear(t, weight, bias)


def _check_tokens(v, pt, n, m):
    if v.shape[-1] != pt.shape[-1]:
        raise DimensionError(f"visual width {v.shape[-1]} differs from projected instruction width {pt.shape[-1]}")
    if v.shape[-2] != n or pt.shape[-2] != m:
        raise DimensionError(f"expected {n} visual and {m} instruction tokens, got {v.shape[-2]} and {pt.shape[-2]}")


def align(weight, v, pt):
    """Refined visual tokens ``W^T [v; pt]`` with ``W`` of shape [(n + m), n]."""
    n = weight.shape[1]
    _check_tokens(v, pt, n, weight.shape[0] - n)
    return T.token_mix(T.concat_tokens(v, pt), weight)


def align_xattn(q, k, vw, o, v, pt):
    """``v + O(softmax(Q(v) K(pt)^T / sqrt(d)) V(pt))``."""
    if v.shape[-1] != pt.shape[-1]:
        raise DimensionError(f"visual width {v.shape[-1]} differs from projected instruction width {pt.shape[-1]}")
    scores = T.scale(T.matmul(T.linear(v, q), T.transpose(T.linear(pt, k))), 1.0 / math.sqrt(v.shape[-1]))
    attn = T.softmax_rows(scores)
    return T.add(v, T.linear(T.matmul(attn, T.linear(pt, vw)), o))


def adapt(adapter, v, t):
    """Instruction-aware visual tokens from visual tokens v and raw text features t."""
    p = adapter.params
    if adapter.kind is AdapterKind.NONE:
        return v
    pt = project_instruction(p["proj.w"], p["proj.b"], t)
    if adapter.kind is AdapterKind.LINEAR:
        _check_tokens(v, pt, adapter.cfg.n, adapter.cfg.m)
        return align(p["align.W"], v, pt)
    _check_tokens(v, pt, adapter.cfg.n, adapter.cfg.m)
    return align_xattn(p["xattn.q"], p["xattn.k"], p["xattn.v"], p["xattn.o"], v, pt)


@dataclass
class TokenAttribution:
    norms: np.ndarray
    n_visual: int

    @property
    def visual(self):
        return self.norms[: self.n_visual]

    @property
    def text(self):
        return self.norms[self.n_visual:]

    @property
    def visual_mean(self):
        return float(self.visual.mean())

    @property
    def text_mean(self):
        return float(self.text.mean()) if self.text.size else 0.0


def token_attribution(weight):
    """l1 norm of each input token's row of the alignment matrix."""
    w = weight.data if isinstance(weight, T.Tensor) else np.asarray(weight)
    return TokenAttribution(np.abs(w).sum(axis=1).astype(np.float64), w.shape[1])
