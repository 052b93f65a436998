"""Toy vision/text dual encoder with a selectable layer tap.

Both towers are pre-norm transformers with single-head attention. The
vision tower embeds raw patch vectors and adds a learned position table; the
text tower embeds token ids, adds positions, and masks padding keys inside
attention. Tapped features (from the last or second-to-last block) pass
through the tower's closing layer norm. The pair is pretrained with a
symmetric InfoNCE loss on pooled, projected, unit-normalised embeddings.
"""

import hashlib
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .errors import ConfigError, DimensionError, InputError
from .optim import OptimizerState, optimizer_step, zero_grad


class LayerTap(str, Enum):
    FINAL = "final"
    PENULTIMATE = "penultimate"


@dataclass(frozen=True)
class EncoderConfig:
    grid_h: int = 4
    grid_w: int = 4
    p_in: int = 48
    m: int = 12
    d: int = 32
    d_prime: int = 24
    depth: int = 2
    vocab_size: int = 64
    embed_dim: int = 24
    mlp_ratio: int = 2

    def __post_init__(self):
        for f in ("grid_h", "grid_w", "p_in", "m", "d", "d_prime", "depth", "vocab_size", "embed_dim", "mlp_ratio"):
            if getattr(self, f) <= 0:
                raise ConfigError(f"encoder {f} must be positive, got {getattr(self, f)}")
        if self.d < 2 or self.d_prime < 2:
            raise ConfigError("feature widths must be >= 2 for layer norm")

    @property
    def n(self):
        return self.grid_h * self.grid_w

    @classmethod
    def desk(cls):
        return cls()

    @classmethod
    def vit_l14(cls):
        """ViT-L/14 at 336px (24x24 patches of 14x14x3) with CLIP's 77-token text side."""
        return cls(grid_h=24, grid_w=24, p_in=3 * 14 * 14, m=77, d=1024, d_prime=768, depth=2, vocab_size=64, embed_dim=768)


def _block_shapes(prefix, width, hidden):
    return {
        f"{prefix}ln1.g": (width,),
        f"{prefix}ln1.b": (width,),
        f"{prefix}attn.q": (width, width),
        f"{prefix}attn.k": (width, width),
        f"{prefix}attn.v": (width, width),
        f"{prefix}attn.o": (width, width),
        f"{prefix}ln2.g": (width,),
        f"{prefix}ln2.b": (width,),
        f"{prefix}mlp.w1": (width, hidden),
        f"{prefix}mlp.b1": (hidden,),
        f"{prefix}mlp.w2": (hidden, width),
        f"{prefix}mlp.b2": (width,),
    }


def param_shapes(cfg):
    shapes = {
        "vision.patch_w": (cfg.p_in, cfg.d),
        "vision.patch_b": (cfg.d,),
        "vision.pos": (cfg.n, cfg.d),
    }
    for i in range(cfg.depth):
        shapes.update(_block_shapes(f"vision.block{i}.", cfg.d, cfg.mlp_ratio * cfg.d))
    shapes.update({"vision.ln_post.g": (cfg.d,), "vision.ln_post.b": (cfg.d,), "vision.proj": (cfg.d, cfg.embed_dim)})
    shapes.update({"text.tok_emb": (cfg.vocab_size, cfg.d_prime), "text.pos": (cfg.m, cfg.d_prime)})
    for i in range(cfg.depth):
        shapes.update(_block_shapes(f"text.block{i}.", cfg.d_prime, cfg.mlp_ratio * cfg.d_prime))
    shapes.update(
        {"text.ln_post.g": (cfg.d_prime,), "text.ln_post.b": (cfg.d_prime,), "text.proj": (cfg.d_prime, cfg.embed_dim)}
    )
    shapes["logit_scale"] = (1,)
    return shapes


def _init_value(name, shape, rng, depth):
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "g":
        return np.ones(shape)
    if leaf in ("b", "b1", "b2", "patch_b"):
        return np.zeros(shape)
    if name == "logit_scale":
        return np.full(shape, math.log(1 / 0.07))
    if leaf in ("pos", "tok_emb"):
        return 0.5 * rng.standard_normal(shape)
    std = 1.0 / math.sqrt(shape[0])
    if leaf in ("o", "w2"):
        std /= math.sqrt(2 * depth)
    return std * rng.standard_normal(shape)


class EncoderStack:
    """Parameters of both towers plus the contrastive temperature."""

    def __init__(self, cfg, params, frozen=False):
        expected = param_shapes(cfg)
        if set(params) != set(expected):
            raise ConfigError(f"encoder parameters do not match config: {sorted(set(params) ^ set(expected))}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise DimensionError(f"{name}: expected {shape}, got {params[name].shape}")
        self.cfg = cfg
        self.params = params
        self.pretrained = False
        self.frozen = False
        if frozen:
            self.freeze()

    @classmethod
    def init(cls, cfg, seed, dtype=np.float32):
        rng = rngmod.stream(seed, "encoder-init")
        params = {
            name: T.Tensor(_init_value(name, shape, rng, cfg.depth), requires_grad=True, dtype=dtype)
            for name, shape in param_shapes(cfg).items()
        }
        return cls(cfg, params)

    def freeze(self):
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None

    def unfreeze(self):
        self.frozen = False
        for p in self.params.values():
            p.requires_grad = True

    def astype(self, dtype):
        clone = EncoderStack(self.cfg, {k: T.Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, dtype=dtype) for k, v in self.params.items()})
        clone.pretrained, clone.frozen = self.pretrained, self.frozen
        return clone

    @property
    def temperature(self):
        return float(np.exp(-self.params["logit_scale"].data[0]))

    def digest(self):
        return params_digest(self.params)


def params_digest(params):
    h = hashlib.sha256()
    for name in sorted(params):
        data = params[name].data
        h.update(name.encode("utf-8"))
        h.update(str(data.dtype).encode("ascii"))
        h.update(np.ascontiguousarray(data).tobytes())
    return h.hexdigest()


# ------------------------------------------------------------------- towers


def _block(x, p, prefix, key_mask=None):
    width = x.shape[-1]
    h = T.layer_norm(x, p[prefix + "ln1.g"], p[prefix + "ln1.b"])
    q = T.linear(h, p[prefix + "attn.q"])
    k = T.linear(h, p[prefix + "attn.k"])
    v = T.linear(h, p[prefix + "attn.v"])
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(width))
    mask = None if key_mask is None else key_mask[..., None, :]
    attn = T.softmax_rows(scores, mask)
    x = T.add(x, T.linear(T.matmul(attn, v), p[prefix + "attn.o"]))
    h = T.layer_norm(x, p[prefix + "ln2.g"], p[prefix + "ln2.b"])
    hidden = T.relu(T.linear(h, p[prefix + "mlp.w1"], p[prefix + "mlp.b1"]))
    return T.add(x, T.linear(hidden, p[prefix + "mlp.w2"], p[prefix + "mlp.b2"]))


def _tap_index(depth, tap):
    tap = LayerTap(tap)
    if tap is LayerTap.PENULTIMATE:
        if depth < 2:
            raise ConfigError(f"penultimate tap needs depth >= 2, encoder has depth {depth}")
        return depth - 2
    return depth - 1


def _tower(x, p, prefix, depth, tap, key_mask=None):
    stop = _tap_index(depth, tap)
    for i in range(stop + 1):
        x = _block(x, p, f"{prefix}block{i}.", key_mask)
    return T.layer_norm(x, p[prefix + "ln_post.g"], p[prefix + "ln_post.b"])


def encode_image(stack, image, tap=LayerTap.FINAL):
    """Visual tokens [n, d] (or [B, n, d]) from patch features [n, p_in] (or [B, n, p_in])."""
    cfg, p = stack.cfg, stack.params
    image = image if isinstance(image, T.Tensor) else T.Tensor(np.asarray(image), dtype=p["vision.pos"].dtype)
    if image.ndim not in (2, 3) or image.shape[-2:] != (cfg.n, cfg.p_in):
        raise DimensionError(f"image must be [..., {cfg.n}, {cfg.p_in}], got {list(image.shape)}")
    x = T.add_bias(T.linear(image, p["vision.patch_w"], p["vision.patch_b"]), p["vision.pos"])
    return _tower(x, p, "vision.", cfg.depth, tap)


def pad_tokens(seqs, m, vocab_size=None):
    """Right-pad id sequences to length ``m``; returns (ids [B, m], mask [B, m])."""
    ids = np.zeros((len(seqs), m), dtype=np.int64)
    mask = np.zeros((len(seqs), m), dtype=bool)
    for i, seq in enumerate(seqs):
        seq = list(seq)
        if len(seq) > m:
            raise InputError(f"token sequence of length {len(seq)} exceeds m={m}")
        if vocab_size is not None and any(t < 0 or t >= vocab_size for t in seq):
            raise InputError(f"token ids must lie in [0, {vocab_size})")
        ids[i, : len(seq)] = seq
        mask[i, : len(seq)] = True
    return ids, mask


def encode_text(stack, tokens, tap=LayerTap.FINAL):
    """Text features [m, d'] and mask [m] for one id sequence, or batched for a list of them.

    Padding positions are encoded too (their features exist) but never serve
    as attention keys.
    """
    cfg, p = stack.cfg, stack.params
    batched = len(tokens) > 0 and not np.isscalar(tokens[0])
    seqs = tokens if batched else [tokens]
    ids, mask = pad_tokens(seqs, cfg.m, cfg.vocab_size)
    x = T.add_bias(T.embedding(p["text.tok_emb"], ids), p["text.pos"])
    out = _tower(x, p, "text.", cfg.depth, tap, key_mask=mask)
    if batched:
        return out, mask
    return T.squeeze_batch(out), mask[0]


# ---------------------------------------------------------------- contrastive


def embed_images(stack, images):
    tokens = encode_image(stack, images, LayerTap.FINAL)
    return T.l2_normalize(T.linear(T.mean_pool_rows(tokens), stack.params["vision.proj"]))


def embed_texts(stack, seqs):
    tokens, mask = encode_text(stack, list(seqs), LayerTap.FINAL)
    return T.l2_normalize(T.linear(T.mean_pool_rows(tokens, mask), stack.params["text.proj"]))


def contrastive_logits(stack, images, captions):
    img, txt = embed_images(stack, images), embed_texts(stack, captions)
    return T.scale_by(T.matmul(img, T.transpose(txt)), T.exp(stack.params["logit_scale"]))


def contrastive_loss(stack, images, captions):
    """Symmetric InfoNCE over a batch of matched image/caption pairs."""
    b = len(captions)
    if b < 2:
        raise ConfigError("contrastive loss needs a batch of at least 2 pairs")
    logits = contrastive_logits(stack, images, captions)
    labels = np.arange(b)
    return T.scale(T.add(T.cross_entropy(logits, labels), T.cross_entropy(T.transpose(logits), labels)), 0.5)


def retrieval_accuracy(stack, images, captions):
    """Fraction of images whose highest-scoring caption in the batch is their own."""
    logits = contrastive_logits(stack, images, captions).data
    return float(np.mean(np.argmax(logits, axis=1) == np.arange(len(captions))))


def caption_batches(world_cfg, seed, batch_size, split="pretrain"):
    """Endless stream of (patches [B, n, p_in], caption ids) from fresh scenes."""
    from . import world

    i = 0
    while True:
        rng = rngmod.stream(seed, "captions", split, i)
        scenes = [world.random_scene(rng, world_cfg, bool(rng.random() < world_cfg.p_ambiguous)) for _ in range(batch_size)]
        render_seeds = rng.integers(1 << 62, size=batch_size)
        images = np.stack([world.render(s, world_cfg, int(rs)) for s, rs in zip(scenes, render_seeds)])
        yield images, [world.make_caption(s) for s in scenes]
        i += 1


@dataclass
class PretrainResult:
    curve: list = field(default_factory=list)
    final_train_accuracy: float = 0.0


MAX_LOGIT_SCALE = math.log(100.0)


def contrastive_pretrain(stack, batches, steps, lr):
    """Adam on the InfoNCE loss for ``steps`` batches drawn from ``batches``."""
    if stack.frozen:
        raise ConfigError("cannot pretrain a frozen encoder stack")
    state = OptimizerState(kind="adam", learning_rate=lr)
    result = PretrainResult()
    images = captions = None
    for step in range(steps):
        images, captions = next(batches)
        loss = contrastive_loss(stack, images, captions)
        zero_grad(stack.params)
        T.backward(loss)
        optimizer_step(stack.params, state)
        ls = stack.params["logit_scale"].data
        np.clip(ls, 0.0, MAX_LOGIT_SCALE, out=ls)
        result.curve.append((step, float(loss.data)))
    zero_grad(stack.params)
    if images is not None:
        result.final_train_accuracy = retrieval_accuracy(stack, images, captions)
    stack.pretrained = True
    return result
