"""Flat ``key = value`` run configuration.

UTF-8 text, one assignment per line, ``#`` starts a comment. Every key has a
default, so an empty file is the desk configuration. Unknown keys and
values that fail to convert are rejected with the offending line number.
"""

from dataclasses import asdict, dataclass, fields, replace

from .adaptation import AdapterKind
from .encoders import EncoderConfig, LayerTap
from .errors import ConfigError
from .world import WorldConfig

READOUT_MODES = ("visual_only", "visual_plus_instruction")


@dataclass(frozen=True)
class RunConfig:
    # world
    grid_h: int = 4
    grid_w: int = 4
    patch: int = 4
    m: int = 12
    vocab_size: int = 64
    noise: float = 0.02
    p_ambiguous: float = 0.5
    n_train: int = 4000
    n_test: int = 2000
    # encoders
    d: int = 32
    d_prime: int = 24
    depth: int = 2
    embed_dim: int = 24
    mlp_ratio: int = 2
    pretrain_steps: int = 800
    pretrain_lr: float = 3e-3
    pretrain_batch: int = 32
    # adapter and readout training
    adapter: str = "linear"
    layer_tap: str = "final"
    readout: str = "visual_only"
    hidden: int = 64
    batch_size: int = 64
    stage1_steps: int = 500
    stage1_lr: float = 3e-3
    stage2_steps: int = 3000
    stage2_lr: float = 3e-3
    eval_every: int = 250
    # analyses
    mi_k: int = 3
    n_pairs: int = 64
    seed: int = 0
    out_dir: str = "runs/desk"

    def __post_init__(self):
        object.__setattr__(self, "adapter", AdapterKind.parse(self.adapter).value)
        try:
            object.__setattr__(self, "layer_tap", LayerTap(self.layer_tap).value)
        except ValueError:
            raise ConfigError(f"layer_tap must be final or penultimate, got {self.layer_tap!r}") from None
        if self.readout not in READOUT_MODES:
            raise ConfigError(f"readout must be one of {READOUT_MODES}, got {self.readout!r}")
        for name in ("n_train", "n_test", "hidden", "batch_size", "eval_every", "mi_k", "n_pairs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("pretrain_steps", "stage1_steps", "stage2_steps", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.pretrain_batch < 2:
            raise ConfigError("pretrain_batch must be >= 2 for the contrastive loss")
        # build the sub-configs once so their own checks run at parse time
        self.world()
        self.encoder()

    def world(self):
        return WorldConfig(
            grid_h=self.grid_h,
            grid_w=self.grid_w,
            patch=self.patch,
            m=self.m,
            vocab_size=self.vocab_size,
            noise=self.noise,
            p_ambiguous=self.p_ambiguous,
        )

    def encoder(self):
        return EncoderConfig(
            grid_h=self.grid_h,
            grid_w=self.grid_w,
            p_in=3 * self.patch * self.patch,
            m=self.m,
            d=self.d,
            d_prime=self.d_prime,
            depth=self.depth,
            vocab_size=self.vocab_size,
            embed_dim=self.embed_dim,
            mlp_ratio=self.mlp_ratio,
        )

    def replace(self, **changes):
        return replace(self, **changes)

    def to_text(self):
        return "".join(f"{k} = {_format(v)}\n" for k, v in asdict(self).items())


def _format(value):
    return repr(value) if isinstance(value, float) else str(value)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key, raw, line=None):
    kind = _TYPES[key]
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}", line) from None
    if not raw:
        raise ConfigError(f"{key}: empty value", line)
    return raw


def parse_text(text):
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, raw = body.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"expected 'key = value', got {line.strip()!r}", lineno)
        if key not in _TYPES:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        values[key] = (_convert(key, raw, lineno), lineno)
    return values


def parse_config(path=None, overrides=None):
    """Config from an optional file, then ``overrides`` (key -> str or value) on top."""
    values = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        values = {k: v for k, (v, _) in parse_text(text).items()}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _TYPES:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _convert(key, value) if isinstance(value, str) else value
    return RunConfig(**values)


def from_text(text):
    return RunConfig(**{k: v for k, (v, _) in parse_text(text).items()})
