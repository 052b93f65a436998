"""Two-stage adapter training on the synthetic world.

Stage 1 trains the instruction projection and the alignment module against
a frozen, randomly initialised readout head. Stage 2 also unfreezes the
head, which plays the part of the language model. The encoders stay frozen
throughout; since they are fixed functions, their outputs for every sample
are computed once and reused by both stages.
"""

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import adaptation as A
from . import encoders as E
from . import rng as rngmod
from . import tensor as T
from .checkpoint import Checkpoint
from .config import RunConfig, from_text
from .errors import ConfigError, ContractError, TrainingError
from .optim import OptimizerState, optimizer_step, zero_grad
from .world import NUM_CLASSES

METRICS_HEADER = ("step", "stage", "loss", "acc_ambiguous", "acc_unambiguous", "acc_all")


class ReadoutHead:
    """One-hidden-layer classifier over mean-pooled tokens.

    ``visual_only`` sees the pooled adapted visual tokens; the other mode
    also gets the pooled (unprojected) instruction features.
    """

    def __init__(self, mode, params):
        self.mode = mode
        self.params = params

    @classmethod
    def init(cls, mode, enc_cfg, hidden, seed, dtype=np.float32):
        width = enc_cfg.d + (enc_cfg.d_prime if mode == "visual_plus_instruction" else 0)
        rng = rngmod.stream(seed, "head-init", mode)
        values = {
            "w1": rng.standard_normal((width, hidden)) / math.sqrt(width),
            "b1": np.zeros(hidden),
            "w2": rng.standard_normal((hidden, NUM_CLASSES)) / math.sqrt(hidden),
            "b2": np.zeros(NUM_CLASSES),
        }
        return cls(mode, {k: T.Tensor(v, requires_grad=True, dtype=dtype) for k, v in values.items()})

    def __call__(self, vt, t=None, mask=None):
        x = T.mean_pool_rows(vt)
        if self.mode == "visual_plus_instruction":
            x = T.concat_features(x, T.mean_pool_rows(t, mask))
        p = self.params
        return T.linear(T.relu(T.linear(x, p["w1"], p["b1"])), p["w2"], p["b2"])


@dataclass
class Model:
    stack: E.EncoderStack
    adapter: A.Adapter
    head: ReadoutHead
    tap: str

    def logits(self, v, t, mask):
        return self.head(self.adapter(v, t), t, mask)


@dataclass
class Features:
    """Frozen-encoder outputs for a dataset."""

    v: np.ndarray
    t: np.ndarray
    mask: np.ndarray
    answers: np.ndarray
    ambiguous: np.ndarray

    def __len__(self):
        return len(self.answers)

    def batch(self, idx):
        return T.Tensor(self.v[idx]), T.Tensor(self.t[idx]), self.mask[idx]


def encode_features(stack, samples, tap, chunk=500):
    vs, ts, ms = [], [], []
    for i in range(0, len(samples), chunk):
        part = samples[i:i + chunk]
        vs.append(E.encode_image(stack, np.stack([s.patches for s in part]), tap).data)
        t, mask = E.encode_text(stack, [s.instruction for s in part], tap)
        ts.append(t.data)
        ms.append(mask)
    return Features(
        np.concatenate(vs),
        np.concatenate(ts),
        np.concatenate(ms),
        np.array([s.answer for s in samples], dtype=np.int64),
        np.array([s.ambiguous for s in samples], dtype=bool),
    )


# ----------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    acc_ambiguous: float
    acc_unambiguous: float
    acc_all: float
    confusion: np.ndarray
    counts: dict = field(default_factory=dict)

    def as_dict(self):
        return {"ambiguous": self.acc_ambiguous, "unambiguous": self.acc_unambiguous, "all": self.acc_all}


def _acc(correct, mask):
    return float(correct[mask].mean()) if mask.any() else float("nan")


def accuracy_report(predictions, answers, ambiguous):
    predictions = np.asarray(predictions)
    answers = np.asarray(answers)
    ambiguous = np.asarray(ambiguous, dtype=bool)
    correct = predictions == answers
    confusion = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(confusion, (answers, predictions), 1)
    return EvalResult(
        _acc(correct, ambiguous),
        _acc(correct, ~ambiguous),
        _acc(correct, np.ones_like(ambiguous)),
        confusion,
        {"ambiguous": int(ambiguous.sum()), "unambiguous": int((~ambiguous).sum()), "all": int(len(answers))},
    )


def predict(model, feats, chunk=1000):
    out = []
    for i in range(0, len(feats), chunk):
        idx = slice(i, i + chunk)
        out.append(np.argmax(model.logits(*feats.batch(idx)).data, axis=1))
    return np.concatenate(out)


def evaluate_features(model, feats):
    return accuracy_report(predict(model, feats), feats.answers, feats.ambiguous)


def evaluate(ckpt, dataset):
    """Accuracy of a checkpointed model on a dataset, split by ambiguity."""
    cfg = from_text(ckpt.config_text)
    if cfg.world() != dataset.config:
        raise ContractError("checkpoint world config does not match the dataset's")
    model = model_from_checkpoint(ckpt)
    return evaluate_features(model, encode_features(model.stack, dataset.samples, model.tap))


# ------------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: Model
    rows: list
    final: EvalResult
    encoder_digest: str
    checkpoint: Checkpoint = None

    def metrics_csv(self):
        return metrics_csv(self.rows)


def _fmt(x):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.6f}"


def metrics_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for step, stage, loss, ev in rows:
        accs = (ev.acc_ambiguous, ev.acc_unambiguous, ev.acc_all) if ev is not None else (None, None, None)
        writer.writerow([step, stage, _fmt(loss)] + [_fmt(a) for a in accs])
    return buf.getvalue()


def check_disjoint(train, test):
    overlap = train.seeds() & test.seeds()
    if overlap:
        raise ConfigError(f"train and test splits share {len(overlap)} samples")
    if train.config != test.config:
        raise ConfigError("train and test splits were generated with different world configs")


def build_model(cfg, stack, dtype=np.float32):
    enc_cfg = stack.cfg
    adapter = A.Adapter.init(cfg.adapter, enc_cfg, cfg.seed, dtype)
    head = ReadoutHead.init(cfg.readout, enc_cfg, cfg.hidden, cfg.seed, dtype)
    return Model(stack, adapter, head, cfg.layer_tap)


def train_two_stage(cfg: RunConfig, train, test, stack, log=None):
    """Run both stages; returns the trained model, metric rows and a checkpoint."""
    if not stack.frozen:
        raise ContractError("encoders must be frozen before adapter training")
    check_disjoint(train, test)
    enc_digest = stack.digest()
    model = build_model(cfg, stack)
    train_f = encode_features(stack, train.samples, cfg.layer_tap)
    test_f = encode_features(stack, test.samples, cfg.layer_tap)

    initial = evaluate_features(model, test_f)
    rows = [(0, 0, None, initial)]
    step = 0
    final = initial
    stages = (
        (1, cfg.stage1_steps, cfg.stage1_lr, dict(_prefixed("adapter.", model.adapter.params))),
        (2, cfg.stage2_steps, cfg.stage2_lr, {**_prefixed("adapter.", model.adapter.params), **_prefixed("head.", model.head.params)}),
    )
    for stage, steps, lr, params in stages:
        head_digest = E.params_digest(model.head.params)
        state = OptimizerState(kind="adam", learning_rate=lr)
        order = rngmod.stream(cfg.seed, "batches", stage)
        for i in range(steps):
            idx = order.integers(0, len(train_f), cfg.batch_size)
            loss = T.cross_entropy(model.logits(*train_f.batch(idx)), train_f.answers[idx])
            step += 1
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError("non-finite loss", step)
            if params:
                zero_grad(params)
                T.backward(loss)
                optimizer_step(params, state)
            ev = None
            if (i + 1) % cfg.eval_every == 0 or i + 1 == steps:
                ev = final = evaluate_features(model, test_f)
                if log:
                    log(f"stage {stage} step {step} loss {value:.4f} acc_ambiguous {ev.acc_ambiguous:.3f} acc_all {ev.acc_all:.3f}")
            rows.append((step, stage, value, ev))
        if params:
            zero_grad(params)
        if stage == 1 and E.params_digest(model.head.params) != head_digest:
            raise ContractError("readout head changed during stage 1")
    if stack.digest() != enc_digest:
        raise ContractError("encoder parameters changed during adapter training")
    result = TrainResult(model, rows, final, enc_digest)
    result.checkpoint = model_checkpoint(cfg, model)
    return result


def _prefixed(prefix, params):
    return {prefix + k: v for k, v in params.items()}


# ---------------------------------------------------------------- checkpoints


def model_checkpoint(cfg, model):
    tensors = {}
    for prefix, params in (("enc.", model.stack.params), ("adapter.", model.adapter.params), ("head.", model.head.params)):
        for k, v in params.items():
            tensors[prefix + k] = v.data.copy()
    return Checkpoint(cfg.to_text(), tensors)


def encoder_checkpoint(cfg, stack):
    return Checkpoint(cfg.to_text(), {"enc." + k: v.data.copy() for k, v in stack.params.items()})


def stack_from_checkpoint(ckpt, frozen=True):
    cfg = from_text(ckpt.config_text)
    params = {k: T.Tensor(v, requires_grad=not frozen, dtype=v.dtype) for k, v in ckpt.subset("enc.").items()}
    stack = E.EncoderStack(cfg.encoder(), params, frozen=frozen)
    stack.pretrained = True
    return stack


def model_from_checkpoint(ckpt):
    cfg = from_text(ckpt.config_text)
    stack = stack_from_checkpoint(ckpt)
    adapter = A.Adapter(
        cfg.adapter, stack.cfg, {k: T.Tensor(v, requires_grad=True, dtype=v.dtype) for k, v in ckpt.subset("adapter.").items()}
    )
    head = ReadoutHead(cfg.readout, {k: T.Tensor(v, requires_grad=True, dtype=v.dtype) for k, v in ckpt.subset("head.").items()})
    return Model(stack, adapter, head, cfg.layer_tap)


# ------------------------------------------------------------- full pipeline


def pretrain_encoders(cfg, log=None):
    """Initialise and contrastively pretrain the encoders, then freeze them."""
    stack = E.EncoderStack.init(cfg.encoder(), cfg.seed)
    batches = E.caption_batches(cfg.world(), cfg.seed, cfg.pretrain_batch)
    result = E.contrastive_pretrain(stack, batches, cfg.pretrain_steps, cfg.pretrain_lr)
    held_out = E.caption_batches(cfg.world(), cfg.seed, cfg.pretrain_batch, split="heldout")
    accuracy = float(np.mean([E.retrieval_accuracy(stack, *next(held_out)) for _ in range(8)]))
    if log:
        log(f"pretrained encoders: final loss {result.curve[-1][1] if result.curve else float('nan'):.4f}, held-out retrieval {accuracy:.3f}")
    stack.freeze()
    return stack, result, accuracy


def composed_loss(stack, adapter, head, images, instructions, answers, tap):
    """Loss through every stage: encoders, projection, alignment, readout."""
    v = E.encode_image(stack, images, tap)
    t, mask = E.encode_text(stack, instructions, tap)
    return T.cross_entropy(head(adapter(v, t), t, mask), answers)
