"""Interpretability probes on a trained adapter and their CSV/SVG reports.

* token attribution: l1 norm of each alignment-matrix row;
* mutual information between pooled visual representations (adapted and
  raw) and pooled encodings of the reference responses;
* distance shift: l2 between confusable-pair members before and after
  alignment under the instruction naming the changed attribute.

All representations are mean-pooled over tokens before measurement.
"""

import csv
import io
import os
from dataclasses import dataclass

import numpy as np

from . import adaptation as A
from . import encoders as E
from . import rng as rngmod
from . import svg
from . import tensor as T
from .errors import ContractError, InputError
from .mi import estimate_mi, local_terms
from .world import response_ids


def _csv(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------- attribution


@dataclass
class AttributionReport:
    norms: np.ndarray
    n_visual: int

    name = "attribution"
    figure = "fig_attribution.svg"
    header = ("token_index", "is_text", "l1_norm")

    @property
    def visual_mean(self):
        return float(self.norms[: self.n_visual].mean())

    @property
    def text_mean(self):
        text = self.norms[self.n_visual:]
        return float(text.mean()) if text.size else 0.0

    @property
    def text_series(self):
        return self.norms[self.n_visual:]

    def csv(self):
        return _csv(
            self.header,
            [(i, int(i >= self.n_visual), f"{v:.6f}") for i, v in enumerate(self.norms)],
        )

    def svg(self):
        groups = [int(i >= self.n_visual) for i in range(len(self.norms))]
        return svg.bar_chart(
            self.norms, groups, ("visual token", "text token"),
            "Alignment weight per input token", "token index", "l1 norm of weight row",
        )


def attribution_report(adapter):
    if A.AdapterKind(adapter.kind) is not A.AdapterKind.LINEAR:
        raise ContractError(f"token attribution needs a linear adapter, got {adapter.kind}")
    attr = A.token_attribution(adapter.params["align.W"])
    return AttributionReport(attr.norms, attr.n_visual)


# ------------------------------------------------------------------------ MI


def _pooled_visual(model, samples, chunk=500):
    raw, adapted = [], []
    for i in range(0, len(samples), chunk):
        part = samples[i:i + chunk]
        v = E.encode_image(model.stack, np.stack([s.patches for s in part]), model.tap)
        t, _ = E.encode_text(model.stack, [s.instruction for s in part], model.tap)
        raw.append(T.mean_pool_rows(v).data)
        adapted.append(T.mean_pool_rows(model.adapter(v, t)).data)
    return np.concatenate(raw).astype(np.float64), np.concatenate(adapted).astype(np.float64)


def response_encodings(stack, samples, chunk=500):
    """Pooled final-layer text features of each sample's reference response."""
    out = []
    for i in range(0, len(samples), chunk):
        part = samples[i:i + chunk]
        t, mask = E.encode_text(stack, [response_ids(s.scene, s.instruction) for s in part], E.LayerTap.FINAL)
        out.append(T.mean_pool_rows(t, mask).data)
    return np.concatenate(out).astype(np.float64)


def standardize(x):
    """Centre, then divide by one global scale so the mean squared row norm is 1.

    A single factor keeps the relative geometry of the dimensions, which the
    max-norm neighbour search depends on.
    """
    x = x - x.mean(axis=0)
    scale = np.sqrt(np.mean(np.sum(x * x, axis=1)))
    return x / scale if scale > 0 else x


@dataclass
class MIReport:
    adapted: object
    raw: object
    null_adapted: object
    null_raw: object
    local_adapted: np.ndarray
    local_raw: np.ndarray

    name = "mi"
    figure = "fig_mi.svg"
    header = ("set", "kind", "mi_nats", "k", "n")

    @property
    def ratio(self):
        return self.adapted.value / self.raw.value if self.raw.value > 0 else float("inf")

    def csv(self):
        rows = [
            (label, kind, f"{est.value:.6f}", est.k, est.n)
            for label, kind, est in (
                ("heldout", "adapted", self.adapted),
                ("heldout", "raw", self.raw),
                ("shuffled", "adapted", self.null_adapted),
                ("shuffled", "raw", self.null_raw),
            )
        ]
        return _csv(self.header, rows)

    def svg(self):
        return svg.histogram(
            {"adapted": self.local_adapted, "raw": self.local_raw},
            "Per-sample MI with response encodings", "local KSG term (nats)",
        )


def mi_comparison(model_emma, model_baseline, samples, k=3, seed=0):
    """MI of adapted (``model_emma``) and raw (``model_baseline``) pooled visual reps with responses."""
    if model_emma.stack.digest() != model_baseline.stack.digest():
        raise ContractError("models were built on different encoder checkpoints")
    _, adapted = _pooled_visual(model_emma, samples)
    _, raw = _pooled_visual(model_baseline, samples)
    y =standardize(response_encodings(model_emma.stack, samples))
    adapted, raw = standardize(adapted), standardize(raw)
    perm = rngmod.stream(seed, "mi-null").permutation(len(samples))
    la, lr = local_terms(adapted, y, k), local_terms(raw, y, k)
    return MIReport(
        estimate_mi(adapted, y, k), estimate_mi(raw, y, k),
        estimate_mi(adapted, y[perm], k), estimate_mi(raw, y[perm], k),
        la, lr,
    )


# ------------------------------------------------------------- distance shift


@dataclass
class DistanceShiftReport:
    pre: np.ndarray
    post: np.ndarray

    name = "distances"
    figure = "fig_distance_shift.svg"
    header = ("pair_id", "pre_l2", "post_l2")

    @property
    def mean_pre(self):
        return float(self.pre.mean())

    @property
    def mean_post(self):
        return float(self.post.mean())

    @property
    def shift(self):
        return self.mean_post - self.mean_pre

    def csv(self):
        return _csv(self.header, [(i, f"{a:.6f}", f"{b:.6f}") for i, (a, b) in enumerate(zip(self.pre, self.post))])

    def svg(self):
        return svg.histogram(
            {"before alignment": self.pre, "after alignment": self.post},
            "Confusable-pair distances", "l2 distance between pooled representations",
        )


def distance_shift(model, pairs):
    if len(pairs) < 2:
        raise InputError(f"need at least 2 pairs, got {len(pairs)}")
    for i, p in enumerate(pairs):
        if p.a.scene == p.b.scene and np.array_equal(p.a.patches, p.b.patches):
            raise InputError(f"pair {i} has identical members")
    images = np.stack([s.patches for p in pairs for s in (p.a, p.b)])
    instructions = [s.instruction for p in pairs for s in (p.a, p.b)]
    v = E.encode_image(model.stack, images, model.tap)
    t, _ = E.encode_text(model.stack, instructions, model.tap)
    raw = T.mean_pool_rows(v).data.astype(np.float64)
    adapted = T.mean_pool_rows(model.adapter(v, t)).data.astype(np.float64)
    pre = np.linalg.norm(raw[0::2] - raw[1::2], axis=1)
    post = np.linalg.norm(adapted[0::2] - adapted[1::2], axis=1)
    return DistanceShiftReport(pre, post)


# --------------------------------------------------------------------- output


def emit_report(reports, out_dir):
    """Write ``<name>.csv`` and the figure for each report; returns written paths."""
    written = []
    if not reports:
        return written
    os.makedirs(out_dir, exist_ok=True)
    for report in reports:
        for fname, text in ((f"{report.name}.csv", report.csv()), (report.figure, report.svg())):
            path = os.path.join(out_dir, fname)
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            written.append(path)
    return written
