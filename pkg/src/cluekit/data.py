"""Synthetic desk-scale dataset generators and certainty partitioning."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import models


@dataclass
class Dataset:
    inputs: np.ndarray  # N x d', values in [0,1]
    labels: np.ndarray  # length N, ints in [0, c')
    split: np.ndarray  # length N, "train"/"test"
    generator: dict = field(default_factory=dict)  # spec + seed for regeneration

    def train_inputs(self):
        return self.inputs[self.split == "train"]

    def train_labels(self):
        return self.labels[self.split == "train"]

    def test_inputs(self):
        return self.inputs[self.split == "test"]

    def test_labels(self):
        return self.labels[self.split == "test"]


@dataclass
class GroupPartition:
    """Per-point class label plus certainty flag from entropy thresholds."""

    entropies: np.ndarray
    labels: np.ndarray
    flags: np.ndarray  # "certain" / "uncertain" / "mid"
    tau_low: float
    tau_high: float

    def certain_of_class(self, j):
        return np.flatnonzero((self.flags == "certain") & (self.labels == j))

    def uncertain_of_class(self, j):
        return np.flatnonzero((self.flags == "uncertain") & (self.labels == j))


def _split_tags(rng, n, test_frac, labels):
    """Random split, redrawn until every class appears in train."""
    classes = np.unique(labels)
    for _ in range(100):
        tags = np.where(rng.random(n) < test_frac, "test", "train")
        if all(np.any((tags == "train") & (labels == c)) for c in classes):
            return tags
    raise RuntimeError("could not produce a split covering all classes in train")


def gen_blobs(c, d, n, spread, seed, test_frac=0.2):
    """Gaussian clusters with class-dependent means, clipped to [0,1].

    ``spread`` controls overlap between clusters; overlapping clusters
    produce genuinely uncertain points for a trained classifier.
    """
    if c < 2 or d < 2:
        raise ValueError(f"gen_blobs: need c>=2 and d>=2, got c={c}, d={d}")
    if n < c:
        raise ValueError("gen_blobs: need at least one point per class")
    rng = np.random.default_rng([seed, 0])
    means = 0.2 + 0.6 * rng.random((c, d))
    labels = rng.integers(0, c, size=n)
    points = np.clip(means[labels] + spread * rng.standard_normal((n, d)), 0.0, 1.0)
    split = _split_tags(np.random.default_rng([seed, 1]), n, test_frac, labels)
    return Dataset(inputs=points, labels=labels, split=split,
                   generator={"kind": "blobs", "c": c, "d": d, "n": n,
                              "spread": spread, "seed": seed, "test_frac": test_frac})


# 7-segment layout on an 8x8 grid: segments index (row0, col0, row1, col1)
_SEGMENTS = {
    "top": (0, 1, 0, 6),
    "top_left": (1, 0, 3, 0),
    "top_right": (1, 7, 3, 7),
    "mid": (3, 1, 3, 6),
    "bot_left": (4, 0, 6, 0),
    "bot_right": (4, 7, 6, 7),
    "bot": (7, 1, 7, 6),
}

_DIGIT_SEGMENTS = {
    0: ["top", "top_left", "top_right", "bot_left", "bot_right", "bot"],
    1: ["top_right", "bot_right"],
    2: ["top", "top_right", "mid", "bot_left", "bot"],
    3: ["top", "top_right", "mid", "bot_right", "bot"],
    4: ["top_left", "top_right", "mid", "bot_right"],
    5: ["top", "top_left", "mid", "bot_right", "bot"],
    6: ["top", "top_left", "mid", "bot_left", "bot_right", "bot"],
    7: ["top", "top_right", "bot_right"],
    8: ["top", "top_left", "top_right", "mid", "bot_left", "bot_right", "bot"],
    9: ["top", "top_left", "top_right", "mid", "bot_right", "bot"],
}


def _render_glyph(digit, rng):
    img = np.zeros((8, 8))
    dr = int(rng.integers(-1, 2))
    dc_ = int(rng.integers(-1, 2))
    intensity = 0.7 + 0.3 * rng.random()
    for seg in _DIGIT_SEGMENTS[digit]:
        r0, c0, r1, c1 = _SEGMENTS[seg]
        steps = max(abs(r1 - r0), abs(c1 - c0)) + 1
        for t in range(steps):
            r = r0 + (r1 - r0) * t // max(steps - 1, 1) + dr
            c = c0 + (c1 - c0) * t // max(steps - 1, 1) + dc_
            if 0 <= r < 8 and 0 <= c < 8:
                img[r, c] = intensity
    img += 0.08 * rng.standard_normal((8, 8))
    return np.clip(img, 0.0, 1.0).reshape(-1)


def gen_minidigits(n, seed, test_frac=0.2):
    """Procedural 8x8 seven-segment glyphs: d'=64, c'=10.

    Digit classes share strokes (e.g. 3/9, 5/6, 8/0), so a trained
    classifier exhibits genuine between-class confusion, which the
    multi-class diversity machinery needs.
    """
    rng = np.random.default_rng([seed, 0])
    base = n // 10
    counts = [base + (1 if i < n % 10 else 0) for i in range(10)]
    labels = np.concatenate([np.full(cnt, digit) for digit, cnt in enumerate(counts)])
    rng.shuffle(labels)
    points = np.stack([_render_glyph(int(y), rng) for y in labels])
    split = _split_tags(np.random.default_rng([seed, 1]), n, test_frac, labels)
    return Dataset(inputs=points, labels=labels.astype(np.int64), split=split,
                   generator={"kind": "minidigits", "n": n, "seed": seed,
                              "test_frac": test_frac})


def regenerate(spec):
    """Rebuild a dataset bitwise-identically from its generator manifest."""
    kind = spec["kind"]
    if kind == "blobs":
        return gen_blobs(spec["c"], spec["d"], spec["n"], spec["spread"],
                         spec["seed"], spec.get("test_frac", 0.2))
    if kind == "minidigits":
        return gen_minidigits(spec["n"], spec["seed"], spec.get("test_frac", 0.2))
    raise ValueError(f"unknown generator kind {kind!r}")


def partition_by_certainty(dataset, bundle, tau_low, tau_high, which="train"):
    """Split points into certain (H <= tau_low) / uncertain (H > tau_high).

    Points with tau_low < H <= tau_high stay unassigned ("mid") and are
    excluded from mapper training. When tau_low == tau_high every point is
    assigned, with ties going to certain.
    """
    xs = dataset.train_inputs() if which == "train" else dataset.test_inputs()
    ys = dataset.train_labels() if which == "train" else dataset.test_labels()
    ents = np.array([models.predict_entropy(bundle, x) for x in xs])
    flags = np.where(ents <= tau_low, "certain",
                     np.where(ents > tau_high, "uncertain", "mid"))
    part = GroupPartition(entropies=ents, labels=ys, flags=flags,
                          tau_low=float(tau_low), tau_high=float(tau_high))
    for j in np.unique(ys):
        if len(part.certain_of_class(int(j))) == 0:
            warnings.warn(f"class {int(j)} has no certain points", stacklevel=2)
    return part


def default_taus(bundle):
    """20th / 80th percentile of training entropies recorded at training time."""
    pct = bundle.ensemble_report.entropy_percentiles
    return float(pct["20"]), float(pct["80"])


def save_dataset(dataset, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "n": int(dataset.inputs.shape[0]),
        "d": int(dataset.inputs.shape[1]),
        "generator": dataset.generator,
        "labels": [int(v) for v in dataset.labels],
        "split": list(dataset.split),
    }
    with open(directory / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    with open(directory / "inputs.bin", "wb") as f:
        f.write(np.ascontiguousarray(dataset.inputs, dtype="<f8").tobytes())


def load_dataset(directory):
    directory = Path(directory)
    with open(directory / "manifest.json", encoding="utf-8") as f:
        manifest = json.load(f)
    blob = np.frombuffer((directory / "inputs.bin").read_bytes(), dtype="<f8")
    inputs = blob.reshape(manifest["n"], manifest["d"]).astype(np.float64)
    return Dataset(inputs=inputs,
                   labels=np.array(manifest["labels"], dtype=np.int64),
                   split=np.array(manifest["split"]),
                   generator=manifest["generator"])


def export_csv(dataset, path):
    d = dataset.inputs.shape[1]
    header = "label,split," + ",".join(f"x{i}" for i in range(d))
    with open(path, "w", encoding="utf-8") as f:
        f.write(header + "\n")
        for y, tag, row in zip(dataset.labels, dataset.split, dataset.inputs):
            f.write(f"{int(y)},{tag}," + ",".join(repr(float(v)) for v in row) + "\n")
