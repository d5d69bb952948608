"""Constrained counterfactual search in latent space.

Implements the uncertainty + distance objective, the l2 ball projection,
the five initialization schemes, and the projected-gradient descent loop
that produces sets of candidate counterfactuals.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import diffcore as dc
from . import models


@dataclass
class ExperimentConfig:
    delta: float = math.inf  # latent l2 radius (inf = unconstrained)
    k: int = 1  # number of counterfactuals
    r: float = 0.0  # initialization radius
    scheme: str = "s1"  # s1..s5
    lambda_x: float = 0.0  # input-distance weight
    lambda_y: float = 0.0  # prediction-distance weight
    lambda_d: float = 0.0  # diversity weight
    n_i: int = 0  # diversity pre-search steps
    lr: float = 0.1
    iters: int = 30
    h_threshold: float = math.inf  # acceptance entropy
    seed: int = 0

    def __post_init__(self):
        if not (self.delta > 0.0):
            raise ValueError("delta must be > 0 (inf allowed)")
        if self.r < 0.0 or self.k < 1 or self.iters < 1 or self.n_i < 0:
            raise ValueError("invalid config: need r >= 0, k >= 1, iters >= 1, n_i >= 0")
        if min(self.lambda_x, self.lambda_y, self.lambda_d) < 0.0:
            raise ValueError("lambda weights must be >= 0")


@dataclass
class CandidateCE:
    z: np.ndarray
    x: np.ndarray
    posterior: np.ndarray
    entropy: float
    d_x: float  # l1 input distance to x0
    d_y: float  # prediction distance (cross-entropy vs original hard label)
    rho: float  # latent l2 distance to z0
    cost: float  # entropy + lambda_x d_x + lambda_y d_y
    label: int
    accepted: bool
    start_index: int
    trajectory: np.ndarray | None = None  # iters+1 x m' when tracing


@dataclass
class CESet:
    candidates: list
    config: ExperimentConfig
    x0: np.ndarray
    z0: np.ndarray

    def accepted(self):
        return [c for c in self.candidates if c.accepted]

    def points(self, space="latent", accepted_only=True):
        cs = self.accepted() if accepted_only else self.candidates
        if space == "latent":
            return np.stack([c.z for c in cs])
        if space == "input":
            return np.stack([c.x for c in cs])
        if space == "prediction":
            return np.stack([c.posterior for c in cs])
        raise ValueError(f"unknown space {space!r}")

    def labels(self, accepted_only=True):
        cs = self.accepted() if accepted_only else self.candidates
        return [c.label for c in cs]


def objective(z, x0, bundle, lambda_x=0.0, lambda_y=0.0, x0_label=None):
    """Loss H(y | decode(z)) + lambda_x l1(decode(z), x0) + lambda_y d_y, and its z-gradient.

    d_y is the cross-entropy of the candidate posterior against the hard
    label of the original input (computed from the bundle if not supplied);
    it participates only when lambda_y > 0.
    """
    zt = dc.Tensor(np.asarray(z, dtype=np.float64), requires_grad=True)
    x = models.decode_graph(bundle, zt)
    p = models.posterior_graph(bundle, x)
    h_term = models.entropy_graph(p)
    loss = h_term
    if lambda_x > 0.0:
        dx_term = dc.l1_dist(x, dc.Tensor(np.asarray(x0, dtype=np.float64)))
        if not np.isfinite(dx_term.data):
            raise FloatingPointError("objective: input-distance term is non-finite")
        loss = dc.add(loss, dc.mul(dx_term, lambda_x))
    if lambda_y > 0.0:
        if x0_label is None:
            x0_label = models.argmax_label(models.predict(bundle, x0).probs)
        dy_term = dc.mul(dc.log(dc.pick(p, x0_label)), -1.0)
        if not np.isfinite(dy_term.data):
            raise FloatingPointError("objective: prediction-distance term is non-finite")
        loss = dc.add(loss, dc.mul(dy_term, lambda_y))
    if not np.isfinite(h_term.data):
        raise FloatingPointError("objective: entropy term is non-finite")
    if not np.isfinite(loss.data):
        raise FloatingPointError("objective: total loss is non-finite")
    loss.backward()
    return float(loss.data), np.array(zt.grad)


def project_to_ball(z, z0, delta):
    """Project z onto the l2 ball of radius delta around z0 (idempotent)."""
    if math.isinf(delta):
        return np.asarray(z, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    z0 = np.asarray(z0, dtype=np.float64)
    diff = z - z0
    norm = float(np.linalg.norm(diff))
    # the relative slack absorbs rounding in the rescale, which makes a
    # second projection return its input unchanged (bitwise idempotence)
    if norm <= delta * (1.0 + 1e-12):
        return z
    return z0 + delta * (diff / norm)


@dataclass
class InitContext:
    """Extra inputs some schemes need: training latents/labels (s2), bundle (s5)."""

    bundle: object = None
    certain_latents: np.ndarray | None = None
    certain_labels: np.ndarray | None = None
    n_classes: int = 0


def candidate_rng(seed, i):
    """Counter-split RNG stream for candidate i, independent of run order."""
    return np.random.default_rng([seed, 17, i])


def _uniform_direction(rng, m):
    g = rng.standard_normal(m)
    n = np.linalg.norm(g)
    while n == 0.0:
        g = rng.standard_normal(m)
        n = np.linalg.norm(g)
    return g / n


def init_scheme(scheme, z0, r, i, k, *, rng=None, delta=None, context=None):
    """Start point i of k for the given scheme around z0."""
    z0 = np.asarray(z0, dtype=np.float64)
    m = len(z0)
    if r == 0.0:
        return z0.copy()
    if scheme == "s1":
        radius = rng.uniform(0.0, r)
        return z0 + radius * _uniform_direction(rng, m)
    if scheme == "s3":
        radius = abs(rng.normal(0.0, r / 2.0))
        while radius > r:
            radius = abs(rng.normal(0.0, r / 2.0))
        return z0 + radius * _uniform_direction(rng, m)
    if scheme == "s4":
        z = z0 + rng.uniform(-r, r, size=m)
        while np.linalg.norm(z - z0) > r:
            z = z0 + rng.uniform(-r, r, size=m)
        return z
    if scheme in ("s2", "s5"):
        if context is None or context.n_classes < 1:
            raise ValueError(f"scheme {scheme} needs an InitContext")
        c = context.n_classes
        y = i % c
        j = i // c + 1
        npaths = max(k // c, 1)
        eff_delta = delta if (delta is not None and math.isfinite(delta)) else r
        if scheme == "s2":
            return _s2_point(z0, y, j, npaths, eff_delta, context)
        return _s5_point(z0, y, j, npaths, eff_delta, context)
    raise ValueError(f"unknown initialization scheme {scheme!r}")


def _s2_point(z0, y, j, npaths, delta, ctx):
    mask = np.asarray(ctx.certain_labels) == y
    if not np.any(mask):
        raise ValueError(f"scheme s2: no certain training point in class {y}")
    latents = np.asarray(ctx.certain_latents)[mask]
    dists = np.linalg.norm(latents - z0, axis=1)
    zy = latents[int(np.argmin(dists))]
    denom = float(np.linalg.norm(zy - z0))
    if denom == 0.0:
        return z0.copy()
    return z0 + delta * (j / npaths) * (zy - z0) / denom


def _s5_point(z0, y, j, npaths, delta, ctx, n_steps=40):
    """Walk normalized ascent steps on p(class=y | decode(z)) out to radius delta,
    then return the point at arc-length fraction j/npaths along the path."""
    bundle = ctx.bundle
    step = delta / n_steps
    path = [z0.copy()]
    z = z0.copy()
    for _ in range(n_steps):
        zt = dc.Tensor(z, requires_grad=True)
        p = models.posterior_graph(bundle, models.decode_graph(bundle, zt))
        dc.pick(p, y).backward()
        g = zt.grad
        gn = float(np.linalg.norm(g))
        if gn == 0.0:
            break
        z = z + step * (g / gn)
        if np.linalg.norm(z - z0) > delta:
            z = project_to_ball(z, z0, delta)
            path.append(z.copy())
            break
        path.append(z.copy())
    frac = min(j / npaths, 1.0)
    idx = frac * (len(path) - 1)
    lo = int(math.floor(idx))
    hi = min(lo + 1, len(path) - 1)
    t = idx - lo
    return (1.0 - t) * path[lo] + t * path[hi]


def make_init_context(bundle, partition=None, train_latents=None, train_labels=None):
    ctx = InitContext(bundle=bundle, n_classes=bundle.c_classes)
    if partition is not None and train_latents is not None:
        certain = partition.flags == "certain"
        ctx.certain_latents = np.asarray(train_latents)[certain]
        ctx.certain_labels = np.asarray(partition.labels)[certain]
    elif train_latents is not None:
        ctx.certain_latents = np.asarray(train_latents)
        ctx.certain_labels = np.asarray(train_labels)
    return ctx


def make_starts(z0, config, context=None):
    """The k start points, each projected into the delta ball."""
    starts = []
    for i in range(config.k):
        rng = candidate_rng(config.seed, i)
        z = init_scheme(config.scheme, z0, config.r, i, config.k,
                        rng=rng, delta=config.delta, context=context)
        starts.append(project_to_ball(z, z0, config.delta))
    return starts


def _descend(z_start, z0, x0, bundle, config, x0_label, trace=False):
    """One projected-gradient descent; projection applied after every step."""
    z = np.array(z_start, dtype=np.float64)
    traj = [z.copy()] if trace else None
    for _ in range(config.iters):
        _, g = objective(z, x0, bundle, config.lambda_x, config.lambda_y, x0_label)
        z = project_to_ball(z - config.lr * g, z0, config.delta)
        if trace:
            traj.append(z.copy())
    return z, (np.stack(traj) if trace else None)


def make_candidate(z, x0, z0, bundle, config, start_index, x0_label, trajectory=None):
    x = models.decode(bundle, z)
    post = models.predict(bundle, x)
    h = models.entropy(post)
    d_x = float(np.sum(np.abs(x - x0)))
    d_y = float(-np.log(max(post.probs[x0_label], 1e-300)))
    rho = float(np.linalg.norm(z - z0))
    cost = h + config.lambda_x * d_x + config.lambda_y * d_y
    return CandidateCE(z=z, x=x, posterior=post.probs, entropy=h, d_x=d_x, d_y=d_y,
                       rho=rho, cost=cost, label=models.argmax_label(post.probs),
                       accepted=bool(h < config.h_threshold), start_index=start_index,
                       trajectory=trajectory)


def delta_clue(x0, bundle, config, context=None, trace=False):
    """k independent projected-gradient descents from scheme-chosen starts.

    Every terminal candidate is decoded and flagged accepted iff its
    entropy is below the configured threshold; an empty accepted set is a
    valid outcome.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    z0 = models.encode(bundle, x0)
    x0_label = models.argmax_label(models.predict(bundle, x0).probs)
    starts = make_starts(z0, config, context)
    candidates = []
    for i, zs in enumerate(starts):
        z, traj = _descend(zs, z0, x0, bundle, config, x0_label, trace)
        candidates.append(make_candidate(z, x0, z0, bundle, config, i, x0_label, traj))
    return CESet(candidates=candidates, config=config, x0=x0, z0=z0)


def label_distribution(ceset):
    """Length-c' simplex from inverse-square minimum cost per class.

    A class whose minimum cost is 0 receives all mass (split equally over
    zero-cost classes if several).
    """
    cands = ceset.accepted()
    if not cands:
        raise ValueError("label_distribution: no accepted candidates")
    c = len(cands[0].posterior)
    min_cost = {}
    for cand in cands:
        cur = min_cost.get(cand.label)
        if cur is None or cand.cost < cur:
            min_cost[cand.label] = cand.cost
    weights = np.zeros(c)
    zero_classes = [j for j, v in min_cost.items() if v == 0.0]
    if zero_classes:
        for j in zero_classes:
            weights[j] = 1.0
    else:
        for j, v in min_cost.items():
            weights[j] = 1.0 / (v * v)
    return weights / weights.sum()


def ceset_to_json(ceset, include_trajectories=False):
    """JSON-serializable export with config echo and per-candidate fields."""
    payload = {
        "config": asdict(ceset.config),
        "x0": [float(v) for v in ceset.x0],
        "z0": [float(v) for v in ceset.z0],
        "candidates": [],
    }
    for c in ceset.candidates:
        entry = {
            "z": [float(v) for v in c.z],
            "x": [float(v) for v in c.x],
            "posterior": [float(v) for v in c.posterior],
            "entropy": c.entropy,
            "d_x": c.d_x,
            "d_y": c.d_y,
            "rho": c.rho,
            "cost": c.cost,
            "label": c.label,
            "accepted": c.accepted,
            "start_index": c.start_index,
        }
        if include_trajectories and c.trajectory is not None:
            entry["trajectory"] = [[float(v) for v in row] for row in c.trajectory]
        payload["candidates"].append(entry)
    return payload


def dump_ceset(ceset, path, include_trajectories=False):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(ceset_to_json(ceset, include_trajectories), f, indent=1, sort_keys=True)


def ceset_from_json(payload):
    config = ExperimentConfig(**payload["config"])
    candidates = []
    for e in payload["candidates"]:
        traj = e.get("trajectory")
        candidates.append(CandidateCE(
            z=np.array(e["z"]), x=np.array(e["x"]),
            posterior=np.array(e["posterior"]), entropy=e["entropy"],
            d_x=e["d_x"], d_y=e["d_y"], rho=e["rho"], cost=e["cost"],
            label=e["label"], accepted=e["accepted"],
            start_index=e["start_index"],
            trajectory=np.array(traj) if traj is not None else None))
    return CESet(candidates=candidates, config=config,
                 x0=np.array(payload["x0"]), z0=np.array(payload["z0"]))


def load_ceset(path):
    with open(path, encoding="utf-8") as f:
        return ceset_from_json(json.load(f))
