"""Amortized latent translation mappers and the DBM/NN baselines.

A mapper is a single translation vector in latent space, trained once per
(source group, target group) pair; applying it to a new uncertain input is
one encode, one vector add, one decode, one predict — no optimization.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import models
from .clue import CandidateCE


@dataclass
class MapperParams:
    source_group: int
    target_group: int
    theta: np.ndarray  # latent translation, length m'
    lambda_theta: float
    loss_curve: list = field(default_factory=list)
    train_time_s: float = 0.0


@dataclass
class MapperHyperparams:
    lr: float = 0.05
    steps: int = 200


def mean_translation(x_uncertain, x_certain, bundle):
    """Latent difference-between-means: the mapper's initialization."""
    z_u = np.stack([models.encode(bundle, x) for x in x_uncertain])
    z_c = np.stack([models.encode(bundle, x) for x in x_certain])
    return z_c.mean(axis=0) - z_u.mean(axis=0)


def train_mapper(x_uncertain, x_certain, bundle, lambda_theta=0.1,
                 hyperparams=None, source_group=-1, target_group=-1):
    """Fit the translation by gradient descent on
    lambda_theta ||theta||_1 + mean_z min_x ||decode(z + theta) - x||_2^2.

    The min over the certain set is an exact linear scan each step; the
    minimizing point is held fixed within the step (subgradient of the min).
    The l1 term is handled by a proximal soft-threshold step, so very large
    lambda_theta drives theta exactly to zero instead of oscillating.
    theta starts at the latent difference between means.
    """
    if len(x_uncertain) == 0 or len(x_certain) == 0:
        side = "uncertain" if len(x_uncertain) == 0 else "certain"
        raise ValueError(f"train_mapper: empty {side} group")
    hp = hyperparams or MapperHyperparams()
    x_certain = np.asarray(x_certain, dtype=np.float64)
    z_u = np.stack([models.encode(bundle, x) for x in x_uncertain])
    z_c_mean = np.stack([models.encode(bundle, x) for x in x_certain]).mean(axis=0)
    theta = z_c_mean - z_u.mean(axis=0)

    t0 = time.perf_counter()
    curve = []
    for _ in range(hp.steps):
        tt = dc.Tensor(theta, requires_grad=True)
        shifted = dc.add(dc.Tensor(z_u), tt)  # broadcast theta over rows
        dec = models.decode_graph(bundle, shifted)
        # nearest certain point per row, held fixed within this step
        d2 = (np.sum(dec.data ** 2, axis=1)[:, None]
              - 2.0 * dec.data @ x_certain.T
              + np.sum(x_certain ** 2, axis=1)[None, :])
        targets = x_certain[np.argmin(d2, axis=1)]
        recon = dc.mul(dc.sq_norm(dc.sub(dec, dc.Tensor(targets))), 1.0 / len(z_u))
        curve.append(float(recon.data) + lambda_theta * float(np.abs(theta).sum()))
        recon.backward()
        stepped = theta - hp.lr * tt.grad
        theta = np.sign(stepped) * np.maximum(np.abs(stepped) - hp.lr * lambda_theta, 0.0)
    return MapperParams(source_group=source_group, target_group=target_group,
                        theta=theta, lambda_theta=lambda_theta, loss_curve=curve,
                        train_time_s=time.perf_counter() - t0)


def _candidate_from(x_ce, x, bundle, lambda_x, z=None):
    post = models.predict(bundle, x_ce)
    h = models.entropy(post)
    d_x = float(np.sum(np.abs(x_ce - x)))
    if z is None:
        z = models.encode(bundle, x_ce)
    z0 = models.encode(bundle, x)
    return CandidateCE(z=z, x=x_ce, posterior=post.probs, entropy=h, d_x=d_x,
                       d_y=0.0, rho=float(np.linalg.norm(z - z0)),
                       cost=h + lambda_x * d_x,
                       label=models.argmax_label(post.probs), accepted=True,
                       start_index=0)


def apply_mapper(mapper, x_uncertain, bundle, lambda_x=0.0):
    """One encode, one add, one decode, one predict; no iterative search."""
    x = np.asarray(x_uncertain, dtype=np.float64)
    z = models.encode(bundle, x)
    z_ce = z + mapper.theta
    x_ce = models.decode(bundle, z_ce)
    post = models.predict(bundle, x_ce)
    h = models.entropy(post)
    d_x = float(np.sum(np.abs(x_ce - x)))
    return CandidateCE(z=z_ce, x=x_ce, posterior=post.probs, entropy=h, d_x=d_x,
                       d_y=0.0, rho=float(np.linalg.norm(mapper.theta)),
                       cost=h + lambda_x * d_x,
                       label=models.argmax_label(post.probs), accepted=True,
                       start_index=0)


@dataclass
class DbmBaseline:
    space: str  # "input" | "latent"
    translation: np.ndarray

    def apply(self, x, bundle, lambda_x=0.0):
        x = np.asarray(x, dtype=np.float64)
        if self.space == "input":
            shifted = np.clip(x + self.translation, 0.0, 1.0)
            x_ce = models.decode(bundle, models.encode(bundle, shifted))
        else:
            z_ce = models.encode(bundle, x) + self.translation
            return _candidate_from(models.decode(bundle, z_ce), x, bundle,
                                   lambda_x, z=z_ce)
        return _candidate_from(x_ce, x, bundle, lambda_x)


def dbm_baseline(space, x_uncertain, x_certain, bundle):
    """Difference-between-means translation, in input or latent space."""
    if len(x_uncertain) == 0 or len(x_certain) == 0:
        side = "uncertain" if len(x_uncertain) == 0 else "certain"
        raise ValueError(f"dbm_baseline: empty {side} group")
    x_u = np.asarray(x_uncertain, dtype=np.float64)
    x_c = np.asarray(x_certain, dtype=np.float64)
    if space == "input":
        translation = x_c.mean(axis=0) - x_u.mean(axis=0)
    elif space == "latent":
        translation = mean_translation(x_u, x_c, bundle)
    else:
        raise ValueError(f"unknown space {space!r}")
    return DbmBaseline(space=space, translation=translation)


def nn_baseline(space, x_uncertain, x_certain, bundle, lambda_x=0.0,
                z_certain=None):
    """Nearest certain neighbor, in input or latent space.

    ``z_certain`` optionally carries precomputed certain-set latents so a
    timing harness can amortize the encoding across queries.
    """
    if len(x_certain) == 0:
        raise ValueError("nn_baseline: empty certain set")
    x = np.asarray(x_uncertain, dtype=np.float64)
    x_c = np.asarray(x_certain, dtype=np.float64)
    if space == "input":
        idx = int(np.argmin(np.linalg.norm(x_c - x, axis=1)))
        return _candidate_from(x_c[idx], x, bundle, lambda_x)
    if space == "latent":
        z = models.encode(bundle, x)
        z_c = (np.asarray(z_certain) if z_certain is not None
               else np.stack([models.encode(bundle, xc) for xc in x_c]))
        idx = int(np.argmin(np.linalg.norm(z_c - z, axis=1)))
        z_ce = z_c[idx]
        return _candidate_from(models.decode(bundle, z_ce), x, bundle, lambda_x, z=z_ce)
    raise ValueError(f"unknown space {space!r}")


def glam_pairs_from_ceset_files(cesets):
    """Uncertain inputs paired with their best accepted counterfactuals.

    ``cesets`` is a list of CESet objects (one per uncertain input, e.g.
    the recorded constrained-descent outputs); returns (x_uncertain rows,
    x_certain rows) for mapper training on explanation outputs.
    """
    xs_u, xs_c = [], []
    for cs in cesets:
        accepted = cs.accepted() or cs.candidates
        best = min(accepted, key=lambda c: c.cost)
        xs_u.append(cs.x0)
        xs_c.append(best.x)
    return np.stack(xs_u), np.stack(xs_c)


def mappers_from_cesets(cesets, source_labels, bundle, lambda_theta=0.0,
                        hyperparams=None, min_pairs=3):
    """Train one mapper per (source class, explanation label) group.

    Each uncertain input is paired with its best accepted counterfactual;
    pairs whose explanations land on the same class are pooled, and groups
    with fewer than ``min_pairs`` pairs are dropped (too few to average).
    """
    groups = {}
    for cs, src in zip(cesets, source_labels):
        accepted = cs.accepted() or cs.candidates
        best = min(accepted, key=lambda c: c.cost)
        key = (int(src), int(best.label))
        groups.setdefault(key, ([], []))
        groups[key][0].append(cs.x0)
        groups[key][1].append(best.x)
    mappers = []
    for (src, lab), (xs_u, xs_c) in sorted(groups.items()):
        if len(xs_u) < min_pairs:
            continue
        mappers.append(train_mapper(np.stack(xs_u), np.stack(xs_c), bundle,
                                    lambda_theta=lambda_theta,
                                    hyperparams=hyperparams,
                                    source_group=src, target_group=lab))
    return mappers


def pick_best_mapper(mappers, x, bundle, lambda_x=0.0, top_n=None):
    """Unknown-class inference: apply all (or the top_n classes by the
    classifier's prediction) and keep the lowest-cost counterfactual."""
    if top_n is not None:
        probs = models.predict(bundle, x).probs
        keep = set(np.argsort(-probs)[:top_n])
        pool = [m for m in mappers if m.target_group in keep] or list(mappers)
    else:
        pool = list(mappers)
    cands = [apply_mapper(m, x, bundle, lambda_x) for m in pool]
    return min(cands, key=lambda c: c.cost)


def evaluate_schemes(x_test_uncertain, schemes, lambda_x=0.0, repetitions=5):
    """Per-scheme H / d_x / cost rows plus median per-point inference time.

    ``schemes`` maps scheme name -> callable(x) -> CandidateCE. Timing is
    the median over ``repetitions`` of process wall clock per point.
    """
    rows = []
    for name, fn in schemes.items():
        for pid, x in enumerate(x_test_uncertain):
            times = []
            for _ in range(repetitions):
                t0 = time.perf_counter()
                ce = fn(x)
                times.append(time.perf_counter() - t0)
            t_ms = 1000.0 * float(np.median(times))
            cost = ce.entropy + lambda_x * ce.d_x
            rows.append({"scheme": name, "point": pid, "H": ce.entropy,
                         "d_x": ce.d_x, "cost": cost, "time_ms": t_ms,
                         "label": ce.label})
    return rows


def summarize_schemes(rows):
    """One summary dict per scheme: mean H, mean d_x, mean cost, median time."""
    out = []
    for name in dict.fromkeys(r["scheme"] for r in rows):
        sub = [r for r in rows if r["scheme"] == name]
        out.append({
            "scheme": name,
            "mean_H": float(np.mean([r["H"] for r in sub])),
            "mean_d_x": float(np.mean([r["d_x"] for r in sub])),
            "mean_cost": float(np.mean([r["cost"] for r in sub])),
            "median_time_ms": float(np.median([r["time_ms"] for r in sub])),
        })
    return out


def write_comparison_csv(rows, summaries, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write("scheme,point,H,d_x,cost,time_ms\n")
        for r in rows:
            f.write(f"{r['scheme']},{r['point']},{r['H']!r},{r['d_x']!r},"
                    f"{r['cost']!r},{r['time_ms']!r}\n")
        for s in summaries:
            f.write(f"{s['scheme']},summary,{s['mean_H']!r},{s['mean_d_x']!r},"
                    f"{s['mean_cost']!r},{s['median_time_ms']!r}\n")


def save_mapper(mapper, path):
    payload = {
        "source_group": mapper.source_group,
        "target_group": mapper.target_group,
        "lambda_theta": mapper.lambda_theta,
        "theta": [float(v) for v in mapper.theta],
        "loss_curve": [float(v) for v in mapper.loss_curve],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1, sort_keys=True)


def load_mapper(path):
    with open(path, encoding="utf-8") as f:
        p = json.load(f)
    return MapperParams(source_group=p["source_group"], target_group=p["target_group"],
                        theta=np.array(p["theta"], dtype=np.float64),
                        lambda_theta=p["lambda_theta"], loss_curve=p["loss_curve"])
