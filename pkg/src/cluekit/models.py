"""Desk-scale differentiable probabilistic models.

A ``ModelBundle`` holds a VAE (MLP encoder returning a latent mean and
log-variance, MLP decoder with a sigmoid output head) and an ensemble of
independent MLP classifiers. Predictive uncertainty is the entropy of the
ensemble-averaged class posterior. All forward passes run through the
autodiff engine, so gradients w.r.t. inputs and latents are available to
the explanation algorithms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import xlogy

from . import diffcore as dc

# crude instrumentation for the amortization claims: number of model
# forward passes by kind, incremented on every public forward call
EVAL_COUNTS = {"encode": 0, "decode": 0, "predict": 0}


def reset_eval_counts():
    for k in EVAL_COUNTS:
        EVAL_COUNTS[k] = 0


class TrainingDivergence(RuntimeError):
    """Raised when a training loss becomes non-finite."""


@dataclass
class MLP:
    """Weight matrices and biases for a plain feed-forward net."""

    weights: list  # list of np.ndarray, alternating W (in x out) per layer
    biases: list

    def n_layers(self):
        return len(self.weights)


@dataclass
class TrainingReport:
    loss_curve: list = field(default_factory=list)
    final_loss: float = 0.0
    mean_recon_l1: float = 0.0
    heldout_accuracy: float = 0.0
    entropy_histogram: list = field(default_factory=list)
    entropy_percentiles: dict = field(default_factory=dict)
    wall_time_s: float = 0.0


@dataclass
class ModelBundle:
    encoder: MLP  # d' -> ... -> 2 m' (mean, logvar)
    decoder: MLP  # m' -> ... -> d' logits (sigmoid applied on output)
    ensemble: list  # E MLPs, d' -> ... -> c' logits
    d_in: int
    m_latent: int
    c_classes: int
    n_members: int
    seed: int = 0
    vae_report: TrainingReport = field(default_factory=TrainingReport)
    ensemble_report: TrainingReport = field(default_factory=TrainingReport)


@dataclass
class Posterior:
    probs: np.ndarray  # length c' simplex, mean over members
    member_probs: np.ndarray  # E x c'


def _row(t):
    """View a vector node as a 1 x n matrix node."""
    row = dc.Tensor(t.data.reshape(1, -1), _parents=(t,), op="rowview")
    row._backward = lambda g: t._accum(g.reshape(t.shape))
    return row


def _flat(t):
    """View a 1 x n matrix node as a vector node."""
    flat = dc.Tensor(t.data.reshape(-1), _parents=(t,), op="flatview")
    flat._backward = lambda g: t._accum(g.reshape(t.shape))
    return flat


def _mlp_forward(mlp, x, hidden_act, out_act=None):
    vec = x.data.ndim == 1
    h = _row(x) if vec else x
    last = mlp.n_layers() - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = dc.affine(h, dc.as_tensor(w), dc.as_tensor(b))
        if i < last:
            h = hidden_act(h)
        elif out_act is not None:
            h = out_act(h)
    return _flat(h) if vec else h


def encode_graph(bundle, x):
    """Encoder mean as a graph node. ``x`` is a Tensor vector or matrix."""
    out = _mlp_forward(bundle.encoder, x, dc.tanh)
    m = bundle.m_latent
    if out.data.ndim == 1:
        return _slice_vec(out, 0, m)
    return _slice_cols(out, 0, m)


def _slice_vec(t, lo, hi):
    sel = np.zeros((t.shape[0], hi - lo))
    sel[lo:hi, :] = np.eye(hi - lo)
    # vector @ matrix via 2-D matmul on a 1-row view
    row = dc.Tensor(t.data.reshape(1, -1), _parents=(t,), op="rowview")
    row._backward = lambda g: t._accum(g.reshape(t.shape))
    out = dc.matmul(row, dc.Tensor(sel))
    flat = dc.Tensor(out.data.reshape(-1), _parents=(out,), op="flat")
    flat._backward = lambda g: out._accum(g.reshape(out.shape))
    return flat


def _slice_cols(t, lo, hi):
    sel = np.zeros((t.shape[1], hi - lo))
    sel[lo:hi, :] = np.eye(hi - lo)
    return dc.matmul(t, dc.Tensor(sel))


def _encode_full(bundle, x):
    """Mean and logvar graph nodes (training path)."""
    out = _mlp_forward(bundle.encoder, x, dc.tanh)
    m = bundle.m_latent
    if out.data.ndim == 1:
        return _slice_vec(out, 0, m), _slice_vec(out, m, 2 * m)
    return _slice_cols(out, 0, m), _slice_cols(out, m, 2 * m)


def decode_logits_graph(bundle, z):
    return _mlp_forward(bundle.decoder, z, dc.tanh)


def decode_graph(bundle, z):
    """Decoder output in [0,1] as a graph node."""
    return dc.sigmoid(decode_logits_graph(bundle, z))


def member_probs_graph(bundle, x, member):
    logits = _mlp_forward(bundle.ensemble[member], x, dc.relu)
    return dc.softmax(logits, axis=-1)


def posterior_graph(bundle, x):
    """Ensemble-mean class posterior as a graph node (vector input)."""
    probs = [member_probs_graph(bundle, x, e) for e in range(bundle.n_members)]
    acc = probs[0]
    for p in probs[1:]:
        acc = dc.add(acc, p)
    return dc.mul(acc, 1.0 / bundle.n_members)


def entropy_graph(p):
    """Shannon entropy of a strictly positive simplex node (softmax output)."""
    return dc.mul(dc.tsum(dc.mul(p, dc.log(p))), -1.0)


def encode(bundle, x):
    """Deterministic latent embedding: the encoder mean (no sampling)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != bundle.d_in:
        raise dc.ShapeError(f"encode: input length {x.shape[-1]} != d'={bundle.d_in}")
    EVAL_COUNTS["encode"] += 1
    return encode_graph(bundle, dc.Tensor(x)).data


def decode(bundle, z):
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != bundle.m_latent:
        raise dc.ShapeError(f"decode: latent length {z.shape[-1]} != m'={bundle.m_latent}")
    EVAL_COUNTS["decode"] += 1
    return decode_graph(bundle, dc.Tensor(z)).data


def predict(bundle, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != bundle.d_in:
        raise dc.ShapeError(f"predict: input length {x.shape[-1]} != d'={bundle.d_in}")
    EVAL_COUNTS["predict"] += 1
    member = np.stack([member_probs_graph(bundle, dc.Tensor(x), e).data
                       for e in range(bundle.n_members)])
    return Posterior(probs=member.mean(axis=0), member_probs=member)


def entropy(posterior):
    """H = -sum p log p in nats, with 0 log 0 := 0."""
    p = posterior.probs if isinstance(posterior, Posterior) else np.asarray(posterior, dtype=np.float64)
    if p.ndim != 1 or np.any(p < -1e-12) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"entropy: input is not a probability simplex (sum={p.sum():.6g})")
    return float(-np.sum(xlogy(p, p)))


def predict_entropy(bundle, x):
    return entropy(predict(bundle, x))


def argmax_label(probs):
    """Deterministic hard label: lowest class index wins ties."""
    return int(np.argmax(probs))


def _init_mlp(rng, sizes):
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        scale = np.sqrt(2.0 / (fan_in + fan_out))
        ws.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return MLP(weights=ws, biases=bs)


def _mlp_tensors(mlp):
    ts = []
    for i in range(mlp.n_layers()):
        ts.append(dc.Tensor(mlp.weights[i], requires_grad=True))
        ts.append(dc.Tensor(mlp.biases[i], requires_grad=True))
    return ts


def _mlp_forward_t(tensors, x, hidden_act, out_act=None):
    h = x
    n = len(tensors) // 2
    for i in range(n):
        h = dc.affine(h, tensors[2 * i], tensors[2 * i + 1])
        if i < n - 1:
            h = hidden_act(h)
        elif out_act is not None:
            h = out_act(h)
    return h


def _sgd_step(tensors, lr):
    for t in tensors:
        if t.grad is not None:
            t.data = t.data - lr * t.grad


def _write_back(mlp, tensors):
    for i in range(mlp.n_layers()):
        mlp.weights[i] = tensors[2 * i].data
        mlp.biases[i] = tensors[2 * i + 1].data


@dataclass
class VaeHyperparams:
    hidden: int = 64
    latent: int = 8
    lr: float = 0.05
    epochs: int = 60
    batch: int = 128
    recon: str = "bernoulli"  # or "l2"
    kl_weight: float = 0.1  # < 1 avoids posterior collapse at desk scale


def train_vae(dataset_inputs, hyperparams, seed):
    """Standard ELBO training with Gaussian reparameterization.

    Returns (encoder, decoder, report). The encoder's output layer stacks
    mean and log-variance. Divergence (non-finite loss) aborts.
    """
    x_all = np.asarray(dataset_inputs, dtype=np.float64)
    if x_all.size == 0:
        raise ValueError("train_vae: empty dataset")
    if x_all.min() < 0.0 or x_all.max() > 1.0:
        raise ValueError("train_vae: inputs must lie in [0,1]")
    hp = hyperparams
    d = x_all.shape[1]
    m = hp.latent
    rng = np.random.default_rng([seed, 0])
    enc = _init_mlp(rng, [d, hp.hidden, hp.hidden, 2 * m])
    dec = _init_mlp(rng, [m, hp.hidden, hp.hidden, d])
    enc_t = _mlp_tensors(enc)
    dec_t = _mlp_tensors(dec)
    params = enc_t + dec_t

    n = x_all.shape[0]
    curve = []
    for epoch in range(hp.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, hp.batch):
            idx = perm[lo:lo + hp.batch]
            xb = dc.Tensor(x_all[idx])
            h = _mlp_forward_t(enc_t, xb, dc.tanh)
            mu = _slice_cols(h, 0, m)
            logvar = _slice_cols(h, m, 2 * m)
            eps = rng.standard_normal((len(idx), m))
            z = dc.add(mu, dc.mul(dc.exp(dc.mul(logvar, 0.5)), dc.Tensor(eps)))
            logits = _mlp_forward_t(dec_t, z, dc.tanh)
            if hp.recon == "bernoulli":
                # cross-entropy from logits: softplus(a) - x*a (stable; valid for soft targets)
                recon = dc.tsum(dc.sub(dc.softplus(logits), dc.mul(xb, logits)))
            else:
                diff = dc.sub(dc.sigmoid(logits), xb)
                recon = dc.sq_norm(diff)
            kl = dc.mul(dc.tsum(dc.sub(dc.add(dc.mul(mu, mu), dc.exp(logvar)),
                                       dc.add(logvar, 1.0))), 0.5 * hp.kl_weight)
            loss = dc.mul(dc.add(recon, kl), 1.0 / len(idx))
            if not np.isfinite(loss.data):
                raise TrainingDivergence(f"VAE loss diverged at epoch {epoch}")
            loss.backward()
            _sgd_step(params, hp.lr)
            epoch_loss += float(loss.data) * len(idx)
        curve.append(epoch_loss / n)

    _write_back(enc, enc_t)
    _write_back(dec, dec_t)

    # reconstruction statistic on the training set
    h = _mlp_forward_t(enc_t, dc.Tensor(x_all), dc.tanh)
    mu = _slice_cols(h, 0, m).data
    xhat = dc.sigmoid(_mlp_forward_t(dec_t, dc.Tensor(mu), dc.tanh)).data
    mean_l1 = float(np.mean(np.sum(np.abs(xhat - x_all), axis=1)))

    report = TrainingReport(loss_curve=curve, final_loss=curve[-1], mean_recon_l1=mean_l1)
    return enc, dec, report


@dataclass
class EnsembleHyperparams:
    hidden: int = 32
    lr: float = 0.1
    epochs: int = 80
    batch: int = 128
    heldout_frac: float = 0.2


def train_ensemble(inputs, labels, n_members, hyperparams, seed):
    """Train E independent classifiers on cross-entropy from distinct inits."""
    x_all = np.asarray(inputs, dtype=np.float64)
    y_all = np.asarray(labels, dtype=np.int64)
    c = int(y_all.max()) + 1
    if y_all.min() < 0:
        raise ValueError("train_ensemble: labels must be non-negative")
    hp = hyperparams
    d = x_all.shape[1]
    split_rng = np.random.default_rng([seed, 999])
    perm = split_rng.permutation(len(x_all))
    n_held = max(1, int(len(x_all) * hp.heldout_frac))
    held, train = perm[:n_held], perm[n_held:]
    xt, yt = x_all[train], y_all[train]

    members = []
    for e in range(n_members):
        rng = np.random.default_rng([seed, 1 + e])
        mlp = _init_mlp(rng, [d, hp.hidden, hp.hidden, c])
        ts = _mlp_tensors(mlp)
        onehot = np.eye(c)[yt]
        for epoch in range(hp.epochs):
            order = rng.permutation(len(xt))
            for lo in range(0, len(xt), hp.batch):
                idx = order[lo:lo + hp.batch]
                xb = dc.Tensor(xt[idx])
                logits = _mlp_forward_t(ts, xb, dc.relu)
                p = dc.softmax(logits, axis=-1)
                loss = dc.mul(dc.tsum(dc.mul(dc.Tensor(onehot[idx]), dc.log(p))), -1.0 / len(idx))
                if not np.isfinite(loss.data):
                    raise TrainingDivergence(f"ensemble member {e} diverged at epoch {epoch}")
                loss.backward()
                _sgd_step(ts, hp.lr)
        _write_back(mlp, ts)
        members.append(mlp)

    # held-out accuracy + training entropy histogram of the full ensemble
    def _post(xs):
        stacks = []
        for mlp in members:
            logits = _mlp_forward(mlp, dc.Tensor(xs), dc.relu)
            stacks.append(dc.softmax(logits, axis=-1).data)
        return np.mean(np.stack(stacks), axis=0)

    p_held = _post(x_all[held])
    acc = float(np.mean(np.argmax(p_held, axis=1) == y_all[held]))
    p_train = _post(xt)
    ents = -np.sum(xlogy(p_train, p_train), axis=1)
    report = TrainingReport(
        heldout_accuracy=acc,
        entropy_histogram=[float(v) for v in ents],
        entropy_percentiles={str(q): float(np.percentile(ents, q)) for q in (20, 50, 80)},
    )
    return members, report


def train_bundle(dataset, vae_hp=None, ens_hp=None, n_members=5, seed=0):
    """Train VAE + ensemble on a Dataset and assemble a ModelBundle."""
    vae_hp = vae_hp or VaeHyperparams()
    ens_hp = ens_hp or EnsembleHyperparams()
    xt, yt = dataset.train_inputs(), dataset.train_labels()
    enc, dec, vrep = train_vae(xt, vae_hp, seed)
    members, erep = train_ensemble(xt, yt, n_members, ens_hp, seed)
    c = int(np.max(dataset.labels)) + 1
    return ModelBundle(
        encoder=enc, decoder=dec, ensemble=members,
        d_in=xt.shape[1], m_latent=vae_hp.latent, c_classes=c,
        n_members=n_members, seed=seed, vae_report=vrep, ensemble_report=erep,
    )


# ---------------------------------------------------------------------------
# persistence: one JSON manifest + one raw little-endian float64 blob holding
# every parameter tensor in manifest order


def _bundle_tensors(bundle):
    out = []
    for name, mlp in [("encoder", bundle.encoder), ("decoder", bundle.decoder)]:
        for i in range(mlp.n_layers()):
            out.append((f"{name}.w{i}", mlp.weights[i]))
            out.append((f"{name}.b{i}", mlp.biases[i]))
    for e, mlp in enumerate(bundle.ensemble):
        for i in range(mlp.n_layers()):
            out.append((f"ensemble{e}.w{i}", mlp.weights[i]))
            out.append((f"ensemble{e}.b{i}", mlp.biases[i]))
    return out


def save_bundle(bundle, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = _bundle_tensors(bundle)
    manifest = {
        "dims": {"d_in": bundle.d_in, "m_latent": bundle.m_latent,
                 "c_classes": bundle.c_classes, "n_members": bundle.n_members},
        "seed": bundle.seed,
        "architecture": {
            "encoder": [w.shape for w in bundle.encoder.weights],
            "decoder": [w.shape for w in bundle.decoder.weights],
            "ensemble": [w.shape for w in bundle.ensemble[0].weights],
        },
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
        "vae_report": {"loss_curve": bundle.vae_report.loss_curve,
                       "final_loss": bundle.vae_report.final_loss,
                       "mean_recon_l1": bundle.vae_report.mean_recon_l1},
        "ensemble_report": {"heldout_accuracy": bundle.ensemble_report.heldout_accuracy,
                            "entropy_percentiles": bundle.ensemble_report.entropy_percentiles,
                            "entropy_histogram": bundle.ensemble_report.entropy_histogram},
    }
    with open(directory / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True, default=list)
    with open(directory / "weights.bin", "wb") as f:
        for _, t in tensors:
            f.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_bundle(directory):
    directory = Path(directory)
    with open(directory / "manifest.json", encoding="utf-8") as f:
        manifest = json.load(f)
    dims = manifest["dims"]
    blob = np.frombuffer((directory / "weights.bin").read_bytes(), dtype="<f8")
    arrays = {}
    offset = 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        arrays[entry["name"]] = blob[offset:offset + size].reshape(shape).astype(np.float64)
        offset += size

    def _mlp(prefix, n_layers):
        return MLP(weights=[arrays[f"{prefix}.w{i}"] for i in range(n_layers)],
                   biases=[arrays[f"{prefix}.b{i}"] for i in range(n_layers)])

    n_enc = len(manifest["architecture"]["encoder"])
    n_dec = len(manifest["architecture"]["decoder"])
    n_mem = len(manifest["architecture"]["ensemble"])
    vrep = TrainingReport(loss_curve=manifest["vae_report"]["loss_curve"],
                          final_loss=manifest["vae_report"]["final_loss"],
                          mean_recon_l1=manifest["vae_report"]["mean_recon_l1"])
    erep = TrainingReport(heldout_accuracy=manifest["ensemble_report"]["heldout_accuracy"],
                          entropy_percentiles=manifest["ensemble_report"]["entropy_percentiles"],
                          entropy_histogram=manifest["ensemble_report"].get("entropy_histogram", []))
    return ModelBundle(
        encoder=_mlp("encoder", n_enc),
        decoder=_mlp("decoder", n_dec),
        ensemble=[_mlp(f"ensemble{e}", n_mem) for e in range(dims["n_members"])],
        d_in=dims["d_in"], m_latent=dims["m_latent"], c_classes=dims["c_classes"],
        n_members=dims["n_members"], seed=manifest["seed"],
        vae_report=vrep, ensemble_report=erep,
    )
