"""ADAM, minibatch composition, the two GAN training algorithms and checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .errors import CheckpointError, ConfigError, DataError, ShapeError, TrainingError
from .layers import TRAIN
from .models import build_discriminator, build_generator
from .tensor import RandomSource, Tape, Tensor, concat

log = logging.getLogger(__name__)

ALGORITHMS = ("ssgan", "vanilla", "supervised")
METRIC_COLUMNS = ("iter", "epoch", "theta", "delta", "total", "gen_loss", "top1", "top5", "top10")


# ---------------------------------------------------------------- ADAM

@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyper(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t}


def adam_step(state, params, grads):
    """One bias-corrected ADAM update, in place on ``params`` (name -> Tensor).

    ``grads`` maps the same names to arrays.
    """
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}",
                             field=name)
        g = g.astype(p.dtype, copy=False)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data = p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params


# ---------------------------------------------------------------- config

@dataclass
class TrainingConfig:
    algorithm: str = "ssgan"
    batch_size: int = 64
    iterations: int = 1000
    k_steps: int = 1
    unlabeled_fraction: float = 0.0
    eval_interval: int = 100
    checkpoint_interval: int = 0
    generator_loss: str = "feature_matching"
    smoothing: float = 0.9
    seed: int = 0
    lr_d: float = 2e-4
    lr_g: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    latent_dim: int = 100
    noise_std: float = 0.5
    channel_widths: tuple = ()
    time_budget: float = 0.0
    eval_batch_size: int = 256

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}", field="algorithm")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be even and >= 2", field="batch_size")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0", field="iterations")
        if self.k_steps < 1:
            raise ConfigError("k_steps must be >= 1", field="k_steps")
        if not 0.0 <= self.unlabeled_fraction <= 1.0:
            raise ConfigError("unlabeled_fraction must lie in [0, 1]", field="unlabeled_fraction")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be >= 1", field="eval_interval")
        if self.generator_loss not in L.GENERATOR_MODES:
            raise ConfigError(f"generator_loss must be one of {L.GENERATOR_MODES}",
                              field="generator_loss")
        if not 0.0 < self.smoothing <= 1.0:
            raise ConfigError("smoothing must lie in (0, 1]", field="smoothing")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0", field="noise_std")
        for name in ("lr_d", "lr_g", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0", field=name)
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1", field="latent_dim")
        if self.time_budget < 0:
            raise ConfigError("time_budget must be >= 0", field="time_budget")
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["channel_widths"] = list(self.channel_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown training keys {sorted(unknown)}", field=sorted(unknown)[0])
        d = dict(d)
        if "channel_widths" in d:
            d["channel_widths"] = tuple(d["channel_widths"])
        return cls(**d)


# ---------------------------------------------------------------- minibatches

@dataclass
class Minibatch:
    images: np.ndarray
    labels: np.ndarray  # 1..k, 0 where unlabeled

    @property
    def labeled_mask(self):
        return self.labels > 0

    def labeled(self):
        mask = self.labeled_mask
        return self.images[mask], self.labels[mask]

    def unlabeled(self):
        return self.images[~self.labeled_mask]


class TrainPool:
    """Stacked training arrays plus an epoch sampler that reshuffles on exhaustion."""

    def __init__(self, images, labels, rng):
        if len(images) == 0:
            raise DataError("training split is empty", field="train")
        self.images = np.asarray(images)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.rng = rng
        self.order = rng.permutation(len(self.images))
        self.cursor = 0

    @classmethod
    def from_dataset(cls, dataset, rng, labeled_only=False, dtype=np.float32):
        samples = [s for s in dataset.train if s.label is not None or not labeled_only]
        if not samples:
            raise DataError("training split has no usable samples", field="train")
        images = np.stack([s.image for s in samples]).astype(dtype)
        labels = np.array([s.label or 0 for s in samples], dtype=np.int64)
        return cls(images, labels, rng)

    def __len__(self):
        return len(self.images)

    def draw(self, m):
        n = len(self.images)
        if n < m:
            idx = self.rng.integers(n, size=m)
        else:
            parts = []
            need = m
            while need:
                take = self.order[self.cursor:self.cursor + need]
                parts.append(take)
                need -= len(take)
                self.cursor += len(take)
                if self.cursor >= n:
                    self.order = self.rng.permutation(n)
                    self.cursor = 0
            idx = np.concatenate(parts)
        return Minibatch(self.images[idx], self.labels[idx])

    def get_state(self):
        return {"order": self.order.tolist(), "cursor": self.cursor, "rng": self.rng.get_state()}

    def set_state(self, state):
        self.order = np.asarray(state["order"], dtype=np.int64)
        self.cursor = int(state["cursor"])
        self.rng.set_state(state["rng"])


def compose_minibatch(pool, m, rng=None):
    """Draw ``m`` real samples from the pooled labeled+unlabeled split.

    ``pool`` is a :class:`TrainPool` or a Dataset (wrapped with ``rng``).
    Returns a :class:`Minibatch`; its ``labeled()`` / ``unlabeled()`` give the two parts.
    """
    if not isinstance(pool, TrainPool):
        if rng is None:
            raise DataError("a Dataset needs a RandomSource to sample from", field="rng")
        pool = TrainPool.from_dataset(pool, rng)
    return pool.draw(m)


# ---------------------------------------------------------------- state

class TrainState:
    """Everything needed to continue training bit-for-bit."""

    def __init__(self, g, d, config, adam_g=None, adam_d=None, iteration=0):
        self.g, self.d, self.config = g, d, config
        root = RandomSource(config.seed)
        self.latent_rng = root.fork("latent")
        self.layer_rng = root.fork("layer_noise")
        self.sample_rng = root.fork("sampling")
        self.adam_g = adam_g or AdamState(config.lr_g, config.beta1, config.beta2, config.adam_eps)
        self.adam_d = adam_d or AdamState(config.lr_d, config.beta1, config.beta2, config.adam_eps)
        self.iteration = iteration
        self.pool = None

    def latent(self, m):
        return Tensor(self.latent_rng.normal((m, self.g.latent_dim), dtype=self._dtype()))

    def _dtype(self):
        return next(iter(self.d.parameters().values())).dtype


def _real_fake_split(out, m):
    return out.rows(slice(0, m)), out.rows(slice(m, None))


def ssgan_step(g, d, batch, config, adam_g, adam_d, latent_rng, layer_rng):
    """One iteration of the semi-supervised GAN algorithm.

    Discriminator: descend theta (labeled reals) + delta (all reals vs. fakes).
    Generator: fresh noise, descend ``config.generator_loss`` with D frozen.
    """
    m = len(batch.images)
    dtype = next(iter(d.parameters().values())).dtype
    real = Tensor(batch.images.astype(dtype, copy=False))
    mask = batch.labeled_mask

    z = Tensor(latent_rng.normal((m, g.latent_dim), dtype=dtype))
    fake = g.forward(z, TRAIN).detach()
    d_params = d.parameters()
    with Tape() as tape:
        out = d.forward(concat([real, fake]), TRAIN, layer_rng)
        real_out, fake_out = _real_fake_split(out, m)
        if mask.any():
            theta = L.supervised_loss(real_out.rows(np.flatnonzero(mask)), batch.labels[mask],
                                      smoothing=config.smoothing)
        else:
            theta = Tensor(np.zeros((), dtype=dtype))
        delta = L.unsupervised_loss(real_out, fake_out)
        total = L.total_loss(theta, delta)
    grads = tape.backward(total, list(d_params.values()))
    adam_step(adam_d, d_params, dict(zip(d_params, grads)))

    z = Tensor(latent_rng.normal((m, g.latent_dim), dtype=dtype))
    g_params = g.parameters()
    d.set_stat_tracking(False)
    try:
        with Tape() as tape:
            fake = g.forward(z, TRAIN)
            out = d.forward(concat([real, fake]), TRAIN, layer_rng)
            real_out, fake_out = _real_fake_split(out, m)
            gen = L.generator_loss(config.generator_loss, real_out, fake_out)
    finally:
        d.set_stat_tracking(True)
    grads = tape.backward(gen, list(g_params.values()))
    adam_step(adam_g, g_params, dict(zip(g_params, grads)))
    return L.LossReport.from_terms(theta.item(), delta.item(), gen.item())


def vanilla_gan_step(g, d, pool, config, adam_g, adam_d, latent_rng, layer_rng):
    """One iteration of the original GAN algorithm with a sigmoid discriminator.

    ``k_steps`` discriminator ascents (as descent on the negated objective),
    then one generator descent; each sub-step draws fresh noise.
    Returns ``(d_objective, g_objective)`` of the last sub-steps.
    """
    dtype = next(iter(d.parameters().values())).dtype
    d_params = d.parameters()
    m = config.batch_size
    d_obj = None
    for _ in range(config.k_steps):
        z = Tensor(latent_rng.normal((m, g.latent_dim), dtype=dtype))
        batch = pool.draw(m) if isinstance(pool, TrainPool) else pool
        real = Tensor(batch.images.astype(dtype, copy=False))
        fake = g.forward(z, TRAIN).detach()
        with Tape() as tape:
            out = d.forward(concat([real, fake]), TRAIN, layer_rng)
            p = out.probs.reshape(-1)
            obj = L.vanilla_d_objective(p[:len(real)], p[len(real):])
            loss = -obj
        grads = tape.backward(loss, list(d_params.values()))
        adam_step(adam_d, d_params, dict(zip(d_params, grads)))
        d_obj = obj.item()

    z = Tensor(latent_rng.normal((m, g.latent_dim), dtype=dtype))
    g_params = g.parameters()
    d.set_stat_tracking(False)
    try:
        with Tape() as tape:
            out = d.forward(g.forward(z, TRAIN), TRAIN, layer_rng)
            g_obj = L.vanilla_g_objective(out.probs.reshape(-1))
    finally:
        d.set_stat_tracking(True)
    grads = tape.backward(g_obj, list(g_params.values()))
    adam_step(adam_g, g_params, dict(zip(g_params, grads)))
    return d_obj, g_obj.item()


def supervised_step(d, batch, config, adam_d, layer_rng):
    """Baseline: descend only the supervised term on a fully labeled batch."""
    dtype = next(iter(d.parameters().values())).dtype
    d_params = d.parameters()
    real = Tensor(batch.images.astype(dtype, copy=False))
    with Tape() as tape:
        out = d.forward(real, TRAIN, layer_rng)
        theta = L.supervised_loss(out, batch.labels, smoothing=config.smoothing)
    grads = tape.backward(theta, list(d_params.values()))
    adam_step(adam_d, d_params, dict(zip(d_params, grads)))
    return L.LossReport.from_terms(theta.item(), 0.0, 0.0)


# ---------------------------------------------------------------- checkpoints

FORMAT_VERSION = 1
MAGIC = b"SSGN"
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    tensors: dict
    iteration: int
    state: dict
    version: int = FORMAT_VERSION


def make_checkpoint(ts):
    tensors = {}
    tensors.update(ts.g.state_dict())
    tensors.update(ts.d.state_dict())
    for prefix, adam in (("adam_g", ts.adam_g), ("adam_d", ts.adam_d)):
        for name, arr in adam.m.items():
            tensors[f"{prefix}.m.{name}"] = arr.copy()
        for name, arr in adam.v.items():
            tensors[f"{prefix}.v.{name}"] = arr.copy()
    state = {
        "config": ts.config.to_dict(),
        "generator": ts.g.config(),
        "discriminator": ts.d.config(),
        "adam_g": ts.adam_g.hyper(),
        "adam_d": ts.adam_d.hyper(),
        "rng": {"latent": ts.latent_rng.get_state(), "layer_noise": ts.layer_rng.get_state()},
        "pool": ts.pool.get_state() if ts.pool is not None else None,
    }
    return Checkpoint(tensors, ts.iteration, state)


def restore_state(ckpt, dtype=None):
    """Rebuild a :class:`TrainState` (models, optimizers, rng streams) from a checkpoint."""
    st = ckpt.state
    config = TrainingConfig.from_dict(st["config"])
    if dtype is None:
        first = next(iter(ckpt.tensors.values()))
        dtype = first.dtype
    gc, dc = st["generator"], st["discriminator"]
    g = build_generator(gc["latent_dim"], tuple(gc["image_shape"]), gc["channel_widths"], 0, dtype)
    d = build_discriminator(dc["num_classes"], tuple(dc["image_shape"]), dc["channel_widths"],
                            dc["noise_std"], 0, dc["head"], dtype)
    g.load_state_dict(ckpt.tensors)
    d.load_state_dict(ckpt.tensors)
    ts = TrainState(g, d, config, iteration=ckpt.iteration)
    for prefix, adam in (("adam_g", ts.adam_g), ("adam_d", ts.adam_d)):
        h = st[prefix]
        adam.lr, adam.beta1, adam.beta2, adam.eps, adam.t = (
            h["lr"], h["beta1"], h["beta2"], h["eps"], h["t"])
        for key, arr in ckpt.tensors.items():
            if key.startswith(prefix + ".m."):
                adam.m[key[len(prefix) + 3:]] = arr.copy()
            elif key.startswith(prefix + ".v."):
                adam.v[key[len(prefix) + 3:]] = arr.copy()
    ts.latent_rng.set_state(st["rng"]["latent"])
    ts.layer_rng.set_state(st["rng"]["layer_noise"])
    ts.pending_pool_state = st.get("pool")
    return ts


def save_checkpoint(ckpt, path):
    """Write the binary checkpoint format (see README for the byte layout)."""
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", ckpt.version, len(ckpt.tensors))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}", field=name)
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += struct.pack("<B", _DTYPE_CODES[dt])
        buf += np.ascontiguousarray(arr, dtype=dt).tobytes()
    buf += struct.pack("<Q", ckpt.iteration)
    blob = json.dumps(ckpt.state, sort_keys=True).encode("utf-8")
    buf += struct.pack("<I", len(blob)) + blob
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(buf))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated while reading {what}", field=what)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic bytes; not a checkpoint file", field="magic")
    version, count = r.unpack("<II", "header")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", field="version")
    tensors = {}
    for i in range(count):
        (nlen,) = r.unpack("<H", f"tensor[{i}].name_length")
        try:
            name = r.take(nlen, f"tensor[{i}].name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"tensor[{i}] name is not UTF-8", field=f"tensor[{i}].name") from None
        (rank,) = r.unpack("<B", f"{name}.rank")
        dims = r.unpack(f"<{rank}Q", f"{name}.dims")
        (code,) = r.unpack("<B", f"{name}.dtype")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name!r}", field=f"{name}.dtype")
        dt = _CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        payload = r.take(nbytes, f"{name}.payload")
        tensors[name] = np.frombuffer(payload, dtype=dt).reshape(dims).copy()
    (iteration,) = r.unpack("<Q", "iteration")
    (blen,) = r.unpack("<I", "state_length")
    try:
        state = json.loads(r.take(blen, "state").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError("state block is not valid JSON", field="state") from None
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after state block", field="state")
    return Checkpoint(tensors, iteration, state, version)


def param_digest(params):
    h = hashlib.sha256()
    for name, p in params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- training loop

class CsvMetricsSink:
    """Appends one row per iteration with the fixed metrics header."""

    def __init__(self, path, append=False):
        exists = append and os.path.exists(path)
        self._fh = open(path, "a" if append else "w", newline="")
        self._writer = csv.DictWriter(self._fh, fieldnames=METRIC_COLUMNS)
        if not exists:
            self._writer.writeheader()

    def write(self, row):
        self._writer.writerow({k: _fmt(row.get(k)) for k in METRIC_COLUMNS})

    def close(self):
        self._fh.close()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def new_state(g, d, config):
    config.validate()
    return TrainState(g, d, config)


def train(g, d, dataset, config, sinks=(), resume=None, out_dir=None):
    """Run ``config.iterations`` iterations of the configured algorithm.

    Evaluates on ``dataset.test`` every ``eval_interval`` epochs, where one
    epoch is ceil(train_size / batch_size) iterations. Returns the final
    :class:`Checkpoint` and the list of evaluation rows.

    ``resume`` is a :class:`TrainState` (e.g. from :func:`restore_state`);
    its models and saved config replace ``g``, ``d`` and ``config``, except
    that ``config.iterations`` and ``config.time_budget`` still set the stopping point.
    """
    from .evaluation import evaluate

    if resume is not None:
        ts = resume
        if config is not None:
            ts.config = dataclasses.replace(ts.config, iterations=config.iterations,
                                            time_budget=config.time_budget)
        config = ts.config
    else:
        ts = new_state(g, d, config)
    config.validate()
    if config.algorithm == "vanilla" and ts.d.head != "sigmoid":
        raise ConfigError("vanilla algorithm needs a sigmoid-head discriminator", field="algorithm")
    if config.algorithm != "vanilla" and ts.d.head != "softmax":
        raise ConfigError(f"{config.algorithm} needs a k+1 softmax discriminator", field="algorithm")
    if ts.pool is None:
        ts.pool = TrainPool.from_dataset(dataset, ts.sample_rng,
                                         labeled_only=config.algorithm == "supervised",
                                         dtype=ts._dtype())
        pending = getattr(ts, "pending_pool_state", None)
        if pending:
            ts.pool.set_state(pending)
            ts.sample_rng = ts.pool.rng
    per_epoch = math.ceil(len(ts.pool) / config.batch_size)
    eval_every = config.eval_interval * per_epoch
    history = []
    started = time.monotonic()

    def checkpoint(tag):
        ckpt = make_checkpoint(ts)
        if out_dir is not None:
            save_checkpoint(ckpt, os.path.join(out_dir, f"{tag}.ssgn"))
        return ckpt

    ckpt = checkpoint("initial") if ts.iteration == 0 and out_dir is not None else None
    while ts.iteration < config.iterations:
        if config.time_budget and time.monotonic() - started >= config.time_budget:
            log.info("time budget %.1fs reached at iteration %d", config.time_budget, ts.iteration)
            break
        row = _one_iteration(ts)
        ts.iteration += 1
        row["iter"] = ts.iteration
        row["epoch"] = (ts.iteration - 1) // per_epoch + 1
        if ts.iteration % eval_every == 0 and dataset.test:
            report = evaluate(ts.d, dataset.test, config.eval_batch_size) \
                if ts.d.head == "softmax" else None
            if report is not None:
                row.update(top1=report.top1, top5=report.top5, top10=report.top10)
                history.append({"iter": ts.iteration, "epoch": row["epoch"], "top1": report.top1,
                                "top5": report.top5, "top10": report.top10})
        try:
            for sink in sinks:
                sink.write(row)
        except Exception as exc:
            ckpt = checkpoint("last")
            raise TrainingError(f"metrics sink failed at iteration {ts.iteration}: {exc}",
                                field="sinks") from exc
        if config.checkpoint_interval and ts.iteration % config.checkpoint_interval == 0:
            checkpoint(f"ckpt_{ts.iteration:06d}")
    if ts.iteration == 0 and ckpt is not None:
        return ckpt, history  # nothing trained: the initial checkpoint is the only one
    ckpt = checkpoint("last")
    return ckpt, history


def _one_iteration(ts):
    cfg = ts.config
    if cfg.algorithm == "ssgan":
        batch = ts.pool.draw(cfg.batch_size)
        rep = ssgan_step(ts.g, ts.d, batch, cfg, ts.adam_g, ts.adam_d, ts.latent_rng, ts.layer_rng)
        return {"theta": rep.theta, "delta": rep.delta, "total": rep.total, "gen_loss": rep.gen_loss}
    if cfg.algorithm == "supervised":
        batch = ts.pool.draw(cfg.batch_size)
        rep = supervised_step(ts.d, batch, cfg, ts.adam_d, ts.layer_rng)
        return {"theta": rep.theta, "delta": rep.delta, "total": rep.total, "gen_loss": None}
    d_obj, g_obj = vanilla_gan_step(ts.g, ts.d, ts.pool, cfg, ts.adam_g, ts.adam_d,
                                    ts.latent_rng, ts.layer_rng)
    return {"theta": None, "delta": -d_obj, "total": -d_obj, "gen_loss": g_obj}
