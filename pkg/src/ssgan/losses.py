"""Objectives for the K+1-class semi-supervised GAN and the vanilla baseline.

Labels are 1-based class indices in 1..k; logit column k (0-based) is the fake
class. All probabilities are clamped to [PROB_EPS, 1 - PROB_EPS] before a log.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError, SSGANError
from .tensor import Tensor

PROB_EPS = 1e-7


@dataclass
class LossReport:
    theta: float
    delta: float
    total: float
    gen_loss: float

    @classmethod
    def from_terms(cls, theta, delta, gen_loss):
        theta, delta = float(theta), float(delta)
        return cls(theta, delta, theta + delta, float(gen_loss))


def _zero(like):
    return Tensor(np.zeros((), dtype=like.dtype))


def _clamped_log(p):
    return T.log(T.clip(p, PROB_EPS, 1.0 - PROB_EPS))


def _labels_index(labels, k):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    bad = (labels < 1) | (labels > k)
    if bad.any():
        raise SSGANError(f"labels must lie in 1..{k}; got {labels[bad][0]} "
                         "(the fake class k+1 is never a valid target)", field="labels")
    return labels - 1


def apply_label_smoothing(targets, alpha=0.9):
    """One-sided smoothing: positive entries become ``alpha``, zeros stay zero."""
    if not 0.0 < alpha <= 1.0:
        raise SSGANError(f"alpha must lie in (0, 1], got {alpha}", field="alpha")
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if t.ndim != 2 or not (np.isin(t, (0.0, 1.0)).all() and (t.sum(axis=1) == 1).all()):
        raise SSGANError("targets must be one-hot rows", field="one_hot_targets")
    return Tensor(t * alpha)


def supervised_loss(out, labels, smoothing=None):
    """Mean negative log-likelihood of the label, renormalized over the k real classes.

    With ``smoothing=alpha`` the one-hot targets are scaled to ``alpha``
    before the cross-entropy. An empty labeled set contributes 0.
    """
    logits = out.logits
    k = logits.shape[1] - 1
    idx = _labels_index(labels, k)
    if idx.size == 0:
        return _zero(logits)
    if logits.shape[0] != idx.size:
        raise ShapeError(f"{logits.shape[0]} outputs but {idx.size} labels", field="labels")
    real = logits[:, :k]
    logp = T.log_softmax(real, axis=1)
    onehot = np.zeros((idx.size, k))
    onehot[np.arange(idx.size), idx] = 1.0
    if smoothing is not None:
        onehot = apply_label_smoothing(onehot, smoothing).data
    target = Tensor(onehot.astype(logits.dtype))
    return -(logp * target).sum() / idx.size


def unsupervised_loss(real_out, fake_out):
    """GAN term: push real samples out of the fake class and generated ones into it.

    -mean_real log(1 - p_fake) - mean_fake log p_fake.
    """
    k = real_out.probs.shape[1] - 1
    terms = []
    if real_out.probs.shape[0]:
        terms.append(-_clamped_log(1.0 - real_out.probs[:, k]).mean())
    if fake_out.probs.shape[0]:
        terms.append(-_clamped_log(fake_out.probs[:, k]).mean())
    if not terms:
        return _zero(real_out.probs)
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


def unsupervised_loss_via_real_mass(real_out, fake_out):
    """Same quantity as :func:`unsupervised_loss`, through log of the summed real-class mass.

    Uses logsumexp on the logits, so it is unclamped; it exists as an
    independent route for checking the normalization identity.
    """
    logits_r, logits_f = real_out.logits, fake_out.logits
    k = logits_r.shape[1] - 1
    real_mass = T.logsumexp(logits_r[:, :k], axis=1) - T.logsumexp(logits_r, axis=1)
    fake_mass = logits_f[:, k] - T.logsumexp(logits_f, axis=1)
    return -real_mass.mean() - fake_mass.mean()


def total_loss(theta, delta):
    return theta + delta


def feature_matching_loss(real_features, fake_features):
    """Squared L2 distance between the batch means of two feature matrices."""
    if real_features.ndim != 2 or fake_features.ndim != 2 \
            or real_features.shape[1] != fake_features.shape[1]:
        raise ShapeError(f"feature widths differ: {real_features.shape} vs {fake_features.shape}",
                         field="fake_features")
    diff = real_features.mean(axis=0) - fake_features.mean(axis=0)
    return T.square(diff).sum()


def vanilla_d_objective(d_real, d_fake):
    """Value the discriminator ascends: mean log D(x) + mean log(1 - D(G(z)))."""
    return _clamped_log(d_real).mean() + _clamped_log(1.0 - d_fake).mean()


def vanilla_g_objective(d_fake):
    """Value the generator descends: mean log(1 - D(G(z)))."""
    return _clamped_log(1.0 - d_fake).mean()


GENERATOR_MODES = ("feature_matching", "nonsaturating")


def generator_loss(mode, real_out, fake_out):
    if mode == "feature_matching":
        return feature_matching_loss(real_out.features.detach(), fake_out.features)
    if mode == "nonsaturating":
        k = fake_out.probs.shape[1] - 1
        return -_clamped_log(1.0 - fake_out.probs[:, k]).mean()
    raise SSGANError(f"unknown generator loss mode {mode!r}; choose from {GENERATOR_MODES}",
                     field="mode")
