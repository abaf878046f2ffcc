"""Loss terms of the baseline and full domain transfer objectives.

Every function is pure and differentiable in its tensor arguments.
Set-level sums are implemented as per-batch means so the tradeoff
weights do not depend on the batch size.
"""

import math
from dataclasses import asdict, dataclass

import torch

from .exceptions import UsageError

LOG_EPS = 1e-7
TV_EPS = 1e-12

# Discriminator class indices: G(s), G(t), real t.
FROM_SOURCE, FROM_TARGET, REAL = 0, 1, 2


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 15.0
    beta: float = 15.0
    gamma: float = 0.0
    tv_exponent: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            value = getattr(self, name)
            if not value >= 0:
                raise UsageError(f"{name} must be nonnegative, got {value}")
        if not self.tv_exponent > 0:
            raise UsageError(f"tv_exponent must be positive, got {self.tv_exponent}")


@dataclass
class LossReport:
    step: int
    l_d: float = 0.0
    l_gang: float = 0.0
    l_const: float = 0.0
    l_tid: float = 0.0
    l_tv: float = 0.0
    l_g_total: float = 0.0
    clamped: bool = False

    def as_record(self):
        return asdict(self)

    def check_total(self, w: LossWeights, rtol=1e-6):
        expected = self.l_gang + w.alpha * self.l_const + w.beta * self.l_tid + w.gamma * self.l_tv
        return math.isclose(self.l_g_total, expected, rel_tol=rtol, abs_tol=1e-12)


def _same_shape(u, v, what):
    if u.shape != v.shape:
        raise UsageError(f"{what}: shape mismatch {tuple(u.shape)} vs {tuple(v.shape)}")


def _neg_log(p):
    return -torch.log(p.clamp_min(LOG_EPS))


def is_clamped(*probs):
    """True when any probability falls at or below the log clamp."""
    return any(bool((p <= LOG_EPS).any()) for p in probs)


def mse_distance(u, v):
    _same_shape(u, v, "mse_distance")
    return ((u - v) ** 2).mean()


def _per_sample_mse(u, v):
    return ((u - v) ** 2).flatten(1).mean(dim=1)


def loss_discriminator(p_gs, p_gt, p_t):
    """Ternary discriminator loss: G(s) is class 1, G(t) class 2, real t class 3."""
    return (
        _neg_log(p_gs[:, FROM_SOURCE]).mean()
        + _neg_log(p_gt[:, FROM_TARGET]).mean()
        + _neg_log(p_t[:, REAL]).mean()
    )


def loss_gan_generator(p_gs, p_gt):
    """Generator side: both kinds of transferred samples should look real."""
    return _neg_log(p_gs[:, REAL]).mean() + _neg_log(p_gt[:, REAL]).mean()


def loss_constancy(f_x, f_Gx):
    _same_shape(f_x, f_Gx, "loss_constancy")
    return _per_sample_mse(f_x, f_Gx).mean()


def loss_identity(t_batch, G_t_batch):
    _same_shape(t_batch, G_t_batch, "loss_identity")
    return _per_sample_mse(t_batch, G_t_batch).mean()


def loss_total_variation(z, B=1.0):
    """Anisotropic total variation, summed per image over the (H-1)x(W-1)
    positions having both a right and a lower neighbor, averaged over the batch.

    ``z`` is (N, C, H, W); a bare (H, W) image is treated as a batch of one.
    """
    if z.dim() == 2:
        z = z[None, None]
    if z.dim() != 4:
        raise UsageError(f"loss_total_variation expects (N, C, H, W), got {tuple(z.shape)}")
    if z.shape[2] < 2 or z.shape[3] < 2:
        raise UsageError("loss_total_variation needs height and width >= 2")
    base = z[:, :, :-1, :-1]
    dh = z[:, :, :-1, 1:] - base
    dv = z[:, :, 1:, :-1] - base
    tv = (dh ** 2 + dv ** 2 + TV_EPS) ** (B / 2)
    return tv.flatten(1).sum(dim=1).mean()


def loss_generator_total(l_gang, l_const, l_tid, l_tv, w: LossWeights):
    return l_gang + w.alpha * l_const + w.beta * l_tid + w.gamma * l_tv


def baseline_risks(d_probs_fake, d_probs_real, f_x, f_Gx, alpha):
    """Binary-GAN baseline terms.

    ``d_probs_*`` are (N, 2) with column 1 the probability of "real".
    Returns ``(r_gan_d, r_gan_g, r_const, total_g)``.
    """
    real_fake, real_real = d_probs_fake[:, 1], d_probs_real[:, 1]
    r_gan_d = _neg_log(real_real).mean() + _neg_log(1 - real_fake).mean()
    r_gan_g = _neg_log(real_fake).mean()
    r_const = loss_constancy(f_x, f_Gx)
    return r_gan_d, r_gan_g, r_const, r_gan_g + alpha * r_const
