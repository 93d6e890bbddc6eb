"""Losses and single-step updates for GAN, WGAN-GP and DRAGAN.

Log-losses are evaluated on the discriminator's pre-sigmoid values with
``log D = -softplus(-logit)`` and ``log(1 - D) = -softplus(logit)``, which are
finite for every finite logit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigError, ContractError, TrainingError
from .nn import Net, ParamStore, grad_norm_penalty

KINDS = ("gan", "wgan_gp", "dragan")
G_LOSS_VARIANTS = ("minimax", "non_saturating")


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str = "gan"
    penalty_coeff: float | None = None
    dragan_noise_scale: float | None = None   # None: 0.5 * std of each real batch
    d_steps: int | None = None                 # I_D
    g_loss_variant: str = "non_saturating"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"objective kind must be one of {KINDS}, got {self.kind!r}", key="objective.kind")
        if self.g_loss_variant not in G_LOSS_VARIANTS:
            raise ConfigError(f"g_loss_variant must be one of {G_LOSS_VARIANTS}",
                              key="objective.g_loss_variant")
        if self.penalty_coeff is None:
            object.__setattr__(self, "penalty_coeff", 0.0 if self.kind == "gan" else 10.0)
        if self.d_steps is None:
            object.__setattr__(self, "d_steps", 5 if self.kind == "wgan_gp" else 1)
        if self.penalty_coeff < 0:
            raise ConfigError("penalty_coeff must be >= 0", key="objective.penalty_coeff")
        if self.kind == "dragan" and self.penalty_coeff <= 0:
            raise ConfigError("dragan requires penalty_coeff > 0", key="objective.penalty_coeff")
        if int(self.d_steps) < 1:
            raise ConfigError("d_steps must be a positive integer", key="objective.d_steps")
        if self.dragan_noise_scale is not None and self.dragan_noise_scale <= 0:
            raise ConfigError("dragan_noise_scale must be > 0", key="objective.dragan_noise_scale")

    @property
    def head(self) -> str:
        return "linear" if self.kind == "wgan_gp" else "sigmoid"


def _softplus(x):
    return np.logaddexp(0.0, x)


def d_loss(obj: ObjectiveSpec, disc: Net, x_real, x_fake, rng: np.random.Generator
           ) -> tuple[float, ParamStore]:
    """Discriminator loss and its gradient with respect to the discriminator.

    ``x_fake`` must already be detached from the generator (a plain array).
    """
    x_real = np.asarray(x_real, dtype=np.float64)
    x_fake = np.asarray(x_fake, dtype=np.float64)
    if x_real.ndim != 2 or x_fake.ndim != 2 or x_real.shape[1] != x_fake.shape[1]:
        raise ContractError(f"real/fake batch shapes differ: {x_real.shape} vs {x_fake.shape}")
    nr, nf = len(x_real), len(x_fake)
    out, tape = disc.forward(np.concatenate([x_real, x_fake]))
    if obj.kind == "wgan_gp":
        loss = float(out[nr:].mean() - out[:nr].mean())
        g_out = np.empty_like(out)
        g_out[:nr] = -1.0 / nr
        g_out[nr:] = 1.0 / nf
        grads, _ = tape.backward(g_out, need_param_grads=True)
    else:
        logits = tape.logits
        loss = float(_softplus(-logits[:nr]).mean() + _softplus(logits[nr:]).mean())
        s = expit(logits)
        g_logit = np.empty_like(logits)
        g_logit[:nr] = (s[:nr] - 1.0) / nr
        g_logit[nr:] = s[nr:] / nf
        grads, _ = tape.backward(g_logit, wrt="logits")

    if obj.kind != "gan" and obj.penalty_coeff > 0:
        points = penalty_points(obj, x_real, x_fake, rng)
        pen, pen_tape = grad_norm_penalty(disc.params, disc.spec, points, 1.0)
        loss += obj.penalty_coeff * pen
        grads.iadd(pen_tape.backward(), obj.penalty_coeff)
    return loss, grads


def penalty_points(obj: ObjectiveSpec, x_real, x_fake, rng: np.random.Generator) -> np.ndarray:
    """Where the gradient penalty is evaluated: real/fake interpolates for
    WGAN-GP, noise-perturbed reals for DRAGAN."""
    if obj.kind == "wgan_gp":
        if len(x_real) != len(x_fake):
            raise ContractError("wgan_gp interpolation needs equal real and fake batch sizes")
        alpha = rng.uniform(0.0, 1.0, size=(len(x_real), 1))
        return alpha * x_real + (1.0 - alpha) * x_fake
    if obj.kind == "dragan":
        scale = obj.dragan_noise_scale
        if scale is None:
            scale = 0.5 * float(np.std(x_real))
        return x_real + scale * rng.standard_normal(x_real.shape)
    raise ContractError(f"objective {obj.kind!r} has no gradient penalty")


def g_loss(obj: ObjectiveSpec, disc: Net, x_fake) -> tuple[float, np.ndarray]:
    """Generator loss and its gradient with respect to ``x_fake``.

    Chain the returned gradient into the generator's tape to reach its
    parameters.
    """
    out, tape = disc.forward(x_fake)
    n = len(out)
    if obj.kind == "wgan_gp":
        loss = -float(out.mean())
        _, gx = tape.backward(-1.0 / n, need_param_grads=False)
        return loss, gx
    logits = tape.logits
    s = expit(logits)
    if obj.g_loss_variant == "non_saturating":
        loss = float(_softplus(-logits).mean())
        g_logit = (s - 1.0) / n
    else:
        loss = -float(_softplus(logits).mean())
        g_logit = -s / n
    _, gx = tape.backward(g_logit, wrt="logits", need_param_grads=False)
    return loss, gx


def generator_grads(obj: ObjectiveSpec, gen: Net, disc: Net, noise) -> tuple[float, ParamStore]:
    x_fake, g_tape = gen.forward(noise)
    loss, gx = g_loss(obj, disc, x_fake)
    grads, _ = g_tape.backward(gx)
    return loss, grads


def _check_finite(loss: float, context: dict | None, what: str) -> None:
    if not np.isfinite(loss):
        ctx = context or {}
        raise TrainingError(f"non-finite {what} loss", pair_index=ctx.get("pair_index"),
                            iteration=ctx.get("iteration"), phase=ctx.get("phase"))


def discriminator_step(obj: ObjectiveSpec, gen: Net, disc: Net, x_real, noise,
                       rng: np.random.Generator, context: dict | None = None) -> float:
    """One zero-grad / backprop / update cycle on ``disc``; ``gen`` is only read."""
    x_fake = gen(noise)
    loss, grads = d_loss(obj, disc, x_real, x_fake, rng)
    _check_finite(loss, context, "discriminator")
    disc.step(grads, context)
    return loss


def generator_step(obj: ObjectiveSpec, gen: Net, disc: Net, noise,
                   context: dict | None = None) -> float:
    """One zero-grad / backprop / update cycle on ``gen``; ``disc`` is only read."""
    loss, grads = generator_grads(obj, gen, disc, noise)
    _check_finite(loss, context, "generator")
    gen.step(grads, context)
    return loss


def d_update(obj: ObjectiveSpec, pair, x_real, noise, rng: np.random.Generator,
             context: dict | None = None) -> float:
    return discriminator_step(obj, pair.generator, pair.discriminator, x_real, noise, rng, context)


def g_update(obj: ObjectiveSpec, pair, noise, context: dict | None = None) -> float:
    return generator_step(obj, pair.generator, pair.discriminator, noise, context)
