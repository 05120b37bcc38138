"""DDIM sampling with classifier-free guidance and localized residual blending.

With localization on, each transformer block sums the cross-attention of the
concept tokens, binarizes the sum at its median and mixes base and
personalized ``proj_out`` features under that mask. The mixing happens inside
the conditional pass, so a guided step still costs exactly two network
evaluations.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .diffusion import (ConfigurationError, EvalCounter, LagConfig, NoiseSchedule, UNetWeights,
                        encode_prompts, make_schedule, unet_forward)
from .seeding import make_rng
from .tensor import DimensionError, Tensor

log = logging.getLogger(__name__)


def aggregate_concept_maps(maps: np.ndarray, concept_indices, hw: tuple[int, int]) -> np.ndarray:
    """Head-averaged attention summed over concept token columns, as an (h, w) map.

    ``maps`` is (heads, h*w, seq) or (h*w, seq).
    """
    idx = list(concept_indices)
    if not idx:
        raise ConfigurationError("concept index set is empty")
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim == 2:
        maps = maps[None]
    if max(idx) >= maps.shape[-1] or min(idx) < 0:
        raise ConfigurationError(f"concept indices {idx} outside sequence of length {maps.shape[-1]}")
    return maps.mean(axis=0)[:, idx].sum(axis=1).reshape(hw)


def binarize_median(a: np.ndarray) -> np.ndarray:
    """1 where the map exceeds its median, else 0; a constant map gives all ones."""
    a = np.asarray(a, dtype=np.float64)
    if np.all(a == a.flat[0]):
        log.warning("degenerate attention map (all values equal); using all-ones mask")
        return np.ones_like(a)
    return (a > np.median(a)).astype(np.float64)


def blend_features(f, f_prime, mask) -> Tensor:
    """(1 - M) * f + M * f' with the mask broadcast over channels.

    ``f`` and ``f_prime`` are (m, h, w) or (B, m, h, w); ``mask`` is (h, w) or (B, h, w).
    """
    f, f_prime = T.as_tensor(f), T.as_tensor(f_prime)
    m = np.asarray(mask, dtype=np.float64)
    if f.shape != f_prime.shape:
        raise DimensionError(f"blend: feature shapes {f.shape} and {f_prime.shape} differ")
    if m.shape[-2:] != f.shape[-2:] or m.ndim > f.ndim - 1:
        raise DimensionError(f"blend: mask {m.shape} does not fit features {f.shape}")
    m = np.expand_dims(m, -3)
    return f * (1.0 - m) + f_prime * m


def cfg_combine(eps_uncond, eps_cond, w: float):
    eu, ec = np.asarray(eps_uncond), np.asarray(eps_cond)
    if eu.shape != ec.shape:
        raise DimensionError(f"guidance: shapes {eu.shape} and {ec.shape} differ")
    return eu + w * (ec - eu)


def _alpha_bar(s: NoiseSchedule, t: int) -> float:
    # t = -1 is the clean-data endpoint.
    return 1.0 if t < 0 else float(s.alpha_bars[t])


def ddim_step(z_t, eps_pred, t: int, t_prev: int, s: NoiseSchedule, eta: float = 0.0,
              noise=None) -> np.ndarray:
    """One DDIM update from ``t`` to ``t_prev`` (``t_prev = -1`` lands on clean data)."""
    if not (t > t_prev >= -1):
        raise ValueError(f"ddim_step needs t > t_prev >= -1, got t={t}, t_prev={t_prev}")
    if t >= s.T:
        raise ValueError(f"timestep {t} outside schedule of length {s.T}")
    z_t, eps_pred = np.asarray(z_t), np.asarray(eps_pred)
    ab, ab_prev = _alpha_bar(s, t), _alpha_bar(s, t_prev)
    z0_pred = (z_t - np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(ab)
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab)) * np.sqrt(1.0 - ab / ab_prev)
    out = np.sqrt(ab_prev) * z0_pred + np.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0)) * eps_pred
    if sigma > 0:
        if noise is None:
            raise ValueError("eta > 0 needs a noise array")
        out = out + sigma * np.asarray(noise)
    return out


def ddim_timesteps(T_steps: int, n: int) -> list[int]:
    stride = T_steps // n
    if stride < 1:
        raise ValueError(f"cannot take {n} DDIM steps over a {T_steps}-step schedule")
    return [int(k * stride + stride - 1) for k in range(n)][::-1]


@dataclass
class MaskStack:
    """masks[step][block] is the binary (h, w) mask applied in the conditional pass."""
    masks: list[list[np.ndarray]] = field(default_factory=list)
    provenance: list[list[str]] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.masks)

    def coverage(self) -> np.ndarray:
        """Fraction of ones, shape (steps, blocks)."""
        return np.array([[float(m.mean()) for m in step] for step in self.masks])


@dataclass
class SampleRequest:
    prompt: str
    seed: int = 0
    steps: int = 50
    eta: float = 0.0
    guidance: float = 6.0
    residuals: str | Path | None = None
    lag: bool = False
    out: str | Path | None = None
    macro_class: str | None = None
    head_rule: str = "mean"
    noise_seed: int | None = None
    concept_id: int | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.guidance < 0:
            raise ValueError("guidance must be >= 0")


@dataclass
class SampleResult:
    image: np.ndarray
    masks: MaskStack | None
    evals: int
    z_T_hash: str


def initial_noise(seed: int, shape=(3, 32, 32)) -> np.ndarray:
    return make_rng(seed, "z_T").standard_normal(shape)


def sample(req: SampleRequest, w: UNetWeights, vocab, residuals=None,
           schedule: NoiseSchedule | None = None, inject: MaskStack | None = None,
           counter: EvalCounter | None = None) -> SampleResult:
    """Generate one image for ``req``.

    ``residuals`` (a ResidualSet) takes precedence over ``req.residuals``.
    ``inject`` replays previously recorded masks instead of computing them.
    """
    from .residuals import load_residuals

    s = schedule or make_schedule()
    if residuals is None and req.residuals is not None:
        residuals = load_residuals(req.residuals)
    concept_id = req.concept_id
    token_table = None
    macro = req.macro_class
    if residuals is not None:
        concept_id = residuals.concept_id
        token_table = residuals.token_table(vocab)
        if macro is None and residuals.use_macro_class:
            macro = residuals.macro_class
    if macro is not None and not _macro_follows(req.prompt, macro):
        macro = None
    cond, key_mask, toks = encode_prompts([req.prompt], vocab, concept_id, token_table, macro)
    null, null_mask, _ = encode_prompts([""], vocab)

    lag_on = req.lag or inject is not None
    concept_indices = toks[0].concept_indices
    if lag_on and not concept_indices and inject is None:
        raise ConfigurationError("prompt contains no concept tokens")

    counter = counter or EvalCounter()
    start = counter.count
    cfg = w.config
    z = initial_noise(req.seed, (cfg.channels, cfg.image_size, cfg.image_size))
    z_hash = hashlib.sha256(z.tobytes()).hexdigest()[:16]
    noise_rng = make_rng(req.seed if req.noise_seed is None else req.noise_seed, "ddim-noise")
    stack = MaskStack() if lag_on else None
    ts = ddim_timesteps(s.T, req.steps)
    with T.no_grad():
        for k, t in enumerate(ts):
            t_prev = ts[k + 1] if k + 1 < len(ts) else -1
            lag = None
            if lag_on:
                lag = LagConfig(concept_indices, head_rule=req.head_rule,
                                inject=None if inject is None else inject.masks[k])
            eps_c, attn = unet_forward(z, t, cond, w, residuals=residuals, lag=lag,
                                       key_mask=key_mask, counter=counter)
            eps_u, _ = unet_forward(z, t, null, w, key_mask=null_mask, counter=counter)
            if stack is not None:
                stack.masks.append([m[0].copy() for m in attn.masks])
                src = "injected" if inject is not None else "computed"
                stack.provenance.append([f"{src}:step={k}:t={t}:block={i}" for i in range(len(attn.masks))])
            eps = cfg_combine(eps_u.data, eps_c.data, req.guidance)
            noise = noise_rng.standard_normal(z.shape) if req.eta > 0 else None
            z = ddim_step(z, eps, t, t_prev, s, req.eta, noise)
    image = np.clip(z, -1.0, 1.0)
    return SampleResult(image, stack, counter.count - start, z_hash)


def _macro_follows(prompt: str, macro: str) -> bool:
    words = prompt.split()
    mw = macro.split()
    for i, w in enumerate(words):
        if w == "V*":
            return words[i + 1:i + 1 + len(mw)] == mw
    return False
