"""Toy pixel-space denoiser, noise schedule and training objective.

The network is a two-level U-Net built only from pointwise convolutions,
space-to-depth resampling and attention. Each of its four stages ends in a
transformer block::

    x_in -> norm -> proj_in -> self-attn -> cross-attn -> feed-forward -> proj_out -> + x_in

``proj_out`` is where personalized residuals live and where localized
attention-guided blending happens; the cross-attention maps of the same block
drive the blend mask.
"""

from __future__ import annotations

import functools
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .seeding import make_rng
from .tensor import Tensor

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    """Incompatible model / residual / sampler configuration."""


# -- noise schedule -------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)


def make_schedule(T_steps: int = 1000, beta_start: float = 1e-4,
                  beta_end: float = 0.02) -> NoiseSchedule:
    """Linear-beta DDPM schedule."""
    if T_steps < 2:
        raise ValueError(f"schedule needs at least 2 steps, got {T_steps}")
    betas = np.linspace(beta_start, beta_end, T_steps)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


@functools.lru_cache(maxsize=4)
def _schedule(T_steps: int) -> NoiseSchedule:
    return make_schedule(T_steps)


def q_sample(z0, t: int, eps, s: NoiseSchedule):
    """Forward-noise ``z0`` to step ``t``. Works on arrays or tensors."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr >= s.T):
        raise ValueError(f"timestep {t} outside [0, {s.T})")
    ab = s.alpha_bars[t_arr]
    if isinstance(z0, Tensor) or isinstance(eps, Tensor):
        if ab.ndim:
            ab = ab.reshape(-1, *([1] * (np.ndim(T.as_tensor(z0).data) - 1)))
        return T.as_tensor(z0) * np.sqrt(ab) + T.as_tensor(eps) * np.sqrt(1.0 - ab)
    z0 = np.asarray(z0, dtype=np.float64)
    if ab.ndim:
        ab = ab.reshape(-1, *([1] * (z0.ndim - 1)))
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * np.asarray(eps)


# -- architecture -----------------------------------------------------------------

@dataclass(frozen=True)
class UNetConfig:
    widths: tuple[int, ...] = (32, 64, 64, 32)
    heads: int = 2
    d_k: int = 16
    d_txt: int = 32
    t_dim: int = 64
    image_size: int = 32
    channels: int = 3
    ff_mult: int = 2
    # Adds sqrt(1 - alpha_bar_t) * z_t to the head output. At high noise the
    # ideal noise estimate is close to z_t itself, which the network would
    # otherwise have to reproduce through every layer.
    input_skip: bool = True
    T_steps: int = 1000
    # Fixed 2-D sinusoidal position codes on self-attention queries and keys.
    # Without them every spatial token looks alike to self-attention.
    pos_embed: bool = True

    @property
    def inner(self) -> int:
        return self.heads * self.d_k

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}


@dataclass
class UNetWeights:
    config: UNetConfig
    params: "OrderedDict[str, Tensor]"
    history: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def n_blocks(self) -> int:
        return len(self.config.widths)

    def census(self) -> int:
        return sum(p.size for p in self.params.values())

    def values(self):
        return self.params.values()

    def digest(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def copy(self) -> UNetWeights:
        return UNetWeights(self.config,
                           OrderedDict((k, Tensor(v.data.copy(), name=k)) for k, v in self.params.items()),
                           dict(self.history))


def _declared_shapes(cfg: UNetConfig) -> "OrderedDict[str, tuple]":
    s: OrderedDict[str, tuple] = OrderedDict()
    c0 = cfg.channels * 4
    w = cfg.widths
    s["time.w1"] = (cfg.t_dim, cfg.t_dim)
    s["time.b1"] = (cfg.t_dim,)
    s["time.w2"] = (cfg.t_dim, cfg.t_dim)
    s["time.b2"] = (cfg.t_dim,)
    s["stem.w"] = (w[0], c0, 1)
    s["stem.b"] = (w[0],)
    for i, m in enumerate(w):
        r = f"res.{i}."
        s[r + "norm.g"] = (m,)
        s[r + "norm.b"] = (m,)
        s[r + "conv1.w"] = (m, m, 1)
        s[r + "conv1.b"] = (m,)
        s[r + "temb.w"] = (cfg.t_dim, m)
        s[r + "conv2.w"] = (m, m, 1)
        s[r + "conv2.b"] = (m,)
        b = f"blocks.{i}."
        s[b + "norm.g"] = (m,)
        s[b + "norm.b"] = (m,)
        s[b + "proj_in.w"] = (m, m, 1)
        s[b + "proj_in.b"] = (m,)
        for ln in ("ln1", "ln2", "ln3"):
            s[b + ln + ".g"] = (m,)
            s[b + ln + ".b"] = (m,)
        s[b + "attn1.q"] = (m, cfg.inner)
        s[b + "attn1.k"] = (m, cfg.inner)
        s[b + "attn1.v"] = (m, cfg.inner)
        s[b + "attn1.o"] = (cfg.inner, m)
        s[b + "attn1.ob"] = (m,)
        s[b + "attn2.q"] = (m, cfg.inner)
        s[b + "attn2.k"] = (cfg.d_txt, cfg.inner)
        s[b + "attn2.v"] = (cfg.d_txt, cfg.inner)
        s[b + "attn2.o"] = (cfg.inner, m)
        s[b + "attn2.ob"] = (m,)
        s[b + "ff.w1"] = (m, cfg.ff_mult * m)
        s[b + "ff.b1"] = (cfg.ff_mult * m,)
        s[b + "ff.w2"] = (cfg.ff_mult * m, m)
        s[b + "ff.b2"] = (m,)
        s[b + "proj_out.w"] = (m, m, 1)
        s[b + "proj_out.b"] = (m,)
    s["down.w"] = (w[1], w[0] * 4, 1)
    s["down.b"] = (w[1],)
    s["up.w"] = (w[3] * 4, w[2], 1)
    s["up.b"] = (w[3] * 4,)
    s["head.norm.g"] = (w[3],)
    s["head.norm.b"] = (w[3],)
    s["head.w"] = (c0, w[3], 1)
    s["head.b"] = (c0,)
    return s


def declared_param_count(cfg: UNetConfig) -> int:
    return sum(int(np.prod(shape)) for shape in _declared_shapes(cfg).values())


def init_unet(cfg: UNetConfig | None = None, seed: int = 0) -> UNetWeights:
    cfg = cfg or UNetConfig()
    if len(cfg.widths) != 4 or cfg.widths[0] != cfg.widths[3] or cfg.widths[1] != cfg.widths[2]:
        raise ConfigurationError(f"widths must have the form [a, b, b, a], got {cfg.widths}")
    rng = make_rng(seed, "unet-init")
    params: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in _declared_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif leaf in ("b", "b1", "b2", "ob") or name.startswith("head."):
            arr = np.zeros(shape)
        else:
            fan_in = shape[1] if len(shape) == 3 else shape[0]
            arr = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)
        params[name] = Tensor(arr, name=name)
    return UNetWeights(cfg, params)


@dataclass
class AttentionStack:
    """Per-block cross-attention maps, each (batch, heads, h*w, seq)."""
    maps: list[np.ndarray]
    hw: list[tuple[int, int]]
    masks: list[np.ndarray | None] = field(default_factory=list)
    features: list[np.ndarray] = field(default_factory=list)


@dataclass
class EvalCounter:
    count: int = 0


def timestep_embedding(t, dim: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freq = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freq[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _affine(x: Tensor, g: Tensor, b: Tensor, axis: int) -> Tensor:
    shape = [1] * x.ndim
    shape[axis] = g.shape[0]
    return T.layer_norm(x, axis=axis) * g.reshape(shape) + b.reshape(shape)


def _heads(x: Tensor, heads: int) -> Tensor:
    B, N, D = x.shape
    return x.reshape(B, N, heads, D // heads).transpose(0, 2, 1, 3)


def _merge(x: Tensor) -> Tensor:
    B, H, N, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, N, H * dk)


def attention(q_in: Tensor, kv_in: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
              wo: Tensor, bo: Tensor, heads: int,
              key_mask: np.ndarray | None = None,
              pos: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Multi-head attention; returns the output and the (B, heads, Nq, Nk) maps.

    ``pos`` (self-attention only) is added to the query and key inputs, not the values.
    """
    if pos is None:
        q = _heads(q_in @ wq, heads)
        k = _heads(kv_in @ wk, heads)
    else:
        q = _heads((q_in + pos) @ wq, heads)
        k = _heads((kv_in + pos) @ wk, heads)
    v = _heads(kv_in @ wv, heads)
    dk = q.shape[-1]
    logits = (q @ T.swap_last(k)) * (1.0 / math.sqrt(dk))
    mask = None if key_mask is None else key_mask[:, None, None, :]
    probs = T.softmax(logits, axis=-1, mask=mask)
    return _merge(probs @ v) @ wo + bo, probs.data


@functools.lru_cache(maxsize=None)
def position_codes(h: int, w: int, m: int) -> np.ndarray:
    """(h*w, m) sinusoids: the first half of the channels encode the row, the rest the column."""
    half = m // 2
    freqs = 1.0 / (16.0 ** (np.arange(half // 2) / max(1, half // 2)))
    def enc(n, width):
        ang = np.arange(n)[:, None] * freqs[None, :] * (np.pi / 2)
        out = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
        return np.pad(out, ((0, 0), (0, width - out.shape[1])))
    rows = np.repeat(enc(h, half), w, axis=0)
    cols = np.tile(enc(w, m - half), (h, 1))
    table = np.concatenate([rows, cols], axis=1)
    table.setflags(write=False)
    return table


def cross_attention(x: Tensor, cond: Tensor, w: UNetWeights, block: int,
                    key_mask: np.ndarray | None = None,
                    overrides: dict | None = None) -> tuple[Tensor, np.ndarray]:
    """Cross-attention of spatial features ``x`` (B, m, h, w) over ``cond`` (B, seq, d_txt).

    Returns the output in the input's layout and maps of shape (B, heads, h*w, seq).
    """
    B, m, h, wd = x.shape
    p = f"blocks.{block}.attn2."
    get = (lambda k: overrides.get(p + k, w[p + k])) if overrides else (lambda k: w[p + k])
    tok = x.reshape(B, m, h * wd).transpose(0, 2, 1)
    out, maps = attention(tok, cond, get("q"), get("k"), get("v"), get("o"), get("ob"),
                          w.config.heads, key_mask)
    return out.transpose(0, 2, 1).reshape(B, m, h, wd), maps


@dataclass
class LagConfig:
    """Localized attention-guided blending at every ``proj_out``.

    ``inject`` replaces computed masks: a list (one per block) of arrays
    broadcastable to (batch, h, w). ``head_rule`` is ``"mean"`` (average heads,
    then binarize) or ``"union"`` (binarize each head, then OR).
    """
    concept_indices: tuple[int, ...]
    enabled: bool = True
    head_rule: str = "mean"
    inject: Sequence[np.ndarray] | None = None

    def __post_init__(self):
        if self.enabled and not self.concept_indices and self.inject is None:
            raise ConfigurationError("prompt contains no concept tokens")
        if self.head_rule not in ("mean", "union"):
            raise ConfigurationError(f"unknown head rule {self.head_rule!r}")


def _block_mask(maps: np.ndarray, hw: tuple[int, int], lag: LagConfig) -> np.ndarray:
    from .sampler import aggregate_concept_maps, binarize_median

    out = []
    for b in range(maps.shape[0]):
        if lag.head_rule == "mean":
            agg = aggregate_concept_maps(maps[b], lag.concept_indices, hw)
            out.append(binarize_median(agg))
        else:
            per_head = [binarize_median(aggregate_concept_maps(maps[b, k:k + 1], lag.concept_indices, hw))
                        for k in range(maps.shape[1])]
            out.append(np.maximum.reduce(per_head))
    return np.stack(out)


def transformer_block(x: Tensor, cond: Tensor, w: UNetWeights, i: int,
                      key_mask, overrides: dict, lag: LagConfig | None,
                      residual_out: Tensor | None) -> tuple[Tensor, np.ndarray, np.ndarray | None]:
    cfg = w.config
    p = f"blocks.{i}."
    get = lambda k: overrides.get(p + k, w[p + k])
    B, m, h, wd = x.shape
    hn = _affine(x, w[p + "norm.g"], w[p + "norm.b"], axis=-3)
    hid = T.conv1x1(hn, get("proj_in.w"), w[p + "proj_in.b"])
    tok = hid.reshape(B, m, h * wd).transpose(0, 2, 1)

    a_in = _affine(tok, w[p + "ln1.g"], w[p + "ln1.b"], -1)
    pos = position_codes(h, wd, m) if cfg.pos_embed else None
    sa, _ = attention(a_in, a_in, w[p + "attn1.q"], w[p + "attn1.k"], w[p + "attn1.v"],
                      w[p + "attn1.o"], w[p + "attn1.ob"], cfg.heads, pos=pos)
    tok = tok + sa
    c_in = _affine(tok, w[p + "ln2.g"], w[p + "ln2.b"], -1)
    ca, maps = attention(c_in, cond, get("attn2.q"), get("attn2.k"), get("attn2.v"),
                         get("attn2.o"), get("attn2.ob"), cfg.heads, key_mask)
    tok = tok + ca
    f_in = _affine(tok, w[p + "ln3.g"], w[p + "ln3.b"], -1)
    ff = T.gelu(f_in @ w[p + "ff.w1"] + w[p + "ff.b1"]) @ w[p + "ff.w2"] + w[p + "ff.b2"]
    tok = tok + ff
    hid = tok.transpose(0, 2, 1).reshape(B, m, h, wd)

    W, bias = w[p + "proj_out.w"], w[p + "proj_out.b"]
    mask = None
    if lag is None:
        f = T.conv1x1(hid, W if residual_out is None else residual_out, bias)
    else:
        from .sampler import blend_features

        f_base = T.conv1x1(hid, W, bias)
        f_pers = f_base if residual_out is None else T.conv1x1(hid, residual_out, bias)
        if lag.inject is not None:
            mask = np.broadcast_to(np.asarray(lag.inject[i], dtype=np.float64), (B, h, wd)).copy()
        else:
            mask = _block_mask(maps, (h, wd), lag)
        f = blend_features(f_base, f_pers, mask)
    return f + x, maps, mask


def _res(x: Tensor, temb: Tensor, w: UNetWeights, i: int) -> Tensor:
    p = f"res.{i}."
    h = T.silu(_affine(x, w[p + "norm.g"], w[p + "norm.b"], -3))
    h = T.conv1x1(h, w[p + "conv1.w"], w[p + "conv1.b"])
    h = h + (temb @ w[p + "temb.w"]).reshape(x.shape[0], -1, 1, 1)
    h = T.conv1x1(T.silu(h), w[p + "conv2.w"], w[p + "conv2.b"])
    return x + h


def unet_forward(z_t, t, cond, w: UNetWeights, residuals=None, lag: LagConfig | None = None,
                 key_mask: np.ndarray | None = None, counter: EvalCounter | None = None,
                 token_table: Tensor | None = None) -> tuple[Tensor, AttentionStack]:
    """Predict the noise in ``z_t`` at step ``t`` given conditioning ``cond``.

    Accepts a single image (3, H, W) with cond (seq, d_txt) or a batch
    (B, 3, H, W) with cond (B, seq, d_txt). ``residuals`` (a ResidualSet) swaps
    every targeted weight for ``W + A @ B``; with ``lag`` the ``proj_out``
    output is the mask blend of base and personalized features instead.
    """
    cfg = w.config
    z_t, cond = T.as_tensor(z_t), T.as_tensor(cond)
    single = z_t.ndim == 3
    if single:
        z_t = z_t.reshape(1, *z_t.shape)
        if cond.ndim == 2:
            cond = cond.reshape(1, *cond.shape)
        if key_mask is not None and np.ndim(key_mask) == 1:
            key_mask = np.asarray(key_mask)[None]
    B = z_t.shape[0]
    if z_t.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise T.DimensionError(f"model expects ({cfg.channels}, {cfg.image_size}, {cfg.image_size}) "
                               f"images, got {z_t.shape[1:]}")
    if cond.shape[0] != B and cond.shape[0] == 1:
        cond = T.concat([cond] * B, axis=0)
    if key_mask is not None:
        key_mask = np.broadcast_to(np.asarray(key_mask, dtype=bool), (B, cond.shape[1]))
    if counter is not None:
        counter.count += B

    overrides: dict = {}
    residual_out: list[Tensor | None] = [None] * w.n_blocks
    if residuals is not None:
        if residuals.n_blocks != w.n_blocks:
            raise ConfigurationError(f"residual set has {residuals.n_blocks} blocks, "
                                     f"model has {w.n_blocks}")
        for (kind, i), delta in residuals.deltas(w).items():
            name = f"blocks.{i}.{kind}.w" if kind in ("proj_in", "proj_out") else f"blocks.{i}.{kind}"
            merged = w[name] + delta
            if kind == "proj_out":
                residual_out[i] = merged
            else:
                overrides[name] = merged
        if lag is not None and overrides:
            raise ConfigurationError("localized sampling supports proj_out residuals only")

    tvec = np.broadcast_to(np.asarray(t), (B,))
    temb = Tensor(timestep_embedding(tvec, cfg.t_dim))
    temb = T.silu(temb @ w["time.w1"] + w["time.b1"]) @ w["time.w2"] + w["time.b2"]
    temb = T.silu(temb)
    ctx = T.layer_norm(cond, axis=-1)

    maps: list[np.ndarray] = []
    hws: list[tuple[int, int]] = []
    masks: list[np.ndarray | None] = []
    feats: list[np.ndarray] = []

    def stage(x, i):
        x = _res(x, temb, w, i)
        x, m, mk = transformer_block(x, ctx, w, i, key_mask, overrides, lag, residual_out[i])
        maps.append(m)
        hws.append((x.shape[2], x.shape[3]))
        masks.append(mk)
        feats.append(x.data)
        return x

    h = T.conv1x1(T.space_to_depth(z_t, 2), w["stem.w"], w["stem.b"])
    s0 = stage(h, 0)
    h = T.conv1x1(T.space_to_depth(s0, 2), w["down.w"], w["down.b"])
    h = stage(h, 1)
    h = stage(h, 2)
    h = T.depth_to_space(T.conv1x1(h, w["up.w"], w["up.b"]), 2) + s0
    h = stage(h, 3)
    h = T.silu(_affine(h, w["head.norm.g"], w["head.norm.b"], -3))
    out = T.depth_to_space(T.conv1x1(h, w["head.w"], w["head.b"]), 2)
    if cfg.input_skip:
        ab = _schedule(cfg.T_steps).alpha_bars[np.asarray(tvec, dtype=int)]
        out = out + z_t * np.sqrt(1.0 - ab).reshape(B, 1, 1, 1)
    if single:
        out = out.reshape(*out.shape[1:])
    return out, AttentionStack(maps, hws, masks if lag is not None else [], feats)


# -- objective and pretraining ------------------------------------------------------

@dataclass
class Batch:
    z0: np.ndarray                 # (B, 3, H, W) in [-1, 1]
    prompts: list[str]


def encode_prompts(prompts: Sequence[str], vocab, concept_id=None, token_table=None,
                   macro_class=None):
    from .text import embed, tokenize

    toks = [tokenize(p, vocab, concept_id=concept_id, macro_class=macro_class) for p in prompts]
    cond = T.concat([embed(tk, vocab, token_table).reshape(1, -1, vocab.d_txt) for tk in toks], axis=0)
    mask = np.stack([tk.valid for tk in toks])
    return cond, mask, toks


def ldm_loss(batch: Batch, w: UNetWeights, vocab, s: NoiseSchedule, seed, residuals=None,
             predict: Callable | None = None, token_table: Tensor | None = None,
             rng: np.random.Generator | None = None) -> Tensor:
    """Mean squared noise-prediction error over a batch with random t and eps.

    ``predict(z_t, t, cond, key_mask)`` replaces the network when given.
    """
    z0 = np.asarray(batch.z0, dtype=np.float64)
    if z0.ndim == 3:
        z0 = z0[None]
    if z0.shape[0] == 0 or len(batch.prompts) != z0.shape[0]:
        raise ValueError("batch must be non-empty with one prompt per image")
    rng = rng if rng is not None else make_rng(seed, "ldm-loss")
    t = rng.integers(0, s.T, size=z0.shape[0])
    eps = rng.standard_normal(z0.shape)
    z_t = q_sample(z0, t, eps, s)
    concept_id = getattr(residuals, "concept_id", None)
    if token_table is None and residuals is not None:
        token_table = getattr(residuals, "token_table", lambda v: None)(vocab)
    cond, mask, _ = encode_prompts(batch.prompts, vocab, concept_id, token_table)
    if predict is not None:
        pred = T.as_tensor(predict(z_t, t, cond, mask))
    else:
        pred, _ = unet_forward(z_t, t, cond, w, residuals=residuals, key_mask=mask)
    diff = pred - eps
    return (diff * diff).mean()


@dataclass
class PretrainConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 2e-3
    prompt_dropout: float = 0.1
    log_every: int = 50
    min_dataset: int = 64
    model: UNetConfig = field(default_factory=UNetConfig)


def pretrain(dataset: Sequence[tuple[np.ndarray, str]], config: PretrainConfig, seed: int,
             vocab, schedule: NoiseSchedule | None = None,
             progress: Callable[[int, float], None] | None = None) -> UNetWeights:
    """Train the base denoiser on captioned images with prompt dropout.

    ``history`` on the returned weights holds the per-step loss curve and the
    number of items trained with the null prompt.
    """
    from .text import NULL_WORD

    if len(dataset) < config.min_dataset:
        raise ValueError(f"pretraining needs at least {config.min_dataset} images, got {len(dataset)}")
    s = schedule or make_schedule()
    w = init_unet(config.model, seed)
    params = list(w.values())
    for p in params:
        p.requires_grad = True
    opt = T.Adam(params, lr=config.lr)
    rng = make_rng(seed, "pretrain")
    images = np.stack([np.asarray(img, dtype=np.float64) for img, _ in dataset])
    captions = [c for _, c in dataset]
    losses: list[float] = []
    null_items = 0
    items = 0
    warmup = max(1, config.steps // 20)
    for step in range(config.steps):
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        drop = rng.random(config.batch_size) < config.prompt_dropout
        prompts = [NULL_WORD if d else captions[j] for j, d in zip(idx, drop)]
        null_items += int(drop.sum())
        items += config.batch_size
        z0 = images[idx]
        flip = rng.random(config.batch_size) < 0.5
        z0 = np.where(flip[:, None, None, None], z0[..., ::-1], z0)
        decay = 0.55 + 0.45 * math.cos(math.pi * step / config.steps)
        opt.lr = config.lr * min(1.0, (step + 1) / warmup) * decay
        opt.zero_grad()
        loss = ldm_loss(Batch(z0, prompts), w, vocab, s, seed, rng=rng)
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if progress is not None:
            progress(step, losses[-1])
        if config.log_every and (step % config.log_every == 0 or step == config.steps - 1):
            log.info("pretrain step=%d loss=%.6f", step, losses[-1])
    for p in params:
        p.requires_grad = False
        p.grad = None
    w.history = {"loss": losses, "null_items": null_items, "items": items, "seed": seed}
    return w
