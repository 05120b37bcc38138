"""Personalized low-rank residuals on a frozen base denoiser.

For every transformer block ``i`` a pair ``A_i (m_i x r_i)``, ``B_i (r_i x m_i)``
is learned; ``A_i @ B_i`` reshaped to ``(m_i, m_i, 1)`` is added to the block's
``proj_out`` kernel. Base weights are never modified. Other targets
(cross-attention key/value maps, ``proj_in``) exist for ablations.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .diffusion import (Batch, ConfigurationError, NoiseSchedule, UNetWeights, encode_prompts,
                        ldm_loss, make_schedule, q_sample, unet_forward)
from .seeding import make_rng
from .tensor import DimensionError, Tensor
from .text import Vocabulary, register_concept_token, render_template

log = logging.getLogger(__name__)

TARGETS: dict[str, tuple[str, ...]] = {
    "proj_out": ("proj_out",),
    "kv": ("attn2.k", "attn2.v"),
    "proj_in": ("proj_in",),
    "kv+proj_out": ("attn2.k", "attn2.v", "proj_out"),
    "kv+proj_in+proj_out": ("attn2.k", "attn2.v", "proj_in", "proj_out"),
}

MAGIC = b"PRES"
VERSION = 1


class FormatError(ValueError):
    """Residual file is malformed."""


def rank_for(m: int, fraction: float | str = "0.05") -> int:
    """``round(fraction * m)`` (half to even), at least 1."""
    if m < 1:
        raise ValueError(f"width must be >= 1, got {m}")
    return max(1, round(Fraction(str(fraction)) * m))


@dataclass
class PersonalizeConfig:
    iterations: int = 150
    batch_size: int = 4
    lr: float = 1e-3
    target: str = "proj_out"
    use_macro_class: bool = True
    use_reg_images: bool = False
    update_token_embedding: bool = False
    rank: int | float | None = None       # int: fixed rank; float: fraction of the width
    reg_per_batch: int = 1
    flip: bool = False                    # horizontal-flip augmentation of references
    init_std: float = 0.02

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ConfigurationError(f"unknown target {self.target!r}; choose from {sorted(TARGETS)}")
        if isinstance(self.rank, bool):
            raise ConfigurationError("rank must be an int or a float fraction")

    def rank_of(self, m: int) -> int:
        if self.rank is None:
            return rank_for(m)
        if isinstance(self.rank, float):
            return rank_for(m, self.rank)
        return int(self.rank)

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ResidualSet:
    factors: dict[tuple[str, int], tuple[Tensor, Tensor]]
    n_blocks: int
    concept_id: int | None = None
    macro_class: str | None = None
    config_hash: str = ""
    use_macro_class: bool = True
    token_row: Tensor | None = None
    history: dict = field(default_factory=dict)

    @property
    def ranks(self) -> dict[tuple[str, int], int]:
        return {k: a.shape[1] for k, (a, _) in self.factors.items()}

    def param_count(self) -> int:
        return sum(a.size + b.size for a, b in self.factors.values())

    def tensors(self) -> list[Tensor]:
        out = [t for pair in self.factors.values() for t in pair]
        if self.token_row is not None:
            out.append(self.token_row)
        return out

    def deltas(self, w: UNetWeights) -> dict[tuple[str, int], Tensor]:
        out = {}
        for (kind, i), (a, b) in self.factors.items():
            name = f"blocks.{i}.{kind}.w" if kind in ("proj_in", "proj_out") else f"blocks.{i}.{kind}"
            out[(kind, i)] = (a @ b).reshape(w[name].shape)
        return out

    def token_table(self, vocab: Vocabulary) -> Tensor | None:
        if self.token_row is None:
            return None
        onehot = np.zeros((vocab.size, 1))
        onehot[self.concept_id, 0] = 1.0
        base = vocab.embeddings.data
        shift = self.token_row.reshape(1, -1) - base[self.concept_id][None]
        return T.add(base, T.mul(onehot, shift))

    def zeroed(self) -> ResidualSet:
        """Same layout with every factor set to zero."""
        facs = {k: (Tensor(np.zeros(a.shape)), Tensor(np.zeros(b.shape)))
                for k, (a, b) in self.factors.items()}
        return ResidualSet(facs, self.n_blocks, self.concept_id, self.macro_class,
                           self.config_hash, self.use_macro_class)


def _target_shape(w: UNetWeights, kind: str, i: int) -> tuple[int, int]:
    if kind in ("proj_in", "proj_out"):
        m = w.config.widths[i]
        return m, m
    return w[f"blocks.{i}.{kind}"].shape


def init_residuals(w: UNetWeights, cfg: PersonalizeConfig, seed: int,
                   concept_id: int | None = None, macro_class: str | None = None) -> ResidualSet:
    """Random N(0, init_std^2) factors for every targeted weight."""
    rng = make_rng(seed, "residual-init")
    facs: dict[tuple[str, int], tuple[Tensor, Tensor]] = {}
    for i in range(w.n_blocks):
        for kind in TARGETS[cfg.target]:
            rows, cols = _target_shape(w, kind, i)
            r = cfg.rank_of(cols)
            if r < 1 or r > min(rows, cols):
                raise ConfigurationError(f"rank {r} invalid for {kind} in block {i} ({rows}x{cols})")
            a = Tensor(rng.normal(0.0, cfg.init_std, (rows, r)), name=f"{kind}.{i}.A")
            b = Tensor(rng.normal(0.0, cfg.init_std, (r, cols)), name=f"{kind}.{i}.B")
            facs[(kind, i)] = (a, b)
    return ResidualSet(facs, w.n_blocks, concept_id, macro_class, cfg.hash(), cfg.use_macro_class)


def apply_residual(W, A, B) -> Tensor:
    """``W + reshape(A @ B)``; W is (m, m, 1) or (m, n)."""
    W, A, B = T.as_tensor(W), T.as_tensor(A), T.as_tensor(B)
    if A.shape[1] != B.shape[0] or A.shape[0] * B.shape[1] != W.size or A.shape[0] != W.shape[0]:
        raise DimensionError(f"residual factors {A.shape} x {B.shape} do not fit weight {W.shape}")
    return W + (A @ B).reshape(W.shape)


def reference_loss(base: UNetWeights, rs: ResidualSet | None, refs: Sequence[np.ndarray],
                   prompt: str, vocab: Vocabulary, s: NoiseSchedule, seed: int,
                   draws: int = 16, concept_id: int | None = None) -> float:
    """Mean noise-prediction loss on the references over fixed (t, eps) draws."""
    rng = make_rng(seed, "reference-loss")
    refs = np.stack(refs)
    n = len(refs)
    ts = rng.integers(0, s.T, size=(draws, n))
    eps = rng.standard_normal((draws, *refs.shape))
    cid = rs.concept_id if rs is not None else concept_id
    table = rs.token_table(vocab) if rs is not None else None
    macro = rs.macro_class if rs is not None and rs.use_macro_class else None
    cond, mask, _ = encode_prompts([prompt] * n, vocab, cid, table, macro)
    total = 0.0
    with T.no_grad():
        for d in range(draws):
            z_t = q_sample(refs, ts[d], eps[d], s)
            pred, _ = unet_forward(z_t, ts[d], cond, base, residuals=rs, key_mask=mask)
            total += float(np.mean((pred.data - eps[d]) ** 2))
    return total / draws


def personalize(base: UNetWeights, refs: Sequence[np.ndarray], macro_class: str | None,
                cfg: PersonalizeConfig, seed: int, vocab: Vocabulary,
                concept_id: int | None = None, schedule: NoiseSchedule | None = None,
                reg_images: Sequence[np.ndarray] | None = None,
                on_step: Callable[[int, ResidualSet], None] | None = None,
                eval_draws: int = 16) -> ResidualSet:
    """Learn residuals for one concept from 1-10 reference images.

    Every reference is captioned with the training template. ``on_step`` runs
    after each backward pass, before the optimizer update.
    """
    if not len(refs):
        raise ValueError("personalization needs at least one reference image")
    if len(refs) > 10:
        raise ValueError(f"at most 10 reference images are supported, got {len(refs)}")
    s = schedule or make_schedule()
    if cfg.use_macro_class:
        if macro_class is None:
            raise ConfigurationError("macro class required unless use_macro_class is False")
        prompt = render_template(macro_class, vocab)
    else:
        prompt = render_template(None)
    if concept_id is None:
        concept_id = register_concept_token(vocab)

    rs = init_residuals(base, cfg, seed, concept_id, macro_class)
    rs.use_macro_class = cfg.use_macro_class
    if cfg.update_token_embedding:
        rs.token_row = Tensor(vocab.embeddings.data[concept_id].copy(), name="token_row")
    trainable = rs.tensors()
    for p in trainable:
        p.requires_grad = True
    frozen_state = [p.requires_grad for p in base.values()]
    for p in base.values():
        p.requires_grad = False

    refs_arr = np.stack([np.asarray(r, dtype=np.float64) for r in refs])
    reg_arr = None
    if cfg.use_reg_images:
        if reg_images is None:
            from .data import gen_distractors
            reg_images = gen_distractors(macro_class or "dog", seed, count=16)
        reg_arr = np.stack([np.asarray(r, dtype=np.float64) for r in reg_images])
        reg_prompt = f"a photo of a {macro_class}" if macro_class else "a photo of a"

    eval_before = reference_loss(base, rs, refs_arr, prompt, vocab, s, seed, eval_draws)
    opt = T.Adam(trainable, lr=cfg.lr)
    rng = make_rng(seed, "personalize")
    losses: list[float] = []
    composition: list[tuple[int, int]] = []
    n_reg = cfg.reg_per_batch if reg_arr is not None else 0
    n_ref = cfg.batch_size - n_reg
    try:
        for it in range(cfg.iterations):
            idx = rng.integers(0, len(refs_arr), size=n_ref)
            z0 = refs_arr[idx]
            prompts = [prompt] * n_ref
            if n_reg:
                z0 = np.concatenate([z0, reg_arr[rng.integers(0, len(reg_arr), size=n_reg)]])
                prompts += [reg_prompt] * n_reg
            if cfg.flip:
                flip = rng.random(len(z0)) < 0.5
                z0 = np.where(flip[:, None, None, None], z0[..., ::-1], z0)
            composition.append((n_ref, n_reg))
            opt.zero_grad()
            loss = ldm_loss(Batch(z0, prompts), base, vocab, s, seed, residuals=rs, rng=rng)
            loss.backward()
            if on_step is not None:
                on_step(it, rs)
            opt.step()
            losses.append(loss.item())
            if it % 25 == 0 or it == cfg.iterations - 1:
                log.info("personalize iter=%d loss=%.6f", it, losses[-1])
    finally:
        for p in trainable:
            p.requires_grad = False
            p.grad = None
        for p, flag in zip(base.values(), frozen_state):
            p.requires_grad = flag

    eval_after = reference_loss(base, rs, refs_arr, prompt, vocab, s, seed, eval_draws)
    rs.history = {"loss": losses, "eval_before": eval_before, "eval_after": eval_after,
                  "composition": composition, "prompt": prompt}
    log.info("personalize done eval_before=%.6f eval_after=%.6f ratio=%.4f",
             eval_before, eval_after, eval_after / eval_before)
    return rs


# -- serialization ----------------------------------------------------------------

def _pack_f64(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def save_residuals(rs: ResidualSet, path) -> None:
    meta = {
        "concept_id": rs.concept_id,
        "macro_class": rs.macro_class,
        "use_macro_class": rs.use_macro_class,
        "config_hash": rs.config_hash,
        "param_count": rs.param_count(),
        "n_blocks": rs.n_blocks,
        "records": [[kind, i] for kind, i in rs.factors],
        "token_row": None if rs.token_row is None else rs.token_row.data.tolist(),
    }
    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(meta_b)), meta_b,
           struct.pack("<I", len(rs.factors))]
    for a, b in rs.factors.values():
        m, r = a.shape
        n = b.shape[1]
        out.append(struct.pack("<III", m, r, n))
        out.append(_pack_f64(a.data))
        out.append(_pack_f64(b.data))
    Path(path).write_bytes(b"".join(out))


def load_residuals(path) -> ResidualSet:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{path}: truncated residual file")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (mlen,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(take(mlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt metadata") from exc
    (count,) = struct.unpack("<I", take(4))
    if count != len(meta["records"]):
        raise FormatError(f"{path}: record count {count} disagrees with metadata")
    facs = {}
    for kind, i in meta["records"]:
        m, r, n = struct.unpack("<III", take(12))
        a = np.frombuffer(take(8 * m * r), dtype="<f8").reshape(m, r).astype(np.float64)
        b = np.frombuffer(take(8 * r * n), dtype="<f8").reshape(r, n).astype(np.float64)
        facs[(kind, int(i))] = (Tensor(a), Tensor(b))
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    rs = ResidualSet(facs, meta["n_blocks"], meta["concept_id"], meta["macro_class"],
                     meta["config_hash"], meta["use_macro_class"])
    if meta["token_row"] is not None:
        rs.token_row = Tensor(np.asarray(meta["token_row"], dtype=np.float64))
    if rs.param_count() != meta["param_count"]:
        raise FormatError(f"{path}: parameter count mismatch")
    return rs


def param_report(rs: ResidualSet, base: UNetWeights) -> dict:
    residual = rs.param_count()
    total = base.census()
    return {"residual_params": residual, "base_params": total, "ratio": residual / total}
