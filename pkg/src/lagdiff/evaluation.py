"""Toy alignment metrics, ablation / rank sweeps and report emission.

Text alignment compares mid-block features of the frozen base model: the
image's feature against the mean feature of procedurally rendered sprites of
the prompt's class, both centered on the mean over all class signatures.
Image alignment compares identity descriptors (sprite-region color histogram
plus shape moments) of a generated image against the mean over references.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import identity_descriptor, probe_sprites
from .diffusion import NoiseSchedule, UNetWeights, encode_prompts, make_schedule, unet_forward
from .residuals import PersonalizeConfig, personalize
from .sampler import SampleRequest, sample
from .text import Vocabulary, VocabularyError

log = logging.getLogger(__name__)

PROBE_T = 50
FEATURE_BLOCK = 2
CSV_COLUMNS = ("concept", "prompt", "variant", "seed", "text_align", "image_align",
               "runtime_ms", "config_hash")


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def probe_features(images: Sequence[np.ndarray], probe: UNetWeights, vocab: Vocabulary) -> np.ndarray:
    """Spatially averaged mid-block features under null conditioning, one row per image."""
    x = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    null, mask, _ = encode_prompts([""], vocab)
    with T.no_grad():
        _, attn = unet_forward(x, PROBE_T, null, probe, key_mask=mask)
    return attn.features[FEATURE_BLOCK].mean(axis=(2, 3))


class _Signatures:
    """Per-probe cache of class signatures and their common center."""

    def __init__(self):
        self._cache: dict[tuple[str, tuple], dict[str, np.ndarray]] = {}

    def get(self, probe: UNetWeights, vocab: Vocabulary) -> dict[str, np.ndarray]:
        key = (probe.digest(), tuple(vocab.classes))
        if key not in self._cache:
            sig = {c: probe_features(probe_sprites(c), probe, vocab).mean(axis=0) for c in vocab.classes}
            center = np.mean(list(sig.values()), axis=0)
            self._cache[key] = {"__center__": center, **sig}
        return self._cache[key]


_SIGNATURES = _Signatures()


def prompt_class(prompt: str, vocab: Vocabulary) -> str:
    for w in prompt.split():
        if w in vocab.classes:
            return w
    raise VocabularyError(f"prompt names no known class: {prompt!r}")


def toy_text_alignment(image: np.ndarray, prompt: str, probe: UNetWeights, vocab: Vocabulary) -> float:
    cls = prompt_class(prompt, vocab)
    sig = _SIGNATURES.get(probe, vocab)
    feat = probe_features([image], probe, vocab)[0]
    return cosine(feat - sig["__center__"], sig[cls] - sig["__center__"])


def toy_image_alignment(generated: np.ndarray, references: Sequence[np.ndarray]) -> float:
    if not len(references):
        raise ValueError("image alignment needs at least one reference")
    ref = np.mean([identity_descriptor(r) for r in references], axis=0)
    return cosine(identity_descriptor(generated), ref)


def macro_class_nn(references: Sequence[np.ndarray], vocab: Vocabulary, probe: UNetWeights) -> str:
    """Class word whose signature is closest to the mean reference feature."""
    if not len(references):
        raise ValueError("macro-class search needs at least one reference")
    sig = _SIGNATURES.get(probe, vocab)
    feat = probe_features(references, probe, vocab).mean(axis=0) - sig["__center__"]
    best, best_score = None, -np.inf
    for _, cls in vocab.class_ids():
        score = cosine(feat, sig[cls] - sig["__center__"])
        if score > best_score:
            best, best_score = cls, score
    return best


# -- ablations ----------------------------------------------------------------------

TABLE4_VARIANTS: dict[str, dict] = {
    "KV weights": {"target": "kv"},
    "proj_in weights": {"target": "proj_in"},
    "KV + proj_out weights": {"target": "kv+proj_out"},
    "KV + proj_in + proj_out weights": {"target": "kv+proj_in+proj_out"},
    "w/o macro class": {"use_macro_class": False},
    "w/ reg images": {"use_reg_images": True},
    "Update token embedding": {"update_token_embedding": True},
}
RANK_SWEEP = (1, 8, 16, 32, 64, 128, 0.025, 0.05)
DEFAULT_LABEL = "Ours"


@dataclass
class Variant:
    label: str
    overrides: dict = field(default_factory=dict)
    lag: bool = False

    def config(self, base: PersonalizeConfig) -> PersonalizeConfig:
        return replace(base, **self.overrides)


@dataclass
class AblationPlan:
    variants: list[Variant]
    base: PersonalizeConfig = field(default_factory=PersonalizeConfig)

    def __post_init__(self):
        labels = [v.label for v in self.variants]
        if DEFAULT_LABEL not in labels:
            self.variants.append(Variant(DEFAULT_LABEL))
        elif labels.count(DEFAULT_LABEL) > 1:
            raise ValueError("default variant listed more than once")

    @classmethod
    def table4(cls, **base_kw) -> AblationPlan:
        return cls([Variant(k, dict(v)) for k, v in TABLE4_VARIANTS.items()],
                   PersonalizeConfig(**base_kw))

    @classmethod
    def rank_sweep(cls, ranks: Sequence = RANK_SWEEP, **base_kw) -> AblationPlan:
        variants = []
        for r in ranks:
            label = f"rank {r}" if isinstance(r, int) else f"rank {r}m"
            variants.append(Variant(DEFAULT_LABEL if r == 0.05 else label, {"rank": r}))
        return cls(variants, PersonalizeConfig(**base_kw))

    @classmethod
    def from_json(cls, text: str) -> AblationPlan:
        d = json.loads(text)
        base = PersonalizeConfig(**d.get("base", {}))
        variants = [Variant(v["label"], dict(v.get("overrides", {})), bool(v.get("lag", False)))
                    for v in d["variants"]]
        return cls(variants, base)


@dataclass
class ConceptCase:
    name: str
    macro_class: str
    references: list[np.ndarray]


@dataclass
class EvalRow:
    concept: str
    prompt: str
    variant: str
    seed: int
    text_align: float | None
    image_align: float | None
    runtime_ms: float
    config_hash: str
    z_T_hash: str = ""
    error: str | None = None


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def means(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {}
        for label in dict.fromkeys(r.variant for r in self.rows):
            ok = [r for r in self.rows if r.variant == label and r.error is None]
            if ok:
                out[label] = {k: _mean([getattr(r, k) for r in ok]) for k in ("text_align", "image_align")}
        return out


def _mean(xs) -> float | None:
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def _resolve(prompt: str, macro: str) -> str:
    return prompt.replace("<class>", macro)


def run_ablations(plan: AblationPlan, base: UNetWeights, vocab: Vocabulary,
                  concepts: Sequence[ConceptCase], prompts: Sequence[str], seeds: Sequence[int],
                  train_seed: int = 0, steps: int = 50, guidance: float = 6.0,
                  schedule: NoiseSchedule | None = None, workers: int = 1,
                  timing: bool = False) -> EvalReport:
    """Personalize every (variant, concept), then sample and score every (prompt, seed).

    Prompts may contain ``<class>``, replaced by each concept's macro class.
    A failing row is recorded with its error and the sweep continues.
    """
    s = schedule or make_schedule()
    concept_ids = {c.name: vocab.reserved_ids[k] for k, c in enumerate(concepts)}

    def job(variant: Variant, case: ConceptCase) -> list[EvalRow]:
        rows = []
        t0 = time.perf_counter()
        try:
            cfg = variant.config(plan.base)
            chash = cfg.hash()
            rs = personalize(base, case.references, case.macro_class, cfg, train_seed, vocab,
                             concept_id=concept_ids[case.name], schedule=s)
        except Exception as exc:  # per-row isolation
            log.warning("variant=%s concept=%s failed: %s", variant.label, case.name, exc)
            return [EvalRow(case.name, _resolve(p, case.macro_class), variant.label, sd, None, None,
                            0.0, "", "", f"{type(exc).__name__}: {exc}")
                    for p in prompts for sd in seeds]
        train_ms = (time.perf_counter() - t0) * 1e3
        for p in prompts:
            prompt = _resolve(p, case.macro_class if cfg.use_macro_class else "").replace("  ", " ")
            for sd in seeds:
                t1 = time.perf_counter()
                try:
                    res = sample(SampleRequest(prompt, seed=sd, steps=steps, guidance=guidance,
                                               lag=variant.lag), base, vocab, residuals=rs, schedule=s)
                    text_prompt = _resolve(p, case.macro_class)
                    row = EvalRow(case.name, prompt, variant.label, sd,
                                  toy_text_alignment(res.image, text_prompt, base, vocab),
                                  toy_image_alignment(res.image, case.references),
                                  0.0, chash, res.z_T_hash)
                except Exception as exc:
                    row = EvalRow(case.name, prompt, variant.label, sd, None, None, 0.0, chash, "",
                                  f"{type(exc).__name__}: {exc}")
                if timing:
                    row.runtime_ms = train_ms / max(1, len(prompts) * len(seeds)) + \
                        (time.perf_counter() - t1) * 1e3
                rows.append(row)
        return rows

    jobs = [(v, c) for v in plan.variants for c in concepts]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda vc: job(*vc), jobs))
    else:
        results = [job(v, c) for v, c in jobs]
    report = EvalReport([r for rows in results for r in rows])
    report.meta = {"seeds": list(seeds), "steps": steps, "guidance": guidance,
                   "train_seed": train_seed, "base_digest": base.digest()[:16]}
    return report


def base_model_rows(base: UNetWeights, vocab: Vocabulary, concepts: Sequence[ConceptCase],
                    prompts: Sequence[str], seeds: Sequence[int], steps: int = 50,
                    guidance: float = 6.0, schedule: NoiseSchedule | None = None) -> EvalReport:
    """Score the untouched base model on the same prompts and seeds (concept token unbound)."""
    s = schedule or make_schedule()
    rows = []
    for k, case in enumerate(concepts):
        cid = vocab.reserved_ids[k]
        for p in prompts:
            prompt = _resolve(p, case.macro_class)
            for sd in seeds:
                res = sample(SampleRequest(prompt, seed=sd, steps=steps, guidance=guidance,
                                           concept_id=cid), base, vocab, schedule=s)
                rows.append(EvalRow(case.name, prompt, "base", sd,
                                    toy_text_alignment(res.image, prompt, base, vocab),
                                    toy_image_alignment(res.image, case.references),
                                    0.0, "base", res.z_T_hash))
    return EvalReport(rows)


def rank_trend(report: EvalReport, labels: Sequence[str]) -> tuple[list[float], float]:
    """Mean image alignment per label and the fraction of non-decreasing adjacent pairs."""
    means = report.means()
    vals = [means[lb]["image_align"] for lb in labels]
    pairs = [b >= a for a, b in zip(vals, vals[1:])]
    return vals, float(np.mean(pairs)) if pairs else 1.0


# -- report emission -------------------------------------------------------------------

def _fmt(x) -> str:
    return "" if x is None else f"{x:.6f}"


def emit_report(report: EvalReport, path, fmt: str | None = None) -> Path:
    if not report.rows:
        raise ValueError("report is empty")
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".") or "csv"
    try:
        if fmt == "csv":
            with path.open("w", newline="") as fh:
                wr = csv.writer(fh, lineterminator="\n")
                wr.writerow(CSV_COLUMNS)
                for r in report.rows:
                    wr.writerow([r.concept, r.prompt, r.variant, r.seed, _fmt(r.text_align),
                                 _fmt(r.image_align), _fmt(r.runtime_ms), r.config_hash])
        elif fmt == "json":
            rows = []
            for r in report.rows:
                d = asdict(r)
                for k in ("text_align", "image_align", "runtime_ms"):
                    d[k] = None if d[k] is None else round(d[k], 6)
                rows.append(d)
            means = {lb: {k: None if x is None else round(x, 6) for k, x in m.items()}
                     for lb, m in report.means().items()}
            path.write_text(json.dumps({"rows": rows, "means": means, "meta": report.meta},
                                       indent=1, sort_keys=True))
        else:
            raise ValueError(f"unknown report format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path


def load_report(path) -> EvalReport:
    d = json.loads(Path(path).read_text())
    return EvalReport([EvalRow(**r) for r in d["rows"]], d.get("meta", {}))
