"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error. Every run logs its
resolved configuration as ``key=value`` lines. Settings resolve as
flags > ``--config`` JSON file > built-in defaults; ``LAGDIFF_SEED`` overrides
the default seed and ``LAGDIFF_THREADS`` sizes the ablation worker pool.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path


log = logging.getLogger("lagdiff")

SUBCOMMANDS = ("gen-data", "pretrain", "personalize", "sample", "inspect-masks",
               "ablate", "eval", "param-report")

DEFAULTS: dict[str, dict] = {
    "gen-data": {"n": 512, "macro": "dog", "concept_id": "concept0"},
    "pretrain": {"steps": 3000, "batch_size": 16, "lr": 2e-3, "prompt_dropout": 0.1},
    "personalize": {"iterations": 150, "batch_size": 4, "lr": 1e-3, "target": "proj_out",
                    "no_macro_class": False, "reg_images": False, "update_token_embedding": False,
                    "rank": None, "token_slot": 0},
    "sample": {"steps": 50, "eta": 0.0, "guidance": 6.0, "lag": False, "head_rule": "mean"},
    "inspect-masks": {"steps": 50, "eta": 0.0, "guidance": 6.0, "lag": False, "head_rule": "mean"},
    "ablate": {"steps": 50, "guidance": 6.0, "seeds": "0,1",
               "prompts": "a photo of a V* <class>|a photo of a V* <class> on a beach",
               "timing": False},
    "eval": {"timing": False},
    "param-report": {},
}

REQUIRED: dict[str, tuple[str, ...]] = {
    "gen-data": ("kind", "out"),
    "pretrain": ("data", "out"),
    "personalize": ("model", "refs", "out"),
    "sample": ("model", "prompt", "out"),
    "inspect-masks": ("model", "prompt", "out", "dump_masks"),
    "ablate": ("model", "plan", "concepts", "out"),
    "eval": ("images", "refs", "out"),
    "param-report": ("model", "residuals"),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _sample_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", help="model directory (manifest.json, weights, vocabulary)")
    p.add_argument("--prompt")
    p.add_argument("--steps", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--guidance", type=float)
    p.add_argument("--residuals", help="residual file (.pres)")
    p.add_argument("--lag", action="store_true", default=None, help="localized attention-guided sampling")
    p.add_argument("--head-rule", choices=("mean", "union"))
    p.add_argument("--dump-masks", metavar="DIR")
    p.add_argument("--inject-masks", metavar="DIR", help="replay masks dumped by an earlier run")
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lagdiff", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int)
        p.add_argument("--config", help="JSON file of default flag values")
        return p

    p = add("gen-data", "generate the pretraining corpus or a concept reference set")
    p.add_argument("--kind", choices=("pretrain", "concept"))
    p.add_argument("--out")
    p.add_argument("--n", type=int)
    p.add_argument("--spec", help="concept spec JSON")
    p.add_argument("--macro")
    p.add_argument("--concept-id")

    p = add("pretrain", "train the base denoiser on a generated corpus")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--prompt-dropout", type=float)

    p = add("personalize", "learn residuals for one concept")
    p.add_argument("--model")
    p.add_argument("--refs")
    p.add_argument("--macro")
    p.add_argument("--out")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--target", choices=("proj_out", "kv", "proj_in", "kv+proj_out", "kv+proj_in+proj_out"))
    p.add_argument("--no-macro-class", action="store_true", default=None)
    p.add_argument("--reg-images", action="store_true", default=None)
    p.add_argument("--update-token-embedding", action="store_true", default=None)
    p.add_argument("--rank", type=float, help="fixed rank (integer) or fraction of width (< 1)")
    p.add_argument("--token-slot", type=int, help="index into the reserved identifier block")

    _sample_flags(add("sample", "generate an image"))
    _sample_flags(add("inspect-masks", "sample with localization and dump per-block masks"))

    p = add("ablate", "run an ablation plan")
    p.add_argument("--model")
    p.add_argument("--plan")
    p.add_argument("--concepts")
    p.add_argument("--out")
    p.add_argument("--prompts", help="'|'-separated prompts; <class> expands to the macro class")
    p.add_argument("--seeds", help="comma-separated sampling seeds")
    p.add_argument("--steps", type=int)
    p.add_argument("--guidance", type=float)
    p.add_argument("--timing", action="store_true", default=None, help="record wall-clock runtimes")

    p = add("eval", "score generated images against references")
    p.add_argument("--model", help="probe model for text alignment (optional)")
    p.add_argument("--images")
    p.add_argument("--refs")
    p.add_argument("--out")
    p.add_argument("--timing", action="store_true", default=None)

    p = add("param-report", "residual vs. base parameter counts")
    p.add_argument("--model")
    p.add_argument("--residuals")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    cfg = {"seed": int(os.environ.get("LAGDIFF_SEED", 0))}
    cfg.update(DEFAULTS[args.command])
    if args.config:
        try:
            cfg.update(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    for k, v in vars(args).items():
        if k in ("command", "config", "verbose") or v is None:
            continue
        cfg[k] = v
    missing = [k for k in REQUIRED[args.command] if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    for k in ("model", "refs", "data", "residuals", "plan", "concepts", "images", "spec", "inject_masks"):
        if cfg.get(k) and not Path(cfg[k]).exists():
            raise UsageError(f"--{k.replace('_', '-')}: path does not exist: {cfg[k]}")
    return cfg


def _echo(command: str, cfg: dict) -> None:
    log.info("command=%s", command)
    for k in sorted(cfg):
        log.info("config %s=%s", k, cfg[k])


# -- subcommand implementations -------------------------------------------------------

def cmd_gen_data(cfg: dict) -> None:
    from . import data

    if cfg["kind"] == "pretrain":
        man = data.gen_pretrain_corpus(cfg["seed"], cfg["n"])
        path = man.write(cfg["out"])
        log.info("wrote images=%d manifest=%s", len(man.entries), path)
    else:
        if cfg.get("spec"):
            spec = data.ConceptSpec.from_json(Path(cfg["spec"]).read_text())
        else:
            spec = data.random_concept_spec(cfg["concept_id"], cfg["macro"], cfg["seed"])
        refs = data.gen_concept(spec, cfg["seed"])
        out = data.write_concept(spec, refs, cfg["out"])
        log.info("wrote references=%d dir=%s", len(refs), out)


def cmd_pretrain(cfg: dict) -> None:
    from .checkpoint import save_model
    from .data import DatasetManifest
    from .diffusion import PretrainConfig, pretrain
    from .text import default_vocab

    man = DatasetManifest.read(cfg["data"])
    vocab = default_vocab(seed=cfg["seed"])
    pc = PretrainConfig(steps=cfg["steps"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                        prompt_dropout=cfg["prompt_dropout"])
    w = pretrain(man.pairs(), pc, cfg["seed"], vocab)
    out = save_model(w, vocab, cfg["out"], {"pretrain": {"steps": pc.steps, "batch_size": pc.batch_size,
                                                         "lr": pc.lr, "seed": cfg["seed"]}})
    loss = w.history["loss"]
    with open(Path(out) / "loss.csv", "w") as fh:
        fh.write("step,loss\n")
        fh.writelines(f"{i},{v:.6f}\n" for i, v in enumerate(loss))
    log.info("pretrain done steps=%d final_loss=%.6f null_items=%d out=%s",
             len(loss), loss[-1], w.history["null_items"], out)


def _personalize_config(cfg: dict):
    from .residuals import PersonalizeConfig

    rank = cfg.get("rank")
    if rank is not None:
        rank = int(rank) if float(rank) >= 1 else float(rank)
    return PersonalizeConfig(iterations=cfg["iterations"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                             target=cfg["target"], use_macro_class=not cfg["no_macro_class"],
                             use_reg_images=cfg["reg_images"],
                             update_token_embedding=cfg["update_token_embedding"], rank=rank)


def cmd_personalize(cfg: dict) -> None:
    from .checkpoint import load_model
    from .data import read_concept
    from .residuals import personalize, save_residuals

    w, vocab = load_model(cfg["model"])
    spec, refs = read_concept(cfg["refs"])
    if not refs:
        raise ValueError(f"no .ppm references in {cfg['refs']}")
    macro = cfg.get("macro") or (spec.macro_class if spec else None)
    if macro is None and not cfg["no_macro_class"]:
        raise UsageError("--macro is required when the reference directory has no concept.json")
    pc = _personalize_config(cfg)
    slot = cfg["token_slot"]
    rs = personalize(w, refs, macro, pc, cfg["seed"], vocab, concept_id=vocab.reserved_ids[slot])
    save_residuals(rs, cfg["out"])
    log.info("personalize done params=%d eval_before=%.6f eval_after=%.6f out=%s", rs.param_count(),
             rs.history["eval_before"], rs.history["eval_after"], cfg["out"])


def _load_injected(dirname, blocks: int, steps: int):
    from .imageio import load_mask
    from .sampler import MaskStack

    d = Path(dirname)
    stack = MaskStack()
    for k in range(steps):
        row = []
        for i in range(blocks):
            p = d / f"mask_b{i}_t{k}.pgm"
            if not p.exists():
                raise UsageError(f"--inject-masks: missing {p.name}")
            row.append(load_mask(p))
        stack.masks.append(row)
    return stack


def _run_sample(cfg: dict):
    from .checkpoint import load_model
    from .imageio import save_image, save_mask
    from .sampler import SampleRequest, sample

    w, vocab = load_model(cfg["model"])
    req = SampleRequest(cfg["prompt"], seed=cfg["seed"], steps=cfg["steps"], eta=cfg["eta"],
                        guidance=cfg["guidance"], residuals=cfg.get("residuals"), lag=cfg["lag"],
                        out=cfg["out"], head_rule=cfg["head_rule"],
                        concept_id=None if cfg.get("residuals") else vocab.reserved_ids[0])
    inject = None
    if cfg.get("inject_masks"):
        inject = _load_injected(cfg["inject_masks"], w.n_blocks, req.steps)
    res = sample(req, w, vocab, inject=inject)
    Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
    save_image(res.image, cfg["out"])
    if cfg.get("dump_masks"):
        if res.masks is None:
            raise UsageError("--dump-masks needs --lag")
        d = Path(cfg["dump_masks"])
        d.mkdir(parents=True, exist_ok=True)
        for k, step in enumerate(res.masks.masks):
            for i, m in enumerate(step):
                save_mask(m, d / f"mask_b{i}_t{k}.pgm")
    log.info("sample done evals=%d z_T=%s out=%s", res.evals, res.z_T_hash, cfg["out"])
    return res


def cmd_sample(cfg: dict) -> None:
    _run_sample(cfg)


def cmd_inspect_masks(cfg: dict) -> None:
    if not cfg["lag"]:
        raise UsageError("inspect-masks requires --lag")
    res = _run_sample(cfg)
    cov = res.masks.coverage()
    path = Path(cfg["dump_masks"]) / "coverage.csv"
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["step"] + [f"block{i}" for i in range(cov.shape[1])])
        for k, row in enumerate(cov):
            wr.writerow([k] + [f"{v:.6f}" for v in row])
    log.info("coverage mean=%s file=%s", " ".join(f"{v:.4f}" for v in cov.mean(axis=0)), path)


def _concept_cases(root) -> list:
    from .data import read_concept
    from .evaluation import ConceptCase

    cases = []
    for d in sorted(p for p in Path(root).iterdir() if p.is_dir()):
        spec, refs = read_concept(d)
        if spec is None or not refs:
            continue
        cases.append(ConceptCase(d.name, spec.macro_class, refs))
    if not cases:
        raise UsageError(f"--concepts: no concept directories under {root}")
    return cases


def cmd_ablate(cfg: dict) -> None:
    from .checkpoint import load_model
    from .evaluation import AblationPlan, emit_report, run_ablations

    w, vocab = load_model(cfg["model"])
    plan = AblationPlan.from_json(Path(cfg["plan"]).read_text())
    prompts = [p.strip() for p in cfg["prompts"].split("|") if p.strip()]
    seeds = [int(s) for s in str(cfg["seeds"]).split(",") if s.strip()]
    workers = int(os.environ.get("LAGDIFF_THREADS", 1))
    report = run_ablations(plan, w, vocab, _concept_cases(cfg["concepts"]), prompts, seeds,
                           train_seed=cfg["seed"], steps=cfg["steps"], guidance=cfg["guidance"],
                           workers=workers, timing=cfg["timing"])
    emit_report(report, cfg["out"])
    for label, m in report.means().items():
        log.info("variant=%r text_align=%.6f image_align=%.6f", label, m["text_align"], m["image_align"])


def cmd_eval(cfg: dict) -> None:
    import time

    from .data import DatasetManifest, read_concept
    from .evaluation import EvalReport, EvalRow, emit_report, toy_image_alignment, toy_text_alignment
    from .imageio import load_image

    _, refs = read_concept(cfg["refs"])
    if not refs:
        raise UsageError(f"--refs: no .ppm files in {cfg['refs']}")
    probe = vocab = None
    if cfg.get("model"):
        from .checkpoint import load_model
        probe, vocab = load_model(cfg["model"])
    images = Path(cfg["images"])
    captions = {}
    if (images / "manifest.json").exists():
        captions = {e["path"]: e["caption"] for e in DatasetManifest.read(images).entries}
    rows = []
    for p in sorted(images.glob("*.ppm")):
        t0 = time.perf_counter()
        img = load_image(p)
        prompt = captions.get(p.name, "")
        text = toy_text_alignment(img, prompt, probe, vocab) if probe is not None and prompt else None
        row = EvalRow(Path(cfg["refs"]).name, prompt, p.name, cfg["seed"], text,
                      toy_image_alignment(img, refs), 0.0, "")
        if cfg["timing"]:
            row.runtime_ms = (time.perf_counter() - t0) * 1e3
        rows.append(row)
    if not rows:
        raise UsageError(f"--images: no .ppm files in {images}")
    emit_report(EvalReport(rows), cfg["out"])
    log.info("eval done rows=%d out=%s", len(rows), cfg["out"])


def cmd_param_report(cfg: dict) -> None:
    from .checkpoint import load_model
    from .residuals import load_residuals, param_report

    w, _ = load_model(cfg["model"])
    rep = param_report(load_residuals(cfg["residuals"]), w)
    print(json.dumps(rep, sort_keys=True))
    log.info("residual_params=%d base_params=%d ratio=%.6f", rep["residual_params"],
             rep["base_params"], rep["ratio"])


HANDLERS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "personalize": cmd_personalize,
    "sample": cmd_sample, "inspect-masks": cmd_inspect_masks, "ablate": cmd_ablate,
    "eval": cmd_eval, "param-report": cmd_param_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="level=%(levelname)s logger=%(name)s %(message)s", force=True)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    try:
        cfg = resolve(args)
        _echo(args.command, cfg)
        HANDLERS[args.command](cfg)
    except UsageError as exc:
        print(f"lagdiff {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.error("error=%s message=%r", type(exc).__name__, str(exc))
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
