"""Small end-to-end CLI pipeline used by the CLI and acceptance tests."""

import hashlib
import json
from pathlib import Path

from lagdiff.cli import main

SAMPLE_STEPS = 4


def run(*argv) -> int:
    return main([str(a) for a in argv])


def run_pipeline(root: Path, seed: int = 3) -> dict[str, int]:
    """Drive every subcommand once with tiny budgets; return their exit codes."""
    root.mkdir(parents=True, exist_ok=True)
    s = ["--seed", seed]
    rc = {}
    rc["gen-data"] = run("gen-data", "--kind", "pretrain", "--n", 64, "--out", root / "corpus", *s)
    rc["gen-data concept"] = run("gen-data", "--kind", "concept", "--macro", "cat", "--concept-id", "c0",
                                 "--out", root / "concepts" / "c0", *s)
    rc["pretrain"] = run("pretrain", "--data", root / "corpus", "--out", root / "model", "--steps", 3,
                         "--batch-size", 2, *s)
    rc["personalize"] = run("personalize", "--model", root / "model", "--refs", root / "concepts" / "c0",
                            "--out", root / "c0.pres", "--iterations", 3, "--batch-size", 2, *s)
    common = ["--model", root / "model", "--residuals", root / "c0.pres", "--steps", SAMPLE_STEPS, *s]
    rc["sample"] = run("sample", *common, "--prompt", "a photo of a V* cat", "--out", root / "gen" / "a.ppm")
    rc["inspect-masks"] = run("inspect-masks", *common, "--prompt", "a photo of a V* cat on a beach", "--lag",
                              "--out", root / "gen" / "b.ppm", "--dump-masks", root / "masks")
    (root / "plan.json").write_text(json.dumps({"base": {"iterations": 2, "batch_size": 2},
                                                "variants": [{"label": "kv", "overrides": {"target": "kv"}},
                                                             {"label": "Ours+LAG", "lag": True}]}))
    rc["ablate"] = run("ablate", "--model", root / "model", "--plan", root / "plan.json", "--concepts",
                       root / "concepts", "--out", root / "ablate.csv", "--seeds", "0,1", "--steps", 2,
                       "--prompts", "a photo of a V* <class>", *s)
    rc["eval"] = run("eval", "--model", root / "model", "--images", root / "gen", "--refs",
                     root / "concepts" / "c0", "--out", root / "eval.json", *s)
    rc["param-report"] = run("param-report", "--model", root / "model", "--residuals", root / "c0.pres")
    return rc


def tree_digest(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}
