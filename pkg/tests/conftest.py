"""Shared fixtures.

The trained base model is expensive (about 20 minutes on one core), so it is
built once and cached on disk, keyed by its training recipe. Set
LAGDIFF_CACHE to move the cache; run ``python tests/conftest.py`` to build it
ahead of a test session.
"""

import hashlib
import json
import os
import shutil
import sys
from pathlib import Path

import pytest

BASE_RECIPE = {"corpus_seed": 0, "corpus_size": 1024, "train_seed": 0, "steps": 3000,
               "batch_size": 16, "lr": 2e-3, "prompt_dropout": 0.1}


def cache_root() -> Path:
    return Path(os.environ.get("LAGDIFF_CACHE", Path.home() / ".cache" / "lagdiff"))


def base_model_dir() -> Path:
    from lagdiff.diffusion import UNetConfig

    recipe = {**BASE_RECIPE, "architecture": UNetConfig().to_dict()}
    key = hashlib.sha256(json.dumps(recipe, sort_keys=True).encode()).hexdigest()[:12]
    return cache_root() / f"base-{key}"


def build_base(log_every: int = 100) -> Path:
    from lagdiff import diffusion as D
    from lagdiff.checkpoint import save_model
    from lagdiff.data import gen_pretrain_corpus
    from lagdiff.text import default_vocab

    out = base_model_dir()
    if (out / "manifest.json").exists():
        return out
    r = BASE_RECIPE
    vocab = default_vocab()
    corpus = gen_pretrain_corpus(r["corpus_seed"], r["corpus_size"])
    cfg = D.PretrainConfig(steps=r["steps"], batch_size=r["batch_size"], lr=r["lr"],
                           prompt_dropout=r["prompt_dropout"], log_every=log_every)
    w = D.pretrain(corpus.pairs(), cfg, r["train_seed"], vocab)
    tmp = out.with_name(out.name + f".tmp{os.getpid()}")
    save_model(w, vocab, tmp, extra={"recipe": r})
    (tmp / "loss.json").write_text(json.dumps(w.history["loss"]))
    if out.exists():
        shutil.rmtree(out)
    tmp.rename(out)
    return out


REGRESSION_FILE = Path(__file__).parent / "fixtures" / "regression.json"


@pytest.fixture(scope="session")
def regression():
    """``check(name, value, tol)``: record a value on first green run, compare afterwards.

    Returns the stored value, so callers can report both.
    """
    stored = json.loads(REGRESSION_FILE.read_text()) if REGRESSION_FILE.exists() else {}

    def check(name: str, value: float, tol: float = 1e-9) -> float:
        if name not in stored:
            stored[name] = value
            REGRESSION_FILE.parent.mkdir(exist_ok=True)
            REGRESSION_FILE.write_text(json.dumps(stored, indent=1, sort_keys=True) + "\n")
        assert abs(value - stored[name]) <= tol, f"{name}: {value} drifted from recorded {stored[name]}"
        return stored[name]

    return check


@pytest.fixture(scope="session")
def trained_base():
    """(weights, vocabulary) of the cached pretrained base model."""
    from lagdiff.checkpoint import load_model

    return load_model(build_base())


_ACCEPTANCE: dict[str, tuple[str, dict]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.failed and report.nodeid not in _ACCEPTANCE):
        _ACCEPTANCE[report.nodeid] = (report.outcome, dict(report.user_properties))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    rows = sorted(_ACCEPTANCE.values(), key=lambda r: r[1].get("criterion", 99))
    for outcome, props in rows:
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {props.get('criterion', '?'):>2} {verdict}: "
                                    f"{props.get('title', '')} | {props.get('detail', 'no detail recorded')}")


if __name__ == "__main__":
    import logging

    logging.basicConfig(level=logging.INFO, stream=sys.stdout, format="%(asctime)s %(message)s")
    print(build_base())
