import json
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import pytest
import torch

from advsig.threatdata import generate_threat_dataset, load_manifest, multi_vm_recipe, synth_corpus, victim_splits
from advsig.victim import VictimTrainConfig, build_victim, save_victim, train_victim

torch.set_num_threads(1)


@dataclass
class ToyWorld:
    corpus: list
    split: dict
    victims: dict
    recipe: object
    manifest: object
    root: Path


def build_toy_world(root, seed=0):
    """Four speakers, two small victims, and a two-victim four-attack manifest on disk."""
    corpus = synth_corpus(4, 10, duration_s=0.1, seed=2)
    split = victim_splits(corpus, seed=seed, test_ratio=0.2, val_ratio=0.1)
    train = [u for u in corpus if split[u.id] == "train"]
    val = [u for u in corpus if split[u.id] == "val"]
    victims = {}
    for arch in ("lresnet34", "ecapatdnn"):
        model, _ = train_victim(build_victim(arch, 4, seed=1), train, val, VictimTrainConfig(epochs=15, batch_size=4))
        save_victim(model, root / "victims" / arch)
        victims[arch] = model
    recipe = multi_vm_recipe(
        victims=("lresnet34", "ecapatdnn"), fraction=0.5, seed=seed,
        cw=dict(max_cw_iters=15, c_search_steps=3, c_init=0.1),
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        generate_threat_dataset(recipe, victims, corpus, split, out_dir=root / "manifest")
    return ToyWorld(corpus, split, victims, recipe, load_manifest(root / "manifest"), root)


@pytest.fixture(scope="session")
def toy_world(tmp_path_factory):
    return build_toy_world(tmp_path_factory.mktemp("toy"))


# --- acceptance plumbing ---------------------------------------------------------

_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        number, title = marker.args
        detail = ", ".join(f"{k}={v}" for k, v in item.user_properties)
        _ACCEPTANCE[number] = (title, rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[number]
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))


@dataclass
class ReproduceRun:
    run_dir: Path
    report: dict
    seconds: float


def run_reproduce(out, seed=0):
    from advsig.cli.run import make_config, run

    t0 = time.perf_counter()
    d = run(make_config("reproduce", seed=seed, out=str(out), env={}))
    return ReproduceRun(d, json.loads((d / "summary.json").read_text()), time.perf_counter() - t0)


@pytest.fixture(scope="session")
def reproduce_run(tmp_path_factory):
    """One full toy reproduction shared by the end-to-end acceptance checks (about 10 minutes)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return run_reproduce(tmp_path_factory.mktemp("reproduce"))
