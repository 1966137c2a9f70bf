import numpy as np
import pytest

from synthpair.pipeline.corpus import make_corpus
from synthpair.vq import VQBackbone, pretrain_backbone


@pytest.fixture(scope="session")
def shapes_corpus():
    return make_corpus(400, seed=11)


@pytest.fixture(scope="session")
def trained_vq(shapes_corpus):
    images = np.stack([it.image for it in shapes_corpus[:300]])
    vq = VQBackbone()
    pretrain_backbone(vq, images, steps=500, seed=0)
    return vq


@pytest.fixture(scope="session")
def pretrained_lm(shapes_corpus):
    from synthpair.vlm.lm import FrozenLM, LMConfig, pretrain_lm

    lm = FrozenLM(LMConfig(dim=64, n_heads=4))
    pretrain_lm(lm, [it.caption.token_ids for it in shapes_corpus], steps=600, lr=2e-3, seed=0)
    return lm


@pytest.fixture(scope="session")
def semantic_lm(request):
    """The experiment-default caption LM, cached across test runs by the settings it depends on."""
    from dataclasses import fields

    from synthpair.pipeline.experiment import ExperimentConfig, build_lm
    from synthpair.vlm.lm import FrozenLM

    cfg = ExperimentConfig()
    lm_fields = {"seed", "n_classes"} | {f.name for f in fields(cfg) if f.name.startswith("lm_")}
    key = cfg.hash(exclude=[f.name for f in fields(cfg) if f.name not in lm_fields])
    path = request.config.cache.mkdir("synthpair") / f"lm-{key[:16]}.bin"
    if path.exists():
        return FrozenLM.load(path)
    lm = build_lm(cfg)
    lm.save(path)
    return lm


# -- acceptance summary ----------------------------------------------------------

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        _ACCEPTANCE[name] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        outcome, detail = _ACCEPTANCE[name]
        number, _, title = name.removeprefix("test_criterion_").partition("_")
        line = f"criterion {int(number):2d} {title.replace('_', ' ')}: {outcome}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
