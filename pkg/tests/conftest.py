import numpy as np
import pytest
import torch

from mocgan.config import desk_config
from mocgan.data import SceneDataset, build_splits, make_synthetic_dataset


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    """48 synthetic images, split and indexed."""
    d = tmp_path_factory.mktemp("toy")
    make_synthetic_dataset(48, 6, 64, seed=3, out_dir=d)
    build_splits(d, seed=0)
    return d


@pytest.fixture(scope="session")
def toy_dataset(toy_dir):
    return SceneDataset(toy_dir, "train", resolutions=(64,), seed=0)


@pytest.fixture
def tiny_cfg():
    cfg = desk_config()
    cfg.train.batch_size = 4
    cfg.train.log_every = 1
    return cfg


@pytest.fixture(scope="session")
def tiny_run(toy_dir, toy_dataset, tmp_path_factory):
    """Pretrained encoders (a few steps each) and a 2-step adversarial checkpoint."""
    from mocgan.training import Trainer, pretrain_phrase_damsm, pretrain_text_encoder

    run = tmp_path_factory.mktemp("run")
    cfg = desk_config()
    cfg.train.batch_size = 4
    cfg.data.data_dir = str(toy_dir)
    pretrain_text_encoder(cfg, toy_dataset, run / "text_encoder.pt", steps=3)
    pretrain_phrase_damsm(cfg, toy_dataset, run / "text_encoder.pt", run / "phrase_damsm.pt", steps=3)
    tr = Trainer(cfg, toy_dataset, run / "text_encoder.pt", run / "phrase_damsm.pt")
    tr.run(2)
    tr.save(run / "mocgan.pt")
    return {"dir": run, "cfg": cfg, "data": toy_dir}


@pytest.fixture(scope="session")
def smoke(tmp_path_factory):
    """Desk-scale pipeline on the synthetic set: pretraining, then 500 adversarial steps.

    Records every step, parameter checksums of the frozen parts at steps 0
    and 10, eval-mode L1 on a fixed batch before and after, and a checkpoint
    taken at step 490 for the resume check."""
    import time

    from mocgan.checkpoint import state_checksum
    from mocgan.training import Trainer, pretrain_phrase_damsm, pretrain_text_encoder

    root = tmp_path_factory.mktemp("smoke")
    data = make_synthetic_dataset(512, 8, 64, seed=0, out_dir=root / "data")
    build_splits(data, seed=0)
    cfg = desk_config()
    cfg.data.data_dir = str(data)
    ds = SceneDataset(data, "train", resolutions=(64,), seed=cfg.train.seed)
    run = root / "run"
    t0 = time.perf_counter()
    te = pretrain_text_encoder(cfg, ds, run / "text_encoder.pt")
    dm = pretrain_phrase_damsm(cfg, ds, te.path, run / "phrase_damsm.pt")
    trainer = Trainer(cfg, ds, te.path, dm.path)
    frozen = trainer.model.frozen_modules()
    parts = {"text_encoder": frozen["text_encoder"], "ire": trainer.model.graph.ire, "ige": trainer.model.graph.ige,
             "region_backbone": frozen["region"], "vgg_backbone": frozen["vgg"]}
    sums = {"before": {k: state_checksum(m) for k, m in parts.items()}}
    fixed = ds.batch(10_000, cfg.train.batch_size)
    z = trainer.model.sample_noise(len(fixed["cap_lens"]), torch.Generator().manual_seed(123))
    l1_start = trainer.eval_l1(fixed, z)
    records = []

    def on_step(rec):
        records.append(rec)
        if trainer.step == 10:
            sums["after_10"] = {k: state_checksum(m) for k, m in parts.items()}
        if trainer.step == 490:
            trainer.save(run / "step490.pt")

    trainer.run(500, callback=on_step)
    l1_end = trainer.eval_l1(fixed, z)
    trainer.save(run / "mocgan.pt")
    return {
        "cfg": cfg, "dataset": ds, "run": run, "trainer": trainer, "records": records, "checksums": sums,
        "l1": (l1_start, l1_end), "seconds": time.perf_counter() - t0, "pretrain": (te.losses, dm.losses),
    }


_VERDICTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if rep.when == "setup" and rep.outcome != "passed":
        _VERDICTS[n] = (title, "ERROR" if rep.failed else "SKIP")
    elif rep.when == "call":
        _VERDICTS[n] = (title, "PASS" if rep.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        title, verdict = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d} [{verdict}] {title}")
