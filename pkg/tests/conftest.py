import os

import matplotlib
import pytest

matplotlib.use("Agg")

from margrid.config import TrainConfig
from margrid.train import build_model, pretrain, save_model

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
COMMITTED_CKPT = os.path.join(REPO_ROOT, "artifacts", "pretrain", "model.ckpt")


@pytest.fixture(scope="session")
def pretrained_ckpt(tmp_path_factory) -> str:
    """Path to the committed pretrained checkpoint.

    Falls back to a short fresh pretraining run when the artifact is absent
    (e.g. a clean clone without artifacts); the heavy criteria then measure
    dynamics from that base instead.
    """
    if os.path.exists(COMMITTED_CKPT):
        return COMMITTED_CKPT
    out = str(tmp_path_factory.mktemp("pretrain"))
    cfg = TrainConfig(pretrain_steps=600, eval_every=300, ckpt_every=300)
    summary = pretrain(cfg, out, quiet=True)
    return summary["checkpoint"]


@pytest.fixture(scope="session")
def init_ckpt(tmp_path_factory) -> str:
    """An untrained checkpoint, for tests that only need loadable weights."""
    cfg = TrainConfig()
    model = build_model(cfg, 0)
    path = str(tmp_path_factory.mktemp("init") / "model.ckpt")
    save_model(model, path, cfg.fingerprint(), {"phase": "init"})
    return path
