import os

import pytest
from hypothesis import HealthCheck, settings

from jointvt.config import RunConfig
from jointvt.synth import sweep_dataset

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

TINY = dict(n_pos=4, n_diam=3, f0_list=[140.0], duration=0.3, height=16, width=16,
            image_height=16, image_width=16,
            d_shared=4, d_g_only=4, d_s_only=4, channels=[4, 8], attention_stage=1,
            bridge_steps=2, prior_steps=2, flow_hidden=16, batch_size=4, epochs=2,
            gl_iterations=5)


@pytest.fixture(scope="session")
def tiny_cfg():
    return RunConfig(**TINY)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory, tiny_cfg):
    out = tmp_path_factory.mktemp("tiny") / "data"
    sweep_dataset(tiny_cfg.grid(), out, seed=tiny_cfg.seed)
    return out


@pytest.fixture(scope="session")
def tiny_features(tiny_data, tiny_cfg):
    from jointvt.data import load_features
    return load_features(tiny_data, tiny_cfg.features())


@pytest.fixture
def tiny_toml(tmp_path, tiny_cfg):
    p = tmp_path / "tiny.toml"
    p.write_text(tiny_cfg.to_toml())
    return p


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """The desk-scale run (2,000 pairs, 40 epochs). JOINTVT_DESK_DIR keeps it
    on disk across sessions; finished stages are reused."""
    from jointvt.pipeline import desk_run
    out = os.environ.get("JOINTVT_DESK_DIR") or tmp_path_factory.mktemp("desk")
    cfg = RunConfig()
    result = desk_run(cfg, out, reuse=True)
    result["cfg"] = cfg
    return result


def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, "_acceptance", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
