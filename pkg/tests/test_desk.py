"""Checks on the trained desk-scale model (shares the ``desk`` run with the
acceptance suite)."""
import numpy as np
import pytest

from jointvt import autodiff as ad
from jointvt.autodiff import Tensor
from jointvt.cli import main as cli_main
from jointvt.data import load_features
from jointvt.flows import log_prob
from jointvt.synth import read_manifest, read_png
from jointvt.train import build_model, load_checkpoint, run_split

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def trained(desk):
    model, cfg, _, _ = load_checkpoint(desk["run"] / "best.ckpt")
    model.eval()
    data = load_features(desk["data"], cfg.features())
    _, _, test = run_split(cfg, data.ids)
    return model, cfg, data, data.index(test)


def recon_mae(model, data, idx):
    with ad.no_grad():
        g = model.ae_g(Tensor(data.geometry[idx])).data
        s = model.ae_s(Tensor(data.mel[idx])).data
    return float(np.abs(g - data.geometry[idx]).mean()), float(np.abs(s - data.mel[idx]).mean())


def test_autoencoder_recon_mae(trained):
    model, cfg, data, idx = trained
    mae_g, mae_s = recon_mae(model, data, idx)
    fresh = build_model(cfg)
    fresh.eval()
    raw_g, raw_s = recon_mae(fresh, data, idx)
    assert mae_g < 0.05 and mae_s < 0.08
    assert raw_g > mae_g and raw_s > mae_s


def test_shuffled_conditioning_not_better(trained):
    model, cfg, data, idx = trained
    d = model.part.d_shared
    perm = np.random.default_rng(0).permutation(len(idx))
    with ad.no_grad():
        for ae, prior, x in ((model.ae_g, model.prior_g, data.geometry),
                             (model.ae_s, model.prior_s, data.mel)):
            z = ae.encode(Tensor(x[idx])).data
            own = -log_prob(Tensor(z[:, d:]), prior, cond=Tensor(z[:, :d])).data.mean()
            shuf = -log_prob(Tensor(z[:, d:]), prior, cond=Tensor(z[perm, :d])).data.mean()
            assert shuf >= own


def test_elbo_improves(desk):
    rows = desk["metrics"]
    assert rows[-1]["dev"]["elbo"]["elbo"] > rows[0]["dev"]["elbo"]["elbo"]


def fit_loss(part):
    # the non-negative part of the objective; the prior NLLs can go below zero
    return part["rec_g"] + part["rec_s"] + part["g2s"] + part["s2g"]


def test_overfitting_tripwire(desk):
    rows = desk["metrics"]
    best = min(rows, key=lambda r: r["dev"]["total"])
    assert fit_loss(best["dev"]) <= 2 * fit_loss(rows[-1]["train"])


def test_map_round_trip(desk, trained, tmp_path):
    import json
    model, cfg, data, idx = trained
    test_mae = json.loads(desk["report"].read_text())["image_mae"]
    rows = {r["id"]: r for r in read_manifest(desk["data"])}
    ckpt = str(desk["run"] / "best.ckpt")
    errs = []
    for i in idx[:10]:
        img = desk["data"] / rows[data.ids[i]]["img_path"]
        assert cli_main(["map", "--checkpoint", ckpt, "--from-geometry", str(img),
                         "--out", str(tmp_path / "a")]) == 0
        wav = tmp_path / "a" / f"{img.stem}.wav"
        assert cli_main(["map", "--checkpoint", ckpt, "--from-audio", str(wav),
                         "--out", str(tmp_path / "b")]) == 0
        back = read_png(tmp_path / "b" / f"{img.stem}_geometry.png").pixels
        errs.append(np.abs(back - read_png(img).pixels).mean())
    assert np.mean(errs) < 2 * test_mae
