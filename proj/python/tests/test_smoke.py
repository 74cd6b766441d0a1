import numpy as np
import pytest

import xswap

SMOKE = """
corpus.identities = 3
corpus.per_identity = 12
corpus.resolution = 32
gan.steps = 4
gan.batch = 4
gan.channel_base = 128
gan.channel_max = 16
gan.checkpoint_every = 2
id.steps = 3
id.width = 32
id.depth = 1
id.heads = 2
id.landmark_steps = 3
probe.steps = 3
dataset.records = 20
train.steps = 3
train.batch = 4
train.checkpoint_every = 2
train.attr_channels = 8,8,12,16
eval.pairs = 6
"""

STAGES = ["gen-faces", "pretrain-gan", "pretrain-id", "build-dataset", "train", "evaluate"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "smoke.cfg"
    cfg.write_text(SMOKE)
    for stage in STAGES:
        assert xswap.cli([stage, "--config", str(cfg), "--out", str(root / stage), "-q"]) == 0, stage
    return root


def test_formulas():
    assert xswap.num_styles(1024) == 18
    assert xswap.num_styles(64) == 10
    assert xswap.split_sizes(70000, 0.8) == (56000, 14000)


def test_config_round_trip():
    text = xswap.default_config()
    assert "train.steps = 20000" in text
    assert xswap.check_config(text) == text
    with pytest.raises(xswap.ConfigError, match="line 1"):
        xswap.check_config("train.nope = 3")
    with pytest.raises(ValueError):
        xswap.check_config("train.steps = -1")


def test_corpus():
    c = xswap.make_corpus(2, 3, 32, seed=4)
    assert c["images"].shape == (6, 3, 32, 32)
    assert c["images"].dtype == np.float32
    assert c["images"].min() >= -1.0 and c["images"].max() <= 1.0
    assert list(c["identity"]) == [0, 0, 0, 1, 1, 1]
    assert c["yaw"].shape == (6,)
    again = xswap.make_corpus(2, 3, 32, seed=4)
    assert np.array_equal(c["images"], again["images"])


def test_metrics():
    c = xswap.make_corpus(2, 1, 64, seed=1)
    x = c["images"]
    assert np.allclose(xswap.ms_ssim(x, x), 1.0)
    assert xswap.psnr(x[0], x[1]) < 100
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4000, 1))
    assert xswap.frechet_distance(a, a) == pytest.approx(0.0, abs=1e-9)
    assert xswap.frechet_distance(a, a + 1.0) == pytest.approx(1.0, abs=1e-9)


def test_cli_usage_errors():
    assert xswap.cli(["bogus"]) == 2
    assert xswap.cli(["train"]) == 2


def test_pipeline_and_swap(pipeline):
    assert (pipeline / "evaluate" / "transfer.tsv").exists()
    model = xswap.SwapModel(pipeline / "train")
    assert model.resolution == 32
    assert model.checkpoint.endswith("swap_step00000003.xswm")
    faces = xswap.make_corpus(2, 1, 32, seed=9)["images"]
    out = model.swap(faces[:1], faces[1:])
    assert out.shape == (1, 3, 32, 32)
    assert np.isfinite(out).all() and np.abs(out).max() <= 1.0
    assert np.array_equal(out, model.swap(faces[:1], faces[1:]))
    emb = model.embed(faces)
    assert np.allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-5)
    with pytest.raises(xswap.IoError, match="missing checkpoint"):
        xswap.SwapModel(pipeline / "gen-faces")


def test_generator_and_projection(pipeline):
    g = xswap.Generator.load(pipeline / "pretrain-gan")
    assert (g.resolution, g.num_styles) == (32, 8)
    imgs = g.generate(xswap.sample_z(5, 2))
    assert imgs.shape == (2, 3, 32, 32)
    styles = xswap.project(g, imgs, steps=20)
    assert styles.shape == (2, 8, 512)
    start = g.synthesize(np.broadcast_to(g.w_avg, (2, 8, 512)))
    assert xswap.psnr(g.synthesize(styles), imgs) >= xswap.psnr(start, imgs)


def test_fid(pipeline):
    faces = xswap.make_corpus(3, 12, 32, seed=2)["images"]
    enc = pipeline / "pretrain-id"
    assert xswap.fid(faces, faces, enc) == pytest.approx(0.0, abs=1e-6)
    assert xswap.fid(faces, np.clip(faces + 0.3, -1, 1), enc) > 0.0
