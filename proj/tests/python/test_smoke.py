import numpy as np
import pytest

import selfctl

TINY_CONFIG = """
[model]
width = 16
depth_enc = 1
depth_dec = 1
heads = 2
mlp_ratio = 2

[diffhead]
hidden = 16
blocks = 1
time_dim = 8
sample_steps = 5

[train]
batch_size = 4
steps = 5
log_every = 1

[data]
num_samples = 18
"""


def test_default_policy_mask():
    mask = selfctl.attention_mask(2, 1, 2, 3)
    expected = np.array(
        [
            [1, 0, 0, 0, 0],
            [1, 1, 0, 0, 0],
            [1, 1, 1, 0, 0],
            [1, 1, 1, 1, 1],
            [1, 1, 1, 1, 1],
        ],
        dtype=bool,
    )
    assert mask.dtype == bool
    assert (mask == expected).all()
    assert selfctl.mask_dump(2, 1, 2, "c,b,b,c").splitlines()[1:] == ["10000", "11000", "11100", "11111", "11111"]
    assert selfctl.ablation_policy(3) == "causal,bidirectional,bidirectional,causal"
    with pytest.raises(IndexError):
        selfctl.attention_mask(1, 1, 1, 9)


def test_patchify_round_trip():
    rng = np.random.default_rng(0)
    img = rng.random((16, 16, 3))
    tokens = selfctl.patchify(img, 4)
    assert tokens.shape == (16, 48)
    assert tokens.min() >= -1.0 and tokens.max() <= 1.0
    back = selfctl.unpatchify(tokens, 16, 16, 3, 4)
    assert np.abs(back - img).max() <= 1e-6


def test_plans():
    assert selfctl.plan_step_sizes(16, 4) == [2, 4, 5, 5]
    plan = selfctl.generation_plan(16, 4, seed=3)
    assert sorted(p for step in plan for p in step) == list(range(16))


def test_synthetic_data_and_probe():
    s = selfctl.make_sample("red", "square")
    assert s["caption"] == "red square"
    assert s["target"].shape == (16, 16, 3)
    assert s["condition"][5:11, 5:11, 0].all()
    assert selfctl.probe_classify(s["target"]) == ("red", "square")
    data = selfctl.make_dataset(18, seed=2)
    hits = sum(selfctl.probe_classify(d["target"]) == (d["color"], d["shape"]) for d in data)
    assert hits >= 17
    assert selfctl.probe_classify(np.zeros((16, 16, 3))) == ("none", "none")


def test_train_sample_and_cli(tmp_path):
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(TINY_CONFIG)
    model, losses = selfctl.train(str(cfg), steps=5, output_dir=str(tmp_path / "run"))
    assert len(losses) == 5 and all(np.isfinite(losses))
    assert model.parameter_count() > 0

    cond = selfctl.make_sample("blue", "circle")["condition"][:, :, 0]
    a = model.generate(["blue circle", "red cross"], cond_image=cond, k=4, seed=1)
    b = model.generate(["blue circle", "red cross"], cond_image=cond, k=4, seed=1)
    assert len(a) == 2 and a[0].shape == (16, 16, 3)
    assert all((x == y).all() for x, y in zip(a, b))

    ckpt = tmp_path / "run" / "checkpoint.bin"
    reloaded = selfctl.Model(str(ckpt))
    assert reloaded.config_ini() == model.config_ini()
    c = reloaded.generate(["blue circle", "red cross"], cond_image=cond, k=4, seed=1)
    assert all((x == y).all() for x, y in zip(a, c))

    code, out, _ = selfctl.run_cli(["mask", "--layout", "0,0,3", "--option", "8"])
    assert code == 0 and out.splitlines()[1:] == ["111"] * 3
    code, _, err = selfctl.run_cli(["train", str(tmp_path / "missing.ini")])
    assert code == 2 and "missing.ini" in err
    with pytest.raises(selfctl.ConfigError):
        selfctl.train(str(tmp_path / "missing.ini"))
