import json
import math

import numpy as np
import pytest

from finola.core import pass_stats
from finola.harness import bench as bench_mod
from finola.harness.bench import EquivalenceError, bench
from finola.harness.config import ConfigError, TrainConfig, from_dict, load_config, parse_override
from finola.harness.data import SynthSpec, mean_psnr, psnr, quantize, read_ppm, synth_dataset, tile, write_ppm
from finola.harness.experiments import (
    EmbeddingStats,
    channel_sweep,
    embedding_experiments,
    frozen_norm_eval,
    interpolate,
    norm_stats,
)
from finola.harness.train import all_masks, batch_for_step, masks_for, train
from finola.models import Checkpoint, ModelConfig, coeffs_from_params, decode_q, encode, for_variant, init_params
from finola.numerics import make_rng

MICRO = dict(image_size=16, downsample=4, channels=8, encoder_widths=(4,), decoder_widths=(8, 8), seed=1)
DATA = SynthSpec(count=4, size=16, seed=2)


def micro(variant="finola", **kw):
    return for_variant(variant, **{**MICRO, **kw})


@pytest.fixture(scope="module")
def trained():
    cfg = micro()
    ckpt, _ = train(cfg, TrainConfig(lr=3e-3, warmup_steps=5, total_steps=60, batch_size=4, eval_every=0), synth_dataset(DATA))
    return ckpt


# -- data ------------------------------------------------------------------------------


def test_synth_range_and_determinism():
    a = synth_dataset(SynthSpec(count=12, size=16, seed=5))
    assert a.shape == (12, 16, 16, 3)
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert np.array_equal(a, synth_dataset(SynthSpec(count=12, size=16, seed=5)))
    assert not np.array_equal(a, synth_dataset(SynthSpec(count=12, size=16, seed=6)))
    # image i depends only on (seed, i)
    assert np.array_equal(a[:3], synth_dataset(SynthSpec(count=3, size=16, seed=5)))


def test_synth_weights_select_generator():
    rects = synth_dataset(SynthSpec(count=6, size=16, weights=(0, 0, 1)))
    grads = synth_dataset(SynthSpec(count=6, size=16, weights=(1, 0, 0)))
    # rectangles are piecewise constant: few distinct colours per image
    assert all(len(np.unique(r.reshape(-1, 3), axis=0)) <= 4 for r in rects)
    assert all(len(np.unique(g.reshape(-1, 3), axis=0)) > 4 for g in grads)


def test_psnr_cases():
    x = make_rng(0).random((8, 8, 3)) * 0.8
    assert psnr(x, x) == math.inf
    assert psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-9)
    y = make_rng(1).random((8, 8, 3))
    assert psnr(x, y) == psnr(y, x)
    with pytest.raises(ValueError):
        psnr(x, y[:4])


def test_mean_psnr_clips_reconstruction():
    x = np.full((2, 4, 4, 3), 0.9)
    assert mean_psnr(x + 0.5, x) == pytest.approx(20.0)


def test_ppm_roundtrip(tmp_path):
    img = make_rng(2).random((5, 7, 3))
    write_ppm(tmp_path / "a.ppm", img)
    back = read_ppm(tmp_path / "a.ppm")
    assert back.shape == (5, 7, 3)
    assert np.array_equal(quantize(back), quantize(img))
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


def test_ppm_header_comments_and_errors(tmp_path):
    (tmp_path / "c.ppm").write_bytes(b"P6\n# hi\n1 1\n255\n" + bytes([255, 0, 51]))
    assert np.allclose(read_ppm(tmp_path / "c.ppm")[0, 0], [1.0, 0.0, 0.2])
    (tmp_path / "p3.ppm").write_bytes(b"P3\n1 1\n255\n1 2 3")
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "p3.ppm")


def test_tile_layout():
    imgs = np.stack([np.full((2, 2, 3), v) for v in (0.0, 0.5, 1.0)])
    sheet = tile(imgs, cols=2)
    assert sheet.shape == (4, 4, 3)
    assert sheet[0, 2, 0] == 0.5 and sheet[2, 0, 0] == 1.0 and sheet[3, 3, 0] == 1.0


# -- config ----------------------------------------------------------------------------


def test_config_from_file_with_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"model": {"channels": 16}, "train": {"lr": 0.01}}))
    rc = load_config(path, ["train.total_steps=5", "model.variant=\"masked_e\"", "model.upsampler=linear"], seed=9)
    assert rc.model.channels == 16 and rc.model.variant == "masked_e" and rc.model.seed == 9
    assert rc.train.lr == 0.01 and rc.train.total_steps == 5
    assert rc.data.seed == 9
    assert from_dict(rc.to_dict()) == rc


@pytest.mark.parametrize(
    "d",
    [{"model": {"chanels": 8}}, {"extra": {}}, {"model": {"downsample": 3}}, {"data": {"bogus": 1}}],
)
def test_config_errors(d):
    with pytest.raises(ConfigError):
        from_dict(d)


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")
    for bad in ("novalue", "nosection=3", "other.x=1"):
        with pytest.raises(ConfigError):
            parse_override(bad)


# -- training ----------------------------------------------------------------------------


def test_batches_cover_each_epoch():
    seen = np.concatenate([batch_for_step(s, 10, 4, 0)[0] for s in range(3)])
    assert sorted(seen) == list(range(10))
    assert batch_for_step(3, 10, 4, 0)[1] == 1


def test_masks_fresh_per_epoch():
    cfg = micro("masked_b")
    a = masks_for(cfg, 0, range(8))
    assert a == masks_for(cfg, 0, range(8))
    assert a != masks_for(cfg, 1, range(8))
    assert masks_for(micro(), 0, range(3)) is None
    assert len(all_masks(cfg)) == 9


def test_zero_lr_constant_loss():
    _, m = train(micro(), TrainConfig(lr=0.0, total_steps=4, batch_size=4, eval_every=0), synth_dataset(DATA))
    assert len(set(m.losses)) == 1


def test_resume_bit_exact(tmp_path):
    cfg = micro("masked_b")
    images = synth_dataset(DATA)
    tcfg = TrainConfig(lr=3e-3, warmup_steps=2, total_steps=8, batch_size=2, eval_every=0)
    full, m_full = train(cfg, tcfg, images)
    half, m_half = train(cfg, tcfg, images, stop_step=3)
    half.save(tmp_path / "h.fnla")
    rest, m_rest = train(cfg, tcfg, images, resume=Checkpoint.load(tmp_path / "h.fnla", cfg))
    assert m_half.losses + m_rest.losses == m_full.losses
    assert m_half.steps + m_rest.steps == list(range(8))
    assert all(rest.params[k].tobytes() == v.tobytes() for k, v in full.params.items())


def test_periodic_checkpoints_and_eval(tmp_path):
    tcfg = TrainConfig(lr=1e-3, total_steps=4, batch_size=4, eval_every=2, checkpoint_every=2)
    ckpt, m = train(micro(), tcfg, synth_dataset(DATA), out_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["step000002.fnla", "step000004.fnla"]
    assert [s for s, _ in m.evals] == [2, 4]
    assert m.steps == [0, 1, 2, 3] and m.wall_clock > 0
    assert ckpt.step == 4


def test_target_psnr_stops_early():
    tcfg = TrainConfig(lr=1e-3, total_steps=10, batch_size=4, eval_every=1, target_psnr=-1.0)
    ckpt, m = train(micro(), tcfg, synth_dataset(DATA))
    assert ckpt.step == 1 and len(m.losses) == 1


# -- experiments ----------------------------------------------------------------------------


def test_channel_sweep_single_c_is_train():
    images = synth_dataset(DATA)
    tcfg = TrainConfig(lr=3e-3, total_steps=3, batch_size=4, eval_every=0)
    rows = channel_sweep(micro(), tcfg, images, [8])
    ckpt, _ = train(micro(), tcfg, images)
    from finola.models import reconstruct

    recon = np.clip(reconstruct(ckpt.params, ckpt.config, images), 0, 1)
    assert rows == [{"channels": 8, "mse": float(np.mean((recon - images) ** 2)), "psnr": mean_psnr(recon, images)}]
    assert channel_sweep(micro(), tcfg, images, [4, 8]) == channel_sweep(micro(), tcfg, images, [4, 8])


def test_frozen_norm_untrained_smoke():
    cfg = micro()
    normal, frozen = frozen_norm_eval(Checkpoint(cfg, init_params(cfg)), synth_dataset(DATA))
    assert math.isfinite(normal) and math.isfinite(frozen)
    assert normal < 20 and frozen < 20


def test_frozen_norm_single_image_self_consistent(trained):
    one = synth_dataset(DATA)[:1]
    normal, frozen = frozen_norm_eval(trained, one)
    assert abs(normal - frozen) < 1e-9


def test_frozen_norm_stats_average_passes(trained):
    images = synth_dataset(DATA)
    stats = norm_stats(trained.params, trained.config, images)
    q = encode(trained.params, trained.config, images)
    coeffs = coeffs_from_params(trained.params, trained.config)
    per = [pass_stats(v, coeffs, 4, 4) for v in q]
    assert stats.mu.shape == (2, 4, 4)
    assert np.allclose(stats.sigma, np.mean([p.sigma for p in per], axis=0))


def test_frozen_norm_rejects_masked_variant():
    cfg = micro("masked_e")
    with pytest.raises(ValueError):
        frozen_norm_eval(Checkpoint(cfg, init_params(cfg)), synth_dataset(DATA))


def test_embedding_covariance_hand_case():
    qs = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]])
    st = EmbeddingStats.from_vectors(qs)
    assert np.allclose(st.mean, [1.0, 1.0])
    # deviations (0,-1), (-1,0), (1,1); sum of outer products / (3 - 1)
    assert np.allclose(st.cov, [[1.0, 0.5], [0.5, 1.0]])
    with pytest.raises(ValueError):
        EmbeddingStats.from_vectors(qs[:1])


def test_embedding_stats_psd_and_pca_errors():
    qs = make_rng(3).normal(size=(20, 5))
    st = EmbeddingStats.from_vectors(qs)
    assert np.abs(st.cov - st.cov.T).max() < 1e-8
    assert np.linalg.eigvalsh(st.cov).min() > -1e-8
    assert np.allclose(st.pca_project(qs, 5), qs, atol=1e-10)
    with pytest.raises(ValueError):
        st.pca_project(qs, 6)
    samples = st.sample(4000, make_rng(4))
    assert np.abs(np.cov(samples.T) - st.cov).max() < 0.15


def test_interpolate_endpoints():
    a, b = make_rng(5).normal(size=(2, 4))
    out = interpolate(a, b, [0.0, 0.5, 1.0])
    assert np.array_equal(out[0], b) and np.array_equal(out[2], a)
    assert np.allclose(out[1], (a + b) / 2)


def test_embedding_experiments(trained, tmp_path):
    images = synth_dataset(DATA)
    res = embedding_experiments(trained, images, make_rng(6), tmp_path, n_samples=3, ks=[2, 8])
    p, cfg = trained.params, trained.config
    ends = decode_q(p, cfg, encode(p, cfg, images[:2]))
    # alpha = 0 gives the second image, alpha = 1 the first
    assert np.abs(res["interpolation"][0] - ends[1]).max() < 1e-12
    assert np.abs(res["interpolation"][-1] - ends[0]).max() < 1e-12
    assert np.abs(res["pca"][8] - res["recon"]).max() < 1e-8
    assert res["samples"].shape == (3, 16, 16, 3)
    assert res["mirror"].shape == res["recon"].shape and res["mean"].shape == (1, 16, 16, 3)
    names = sorted(f.name for f in tmp_path.iterdir())
    assert names == sorted(["originals.ppm", "recon.ppm", "interpolation.ppm", "mean.ppm", "mirror.ppm", "samples.ppm", "pca_k002.ppm", "pca_k008.ppm"])
    with pytest.raises(ValueError):
        embedding_experiments(trained, images, make_rng(6), ks=[9])


# -- bench -------------------------------------------------------------------------------


def test_bench_rows_and_band():
    rows = bench([4, 8], [6, 8], threads=(1, 2), repeats=1)
    assert len(rows) == 8
    assert {(r["channels"], r["size"], r["threads"]) for r in rows} == {(c, s, t) for c in (4, 8) for s in (6, 8) for t in (1, 2)}
    assert all(r["max_abs_diff"] < 1e-9 for r in rows)
    assert all(r["parallel_s"] <= 3 * r["sequential_s"] for r in rows if r["threads"] == 1)


def test_bench_detects_disagreement(monkeypatch):
    real = bench_mod.generate_parallel

    def broken(*a, **kw):
        g = real(*a, **kw)
        g.data[0, 0, 0] += 1e-6
        return g

    monkeypatch.setattr(bench_mod, "generate_parallel", broken)
    with pytest.raises(EquivalenceError):
        bench([4], [4], repeats=1)


def test_config_picks_variant_upsampler():
    assert from_dict({"model": {"variant": "masked_b"}}).model.upsampler == "transformer_linear"
    assert from_dict({"model": {"variant": "masked_e", "upsampler": "transformer_linear"}}).model.upsampler == "transformer_linear"
