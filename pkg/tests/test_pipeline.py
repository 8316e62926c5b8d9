import json
import math
from dataclasses import replace

import numpy as np
import pytest

from driftlab import autodiff as ad
from driftlab.conditions import CONDITIONS, ExternalFeatureNet, get_condition
from driftlab.drift import DriftScales
from driftlab.pipeline import (
    ConfigError,
    ContractViolation,
    NumericError,
    RunConfig,
    SampleSet,
    build_context,
    calibrate,
    evaluate_samples,
    load_generator,
    make_corpus,
    new_generator,
    read_corpus,
    run_condition,
    sample_grid,
    save_generator,
    stage2_step,
    stream,
    train_stage1,
    train_stage2,
    write_corpus,
)

# -- configuration ----------------------------------------------------------------


def test_config_json_round_trip(tiny_config):
    assert RunConfig.from_json(tiny_config.to_json()) == tiny_config


@pytest.mark.parametrize(
    "text",
    ['{"bogus": 1}', "[1, 2]", "not json", '{"condition": "nope"}', '{"alpha_grid": [0.5]}', '{"taus": []}'],
)
def test_bad_configs_are_rejected(text):
    with pytest.raises(ConfigError):
        RunConfig.from_json(text)


def test_streams_are_independent_and_reproducible():
    a = stream(42, "train", 3).random(4)
    assert a.tolist() == stream(42, "train", 3).random(4).tolist()
    assert a.tolist() != stream(42, "train", 4).random(4).tolist()
    assert a.tolist() != stream(42, "eval", 3).random(4).tolist()


def test_condition_registry():
    assert len(CONDITIONS) == 13
    assert get_condition("coupled-default").family == "coupled"
    assert get_condition("latent-space").family == "proxy"
    assert {get_condition(c).family for c in ("detached-decoder", "stop-grad-decoder", "no-drift")} == {"severed"}
    with pytest.raises(KeyError):
        get_condition("missing")


# -- corpus and stage 1 ---------------------------------------------------------------


def test_corpus_is_deterministic_and_split(tiny_config, tmp_path):
    corpus = make_corpus(tiny_config)
    assert corpus == make_corpus(tiny_config)
    splits = [s for _, s in corpus]
    assert splits.count("train") == int(0.8 * len(corpus))
    write_corpus(corpus, tmp_path / "c.txt")
    assert read_corpus(tmp_path / "c.txt") == corpus


def test_read_corpus_rejects_bad_split(tmp_path):
    (tmp_path / "c.txt").write_text("holdout\t[C]\n")
    with pytest.raises(ConfigError):
        read_corpus(tmp_path / "c.txt")


def test_stage1_nan_keeps_last_good_checkpoint(tiny_config, monkeypatch, tmp_path):
    import driftlab.pipeline as pipeline

    real = pipeline.vae_loss
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        total, recon, kl = real(*args, **kwargs)
        return (total * math.nan if calls["n"] > 3 else total), recon, kl

    monkeypatch.setattr(pipeline, "vae_loss", flaky)
    corpus = make_corpus(replace(tiny_config, n_molecules=60))
    with pytest.raises(NumericError):
        train_stage1(replace(tiny_config, vae_epochs=1, vae_batch=8), corpus, tmp_path / "vae.ckpt")
    assert (tmp_path / "vae.ckpt").exists()


def test_stage1_requires_training_data(tiny_config):
    with pytest.raises(ConfigError):
        train_stage1(tiny_config, [(["[C]"], "val")])


# -- stage 2 ---------------------------------------------------------------------------


def _ctx(tiny_config, tiny_data, condition="coupled-default", **overrides):
    return build_context(replace(tiny_config, condition=condition, **overrides), tiny_data.vae, tiny_data.cache)


def test_stage2_keeps_decoder_and_scales_fixed(tiny_config, tiny_data):
    ctx = _ctx(tiny_config, tiny_data)
    before = {k: v.copy() for k, v in tiny_data.vae.decoder.state_dict().items()}
    gen, scales, history = train_stage2(ctx, 42)
    assert len(history.steps) == tiny_config.stage2_steps
    assert all(math.isfinite(s["loss"]) for s in history.steps)
    for k, v in tiny_data.vae.decoder.state_dict().items():
        assert v.tobytes() == before[k].tobytes()
    assert scales.lambdas == calibrate(ctx).lambdas


def test_unfrozen_decoder_is_a_contract_violation(tiny_config, tiny_data):
    ctx = _ctx(tiny_config, tiny_data)
    for p in ctx.vae.decoder.parameters():
        p.requires_grad = True
    try:
        with pytest.raises(ContractViolation):
            train_stage2(ctx, 42, steps=1)
    finally:
        ctx.vae.decoder.freeze()


def test_alpha_one_step_matches_cfg_disabled_step(tiny_config, tiny_data):
    scales = DriftScales({t: 1.0 for t in tiny_config.taus})

    def one_step(condition):
        ctx = _ctx(tiny_config, tiny_data, condition, alpha_max=1.0)
        gen = new_generator(ctx, 7)
        loss, _ = stage2_step(ctx, gen, scales, 7, 0)
        ad.backward(loss)
        return loss.value.tobytes(), [p.grad.tobytes() for p in gen.parameters() if p.grad is not None]

    assert one_step("coupled-default") == one_step("no-cfg")


@pytest.mark.parametrize("condition", ["detached-decoder", "stop-grad-decoder"])
def test_severed_conditions_get_no_drift_gradient(tiny_config, tiny_data, condition):
    scales = DriftScales({t: 1.0 for t in tiny_config.taus})
    ctx = _ctx(tiny_config, tiny_data, condition, lambda_z=0.0)
    gen = new_generator(ctx, 3)
    loss, stats = stage2_step(ctx, gen, scales, 3, 0)
    assert stats["drift"] > 0
    grads = ad.backward(loss) if loss.requires_grad else {}
    assert all(np.all(grads.get(p, 0.0) == 0.0) for p in gen.parameters())


@pytest.mark.parametrize("condition", sorted(CONDITIONS))
def test_every_condition_trains_one_step(tiny_config, tiny_data, condition):
    ctx = _ctx(tiny_config, tiny_data, condition, aux_steps=5)
    _, _, history = train_stage2(ctx, 1, steps=1)
    assert math.isfinite(history.steps[0]["loss"])


def test_v2_mode_trains_and_evaluates(tiny_config, tiny_data):
    cfg = replace(tiny_config, condition_mode="v2-multi")
    from driftlab.pipeline import prepare_data

    data = prepare_data(replace(cfg, n_molecules=120, vae_epochs=1))
    result = run_condition(cfg, data, "coupled-default", 5)
    assert result.report.mode == "v2-multi"
    assert len(result.report.rows) == len(cfg.alpha_grid)


def test_external_net_fit_reduces_loss(tiny_data):
    cache = tiny_data.cache
    z = cache.z[cache.train_ids]
    net = ExternalFeatureNet(z.shape[1], 8, z.mean(0), z.std(0) + 1e-8, seed=0)
    short = net.fit(z, cache.props[cache.train_ids, 0], np.random.default_rng(0), steps=1)
    net = ExternalFeatureNet(z.shape[1], 8, z.mean(0), z.std(0) + 1e-8, seed=0)
    long = net.fit(z, cache.props[cache.train_ids, 0], np.random.default_rng(0), steps=300)
    assert long < short
    assert net.frozen


# -- sampling and evaluation -----------------------------------------------------------


def test_sampling_uses_one_pass_per_molecule(tiny_config, tiny_data):
    ctx = _ctx(tiny_config, tiny_data)
    gen = new_generator(ctx, 0)
    samples = sample_grid(ctx, gen, 0)
    n = tiny_config.samples_per_alpha
    assert [len(t) for t in samples.tokens] == [n] * len(tiny_config.alpha_grid)
    assert gen.samples_generated == n and ctx.vae.decoder.samples_decoded == n
    assert SampleSet.from_text(samples.to_text()).to_text() == samples.to_text()


def test_extra_decoder_pass_is_a_contract_violation(tiny_config, tiny_data, monkeypatch):
    ctx = _ctx(tiny_config, tiny_data)
    decoder = ctx.vae.decoder
    real = type(decoder).decode_tokens

    def twice(self, z):
        self(z)
        return real(self, z)

    monkeypatch.setattr(type(decoder), "decode_tokens", twice)
    with pytest.raises(ContractViolation):
        sample_grid(ctx, new_generator(ctx, 0), 0)


def test_generator_checkpoint_round_trip(tiny_config, tiny_data, tmp_path):
    ctx = _ctx(tiny_config, tiny_data)
    gen, scales, _ = train_stage2(ctx, 4, steps=2)
    save_generator(tmp_path / "g.ckpt", gen, scales)
    loaded, loaded_scales = load_generator(tmp_path / "g.ckpt")
    assert loaded_scales.lambdas == scales.lambdas
    a = sample_grid(ctx, gen, 9).to_text()
    assert sample_grid(ctx, loaded, 9).to_text() == a


def test_run_condition_is_deterministic(tiny_config, tiny_data):
    a = run_condition(tiny_config, tiny_data, "coupled-default", 43)
    b = run_condition(tiny_config, tiny_data, "coupled-default", 43)
    assert a.report.to_text() == b.report.to_text()


def test_evaluation_reads_back_from_text(tiny_config, tiny_data):
    ctx = _ctx(tiny_config, tiny_data)
    samples = sample_grid(ctx, new_generator(ctx, 2), 2)
    report = evaluate_samples(SampleSet.from_text(samples.to_text()), tiny_data.cache, "coupled-default", 2, "scalar-binned")
    assert report.to_text() == evaluate_samples(samples, tiny_data.cache, "coupled-default", 2, "scalar-binned").to_text()
    for r in report.rows:
        assert 0 <= r.validity <= 100 and r.n_samples == tiny_config.samples_per_alpha


def test_config_file_round_trip(tiny_config, tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(tiny_config.to_json())
    assert RunConfig.load(path) == tiny_config
    assert json.loads(path.read_text())["seed"] == 42
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "missing.json")
