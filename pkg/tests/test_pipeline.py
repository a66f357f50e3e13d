import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from app.pipeline.model import LossValues, NonFiniteLossError, forward_pass, init_model
from app.pipeline.train import (
    TrainingDiverged, minibatches, total_loss, train, training_objective, warmup_schedule,
)
from app.schemas.config import ChannelConfig, ModelConfig, TrainConfig
from app.schemas.dataset import MODALITIES
from app.selftest import check_loss_gradients
from app.tools.rng import Rng
from app.tools.tensor import backward

NOISELESS = ChannelConfig(family="awgn", snr_db=math.inf)


def _randomize_discriminators(model, seed=0):
    rng = Rng(seed)
    for disc in model.discriminators.values():
        last = disc.stack.layers[-1].weights
        last.value = rng.normal(last.shape)


def _encoder_grads(model, batch, alpha, lambda_red, with_redundancy, seed=5):
    out = forward_pass(batch, model, ChannelConfig(snr_db=10.0), 10.0, alpha, Rng(seed),
                       with_redundancy=with_redundancy)
    backward(out.graph, training_objective(out.graph, out.parts, lambda_red))
    return {p.name: p.grad.copy() for p in model.latent_encoder_parameters()}


class TestInitModel:
    def test_parameter_names_unique(self, small_model):
        params = small_model.parameters()
        assert len(small_model.named_parameters()) == len(params)

    def test_shapes_follow_config(self, small_model, small_dataset):
        assert small_model.branches["image"].feature_encoder.layers[0].weights.shape == (
            small_dataset.dims["image"], 6)
        assert small_model.encoder.layers[0].weights.shape == (9, 8)
        assert small_model.encoder.layers[-1].weights.shape == (8, 6)

    def test_identity_feature_encoder(self, small_dataset):
        cfg = ModelConfig(feature_hidden=0, latent_dims=(2, 2, 2), transmitted_dim=4)
        model = init_model(cfg, small_dataset.dims, Rng(0))
        assert model.branches["text"].feature_encoder is None
        assert model.branches["text"].head.mean_layer.weights.shape == (small_dataset.dims["text"], 2)

    def test_same_seed_same_weights(self, small_model_config, small_dataset):
        a = init_model(small_model_config, small_dataset.dims, Rng(4)).named_parameters()
        b = init_model(small_model_config, small_dataset.dims, Rng(4)).named_parameters()
        for name in a:
            assert_allclose(a[name].value, b[name].value)

    def test_discriminators_start_at_zero(self, small_model, small_batch):
        out = forward_pass(small_batch, small_model, NOISELESS, math.inf, 1.0, Rng(0))
        assert out.parts.redundancy.item() == pytest.approx(0.0, abs=1e-12)


class TestForwardPass:
    def test_zeroed_decoders_give_log_seven(self, small_model, small_batch):
        for dec in [small_model.receiver_decoder] + [small_model.branches[m].decoder for m in MODALITIES]:
            dec.layers[-1].weights.value = np.zeros(dec.layers[-1].weights.shape)
        out = forward_pass(small_batch, small_model, NOISELESS, math.inf, 0.0, Rng(0),
                           beta=0.0, gamma=0.0)
        assert out.parts.mvib.item() == pytest.approx(math.log(7), abs=1e-12)
        for m in MODALITIES:
            assert out.parts.uvib[m].item() == pytest.approx(math.log(7), abs=1e-12)

    def test_shapes(self, small_model, small_batch):
        out = forward_pass(small_batch, small_model, NOISELESS, math.inf, 0.5, Rng(0))
        assert out.logits.shape == (14, 7)
        assert out.samples["audio"].shape == (14, 3)
        assert set(out.parts.pairs) == {"it", "ia", "ta"}

    def test_deterministic_under_seed(self, small_model, small_batch):
        a = forward_pass(small_batch, small_model, ChannelConfig(snr_db=5.0), 5.0, 0.5, Rng(3))
        b = forward_pass(small_batch, small_model, ChannelConfig(snr_db=5.0), 5.0, 0.5, Rng(3))
        assert_allclose(a.logits.value, b.logits.value)
        assert a.parts.values() == b.parts.values()

    def test_redundancy_switch_leaves_other_draws(self, small_model, small_batch):
        a = forward_pass(small_batch, small_model, ChannelConfig(snr_db=5.0), 5.0, 0.5, Rng(3))
        b = forward_pass(small_batch, small_model, ChannelConfig(snr_db=5.0), 5.0, 0.5, Rng(3),
                         with_redundancy=False)
        assert_allclose(a.logits.value, b.logits.value)
        assert b.parts.adversarial is None

    def test_batch_of_one_rejected(self, small_model, small_dataset):
        with pytest.raises(ValueError):
            forward_pass(small_dataset.subset(np.array([0])), small_model, NOISELESS, math.inf, 0.0, Rng(0))

    def test_non_finite_features_name_the_part(self, small_model, small_batch):
        small_batch.features["image"] = small_batch.features["image"].copy()
        small_batch.features["image"][0, 0] = np.nan
        with pytest.raises(NonFiniteLossError, match="encoder"):
            forward_pass(small_batch, small_model, NOISELESS, math.inf, 0.0, Rng(0))


class TestRedundancyIsolation:
    def test_zero_weight_matches_plain_vib(self, small_model, small_batch):
        _randomize_discriminators(small_model)
        with_red = _encoder_grads(small_model, small_batch, 0.0, 0.0, True)
        without = _encoder_grads(small_model, small_batch, 0.0, 0.0, False)
        for name in without:
            assert_allclose(with_red[name], without[name], atol=1e-10)

    def test_alpha_zero_blocks_both_members(self, small_model_config, small_dataset, small_batch):
        cfg = small_model_config.model_copy(update={"reverse_both": True})
        model = init_model(cfg, small_dataset.dims, Rng(11))
        _randomize_discriminators(model)
        with_red = _encoder_grads(model, small_batch, 0.0, 0.4, True)
        without = _encoder_grads(model, small_batch, 0.0, 0.0, False)
        for name in without:
            assert_allclose(with_red[name], without[name], atol=1e-10)

    def test_active_redundancy_moves_encoders(self, small_model, small_batch):
        _randomize_discriminators(small_model)
        with_red = _encoder_grads(small_model, small_batch, 1.0, 0.4, True)
        without = _encoder_grads(small_model, small_batch, 1.0, 0.0, False)
        diff = sum(float(np.abs(with_red[n] - without[n]).sum()) for n in without)
        assert diff > 1e-6

    def test_loss_gradients_match_finite_differences(self):
        res = check_loss_gradients(instances=4, coords=4)
        assert res.passed, res.line()


class TestObjective:
    def test_total_loss(self):
        parts = LossValues(uvib={"image": 1.0, "text": 1.0, "audio": 1.0}, mvib=2.0, redundancy=0.75)
        assert total_loss(parts, 0.4) == pytest.approx(5.3)

    def test_descended_and_reported_forms_differ_by_constant(self, small_model, small_batch):
        _randomize_discriminators(small_model)
        out = forward_pass(small_batch, small_model, NOISELESS, math.inf, 1.0, Rng(2))
        descended = training_objective(out.graph, out.parts, 0.4).item()
        reported = total_loss(out.parts.values(), 0.4)
        # J = 2 ln 2 - BCE per pair
        assert descended + reported == pytest.approx(
            2 * (sum(out.parts.values().uvib.values()) + out.parts.mvib.item()) + 0.4 * 3 * 2 * math.log(2))

    def test_one_objective_equals_sum_of_part_gradients(self, small_model, small_batch):
        _randomize_discriminators(small_model)
        channel = ChannelConfig(snr_db=4.0)

        def run(pick):
            out = forward_pass(small_batch, small_model, channel, 4.0, 0.7, Rng(9))
            backward(out.graph, pick(out))
            return {n: p.grad.copy() for n, p in small_model.named_parameters().items()}

        joint = run(lambda out: training_objective(out.graph, out.parts, 0.4))
        pickers = [lambda out: out.parts.mvib,
                   lambda out: out.graph.scale(out.parts.adversarial, 0.4)]
        pickers += [lambda out, m=m: out.parts.uvib[m] for m in MODALITIES]
        separate = [run(pick) for pick in pickers]
        for name, grad in joint.items():
            assert_allclose(grad, sum(s[name] for s in separate), atol=1e-10)


class TestWarmupSchedule:
    def test_start(self):
        assert warmup_schedule(0, 3, 50) == (0.0, 0.0)

    def test_alpha_ramp(self):
        alpha, lam = warmup_schedule(1.5, 3, 50)
        assert alpha == pytest.approx(0.5)
        assert lam == 0.0

    def test_end_of_warmup(self):
        assert warmup_schedule(3, 3, 50) == (1.0, 0.0)

    def test_lambda_reaches_target_at_last_epoch(self):
        assert warmup_schedule(49, 3, 50, lambda_red=0.4)[1] == pytest.approx(0.4)
        assert warmup_schedule(50, 3, 50, lambda_red=0.4)[1] == pytest.approx(0.4)
        assert warmup_schedule(26, 3, 50, lambda_red=0.4)[1] == pytest.approx(0.2)

    def test_no_warmup(self):
        assert warmup_schedule(0, 0, 10, alpha_max=0.7) == (0.7, 0.0)

    def test_alpha_max_zero_disables_reversal(self):
        assert warmup_schedule(20, 3, 50, alpha_max=0.0)[0] == 0.0

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            warmup_schedule(-1, 3, 50)


class TestMinibatches:
    def test_drops_trailing_batch(self):
        batches = minibatches(10, 3, Rng(0))
        assert len(batches) == 3
        flat = np.concatenate(batches)
        assert len(set(flat.tolist())) == 9
        assert flat.max() < 10


def _tiny_train_config(small_model_config, **kw):
    base = dict(epochs=2, batch_size=16, model=small_model_config,
                channel=ChannelConfig(snr_db=10.0), val_snr_grid=[10.0])
    base.update(kw)
    return TrainConfig(**base)


class TestTrain:
    def test_deterministic(self, small_model_config, small_dataset):
        cfg = _tiny_train_config(small_model_config)
        a = train(cfg, small_dataset, validate=False)
        b = train(cfg, small_dataset, validate=False)
        assert [r.total for r in a.epochs] == [r.total for r in b.epochs]
        pa, pb = a.model.named_parameters(), b.model.named_parameters()
        for name in pa:
            assert_allclose(pa[name].value, pb[name].value)

    def test_epoch_records(self, small_model_config, small_dataset):
        seen = []
        cfg = _tiny_train_config(small_model_config)
        result = train(cfg, small_dataset, on_epoch=seen.append)
        assert [r.epoch for r in seen] == [0, 1]
        assert result.steps == sum(r.steps for r in result.epochs)
        assert "top2@10" in seen[-1].val
        assert all(math.isfinite(r.total) for r in seen)

    def test_uniform_snr_policy(self, small_model_config, small_dataset):
        cfg = _tiny_train_config(small_model_config, epochs=1,
                                 channel=ChannelConfig(family="rayleigh", snr_range=(0.0, 21.0)))
        result = train(cfg, small_dataset, validate=False)
        assert result.steps > 0

    def test_divergence_guard(self, small_model_config, small_dataset):
        cfg = _tiny_train_config(small_model_config, divergence_threshold=1e-3)
        with pytest.raises(TrainingDiverged) as info:
            train(cfg, small_dataset, validate=False)
        assert info.value.epoch == 0
        assert info.value.step == 0
        assert info.value.epochs == []

    def test_batch_larger_than_split(self, small_model_config, small_dataset):
        with pytest.raises(ValueError, match="batch size"):
            train(_tiny_train_config(small_model_config, batch_size=1000), small_dataset)

    def test_discriminators_frozen_while_redundancy_off(self, small_model_config, small_dataset):
        cfg = _tiny_train_config(small_model_config, epochs=1, e_warm=3)
        init_rng, _, _ = Rng(cfg.seed).spawn(3)
        start = init_model(cfg.model, small_dataset.dims, init_rng).named_parameters()
        trained = train(cfg, small_dataset, validate=False).model
        for p in trained.discriminator_parameters():
            assert_array_equal(p.value, start[p.name].value)
        moved = [p for p in trained.latent_encoder_parameters()
                 if not np.array_equal(p.value, start[p.name].value)]
        assert moved

    def test_discriminators_move_once_redundancy_on(self, small_model_config, small_dataset):
        cfg = _tiny_train_config(small_model_config, epochs=2, e_warm=0)
        init_rng, _, _ = Rng(cfg.seed).spawn(3)
        start = init_model(cfg.model, small_dataset.dims, init_rng).named_parameters()
        trained = train(cfg, small_dataset, validate=False).model
        assert any(not np.array_equal(p.value, start[p.name].value)
                   for p in trained.discriminator_parameters())
