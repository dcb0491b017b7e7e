"""Tests for the encoder/decoder stack, exact gradients, and the trainers."""

import numpy as np
import pytest

from morphfit.errors import (
    InvalidArgumentError,
    NumericalFailureError,
    UnderdeterminedError,
)
from morphfit.network import (
    DEFAULT_PHASE3_STAGES,
    AdamState,
    ClassifierHead,
    DecoderNet,
    EncoderNet,
    Layer,
    LatentCode,
    LossReport,
    TrainConfig,
    TrainingBatch,
    all_params,
    backward,
    batch_loss,
    classification_accuracy,
    coefficient_targets,
    decoder_forward,
    encode_images,
    encoder_forward,
    finite_diff_check,
    head_from_class_means,
    identification_loss,
    init_decoder,
    init_encoder,
    init_head,
    joint_loss,
    optimizer_step,
    reconstruction_loss,
    train_phase1,
    train_phase2,
    train_phase3,
    training_batch,
)
from morphfit.geometry import Shape
from morphfit.synthetic import Dataset, DatasetSpec


def small_net(rng: np.random.Generator, in_dim: int = 6, hidden: int = 5,
              q_id: int = 2, q_res: int = 2, activation: str = "tanh") -> EncoderNet:
    layers = (Layer(rng.normal(0.0, 0.3, size=(hidden, in_dim)),
                    rng.normal(0.0, 0.1, size=hidden), activation),
              Layer(rng.normal(0.0, 0.3, size=(q_id + q_res, hidden)),
                    rng.normal(0.0, 0.1, size=q_id + q_res), activation))
    return EncoderNet(layers, q_id, q_res)


def small_decoder(rng: np.random.Generator, out_dim: int = 9, q_id: int = 2,
                  q_res: int = 2) -> DecoderNet:
    return DecoderNet(rng.normal(0.0, 0.3, size=(out_dim, q_id)),
                      rng.normal(0.0, 0.1, size=out_dim),
                      rng.normal(0.0, 0.3, size=(out_dim, q_res)),
                      rng.normal(0.0, 0.1, size=out_dim))


def small_batch(rng: np.random.Generator, size: int = 4, in_dim: int = 6,
                out_dim: int = 9, n_classes: int = 3) -> TrainingBatch:
    return TrainingBatch(rng.uniform(-1.0, 1.0, size=(size, in_dim)),
                         rng.integers(0, n_classes, size=size),
                         rng.normal(0.0, 0.3, size=(size, out_dim)))


# ---------------------------------------------------------------------------
# forward passes


class TestEncoderForward:
    def test_zero_network_outputs_zero(self):
        layers = (Layer(np.zeros((5, 6)), np.zeros(5), "tanh"),
                  Layer(np.zeros((4, 5)), np.zeros(4), "tanh"))
        code = encoder_forward(EncoderNet(layers, 2, 2), np.zeros(6))
        assert np.array_equal(code.c_id, np.zeros(2))
        assert np.array_equal(code.c_res, np.zeros(2))

    def test_outputs_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(0)
        layers = (Layer(rng.normal(0.0, 50.0, size=(4, 6)), np.zeros(4), "tanh"),)
        net = EncoderNet(layers, 2, 2)
        code = encoder_forward(net, np.ones(6))
        merged = np.concatenate([code.c_id, code.c_res])
        assert np.all(np.abs(merged) < 1.0)

    def test_matches_layer_loop_oracle(self):
        rng = np.random.default_rng(1)
        net = small_net(rng)
        x = rng.uniform(-1.0, 1.0, size=6)
        code = encoder_forward(net, x)

        current = x.copy()
        for layer in net.layers:
            nxt = np.empty(layer.out_dim)
            for j in range(layer.out_dim):
                z = layer.bias[j]
                for k in range(layer.in_dim):
                    z += layer.weight[j, k] * current[k]
                nxt[j] = np.tanh(z)
            current = nxt
        merged = np.concatenate([code.c_id, code.c_res])
        assert np.max(np.abs(merged - current)) < 1e-12

    def test_linear_activation_is_affine(self):
        rng = np.random.default_rng(2)
        weight = rng.normal(0.0, 0.1, size=(4, 6))
        bias = rng.normal(0.0, 0.1, size=4)
        net = EncoderNet((Layer(weight, bias, "linear"),), 2, 2)
        x = rng.uniform(-1.0, 1.0, size=6)
        code = encoder_forward(net, x)
        merged = np.concatenate([code.c_id, code.c_res])
        assert np.max(np.abs(merged - (weight @ x + bias))) < 1e-15

    def test_input_validation(self):
        net = small_net(np.random.default_rng(0))
        with pytest.raises(InvalidArgumentError):
            encoder_forward(net, np.zeros(5))
        with pytest.raises(InvalidArgumentError):
            encoder_forward(net, np.full(6, 1.5))
        with pytest.raises(InvalidArgumentError):
            encoder_forward(net, np.full(6, np.nan))

    def test_structure_validation(self):
        good = Layer(np.zeros((4, 6)), np.zeros(4), "tanh")
        with pytest.raises(InvalidArgumentError):
            EncoderNet((), 2, 2)
        with pytest.raises(InvalidArgumentError):
            EncoderNet((good,), 3, 3)  # final width 4 != 6
        with pytest.raises(InvalidArgumentError):
            Layer(np.zeros((4, 6)), np.zeros(4), "relu")
        with pytest.raises(InvalidArgumentError):
            EncoderNet((good, Layer(np.zeros((4, 5)), np.zeros(4), "tanh")), 2, 2)

    def test_batched_encode_matches_single(self):
        rng = np.random.default_rng(3)
        net = small_net(rng)
        images = rng.uniform(-1.0, 1.0, size=(3, 6))
        codes_id, codes_res = encode_images(net, images)
        for row in range(3):
            single = encoder_forward(net, images[row])
            # batched matmul may round differently from the single-row path
            assert np.max(np.abs(codes_id[row] - single.c_id)) < 1e-14
            assert np.max(np.abs(codes_res[row] - single.c_res)) < 1e-14


class TestDecoderForward:
    def test_zero_code_returns_biases(self):
        rng = np.random.default_rng(4)
        dec = small_decoder(rng)
        delta_id, delta_res = decoder_forward(dec, LatentCode(np.zeros(2), np.zeros(2)))
        assert np.array_equal(delta_id, dec.bias_id)
        assert np.array_equal(delta_res, dec.bias_res)

    def test_unit_code_reads_column(self):
        rng = np.random.default_rng(5)
        dec = small_decoder(rng)
        delta_id, _ = decoder_forward(dec, LatentCode(np.array([0.0, 1.0]),
                                                      np.zeros(2)))
        assert np.max(np.abs(delta_id - (dec.weight_id[:, 1] + dec.bias_id))) < 1e-15

    def test_matches_matvec_loop(self):
        rng = np.random.default_rng(6)
        dec = small_decoder(rng)
        code = LatentCode(rng.normal(size=2), rng.normal(size=2))
        delta_id, delta_res = decoder_forward(dec, code)
        for row in range(9):
            want_id = dec.bias_id[row] + sum(dec.weight_id[row, k] * code.c_id[k]
                                             for k in range(2))
            want_res = dec.bias_res[row] + sum(dec.weight_res[row, k] * code.c_res[k]
                                               for k in range(2))
            assert abs(delta_id[row] - want_id) < 1e-12
            assert abs(delta_res[row] - want_res) < 1e-12

    def test_linearity(self):
        rng = np.random.default_rng(7)
        dec = small_decoder(rng)
        a = LatentCode(rng.normal(size=2), rng.normal(size=2))
        b = LatentCode(rng.normal(size=2), rng.normal(size=2))
        both = LatentCode(a.c_id + b.c_id, a.c_res + b.c_res)
        zero = LatentCode(np.zeros(2), np.zeros(2))
        for part in (0, 1):
            lhs = decoder_forward(dec, both)[part] + decoder_forward(dec, zero)[part]
            rhs = decoder_forward(dec, a)[part] + decoder_forward(dec, b)[part]
            assert np.max(np.abs(lhs - rhs)) < 1e-10

    def test_width_mismatch_rejected(self):
        dec = small_decoder(np.random.default_rng(8))
        with pytest.raises(InvalidArgumentError):
            decoder_forward(dec, LatentCode(np.zeros(3), np.zeros(2)))


# ---------------------------------------------------------------------------
# losses


class TestLosses:
    def test_reconstruction_loss_zero_on_identical(self):
        shape = Shape(np.arange(12, dtype=np.float64))
        assert reconstruction_loss(shape, shape) == 0.0

    def test_reconstruction_loss_unit_offset(self):
        target = Shape(np.arange(12, dtype=np.float64))
        predicted = Shape(target.coords + 1.0)
        assert reconstruction_loss(predicted, target) == 1.0

    def test_reconstruction_loss_matches_loop(self):
        rng = np.random.default_rng(9)
        a, b = Shape(rng.normal(size=12)), Shape(rng.normal(size=12))
        expected = sum((x - y) ** 2 for x, y in zip(a.coords, b.coords)) / 12
        assert abs(reconstruction_loss(a, b) - expected) < 1e-12

    def test_reconstruction_loss_length_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            reconstruction_loss(Shape(np.zeros(12)), Shape(np.zeros(15)))

    def test_identification_loss_uniform_head(self):
        head = ClassifierHead(np.zeros((7, 3)), np.zeros(7))
        value = identification_loss(head, np.ones(3), 2)
        assert abs(value - np.log(7.0)) < 1e-12

    def test_identification_loss_decreases_with_margin(self):
        head = ClassifierHead(np.vstack([np.eye(3), -np.eye(3)]), np.zeros(6))
        losses = [identification_loss(head, t * np.array([1.0, 0.0, 0.0]), 0)
                  for t in (0.0, 0.5, 1.0, 2.0)]
        assert all(later < earlier for earlier, later in zip(losses, losses[1:]))

    def test_identification_loss_matches_softmax_oracle(self):
        rng = np.random.default_rng(10)
        head = ClassifierHead(rng.normal(size=(5, 3)), rng.normal(size=5))
        code = rng.normal(size=3)
        logits = head.weight @ code + head.bias
        probs = np.exp(logits) / np.exp(logits).sum()
        assert abs(identification_loss(head, code, 3) + np.log(probs[3])) < 1e-12

    def test_identification_loss_validation(self):
        head = ClassifierHead(np.zeros((4, 3)), np.zeros(4))
        with pytest.raises(InvalidArgumentError):
            identification_loss(head, np.zeros(3), 4)
        with pytest.raises(InvalidArgumentError):
            identification_loss(head, np.zeros(2), 0)

    def test_joint_loss_weighting(self):
        report = joint_loss(2.0, 1.0, 0.5)
        assert report.total == 2.0
        assert report.recon == 2.0 and report.ident == 1.0
        assert joint_loss(3.0, 0.25, 0.0).total == 0.25
        assert joint_loss(3.0, 0.25, 1.0).total == 3.25

    def test_loss_report_validation(self):
        with pytest.raises(InvalidArgumentError):
            LossReport(total=5.0, recon=1.0, ident=1.0, accuracy=0.0, lambda_r=1.0)
        with pytest.raises(InvalidArgumentError):
            LossReport(total=2.0, recon=1.0, ident=1.0, accuracy=1.5, lambda_r=1.0)
        with pytest.raises(InvalidArgumentError):
            LossReport(total=float("nan"), recon=float("nan"), ident=0.0,
                       accuracy=0.0, lambda_r=1.0)

    def test_batch_loss_matches_single_sample_primitives(self):
        rng = np.random.default_rng(11)
        net = small_net(rng)
        dec = small_decoder(rng)
        head = ClassifierHead(rng.normal(size=(3, 2)), rng.normal(size=3))
        batch = small_batch(rng, size=1)

        report = batch_loss(net, dec, head, batch, lambda_r=0.7)
        code = encoder_forward(net, batch.images[0])
        delta_id, delta_res = decoder_forward(dec, code)
        diff = (delta_id + delta_res) - batch.target_delta[0]
        recon = float(diff @ diff) / dec.out_dim
        ident = identification_loss(head, code.c_id, int(batch.labels[0]))
        assert abs(report.recon - recon) < 1e-12
        assert abs(report.ident - ident) < 1e-12
        assert abs(report.total - (0.7 * recon + ident)) < 1e-12


# ---------------------------------------------------------------------------
# gradients and the optimizer


class TestBackward:
    def test_zero_lambda_keeps_decoder_still(self):
        rng = np.random.default_rng(12)
        net, dec = small_net(rng), small_decoder(rng)
        head = ClassifierHead(rng.normal(size=(3, 2)), rng.normal(size=3))
        batch = small_batch(rng)
        grads, _ = backward(net, dec, head, batch, lambda_r=0.0)
        for key in ("dec.weight_id", "dec.bias_id", "dec.weight_res", "dec.bias_res"):
            assert np.array_equal(grads[key], np.zeros_like(grads[key]))

    def test_duplicated_batch_preserves_gradients(self):
        rng = np.random.default_rng(13)
        net, dec = small_net(rng), small_decoder(rng)
        head = ClassifierHead(rng.normal(size=(3, 2)), rng.normal(size=3))
        batch = small_batch(rng)
        doubled = TrainingBatch(np.vstack([batch.images, batch.images]),
                                np.concatenate([batch.labels, batch.labels]),
                                np.vstack([batch.target_delta, batch.target_delta]))
        grads_a, _ = backward(net, dec, head, batch, 0.5)
        grads_b, _ = backward(net, dec, head, doubled, 0.5)
        for key in grads_a:
            assert np.max(np.abs(grads_a[key] - grads_b[key])) < 1e-12

    def test_report_matches_batch_loss(self):
        rng = np.random.default_rng(14)
        net, dec = small_net(rng), small_decoder(rng)
        head = ClassifierHead(rng.normal(size=(3, 2)), rng.normal(size=3))
        batch = small_batch(rng)
        _, report = backward(net, dec, head, batch, 0.5)
        direct = batch_loss(net, dec, head, batch, 0.5)
        assert abs(report.total - direct.total) < 1e-12
        assert report.accuracy == direct.accuracy

    def test_non_finite_loss_raises(self):
        rng = np.random.default_rng(15)
        net, dec = small_net(rng), small_decoder(rng)
        head = ClassifierHead(rng.normal(size=(3, 2)), rng.normal(size=3))
        batch = TrainingBatch(rng.uniform(-1, 1, size=(2, 6)),
                              np.array([0, 1]),
                              np.full((2, 9), 1e200))
        with np.errstate(over="ignore"), pytest.raises(NumericalFailureError):
            backward(net, dec, head, batch, 0.5)

    def test_label_out_of_range_rejected(self):
        rng = np.random.default_rng(16)
        net, dec = small_net(rng), small_decoder(rng)
        head = ClassifierHead(rng.normal(size=(3, 2)), rng.normal(size=3))
        batch = TrainingBatch(rng.uniform(-1, 1, size=(2, 6)),
                              np.array([0, 3]), np.zeros((2, 9)))
        with pytest.raises(InvalidArgumentError):
            backward(net, dec, head, batch, 0.5)


class TestOptimizerStep:
    def test_zero_gradient_leaves_params(self):
        params = {"w": np.array([1.0, -2.0, 3.0])}
        grads = {"w": np.zeros(3)}
        new_params, _ = optimizer_step(params, grads, AdamState(),
                                       TrainConfig(), step_count=1)
        assert np.array_equal(new_params["w"], params["w"])

    def test_first_step_closed_form(self):
        config = TrainConfig(learning_rate=0.01)
        g = np.array([0.3, -0.7, 1e-12])
        params = {"w": np.array([1.0, 2.0, 3.0])}
        new_params, state = optimizer_step(params, {"w": g}, AdamState(),
                                           config, step_count=1)
        expected = params["w"] - config.learning_rate * g / (np.abs(g) + config.epsilon)
        assert np.max(np.abs(new_params["w"] - expected)) < 1e-15
        assert np.array_equal(state.m["w"], (1.0 - config.beta1) * g)
        assert np.array_equal(state.v["w"], (1.0 - config.beta2) * g * g)

    def test_multi_step_matches_reference_loop(self):
        config = TrainConfig(learning_rate=0.005)
        rng = np.random.default_rng(17)
        params = {"a": rng.normal(size=4), "b": rng.normal(size=(2, 3))}
        reference = {k: v.copy() for k, v in params.items()}
        m = {k: np.zeros_like(v) for k, v in params.items()}
        v = {k: np.zeros_like(val) for k, val in params.items()}
        state = AdamState()
        for t in range(1, 4):
            grads = {k: rng.normal(size=val.shape) for k, val in params.items()}
            params, state = optimizer_step(params, grads, state, config, t)
            for k in reference:
                m[k] = config.beta1 * m[k] + (1 - config.beta1) * grads[k]
                v[k] = config.beta2 * v[k] + (1 - config.beta2) * grads[k] ** 2
                m_hat = m[k] / (1 - config.beta1 ** t)
                v_hat = v[k] / (1 - config.beta2 ** t)
                reference[k] -= config.learning_rate * m_hat / (np.sqrt(v_hat)
                                                                + config.epsilon)
        for k in reference:
            assert np.max(np.abs(params[k] - reference[k])) < 1e-15

    def test_input_state_not_mutated(self):
        state = AdamState()
        optimizer_step({"w": np.ones(2)}, {"w": np.ones(2)}, state,
                       TrainConfig(), 1)
        assert state.m == {} and state.v == {}

    def test_step_count_validated(self):
        with pytest.raises(InvalidArgumentError):
            optimizer_step({}, {}, AdamState(), TrainConfig(), 0)


class TestFiniteDiffCheck:
    def test_linear_stack_tightens_audit(self):
        # with no activation curvature the residual error is difference-quotient
        # rounding noise, three orders below the tanh tolerance
        rng = np.random.default_rng(18)
        net = small_net(rng, activation="linear")
        dec = small_decoder(rng)
        head = ClassifierHead(rng.normal(size=(3, 2)) * 0.3, np.zeros(3))
        batch = small_batch(rng)
        assert finite_diff_check(net, dec, head, batch, step=1e-4,
                                 n_coords=120) < 1e-8

    def test_tanh_stack_within_tolerance(self):
        rng = np.random.default_rng(19)
        net = init_encoder(16, 3, 2, hidden=(12,), seed=1)
        dec = init_decoder(10, 3, 2, seed=2)
        head = init_head(4, 3, seed=3)
        batch = TrainingBatch(rng.uniform(-1, 1, size=(5, 16)),
                              rng.integers(0, 4, size=5),
                              rng.normal(0.0, 0.3, size=(5, 10)))
        assert finite_diff_check(net, dec, head, batch, n_coords=150) < 1e-5

    def test_deterministic(self):
        rng = np.random.default_rng(20)
        net, dec = small_net(rng), small_decoder(rng)
        head = ClassifierHead(rng.normal(size=(3, 2)), np.zeros(3))
        batch = small_batch(rng)
        assert (finite_diff_check(net, dec, head, batch)
                == finite_diff_check(net, dec, head, batch))


# ---------------------------------------------------------------------------
# classifier head warm start


class TestHeadFromClassMeans:
    def test_closed_form_parameters(self):
        codes = np.array([[1.0, 0.0], [3.0, 0.0], [0.0, 2.0], [0.0, 4.0]])
        labels = np.array([0, 0, 1, 1])
        head = head_from_class_means(codes, labels, 2, scale=10.0)
        means = np.array([[2.0, 0.0], [0.0, 3.0]])
        assert np.array_equal(head.weight, 10.0 * means)
        assert np.array_equal(head.bias, -5.0 * np.sum(means * means, axis=1))

    def test_missing_class_rejected(self):
        with pytest.raises(InvalidArgumentError):
            head_from_class_means(np.zeros((3, 2)), np.array([0, 0, 2]), 3)

    def test_separated_clusters_classified(self):
        rng = np.random.default_rng(21)
        centers = np.array([[3.0, 0.0], [-3.0, 0.0], [0.0, 3.0]])
        labels = np.repeat(np.arange(3), 30)
        codes = centers[labels] + rng.normal(0.0, 0.2, size=(90, 2))
        head = head_from_class_means(codes, labels, 3)
        assert classification_accuracy(head, codes, labels) == 1.0


# ---------------------------------------------------------------------------
# dataset plumbing


class TestDatasetPlumbing:
    def test_coefficient_targets_scale_and_clip(self, default_dataset):
        samples = default_dataset.samples[:20]
        model = default_dataset.model
        raw = coefficient_targets(model, samples, clip=False)
        clipped = coefficient_targets(model, samples, clip=True)
        want = np.array([np.concatenate([
            s.ground_truth_coeffs.alpha_id / (3.0 * model.sigma_id),
            s.ground_truth_coeffs.alpha_exp / (3.0 * model.sigma_exp)])
            for s in samples])
        assert np.max(np.abs(raw - want)) < 1e-15
        assert np.array_equal(clipped, np.clip(raw, -0.99, 0.99))

    def test_training_batch_rows(self, default_dataset):
        rows = [3, 17, 151]
        batch = training_batch(default_dataset, rows)
        mean = default_dataset.model.mean.coords
        for out_row, idx in enumerate(rows):
            sample = default_dataset.samples[idx]
            assert np.array_equal(batch.images[out_row], sample.depth_image.ravel())
            assert batch.labels[out_row] == sample.subject_label
            assert np.array_equal(batch.target_delta[out_row],
                                  sample.ground_truth_shape.coords - mean)


# ---------------------------------------------------------------------------
# training phases


@pytest.fixture(scope="module")
def quick_phase1(default_dataset):
    """Short regression run with a slim hidden layer, shared by phase tests."""
    net = init_encoder(1024, 20, 8, hidden=(64,), seed=0)
    encoder, history = train_phase1(net, default_dataset,
                                    TrainConfig(epochs=10, seed=0))
    return net, encoder, history


class TestTrainPhase1:
    def test_loss_drops_substantially(self, quick_phase1):
        _, _, history = quick_phase1
        assert history[-1][0] < 0.5 * history[0][0]
        assert len(history) == 10
        assert all(np.isfinite(val) for _, val in history)

    def test_deterministic(self, default_dataset):
        net = init_encoder(1024, 20, 8, hidden=(32,), seed=4)
        config = TrainConfig(epochs=2, seed=11)
        enc_a, hist_a = train_phase1(net, default_dataset, config)
        enc_b, hist_b = train_phase1(net, default_dataset, config)
        assert hist_a == hist_b
        for la, lb in zip(enc_a.layers, enc_b.layers):
            assert np.array_equal(la.weight, lb.weight)
            assert np.array_equal(la.bias, lb.bias)

    def test_single_subject_memorization(self, tiny_single_subject):
        net = init_encoder(256, 6, 4, hidden=(32,), seed=0)
        config = TrainConfig(epochs=400, batch_size=3, seed=0)
        _, history = train_phase1(net, tiny_single_subject, config)
        assert history[-1][0] < 1e-2

    def test_head_width_mismatch_rejected(self, default_dataset):
        net = init_encoder(1024, 5, 8, hidden=(16,), seed=0)
        with pytest.raises(InvalidArgumentError):
            train_phase1(net, default_dataset, TrainConfig(epochs=1))


@pytest.fixture(scope="module")
def tiny_single_subject(small_model) -> Dataset:
    """Hand-assembled one-subject split (an overfit sanity target)."""
    from morphfit.synthetic import build_dataset

    spec = DatasetSpec(n_subjects=2, images_per_subject=3, image_resolution=16,
                       seed=42)
    full = build_dataset(small_model, spec)
    return Dataset(model=full.model, spec=spec, samples=full.samples[:3],
                   train_indices=np.arange(3, dtype=np.int64),
                   val_indices=np.array([], dtype=np.int64),
                   test_indices=np.array([], dtype=np.int64))


class TestTrainPhase2:
    def test_recovers_exact_linear_decoder(self, default_dataset):
        model = default_dataset.model
        dec = train_phase2(init_decoder(model.mean.coords.size, 20, 8, seed=1),
                           default_dataset, seed=3)
        expected_id = model.basis_id @ np.diag(3.0 * model.sigma_id)
        expected_res = model.basis_exp @ np.diag(3.0 * model.sigma_exp)
        assert np.max(np.abs(dec.weight_id - expected_id)) < 1e-8
        assert np.max(np.abs(dec.weight_res - expected_res)) < 1e-8
        assert np.max(np.abs(dec.bias_id)) < 1e-9
        assert np.max(np.abs(dec.bias_res)) < 1e-9

    def test_heldout_codes_decode_exactly(self, default_dataset):
        model = default_dataset.model
        dec = train_phase2(init_decoder(model.mean.coords.size, 20, 8, seed=1),
                           default_dataset, seed=3)
        rng = np.random.default_rng(123)
        alphas = rng.normal(size=(10, model.k_id)) * model.sigma_id
        codes = alphas / (3.0 * model.sigma_id)
        predicted = codes @ dec.weight_id.T + dec.bias_id
        truth = alphas @ model.basis_id.T
        assert float(np.mean((predicted - truth) ** 2)) < 1e-10

    def test_underdetermined_needs_min_norm(self, default_dataset):
        model = default_dataset.model
        dec = init_decoder(model.mean.coords.size, 20, 8, seed=1)
        with pytest.raises(UnderdeterminedError):
            train_phase2(dec, default_dataset, n_pairs=5)
        fitted = train_phase2(dec, default_dataset, n_pairs=5, min_norm=True)
        assert np.all(np.isfinite(fitted.weight_id))

    def test_deterministic(self, default_dataset):
        model = default_dataset.model
        dec = init_decoder(model.mean.coords.size, 20, 8, seed=1)
        a = train_phase2(dec, default_dataset, seed=3)
        b = train_phase2(dec, default_dataset, seed=3)
        assert np.array_equal(a.weight_id, b.weight_id)
        assert np.array_equal(a.weight_res, b.weight_res)

    def test_width_mismatch_rejected(self, default_dataset):
        with pytest.raises(InvalidArgumentError):
            train_phase2(init_decoder(1800, 3, 8, seed=0), default_dataset)


class TestTrainPhase3:
    def test_default_schedule_constant(self):
        assert DEFAULT_PHASE3_STAGES == ((0.5, 10), (1.0, 20))

    def test_emitted_lambda_schedule(self, quick_phase1, default_dataset):
        _, encoder, _ = quick_phase1
        dec = train_phase2(init_decoder(1800, 20, 8, seed=1), default_dataset,
                           seed=3)
        images = np.array([default_dataset.samples[int(i)].depth_image.ravel()
                           for i in default_dataset.train_indices])
        labels = np.array([default_dataset.samples[int(i)].subject_label
                           for i in default_dataset.train_indices])
        codes_id, _ = encode_images(encoder, images)
        head = head_from_class_means(codes_id, labels, 15)
        before = classification_accuracy(head, codes_id, labels)

        _, _, head3, trace = train_phase3(
            encoder, dec, head, default_dataset,
            TrainConfig(learning_rate=2e-4, seed=0, phase="III"),
            stages=((0.5, 2), (1.0, 3)))
        assert [report.lambda_r for report in trace] == [0.5, 0.5, 1.0, 1.0, 1.0]
        assert trace[-1].accuracy >= before - 1e-12
        for report in trace:
            assert abs(report.total - (report.lambda_r * report.recon
                                       + report.ident)) <= 1e-10

    def test_deterministic(self, quick_phase1, default_dataset):
        _, encoder, _ = quick_phase1
        dec = train_phase2(init_decoder(1800, 20, 8, seed=1), default_dataset,
                           seed=3)
        head = init_head(15, 20, seed=5)
        config = TrainConfig(learning_rate=2e-4, seed=0, phase="III")
        run_a = train_phase3(encoder, dec, head, default_dataset, config,
                             stages=((0.5, 2),))
        run_b = train_phase3(encoder, dec, head, default_dataset, config,
                             stages=((0.5, 2),))
        assert np.array_equal(run_a[2].weight, run_b[2].weight)
        assert np.array_equal(run_a[1].weight_id, run_b[1].weight_id)
        assert np.array_equal(run_a[0].layers[0].weight, run_b[0].layers[0].weight)

    def test_numerical_failure_carries_last_good(self, quick_phase1,
                                                 default_dataset):
        _, encoder, _ = quick_phase1
        dec = train_phase2(init_decoder(1800, 20, 8, seed=1), default_dataset,
                           seed=3)
        head = init_head(15, 20, seed=5)
        config = TrainConfig(learning_rate=1e200, seed=0, phase="III")
        with np.errstate(over="ignore"), pytest.raises(NumericalFailureError) as exc_info:
            train_phase3(encoder, dec, head, default_dataset, config,
                         stages=((0.5, 1),))
        last_good = exc_info.value.last_good
        assert last_good[0] is encoder  # no epoch finished; inputs stand
        assert last_good[3] == []

    def test_stage_validation(self, quick_phase1, default_dataset):
        _, encoder, _ = quick_phase1
        dec = train_phase2(init_decoder(1800, 20, 8, seed=1), default_dataset,
                           seed=3)
        head = init_head(15, 20, seed=5)
        with pytest.raises(InvalidArgumentError):
            train_phase3(encoder, dec, head, default_dataset, TrainConfig(),
                         stages=((-0.5, 2),))
