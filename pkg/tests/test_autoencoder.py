import inspect

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import finite_difference_gradients, max_relative_error, small_variant_problem
from rfextend import autoencoder as ae
from rfextend.autoencoder import (
    AEError,
    AEModel,
    Layer,
    TrainConfig,
    TrainingError,
    backward,
    build_io,
    extend,
    fit_extension,
    forward,
    init_model,
    loss,
    train,
)
from rfextend.proximity import extend_proximities, select_prototypes, train_proximities


def linear(W, b, act="linear"):
    return Layer(np.asarray(W, dtype=float), np.asarray(b, dtype=float), act)


def hand_model(lam=10.0):
    # x -> z = x0 + 2 x1 -> (z + 0.5, -z)
    return AEModel(ae.RF_GRAE, [linear([[1.0], [2.0]], [0.0])], [linear([[1.0, -1.0]], [0.5, 0.0])], lam=lam)


class TestBuildIO:
    def test_grae(self):
        X = np.zeros((10, 4))
        io = build_io("rf-grae", X, None)
        assert io.inputs.shape == (10, 4) and io.targets.shape == (10, 4)

    def test_prn(self):
        P = np.random.default_rng(0).random((50, 50))
        io = build_io(ae.RF_PRN, np.zeros((50, 3)), P)
        assert io.inputs.shape[1] == 50 and io.targets.shape[1] == 50

    def test_prn_pro_twenty_percent(self):
        labels = np.repeat([0, 1, 2], [33, 33, 34])
        P = np.random.default_rng(1).random((100, 100))
        protos = select_prototypes(P, labels, 0.2)
        io = build_io(ae.RF_PRN_PRO, np.zeros((100, 2)), P, protos)
        assert abs(io.inputs.shape[1] - 20) <= 1
        assert io.targets.shape[1] == io.inputs.shape[1]

    def test_prox_variants(self):
        X = np.zeros((8, 3))
        P = np.eye(8)
        assert build_io(ae.RF_PROX_IN, X, P).targets.shape == (8, 3)
        io = build_io(ae.RF_PROX_REG, X, P)
        assert io.inputs.shape == (8, 3) and io.prox_targets.shape == (8, 8)

    def test_missing_prototypes(self):
        with pytest.raises(AEError):
            build_io(ae.RF_PRN_PRO, np.zeros((4, 2)), np.eye(4))

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(3, 30), d=st.integers(1, 6), variant=st.sampled_from(ae.VARIANTS))
    def test_widths(self, n, d, variant):
        P = np.full((n, n), 1.0 / n)
        protos = np.arange(0, n, 2)
        io = build_io(variant, np.zeros((n, d)), P, protos)
        expected_in = {ae.RF_GRAE: d, ae.RF_PROX_REG: d, ae.RF_PROX_IN: n, ae.RF_PRN: n,
                       ae.RF_PRN_PRO: len(protos)}[variant]
        expected_out = {ae.RF_GRAE: d, ae.RF_PROX_REG: d, ae.RF_PROX_IN: d, ae.RF_PRN: n,
                        ae.RF_PRN_PRO: len(protos)}[variant]
        assert io.inputs.shape == (n, expected_in)
        assert io.targets.shape == (n, expected_out)


class TestForward:
    def test_zero_weights(self):
        m = init_model(ae.RF_GRAE, 3, 3, 2, (4,))
        for p in m.parameters():
            p[...] = 0.0
        _, recon, _ = forward(m, np.ones((5, 3)))
        np.testing.assert_array_equal(recon, 0.0)

    def test_row_independence(self):
        m = init_model(ae.RF_GRAE, 4, 4, 2, (8, 5), seed=1)
        X = np.random.default_rng(2).standard_normal((7, 4))
        Z, R, _ = forward(m, X)
        Z3, R3, _ = forward(m, X[3:4])
        np.testing.assert_allclose(Z3, Z[3:4], atol=1e-14)
        np.testing.assert_allclose(R3, R[3:4], atol=1e-14)

    def test_hand_two_layer(self):
        enc = [linear([[1.0, -1.0], [0.5, 2.0]], [0.0, 1.0], "relu"), linear([[1.0], [1.0]], [-1.0])]
        dec = [linear([[2.0]], [0.5])]
        m = AEModel(ae.RF_GRAE, enc, dec)
        # h = relu([1 + 1, -1 + 4 + 1]) = (2, 4); z = 2 + 4 - 1 = 5; recon = 10.5
        Z, R, prox = forward(m, np.array([[1.0, 2.0]]))
        assert Z.tolist() == [[5.0]] and R.tolist() == [[10.5]] and prox is None

    def test_width_mismatch(self):
        m = init_model(ae.RF_GRAE, 3, 3, 2, (4,))
        with pytest.raises(AEError, match="width"):
            forward(m, np.zeros((2, 4)))


class TestLoss:
    def test_zero_loss(self):
        m = hand_model()
        x = np.array([[1.0, 1.0]])
        Z, R, _ = forward(m, x)
        total, _ = loss(m, x, R, Z)
        assert total == 0.0

    def test_lambda_zero(self):
        m = hand_model(lam=0.0)
        x, target = np.array([[1.0, 1.0]]), np.array([[1.0, 1.0]])
        total, terms = loss(m, x, target, np.array([[100.0]]))
        assert total == terms["recon"]

    def test_hand_case(self):
        # z = 3, recon = (3.5, -3): recon MSE = (2.5² + 4²)/2 = 11.125, geom = (3 - 1)² = 4
        m = hand_model(lam=10.0)
        total, terms = loss(m, np.array([[1.0, 1.0]]), np.array([[1.0, 1.0]]), np.array([[1.0]]))
        assert terms["recon"] == pytest.approx(11.125, abs=1e-12)
        assert terms["geom"] == pytest.approx(4.0, abs=1e-12)
        assert total == pytest.approx(51.125, abs=1e-12)

    @pytest.mark.parametrize("variant", ae.VARIANTS)
    def test_decomposition(self, variant):
        m, io, G = small_variant_problem(variant, seed=3)
        total, t = loss(m, io.inputs, io.targets, G, io.prox_targets)
        assert abs(total - (t["recon"] + m.lam * t["geom"] + m.gamma * t["prox"])) <= 1e-12

    def test_misaligned_g(self):
        m = hand_model()
        with pytest.raises(AEError):
            loss(m, np.ones((2, 2)), np.ones((2, 2)), np.ones((3, 1)))


class TestBackward:
    def test_zero_loss_zero_grads(self):
        m = hand_model()
        x = np.array([[1.0, 1.0]])
        Z, R, _ = forward(m, x)
        for g in backward(m, x, R, Z):
            np.testing.assert_array_equal(g, 0.0)

    def test_geometry_term_skips_decoder(self):
        m = init_model(ae.RF_GRAE, 3, 3, 2, (4,), lam=1.0, seed=0)
        x = np.random.default_rng(0).standard_normal((5, 3))
        Z, R, _ = forward(m, x)
        # perfect reconstruction leaves only the geometry term
        grads = backward(m, x, R, Z + 1.0)
        n_enc = 2 * len(m.encoder)
        assert any(np.any(g != 0) for g in grads[:n_enc])
        for g in grads[n_enc:]:
            np.testing.assert_array_equal(g, 0.0)

    @pytest.mark.parametrize("variant", ae.VARIANTS)
    def test_finite_differences(self, variant):
        m, io, G = small_variant_problem(variant, seed=0)
        assert m.n_parameters() <= 500
        analytic = backward(m, io.inputs, io.targets, G, io.prox_targets)
        numeric = finite_difference_gradients(m, io.inputs, io.targets, G, io.prox_targets)
        assert max_relative_error(analytic, numeric) < 1e-4


class TestTrain:
    def test_zero_epochs(self):
        m = init_model(ae.RF_GRAE, 3, 3, 2, (4,), seed=0)
        before = [p.copy() for p in m.parameters()]
        X = np.random.default_rng(0).standard_normal((10, 3))
        train(m, X, X, np.zeros((10, 2)), TrainConfig(epochs=0))
        for a, b in zip(before, m.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_loss_decreases(self, toy_pipeline):
        ds, f, G = toy_pipeline
        fit = fit_extension(ae.RF_GRAE, f, ds, G, lam=1.0, hidden=(16,),
                            train_cfg=TrainConfig(epochs=200, batch_size=16, seed=1))
        assert fit.history["total"][-1] < fit.history["initial"]

    def test_deterministic(self):
        X = np.random.default_rng(0).standard_normal((20, 3))
        G = np.random.default_rng(1).standard_normal((20, 2))
        runs = []
        for _ in range(2):
            m = init_model(ae.RF_GRAE, 3, 3, 2, (6,), seed=4)
            train(m, X, X, G, TrainConfig(epochs=5, batch_size=7, seed=2))
            runs.append(m.parameters())
        for a, b in zip(*runs):
            np.testing.assert_array_equal(a, b)

    def test_sgd(self):
        X = np.random.default_rng(0).standard_normal((20, 3))
        m = init_model(ae.RF_GRAE, 3, 3, 2, (6,), seed=4)
        _, hist = train(m, X, X, np.zeros((20, 2)), TrainConfig(epochs=30, optimizer="sgd", learning_rate=0.05))
        assert hist["total"][-1] < hist["initial"]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss(self):
        X = np.random.default_rng(0).standard_normal((20, 3)) * 1e200
        m = init_model(ae.RF_GRAE, 3, 3, 2, (6,), seed=4)
        with pytest.raises(TrainingError, match="epoch 0, batch 0"):
            train(m, X, X, np.zeros((20, 2)), TrainConfig(epochs=1))

    def test_lambda_effect(self, toy_pipeline):
        ds, f, G = toy_pipeline
        geom = {}
        for lam in (1.0, 100.0):
            fit = fit_extension(ae.RF_GRAE, f, ds, G, lam=lam, hidden=(16,),
                                train_cfg=TrainConfig(epochs=200, batch_size=16, seed=0))
            geom[lam] = fit.history["geom"][-1]
        assert geom[100.0] < geom[1.0]


class TestExtend:
    def test_no_label_parameter(self):
        assert "label" not in " ".join(inspect.signature(extend).parameters)

    def test_feature_variant_reproduces_training_latents(self, toy_pipeline):
        ds, f, G = toy_pipeline
        fit = fit_extension(ae.RF_GRAE, f, ds, G, hidden=(8,), train_cfg=TrainConfig(epochs=3))
        E = extend(fit.model, f, ds, ds.features)
        assert E.source == "encoder"
        np.testing.assert_array_equal(E.coords, fit.train_latent)

    @pytest.mark.parametrize("variant", [ae.RF_PROX_IN, ae.RF_PRN, ae.RF_PRN_PRO])
    def test_proximity_variants_encode_extended_rows(self, toy_pipeline, variant):
        ds, f, G = toy_pipeline
        fit = fit_extension(variant, f, ds, G, hidden=(8,), proto_frac=0.2 if variant == ae.RF_PRN_PRO else None,
                            train_cfg=TrainConfig(epochs=3))
        Q = ds.features[:5] + 0.01
        P = extend_proximities(f, ds, Q).values
        if variant == ae.RF_PRN_PRO:
            P = P[:, fit.model.prototypes]
        expected = fit.model.to_embedding_frame(fit.model.encode(P))
        np.testing.assert_array_equal(extend(fit.model, f, ds, Q).coords, expected)

    def test_dimension_mismatch(self, toy_pipeline):
        ds, f, G = toy_pipeline
        fit = fit_extension(ae.RF_PRN, f, ds, G, hidden=(8,), train_cfg=TrainConfig(epochs=1))
        with pytest.raises(AEError):
            extend(fit.model, f, ds, np.zeros((2, ds.d + 1)))

    def test_json_round_trip(self, toy_pipeline):
        ds, f, G = toy_pipeline
        P = train_proximities(f, ds)
        fit = fit_extension(ae.RF_PROX_REG, f, ds, G, hidden=(8,), P=P, train_cfg=TrainConfig(epochs=2))
        back = AEModel.from_json(fit.model.to_json())
        Q = ds.features[:4]
        np.testing.assert_array_equal(extend(back, f, ds, Q).coords, extend(fit.model, f, ds, Q).coords)
        assert back.lam == fit.model.lam and back.prox_head is not None


def test_canonical_variant():
    assert ae.canonical_variant("rf_prn_pro") == ae.RF_PRN_PRO
    with pytest.raises(AEError):
        ae.canonical_variant("rf-vae")
