import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedbank.datagen import FederationConfig, generate_federation
from fedbank.distillation import (
    Distill,
    HeteroModelRegistry,
    OneShot,
    PredictionMatrix,
    average_predictions,
    distill_update,
    load_predictions_csv,
    one_shot_ensemble,
    public_predictions,
    save_predictions_csv,
)
from fedbank.engine import Hyperparams, local_train_seed, run_round
from fedbank.errors import DomainError, ShapeError
from fedbank.metrics import accuracy
from fedbank.models import (
    Batch,
    ModelSpec,
    forward,
    init_params,
    loss_and_grad,
    sgd_train,
)


def _registry_for(client_ids, input_dim=5, num_classes=2):
    cycle = [
        ModelSpec("logistic", (input_dim, num_classes)),
        ModelSpec("mlp", (input_dim, 16, num_classes)),
        ModelSpec("mlp", (input_dim, 16, 8, num_classes)),
    ]
    return HeteroModelRegistry({cid: cycle[cid % 3] for cid in client_ids})


class TestPredictionMatrix:
    def test_rows_must_be_stochastic(self):
        with pytest.raises(DomainError):
            PredictionMatrix(rows=np.array([[0.5, 0.6]]))

    def test_zero_weight_model_gives_uniform_rows(self, rng):
        spec = ModelSpec("logistic", (4, 5))
        mat = public_predictions(spec, np.zeros(spec.param_count), rng.normal(size=(6, 4)))
        assert np.allclose(mat.rows, 0.2, atol=1e-12)

    def test_matches_forward_exactly(self, rng):
        spec = ModelSpec("mlp", (4, 6, 3))
        params = init_params(spec, 0)
        X = rng.normal(size=(7, 4))
        mat = public_predictions(spec, params, X, model_id=3, round_index=2)
        assert np.array_equal(mat.rows, forward(spec, params, X))
        assert (mat.model_id, mat.round) == (3, 2)


class TestAveragePredictions:
    def test_identical_matrices_unchanged(self, rng):
        spec = ModelSpec("logistic", (3, 2))
        params = init_params(spec, 1)
        X = rng.normal(size=(5, 3))
        mat = public_predictions(spec, params, X)
        merged = average_predictions([mat, mat, mat])
        assert np.allclose(merged.rows, mat.rows, atol=1e-12)

    def test_opposing_one_hot_rows(self):
        a = PredictionMatrix(rows=np.array([[1.0, 0.0]]))
        b = PredictionMatrix(rows=np.array([[0.0, 1.0]]))
        merged = average_predictions([a, b])
        assert np.allclose(merged.rows, [[0.5, 0.5]], atol=1e-15)

    def test_matches_elementwise_oracle(self, rng):
        mats = []
        for _ in range(4):
            raw = rng.uniform(0.05, 1.0, size=(6, 3))
            mats.append(PredictionMatrix(rows=raw / raw.sum(axis=1, keepdims=True)))
        weights = [0.5, 1.5, 2.0, 0.25]
        merged = average_predictions(mats, weights)
        wsum = sum(weights)
        for i in range(6):
            for c in range(3):
                ref = sum(w * m.rows[i, c] for w, m in zip(weights, mats)) / wsum
                assert merged.rows[i, c] == pytest.approx(ref, abs=1e-12)

    def test_shape_mismatch_rejected(self):
        a = PredictionMatrix(rows=np.full((2, 2), 0.5))
        b = PredictionMatrix(rows=np.full((3, 2), 0.5))
        with pytest.raises(ShapeError):
            average_predictions([a, b])

    def test_bad_weights_rejected(self):
        a = PredictionMatrix(rows=np.full((2, 2), 0.5))
        with pytest.raises(DomainError):
            average_predictions([a, a], [1.0, 0.0])

    @given(seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_result_stays_row_stochastic(self, seed):
        r = np.random.default_rng(seed)
        mats = []
        for _ in range(int(r.integers(1, 5))):
            raw = r.uniform(0.01, 1.0, size=(4, 3))
            mats.append(PredictionMatrix(rows=raw / raw.sum(axis=1, keepdims=True)))
        weights = r.uniform(0.1, 3.0, size=len(mats)).tolist()
        merged = average_predictions(mats, weights)
        assert np.allclose(merged.rows.sum(axis=1), 1.0, atol=1e-9)
        assert merged.rows.min() >= 0.0


class TestDistillUpdate:
    def test_self_consensus_fixed_point(self, rng):
        """When the consensus equals the student's own predictions and there is
        no hard-label term, the soft gradient is exactly zero and parameters
        never move."""
        spec = ModelSpec("mlp", (4, 8, 2))
        params = init_params(spec, 4)
        public_X = rng.normal(size=(30, 4))
        own = public_predictions(spec, params, public_X)
        loss, grad = loss_and_grad(
            spec, params, Batch(X=public_X, targets=own.rows), "soft-kl", temperature=1.0
        )
        assert loss == 0.0
        assert np.array_equal(grad, np.zeros_like(grad))
        private = Batch(X=rng.normal(size=(10, 4)), y=rng.integers(0, 2, 10))
        out = distill_update(
            spec, params, public_X, own, private,
            lam=0.0, temperature=1.0, steps=12, lr=0.5, seed=0,
        )
        assert np.array_equal(out, params)

    def test_large_lambda_recovers_private_direction(self, rng):
        spec = ModelSpec("logistic", (4, 2))
        params = init_params(spec, 1)
        public_X = rng.normal(size=(40, 4))
        raw = rng.uniform(0.1, 1.0, size=(40, 2))
        consensus = PredictionMatrix(rows=raw / raw.sum(axis=1, keepdims=True))
        private = Batch(X=rng.normal(size=(30, 4)), y=rng.integers(0, 2, 30))

        private_only = sgd_train(
            spec, params, private, steps=1, lr=1e-3, batch_size=30,
            seed=__import__("fedbank.engine", fromlist=["child_seed"]).child_seed(7, 1),
        )
        private_delta = private_only - params
        cosines = []
        for lam in (1.0, 10.0, 100.0, 1000.0):
            out = distill_update(
                spec, params, public_X, consensus, private,
                lam=lam, temperature=1.0, steps=1, lr=1e-3 / lam, seed=7, batch_size=40,
            )
            delta = out - params
            cos = float(
                np.dot(delta, private_delta)
                / (np.linalg.norm(delta) * np.linalg.norm(private_delta))
            )
            cosines.append(cos)
        assert cosines[-1] > 0.999
        assert cosines == sorted(cosines)

    def test_temperature_must_be_positive(self, rng):
        spec = ModelSpec("logistic", (3, 2))
        params = init_params(spec, 0)
        X = rng.normal(size=(4, 3))
        consensus = public_predictions(spec, params, X)
        with pytest.raises(DomainError):
            distill_update(spec, params, X, consensus, None, 0.0, 0.0, 1, 0.1, 0)


class TestDistillStrategy:
    def test_consensus_is_leave_one_out(self, iid_federation):
        _, clients, _ = iid_federation
        two = clients[:2]
        registry = _registry_for([c.client_id for c in two])
        public_X = np.random.default_rng(0).normal(size=(25, 5))
        strategy = Distill(registry, public_X)
        hyper = Hyperparams(lr=0.2, local_epochs=1, batch_size=16, lam=0.3)
        state = strategy.build_state(ModelSpec("logistic", (5, 2)), two, hyper, 0)
        state, _ = run_round(state, strategy, two, 1.0, ModelSpec("logistic", (5, 2)), hyper)
        preds = {
            cid: public_predictions(registry[cid], state.personal_params[cid], public_X)
            for cid in (0, 1)
        }
        assert np.allclose(strategy._consensus[0].rows, preds[1].rows, atol=1e-12)
        assert np.allclose(strategy._consensus[1].rows, preds[0].rows, atol=1e-12)

    def test_messages_expose_only_predictions_and_params(self, iid_federation):
        _, clients, _ = iid_federation
        registry = _registry_for([c.client_id for c in clients])
        public_X = np.random.default_rng(0).normal(size=(25, 5))
        strategy = Distill(registry, public_X)
        hyper = Hyperparams(lr=0.2, lam=0.3)
        spec = ModelSpec("logistic", (5, 2))
        state = strategy.build_state(spec, clients, hyper, 0)
        from fedbank.engine import as_view

        msg = strategy.local_update(as_view(clients[0]), state, spec, hyper, seed=1)
        assert msg.predictions is not None and msg.personal is not None
        assert msg.params is None and msg.delta is None

    def test_every_participant_beats_local_only_training(self):
        """Ten distillation rounds against the consensus should not hurt any
        participant compared with purely local training, across five seeds."""
        from fedbank.engine import child_seed

        for seed in range(5):
            config = FederationConfig(
                num_clients=10, num_clusters=1, samples_per_client=20,
                input_dim=5, num_classes=2, seed=seed, public_samples=800,
                class_separation=2.0,
            )
            clients, public = generate_federation(config)
            registry = _registry_for([c.client_id for c in clients])
            spec = ModelSpec("logistic", (5, 2))
            hyper = Hyperparams(lr=0.3, local_epochs=1, batch_size=16, lam=0.05, rounds=10)
            strategy = Distill(registry, public.X)
            state = strategy.build_state(spec, clients, hyper, seed)
            for _ in range(10):
                state, _ = run_round(state, strategy, clients, 1.0, spec, hyper)

            for c in clients:
                own_spec = registry[c.client_id]
                # Local-only baseline: the same step budget and engine seed
                # schedule (including the pretraining round), never any
                # consensus.
                w = init_params(own_spec, child_seed(seed, 0, c.client_id))
                for r in range(10):
                    mult = Distill.PRETRAIN_FACTOR if r == 0 else 1
                    w = sgd_train(
                        own_spec, w, c, steps=mult * hyper.local_steps(len(c)),
                        lr=hyper.lr, batch_size=hyper.batch_size,
                        seed=local_train_seed(seed, r, c.client_id),
                    )
                acc_local = accuracy(forward(own_spec, w, public.X), public.y)
                acc_distill = accuracy(
                    forward(own_spec, state.personal_params[c.client_id], public.X),
                    public.y,
                )
                assert acc_distill >= acc_local, (seed, c.client_id, acc_distill, acc_local)


class TestOneShotEnsemble:
    def test_identical_models_equal_single_model(self, rng):
        spec = ModelSpec("logistic", (4, 2))
        params = init_params(spec, 2)
        registry = HeteroModelRegistry({i: spec for i in range(3)})
        public_X = rng.normal(size=(10, 4))
        ensemble = one_shot_ensemble(
            registry,
            {i: params.copy() for i in range(3)},
            {i: 0.5 for i in range(3)},
            public_X,
            k_select=3,
        )
        assert np.allclose(ensemble.predict_proba(public_X), forward(spec, params, public_X),
                           atol=1e-12)

    def test_disagreeing_confident_models_average(self):
        spec = ModelSpec("logistic", (2, 2))
        registry = HeteroModelRegistry({0: spec, 1: spec})
        a = PredictionMatrix(rows=np.array([[0.9, 0.1]]))
        b = PredictionMatrix(rows=np.array([[0.2, 0.8]]))
        merged = average_predictions([a, b])
        assert np.allclose(merged.rows, [[0.55, 0.45]], atol=1e-12)
        assert merged.rows.argmax(axis=1)[0] == 0

    def test_k_out_of_range(self, rng):
        spec = ModelSpec("logistic", (3, 2))
        registry = HeteroModelRegistry({0: spec})
        params = {0: init_params(spec, 0)}
        with pytest.raises(DomainError):
            one_shot_ensemble(registry, params, {0: 1.0}, rng.normal(size=(2, 3)), 2)
        with pytest.raises(DomainError):
            one_shot_ensemble(registry, params, {0: 1.0}, rng.normal(size=(2, 3)), 0)

    def test_selects_lowest_validation_losses(self, rng):
        spec = ModelSpec("logistic", (3, 2))
        registry = HeteroModelRegistry({i: spec for i in range(4)})
        params = {i: init_params(spec, i) for i in range(4)}
        val = {0: 0.9, 1: 0.1, 2: 0.5, 3: 0.1}
        ensemble = one_shot_ensemble(registry, params, val, rng.normal(size=(2, 3)), 2)
        assert ensemble.member_ids == (1, 3)

    def test_ensemble_beats_median_single_model(self):
        for seed in range(5):
            config = FederationConfig(
                num_clients=6, num_clusters=1, samples_per_client=60,
                input_dim=5, seed=seed, public_samples=300, class_separation=2.5,
            )
            clients, public = generate_federation(config)
            registry = _registry_for([c.client_id for c in clients])
            spec = ModelSpec("logistic", (5, 2))
            hyper = Hyperparams(lr=0.3, local_epochs=3, batch_size=16, k_select=3)
            strategy = OneShot(registry, public.X)
            state = strategy.build_state(spec, clients, hyper, seed)
            state, _ = run_round(state, strategy, clients, 1.0, spec, hyper)

            singles = [
                accuracy(
                    forward(registry[cid], state.personal_params[cid], public.X), public.y
                )
                for cid in sorted(state.personal_params)
            ]
            ens = accuracy(strategy.ensemble.predict_proba(public.X), public.y)
            assert ens >= float(np.median(singles)), (seed, ens, singles)

    def test_exactly_one_access_per_client(self, iid_federation):
        _, clients, _ = iid_federation
        registry = _registry_for([c.client_id for c in clients])
        public_X = np.random.default_rng(0).normal(size=(30, 5))
        strategy = OneShot(registry, public_X)
        hyper = Hyperparams(lr=0.3, k_select=2, rounds=1)
        spec = ModelSpec("logistic", (5, 2))
        state = strategy.build_state(spec, clients, hyper, 0)
        state, rec = run_round(state, strategy, clients, 1.0, spec, hyper)
        assert rec.accesses_charged == len(clients)
        assert all(b.used == 1 for b in state.budgets.values())


class TestPredictionsCsv:
    def test_round_trip(self, tmp_path, rng):
        mats = []
        for mid in range(2):
            raw = rng.uniform(0.05, 1.0, size=(4, 3))
            mats.append(
                PredictionMatrix(rows=raw / raw.sum(axis=1, keepdims=True),
                                 model_id=mid, round=5)
            )
        path = tmp_path / "preds.csv"
        save_predictions_csv(path, mats)
        loaded = load_predictions_csv(path)
        assert len(loaded) == 2
        for orig, back in zip(mats, loaded):
            assert np.array_equal(orig.rows, back.rows)
            assert (orig.model_id, orig.round) == (back.model_id, back.round)


def test_registry_requires_common_interface():
    with pytest.raises(DomainError):
        HeteroModelRegistry(
            {0: ModelSpec("logistic", (4, 2)), 1: ModelSpec("logistic", (5, 2))}
        )
    with pytest.raises(DomainError):
        HeteroModelRegistry({})
