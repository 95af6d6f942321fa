"""Differentiable boundary tree training: transition model, both variants."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from helpers import finite_difference_grad, flatten_grads, kink_distance, relative_error

from boundarylearn.dbs import set_vote_loss_grads
from boundarylearn.dbt import (
    DifferentiableBoundaryTree,
    _grow_tree,
    class_distribution,
    class_log_prob,
    final_step_nodes,
    transition_prob,
)
from boundarylearn.metrics import closeness_weights, row_distances
from boundarylearn.network import Adam, ReluNet


def grown_tree(rng, n=25, dim=3, n_classes=3):
    points = rng.normal(size=(n, dim))
    labels = rng.integers(0, n_classes, size=n)
    tree, rows = _grow_tree(points, labels, n_classes, None)
    return tree, points, labels


class TestTransitionProb:
    def test_equal_distances_split_evenly(self):
        tree, _ = _grow_tree(np.array([[0.0], [2.0]]), np.array([0, 1]), 2, None)
        assert transition_prob(tree, 1, np.array([1.0]), 1.0) == pytest.approx(0.5)

    def test_two_logit_closed_form(self):
        # child at distance 0, parent at distance ln 3
        tree, _ = _grow_tree(np.array([[0.0], [np.log(3.0)]]), np.array([0, 1]), 2, None)
        assert transition_prob(tree, 1, np.array([np.log(3.0)]), 1.0) == pytest.approx(0.75)

    def test_three_candidates(self):
        # target at distance 0, parent and sibling both at distance ln 2:
        # 1 / (1 + 1/2 + 1/2) = 1/2
        parent = np.array([0.0, 0.0])
        child_a = np.array([np.log(2.0), 2 * np.log(2.0)])
        child_b = np.array([np.log(2.0), -2 * np.log(2.0)])
        tree, _ = _grow_tree(np.vstack([parent, child_a, child_b]), np.array([0, 1, 1]), 2, None)
        assert tree.parent_.tolist() == [-1, 0, 0]
        query = child_a + np.array([0.0, 0.0])
        d = row_distances(query, tree.points_)
        assert d[1] == pytest.approx(0.0)
        # place the query exactly on child_a; parent and sibling distances
        # are sqrt(log2^2 + 4 log2^2) and 4 log2 -- use weights directly
        w = closeness_weights(d[[0, 1, 2]], 1.0)
        assert transition_prob(tree, 1, query, 1.0) == pytest.approx(w[1])

    def test_root_rejected(self):
        tree, _ = _grow_tree(np.array([[0.0], [2.0]]), np.array([0, 1]), 2, None)
        with pytest.raises(ValueError, match="root"):
            transition_prob(tree, 0, np.array([1.0]), 1.0)

    def test_final_step_probabilities_sum_to_one(self, rng):
        tree, points, labels = grown_tree(rng)
        for _ in range(20):
            q = rng.normal(size=3)
            trace = tree._traverse(q)
            if not trace.visited:
                continue
            final = trace.final_node
            parent = int(tree.parent_[final])
            siblings = tree.children_of(parent)
            total = sum(transition_prob(tree, i, q, 0.8) for i in siblings)
            stay = closeness_weights(
                row_distances(q, tree.points_[[parent, *siblings]]), 0.8
            )[0]
            assert total + stay == pytest.approx(1.0, abs=1e-12)


class TestClassLogProb:
    def test_lone_final_node_gets_full_mass(self):
        # depth-1 chain: traversal into the only child, which has no siblings
        tree, _ = _grow_tree(np.array([[0.0], [2.0]]), np.array([0, 1]), 2, None)
        q = np.array([1.8])
        trace = tree._traverse(q)
        assert trace.visited == [1]
        _, dist = class_log_prob(tree, trace, q, 1.0, 2)
        assert_allclose(dist, [0.0, 1.0], atol=1e-15)

    def test_equidistant_final_candidates_split(self):
        # root with two children of different labels, query equidistant to
        # the children and closest to one of them
        pts = np.array([[0.0, 0.0], [2.0, 2.0], [2.0, -2.0]])
        tree, _ = _grow_tree(pts, np.array([0, 1, 2]), 3, None)
        assert tree.parent_.tolist() == [-1, 0, 0]
        q = np.array([2.5, 0.0])
        trace = tree._traverse(q)
        assert trace.visited
        _, dist = class_log_prob(tree, trace, q, 1.0, 3)
        assert dist[0] == 0.0
        assert_allclose(dist[1:], [0.5, 0.5], atol=1e-12)

    def test_prefix_cancels_in_normalization(self, rng):
        for _ in range(50):
            tree, points, labels = grown_tree(rng, n=int(rng.integers(3, 30)))
            q = rng.normal(size=3)
            trace = tree._traverse(q)
            log_p_star, dist = class_log_prob(tree, trace, q, 0.9, 3)
            simplified = class_distribution(tree, trace, q, 0.9, 3)
            assert_allclose(dist, simplified, rtol=1e-9, atol=1e-12)

    def test_explicit_prefix_has_no_effect(self, rng):
        tree, points, labels = grown_tree(rng)
        q = rng.normal(size=3)
        trace = tree._traverse(q)
        log_p_star, dist = class_log_prob(tree, trace, q, 0.9, 3)
        shifted = log_p_star - 7.31  # any constant path-prefix term
        renorm = np.exp(shifted - shifted.max())
        renorm /= renorm.sum()
        assert_allclose(renorm, dist, atol=1e-12)

    def test_zero_mass_class_is_exactly_zero(self):
        tree, _ = _grow_tree(np.array([[0.0], [2.0]]), np.array([0, 1]), 3, None)
        q = np.array([1.9])
        trace = tree._traverse(q)
        log_p_star, dist = class_log_prob(tree, trace, q, 1.0, 3)
        assert log_p_star[2] == -np.inf
        assert dist[2] == 0.0
        assert not np.any(np.isnan(dist))


class TestStep:
    def test_identity_net_symmetric_tree(self):
        trainer = DifferentiableBoundaryTree(
            variant="v2", n_build=2, n_query=1, sigma=1.0, dtype=np.float64
        )
        net = ReluNet([1, 1], rng=0, dtype=np.float64)
        net.weights[0] = np.eye(1)
        net.biases[0][:] = 0.0
        trainer.net_ = net
        trainer.classes_ = np.array([0, 1])
        adam = Adam(net, lr=0.0)
        X = np.array([[0.0], [2.0], [1.0]])
        y = np.array([0, 1, 0])
        loss, n_nodes = trainer._train_step(X, y, adam)
        assert n_nodes == 2
        assert loss == pytest.approx(np.log(2.0), abs=1e-12)

    def test_variants_share_loss_values(self, rng):
        X = rng.normal(size=(24, 4)).astype(np.float64)
        y = rng.integers(0, 3, size=24)
        losses = {}
        for variant in ("v1", "v2"):
            trainer = DifferentiableBoundaryTree(
                variant=variant, n_build=16, n_query=8, sigma=1.0, dtype=np.float64
            )
            trainer.net_ = ReluNet([4, 5, 2], rng=7, dtype=np.float64)
            trainer.classes_ = np.arange(3)
            adam = Adam(trainer.net_, lr=0.0)  # lr 0: parameters frozen
            losses[variant], _ = trainer._train_step(X, y, adam)
        assert losses["v1"] == pytest.approx(losses["v2"], abs=1e-12)

    def test_mass_nodes_after_root_stop(self):
        tree, _ = _grow_tree(np.array([[0.0], [2.0]]), np.array([0, 1]), 2, None)
        trace = tree._traverse(np.array([0.1]))
        assert trace.visited == []
        assert final_step_nodes(tree, trace).tolist() == [0, 1]

    def test_mass_nodes_after_descent(self, rng):
        tree, points, labels = grown_tree(rng, n=40)
        for _ in range(30):
            trace = tree._traverse(rng.normal(size=3))
            nodes = final_step_nodes(tree, trace)
            if trace.visited:
                parent = tree.parent_[trace.final_node]
                assert set(nodes) == set(tree.children_of(int(parent)))
                assert trace.final_node in nodes
            else:
                assert nodes[0] == 0


class TestGradientCheck:
    def _instance(self, rng, attempt):
        dims = [3, int(rng.integers(2, 6)), 2]
        net = ReluNet(dims, rng=attempt, dtype=np.float64)
        for b in net.biases:
            b += rng.normal(scale=0.3, size=b.shape)
        X = rng.normal(size=(10, 3))
        y = rng.integers(0, 3, size=10)
        return dims, net, X, y

    def test_v2_matches_finite_differences(self, rng):
        checked = 0
        attempt = 100
        while checked < 15:
            attempt += 1
            dims, net, X, y = self._instance(rng, attempt)
            if kink_distance(net, X) < 1e-3:
                continue
            emb, tape = net.forward(X)
            tree, node_rows = _grow_tree(emb[:7], y[:7], 3, None)
            r = 8
            trace = tree._traverse(emb[r])
            mass_rows = node_rows[final_step_nodes(tree, trace)]
            loss, gq, gm = set_vote_loss_grads(
                emb[r : r + 1], emb[mass_rows], y[r : r + 1], y[mass_rows], 1.2
            )
            rows = np.concatenate(([r], mass_rows))
            grads, _ = net.backward(tape.take(rows), np.concatenate((gq, gm), axis=0))

            def loss_at(vec):
                probe = ReluNet(dims, rng=attempt, dtype=np.float64)
                probe.set_parameter_vector(vec)
                e, _ = probe.forward(X)
                # tree structure and final-step membership held fixed
                l, _, _ = set_vote_loss_grads(
                    e[r : r + 1], e[mass_rows], y[r : r + 1], y[mass_rows], 1.2
                )
                return l

            numeric = finite_difference_grad(loss_at, net.parameter_vector())
            assert relative_error(flatten_grads(grads), numeric) < 1e-4
            checked += 1

    def test_v1_matches_stop_gradient_construction(self, rng):
        checked = 0
        attempt = 500
        while checked < 15:
            attempt += 1
            dims, net, X, y = self._instance(rng, attempt)
            if kink_distance(net, X) < 1e-3:
                continue
            emb, tape = net.forward(X)
            tree, node_rows = _grow_tree(emb[:7], y[:7], 3, None)
            r = 9
            trace = tree._traverse(emb[r])
            mass_rows = node_rows[final_step_nodes(tree, trace)]
            loss, gq, _ = set_vote_loss_grads(
                emb[r : r + 1], emb[mass_rows], y[r : r + 1], y[mass_rows], 1.2
            )
            grads, _ = net.backward(tape.take(np.asarray([r])), gq)
            frozen_members = emb[mass_rows].copy()

            def loss_at(vec):
                probe = ReluNet(dims, rng=attempt, dtype=np.float64)
                probe.set_parameter_vector(vec)
                e, _ = probe.forward(X)
                # explicit stop-gradient: member embeddings stay at the
                # base parameters while the query moves with them
                l, _, _ = set_vote_loss_grads(
                    e[r : r + 1], frozen_members, y[r : r + 1], y[mass_rows], 1.2
                )
                return l

            numeric = finite_difference_grad(loss_at, net.parameter_vector())
            assert relative_error(flatten_grads(grads), numeric) < 1e-4
            checked += 1

    def test_v2_decomposes_into_v1_plus_member_path(self, rng):
        # backpropagation is additive over batch rows, so the v2 gradient
        # must equal the v1 gradient plus the member-rows-only gradient;
        # the member path is exactly what v1 severs, and it is not zero
        y = np.array([0, 1, 2, 0, 1, 2, 0, 1, 2, 0])
        for seed in range(100):
            net = ReluNet([3, 4, 2], rng=seed, dtype=np.float64)
            X = rng.normal(size=(10, 3))
            emb, tape = net.forward(X)
            tree, node_rows = _grow_tree(emb[:7], y[:7], 3, None)
            r = 8
            trace = tree._traverse(emb[r])
            mass_rows = node_rows[final_step_nodes(tree, trace)]
            # gradients vanish unless the final step offers a real choice
            if mass_rows.size >= 2 and np.unique(y[mass_rows]).size >= 2:
                break
        loss, gq, gm = set_vote_loss_grads(
            emb[r : r + 1], emb[mass_rows], y[r : r + 1], y[mass_rows], 1.2
        )
        v1_grads, _ = net.backward(tape.take(np.asarray([r])), gq)
        member_grads, _ = net.backward(tape.take(mass_rows), gm)
        rows = np.concatenate(([r], mass_rows))
        v2_grads, _ = net.backward(tape.take(rows), np.concatenate((gq, gm), axis=0))
        assert np.abs(flatten_grads(member_grads)).max() > 1e-9
        assert_allclose(
            flatten_grads(v2_grads),
            flatten_grads(v1_grads) + flatten_grads(member_grads),
            atol=1e-12,
        )


class TestTraining:
    def test_blob_run_improves_or_holds(self, rng):
        a = rng.normal(scale=0.5, size=(60, 2)) + [-2.5, 0.0]
        b = rng.normal(scale=0.5, size=(60, 2)) + [2.5, 0.0]
        X = np.vstack([a, b]).astype(np.float32)
        y = np.repeat([0, 1], 60)
        order = rng.permutation(120)
        X, y = X[order], y[order]
        trainer = DifferentiableBoundaryTree(
            variant="v2",
            hidden_dims=(8,),
            embed_dim=2,
            n_build=20,
            n_query=20,
            sigma=60.0,
            epochs=10,
            random_state=0,
        )
        trainer.fit(X[:80], y[:80], eval_set=(X[80:], y[80:]))
        assert np.mean(trainer.predict(X[80:]) != y[80:]) <= 0.1

    def test_same_seed_reproduces_metrics(self, rng):
        X = rng.normal(size=(60, 3)).astype(np.float32)
        y = rng.integers(0, 2, size=60)
        runs = []
        for _ in range(2):
            trainer = DifferentiableBoundaryTree(
                variant="v1", hidden_dims=(6,), embed_dim=2, n_build=10, n_query=5,
                epochs=2, random_state=5, build_final=False,
            )
            trainer.fit(X, y)
            runs.append([r["loss"] for r in trainer.metrics_ if r["kind"] == "step"])
        assert runs[0] == runs[1]

    def test_invalid_variant_rejected(self, rng):
        X = rng.normal(size=(30, 3)).astype(np.float32)
        y = rng.integers(0, 2, size=30)
        with pytest.raises(ValueError, match="variant"):
            DifferentiableBoundaryTree(variant="v3", n_build=5, n_query=5, epochs=1).fit(X, y)

    def test_default_sigma_tracks_variant(self):
        assert DifferentiableBoundaryTree(variant="v1")._effective_sigma() == 1.0
        assert DifferentiableBoundaryTree(variant="v2")._effective_sigma() == 60.0
