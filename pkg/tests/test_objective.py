import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from isgib import autodiff as ad
from isgib.graph import Graph
from isgib.models import Critic, EncoderConfig, GraphTensors, ISGIBModel, init_parameters
from isgib.objective import (
    EnvironmentBatch, NoNegativesError, assign_environments, contrastive_bound, cross_entropy,
    loss_i1, loss_i2, loss_s1, loss_s2, sample_pair_batch, total_loss,
)
from isgib.relations import SampleSets


def t(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def make_batch(n=6, d=3, h=4, c=3, seed=0, sets=False):
    gen = np.random.default_rng(seed)
    inputs = None
    if sets:
        inputs = SampleSets.from_sets([gen.uniform(0, 1, size=(k, d)) for k in gen.integers(1, 4, n)])
        pooled = inputs.pooled()
    else:
        pooled = t(gen.uniform(0, 1, size=(n, d)))
    return EnvironmentBatch(
        inputs_pooled=pooled,
        embeddings=t(gen.normal(size=(n, h))),
        logits=t(gen.normal(size=(n, c))),
        labels=torch.as_tensor(gen.integers(0, c, n)),
        env_ids=torch.as_tensor(np.arange(n) % 2),
        inputs=inputs,
    )


def critics(d, h, n, seed=0):
    ci, cs = Critic(d, h, 5, 5).double(), Critic(n, n, 5, 5).double()
    init_parameters(ci, torch.Generator().manual_seed(seed))
    init_parameters(cs, torch.Generator().manual_seed(seed + 1))
    return ci, cs


class TestCrossEntropy:
    def test_uniform_logits(self):
        for c in (2, 3, 7):
            assert float(cross_entropy(torch.zeros((4, c)), torch.zeros(4, dtype=torch.long))) \
                == pytest.approx(math.log(c), abs=1e-12)

    def test_worked_example(self):
        v = float(cross_entropy(t([[1.0, 0.0], [0.0, 1.0]]), torch.tensor([0, 1])))
        assert v == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
        assert v == pytest.approx(0.3133, abs=1e-4)

    def test_oracle(self, rng):
        logits, labels = rng.normal(size=(5, 4)), rng.integers(0, 4, 5)
        want = np.mean([-(logits[i, labels[i]] - np.log(np.exp(logits[i]).sum())) for i in range(5)])
        assert float(cross_entropy(t(logits), torch.as_tensor(labels))) == pytest.approx(want, abs=1e-9)

    def test_label_range(self):
        with pytest.raises(ValueError):
            cross_entropy(torch.zeros((2, 2)), torch.tensor([0, 2]))


class TestContrastive:
    def test_constant_critic_is_zero(self):
        scores = torch.full((5, 5), 0.37, dtype=torch.float64)
        for sign in ("paper", "flipped"):
            assert abs(float(contrastive_bound(scores, torch.tensor([0, 1, 0, 1, 1]), sign))) <= 1e-9

    def test_hand_case(self):
        a, b, c, d = 2.0, -1.0, 0.5, 3.0
        scores = t([[a, b], [c, d]])
        lme = math.log((math.exp(b) + math.exp(c)) / 2)
        bound = (a + d) / 2 - lme
        env = torch.tensor([0, 1])
        assert float(contrastive_bound(scores, env, "paper")) == pytest.approx(-bound, abs=1e-12)
        assert float(contrastive_bound(scores, env, "flipped")) == pytest.approx(bound, abs=1e-12)

    def test_only_cross_environment_pairs(self):
        # same-environment off-diagonal entries must not matter
        env = torch.tensor([0, 0, 1])
        s1 = t([[1.0, 9.0, 0.2], [-4.0, 2.0, 0.3], [0.1, 0.4, 0.5]])
        s2 = s1.clone()
        s2[0, 1], s2[1, 0] = -50.0, 50.0
        assert float(contrastive_bound(s1, env)) == float(contrastive_bound(s2, env))

    def test_single_environment(self):
        with pytest.raises(NoNegativesError):
            contrastive_bound(torch.zeros((3, 3)), torch.zeros(3, dtype=torch.long))

    def test_unknown_sign(self):
        with pytest.raises(ValueError):
            contrastive_bound(torch.zeros((2, 2)), torch.tensor([0, 1]), "reverse")

    def test_max_negatives_deterministic(self):
        s = t(np.random.default_rng(0).normal(size=(8, 8)))
        env = torch.tensor([0, 1] * 4)
        a = contrastive_bound(s, env, max_negatives=2, generator=torch.Generator().manual_seed(1))
        b = contrastive_bound(s, env, max_negatives=2, generator=torch.Generator().manual_seed(1))
        assert float(a) == float(b)

    def test_loss_i2_constant_critic(self):
        batch = make_batch()
        ci = Critic(3, 4, 5, 5).double()
        with torch.no_grad():
            for p in ci.parameters():
                p.zero_()
        assert abs(float(loss_i2(batch, ci).detach())) <= 1e-9


class TestStructural:
    def test_uniform_predictions_bce(self):
        batch = EnvironmentBatch(torch.zeros((4, 1)), torch.zeros((4, 2)), torch.zeros((4, 2)),
                                 torch.tensor([0, 1, 1, 0]), torch.tensor([0, 1, 0, 1]))
        assert float(loss_s1(batch, "dot")) == pytest.approx(math.log(2), abs=1e-12)

    def test_perfect_predictions_mse_zero(self):
        labels = torch.tensor([0, 2, 1, 2])
        logits = 1e3 * torch.nn.functional.one_hot(labels, 3).double()
        batch = EnvironmentBatch(torch.zeros((4, 1)), torch.zeros((4, 2)), logits, labels,
                                 torch.tensor([0, 1, 0, 1]))
        for metric in ("p_l2", "p_l1", "cmd"):
            assert float(loss_s1(batch, metric)) <= 1e-12

    def test_bce_range_error(self):
        with pytest.raises(ValueError, match="mse"):
            loss_s1(make_batch(), "p_l1", kind="bce")

    @pytest.mark.parametrize("metric", ["dot", "cosine", "p_l2", "mmd"])
    def test_s1_permutation_invariant(self, metric, rng):
        b = make_batch()
        perm = torch.as_tensor(rng.permutation(6))
        bp = EnvironmentBatch(b.inputs_pooled[perm], b.embeddings[perm], b.logits[perm],
                              b.labels[perm], b.env_ids[perm])
        assert float(loss_s1(bp, metric)) == pytest.approx(float(loss_s1(b, metric)), abs=1e-12)

    def test_s2_width_check(self):
        with pytest.raises(ValueError, match="width"):
            loss_s2(make_batch(), Critic(5, 5).double())

    def test_s2_constant_critic(self):
        cs = Critic(6, 6, 4, 4).double()
        with torch.no_grad():
            for p in cs.parameters():
                p.zero_()
        assert abs(float(loss_s2(make_batch(), cs, "cosine").detach())) <= 1e-9


class TestTotal:
    def test_zero_gammas_equal_ce(self):
        b = make_batch()
        out = total_loss(b, critics(3, 4, 6), (0, 0, 0))
        assert float(out.total) == float(loss_i1(b))
        assert math.isfinite(out.as_dict()["l_i2"])

    def test_linear_combination(self):
        b = make_batch()
        g = (0.3, 0.7, 1.1)
        out = total_loss(b, critics(3, 4, 6), g, "cosine")
        want = out.l_i1 + g[0] * out.l_i2 + g[1] * out.l_s1 + g[2] * out.l_s2
        assert float(out.total.detach()) == pytest.approx(float(want.detach()), abs=1e-12)

    def test_zero_weight_terms_carry_no_gradient(self):
        b = make_batch()
        b.embeddings.requires_grad_(True)
        ci, cs = critics(3, 4, 6)
        out = total_loss(b, (ci, cs), (0, 0, 0))
        assert not out.l_i2.requires_grad and not out.l_s2.requires_grad


def _toy_total(backbone, metric):
    """total_loss as a function of the first encoder parameter on a 6-node toy graph."""
    gen = np.random.default_rng(7)
    n, d = 6, 3
    edges = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5), (1, 4)]
    feats = gen.uniform(0, 1, size=(n, d))
    g = Graph(n, edges, feats, np.array([0, 1, 2, 0, 1, 2]))
    s = GraphTensors(g)
    model = ISGIBModel(EncoderConfig(d, 3, backbone, layers=2, hidden=4), relation_width=n).double()
    init_parameters(model, torch.Generator().manual_seed(3))
    sets = SampleSets(s.x, t(np.eye(n) * 0.5 + np.roll(np.eye(n), 1, axis=1) * 0.5))
    name, w0 = next(iter(model.encoder.named_parameters()))
    w0 = w0.detach().clone()

    def f(w):
        h = torch.func.functional_call(model.encoder, {name: w}, (s.x, s))
        batch = EnvironmentBatch(sets.pooled(), h, model.classifier(h), t(g.labels).long(),
                                 torch.tensor([0, 1, 0, 1, 1, 0]), inputs=sets,
                                 input_bounds=(0.0, 1.0))
        return total_loss(batch, (model.critic_i, model.critic_s), (0.5, 0.3, 0.7), metric).total

    return f, w0


@pytest.mark.parametrize("backbone", ["sage", "gcn", "gin"])
@pytest.mark.parametrize("metric", ["dot", "cosine", "p_l2", "cmd", "mmd"])
def test_total_loss_gradient(backbone, metric):
    f, w0 = _toy_total(backbone, metric)
    assert ad.grad_check(f, w0) < 1e-4


class TestSampling:
    def test_assign_deterministic(self):
        a = assign_environments(20, 3, np.random.default_rng(5))
        b = assign_environments(20, 3, np.random.default_rng(5))
        assert a.tolist() == b.tolist()

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 30), st.integers(2, 6), st.integers(0, 1000))
    def test_every_environment_filled(self, n, k, seed):
        if n < k:
            with pytest.raises(ValueError):
                assign_environments(n, k, np.random.default_rng(seed))
            return
        env = assign_environments(n, k, np.random.default_rng(seed))
        assert sorted(set(env.tolist())) == list(range(k))

    def test_one_per_environment(self):
        env = assign_environments(5, 5, np.random.default_rng(0), max_tries=0)
        assert sorted(env.tolist()) == [0, 1, 2, 3, 4]

    def test_pair_batch(self):
        rng = np.random.default_rng(0)
        assert sample_pair_batch(5, 8, rng).tolist() == [0, 1, 2, 3, 4]
        idx = sample_pair_batch(100, 16, rng)
        assert len(set(idx.tolist())) == 16 and np.all(np.diff(idx) > 0)
        assert sample_pair_batch(100, 16, np.random.default_rng(3)).tolist() == \
            sample_pair_batch(100, 16, np.random.default_rng(3)).tolist()
        with pytest.raises(ValueError):
            sample_pair_batch(10, 1, rng)
