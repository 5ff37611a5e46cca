import numpy as np
import pytest
from toy import Toy

from f2dc import data
from f2dc.evaluation import avg_std, collapse_spectrum, evaluate_feature_protocol, evaluate_global, predict
from f2dc.model import ModelConfig, build_bundle, build_shared, plain_forward, zero_parameters
from f2dc.numerics import Tensor

CFG = ModelConfig(num_classes=4, image_size=8, channels=(4, 8, 8))


def domain_sets(rng, domains=2, n=12):
    return [data.TestSet(q, rng.uniform(0, 1, (n, 3, 8, 8)), np.arange(n) % 4) for q in range(domains)]


def test_avg_std_two_point():
    avg, std = avg_std([0.6, 0.8])
    assert avg == pytest.approx(0.7, abs=1e-15) and std == pytest.approx(0.1, abs=1e-15)


def test_constant_classifier_scores_one_over_classes():
    shared = build_shared(CFG, np.random.default_rng(0))
    shared.classifier.weight.data[:] = 0.0
    shared.classifier.bias.data[:] = [0.0, 0.0, 1.0, 0.0]
    accs, avg, std = evaluate_global(shared, domain_sets(np.random.default_rng(1)))
    assert accs == [0.25, 0.25] and avg == 0.25 and std == 0.0


def test_perfect_predictions_score_one():
    rng = np.random.default_rng(2)
    shared = build_shared(CFG, rng)
    tests = domain_sets(rng)
    labelled = [data.TestSet(t.domain, t.x, predict(shared, t.x)) for t in tests]
    accs, avg, std = evaluate_global(shared, labelled)
    assert accs == [1.0, 1.0] and avg == 1.0 and std == 0.0


def test_zero_network_has_zero_spectrum():
    shared = build_shared(CFG, np.random.default_rng(0))
    zero_parameters(shared)
    report = collapse_spectrum(shared, domain_sets(np.random.default_rng(3)))
    np.testing.assert_array_equal(report.values, 0.0)
    assert report.near_zero == len(report.values) == 8


def test_spectrum_is_nonincreasing():
    shared = build_shared(CFG, np.random.default_rng(4))
    report = collapse_spectrum(shared, domain_sets(np.random.default_rng(5)))
    assert np.all(np.diff(report.values) <= 0)
    assert report.near_zero == int(np.sum(report.values < 0.01 * report.values[0]))


def test_fused_protocol_matches_training_composition():
    toy = Toy(seed=4)
    toy.bundle.train(False)
    x, y = toy.x.data, toy.y
    out = toy.forward(noise=None)
    pred = np.argmax(out.logits.data, axis=1)
    assert evaluate_feature_protocol(toy.bundle, x, y, "f~", toy.sigma) == float(np.mean(pred == y))


def test_robust_protocol_with_open_mask_equals_plain_path():
    rng = np.random.default_rng(6)
    bundle = build_bundle(CFG, rng)
    unit = bundle.private.units[0]
    # Push every attribution score far positive: the last BN shift sets S, so M = 1 to machine precision.
    zero_parameters(unit.decoupler)
    unit.decoupler.layers[-1].bn.bias.data[:] = 50.0
    x = rng.uniform(0, 1, (16, 3, 8, 8))
    y = np.arange(16) % 4
    bundle.train(False)
    plain = np.argmax(plain_forward(bundle.shared, Tensor(x)).data, axis=1)
    assert evaluate_feature_protocol(bundle, x, y, "f+", 0.1) == float(np.mean(plain == y))
    assert evaluate_feature_protocol(bundle, x, y, "plain", 0.1) == float(np.mean(plain == y))
