import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dtn.estimators import BaselineTransfer, DigitClassifier, DomainTransferNetwork
from dtn.exceptions import UsageError

from conftest import TINY, synthetic_split

TINY_DTN = dict(g_widths=TINY["g_widths"], d_widths=TINY["d_widths"],
                encoder_widths=TINY["f_widths"], batch_size=8, n_steps=3)


@pytest.fixture(scope="module")
def fitted_classifier():
    split = synthetic_split(40, 3, seed=0)
    return DigitClassifier(n_steps=3, batch_size=16, widths=TINY["f_widths"]).fit(
        split.images(), split.labels)


def test_classifier_params_and_clone():
    clf = DigitClassifier(n_steps=7, seed=3)
    assert clf.get_params()["n_steps"] == 7
    twin = clone(clf)
    assert twin.get_params() == clf.get_params() and twin is not clf


def test_classifier_outputs(fitted_classifier):
    X = synthetic_split(5, 3, seed=1).images()
    proba = fitted_classifier.predict_proba(X)
    assert proba.shape == (5, 10)
    np.testing.assert_allclose(proba.sum(1), 1, atol=1e-6)
    np.testing.assert_array_equal(fitted_classifier.predict(X), proba.argmax(1))
    assert fitted_classifier.transform(X).shape == (5, 16)
    gray = synthetic_split(5, 1, seed=1).images()
    assert fitted_classifier.predict(gray).shape == (5,)
    assert 0 <= fitted_classifier.score(X, np.arange(5)) <= 1


def test_classifier_validation():
    with pytest.raises(NotFittedError):
        DigitClassifier().predict(np.zeros((1, 32, 32, 3), np.float32))
    with pytest.raises(UsageError):
        DigitClassifier(n_steps=1).fit(np.full((2, 32, 32, 3), 2.0), [0, 1])
    with pytest.raises(UsageError):
        DigitClassifier(n_steps=1).fit(np.zeros((2, 32, 32, 3)), [0, 11])


def test_dtn_fit_transform(fitted_classifier):
    s = synthetic_split(24, 3, seed=2).images()
    t = synthetic_split(24, 1, seed=3).images()
    before = [p.detach().clone() for p in fitted_classifier.network_.parameters()]
    dtn = DomainTransferNetwork(feature_network=fitted_classifier, **TINY_DTN).fit(s, t)
    out = dtn.transform(s[:4])
    assert out.shape == (4, 32, 32, 1)
    assert np.abs(out).max() < 1
    assert len(dtn.loss_log_) == 3
    assert dtn.generator_ is dtn.model_.g and dtn.discriminator_.num_classes == 3
    after = list(fitted_classifier.network_.parameters())
    assert all((a == b).all() for a, b in zip(before, after))


def test_dtn_clone_and_ablation(fitted_classifier):
    dtn = DomainTransferNetwork(feature_network=fitted_classifier, ablation=("no_tid",), **TINY_DTN)
    assert clone(dtn).get_params()["ablation"] == ("no_tid",)
    s = synthetic_split(16, 3, seed=2).images()
    t = synthetic_split(16, 1, seed=3).images()
    dtn.fit(s, t)
    assert all(r["l_tid"] == 0 for r in dtn.loss_log_)


def test_dtn_requires_feature_network():
    s = synthetic_split(16, 3, seed=2).images()
    with pytest.raises(TypeError):
        DomainTransferNetwork(**TINY_DTN).fit(s, s[..., :1])
    with pytest.raises(NotFittedError):
        DomainTransferNetwork().transform(s)


def test_baseline_estimator(fitted_classifier):
    est = BaselineTransfer(feature_network=fitted_classifier, **TINY_DTN)
    assert "beta" not in est.get_params()
    s = synthetic_split(16, 3, seed=2).images()
    t = synthetic_split(16, 1, seed=3).images()
    est.fit(s, t)
    assert est.generator_ is est.model_.baseline
    assert est.transform(s[:2]).shape == (2, 32, 32, 1)


def test_estimator_load(tmp_path, fitted_classifier):
    s = synthetic_split(16, 3, seed=2).images()
    t = synthetic_split(16, 1, seed=3).images()
    dtn = DomainTransferNetwork(feature_network=fitted_classifier, **TINY_DTN).fit(s, t)
    dtn.model_.save(tmp_path / "ckpt")
    again = DomainTransferNetwork.load(tmp_path / "ckpt")
    np.testing.assert_array_equal(again.transform(s[:3]), dtn.transform(s[:3]))
