import json

import numpy as np
import pytest

from latsys.adversarial import (
    FGSM_M,
    FGSM_S,
    ITR_M,
    ITR_S,
    AttackParams,
    SplitLeakageError,
    UnsupportedModelError,
    attack,
    attack_dataset,
    fgsm,
    image_checksum,
    iterative_attack,
    write_adversarial_split,
)
from latsys.core_types import InputDomainError
from latsys.dataprep import SyntheticSpec, generate_synthetic
from latsys.predictors import NetPredictor, ToyNet, train_net_predictor


class Flat:
    """Loss with zero gradient everywhere."""

    def loss(self, image, label):
        return 1.0

    def loss_gradient(self, image, label):
        return np.zeros_like(image)


def random_model(seed, hidden=6, shape=(5, 5), n=4):
    return NetPredictor(ToyNet.init(shape[0] * shape[1], hidden, n, seed), shape)


def random_image(seed, shape=(5, 5)):
    return np.rint(np.random.default_rng(seed).uniform(0, 255, shape))


def test_preset_budgets():
    assert (FGSM_M.epsilon, FGSM_S.epsilon) == (50, 150)
    assert (ITR_M.epsilon, ITR_M.alpha, ITR_M.iterations) == (18, 1, 10)
    assert (ITR_S.epsilon, ITR_S.alpha, ITR_S.iterations) == (50, 1, 10)
    assert ITR_M.budget == ITR_S.budget == 10
    assert FGSM_S.budget == 150


def test_zero_gradient_leaves_image_unchanged():
    x = random_image(0)
    np.testing.assert_array_equal(fgsm(x, 0, Flat(), 50), x)
    np.testing.assert_array_equal(iterative_attack(x, 0, Flat(), 18, 1, 10), x)


@pytest.mark.parametrize("seed", range(10))
def test_fgsm_bound_and_equality(seed):
    model, x = random_model(seed), random_image(seed)
    eps = 20.0
    adv = fgsm(x, 1, model, eps)
    delta = np.abs(adv - x)
    assert delta.max() <= eps
    free = (model.loss_gradient(x, 1) != 0) & (x - eps >= 0) & (x + eps <= 255)
    np.testing.assert_allclose(delta[free], eps)
    assert adv.min() >= 0 and adv.max() <= 255


def test_one_step_iterative_equals_fgsm():
    model, x = random_model(3), random_image(3)
    np.testing.assert_array_equal(iterative_attack(x, 2, model, 30, 30, 1),
                                  fgsm(x, 2, model, 30))


@pytest.mark.parametrize("params", [FGSM_M, FGSM_S, ITR_M, ITR_S])
def test_every_attack_respects_its_budget(params):
    for seed in range(5):
        model, x = random_model(seed), random_image(seed + 100)
        adv = attack(x, seed % 4, model, params)
        assert np.abs(adv - x).max() <= params.budget + 1e-12
        assert adv.min() >= 0 and adv.max() <= 255


def test_itr_m_and_itr_s_coincide():
    model, x = random_model(4), random_image(4)
    np.testing.assert_array_equal(attack(x, 0, model, ITR_M), attack(x, 0, model, ITR_S))


def test_fgsm_raises_linear_model_loss():
    for seed in range(50):
        model = random_model(seed, hidden=0)
        x = random_image(seed)
        y = seed % 4
        assert model.loss(fgsm(x, y, model, 10), y) >= model.loss(x, y)


def test_non_differentiable_model_rejected():
    with pytest.raises(UnsupportedModelError):
        fgsm(np.zeros((3, 3)), 0, object(), 5)


def test_parameter_validation():
    with pytest.raises(InputDomainError):
        AttackParams("iterative", 10)
    with pytest.raises(InputDomainError):
        AttackParams("pgd", 10)
    with pytest.raises(InputDomainError):
        fgsm(np.zeros((3, 3)), 0, Flat(), 0)


def test_attack_dataset_manifest_and_leakage(tmp_path):
    ds = generate_synthetic(SyntheticSpec(n_classes=4), 24)
    model = train_net_predictor(ds.images[:16], ds.labels[:16], 4, hidden=8, epochs=3,
                                lr=0.1, seed=0)
    ids = ds.ids[16:]
    adv, manifest = attack_dataset(ds.images[16:], ds.labels[16:], ids, model, FGSM_M,
                                   seed=5, train_ids=ds.ids[:16],
                                   model_checksum=model.checksum())
    assert adv.shape == ds.images[16:].shape
    assert max(manifest.linf) <= 50
    assert manifest.image_checksums[0] == image_checksum(adv[0])
    data = json.loads(manifest.to_json())
    assert data["params"]["name"] == "FGSM-M" and len(data["loss_increased"]) == 8
    out = write_adversarial_split(tmp_path / "adv", adv, ids, manifest)
    assert (out / "manifest.json").exists() and (out / f"{ids[0]}.png").exists()
    with pytest.raises(SplitLeakageError):
        attack_dataset(ds.images[15:], ds.labels[15:], ds.ids[15:], model, FGSM_M,
                       train_ids=ds.ids[:16])
    empty, m = attack_dataset(np.empty((0, 32, 32)), [], [], model, ITR_M)
    assert empty.shape == (0, 32, 32) and m.image_ids == []


def test_white_box_drop_exceeds_transfer_drop():
    ds = generate_synthetic(SyntheticSpec(seed=1), 480)
    train, test = slice(0, 400), slice(400, 480)
    kw = dict(hidden=32, epochs=15, lr=0.1)
    a = train_net_predictor(ds.images[train], ds.labels[train], 8, seed=1, **kw)
    b = train_net_predictor(ds.images[train], ds.labels[train], 8, seed=2, **kw)
    adv, _ = attack_dataset(ds.images[test], ds.labels[test], ds.ids[400:], a, FGSM_M)

    def acc(model, images):
        return np.mean([np.argmax(model.probabilities(x)) == y
                        for x, y in zip(images, ds.labels[test])])

    drop_a = acc(a, ds.images[test]) - acc(a, adv)
    drop_b = acc(b, ds.images[test]) - acc(b, adv)
    assert drop_a >= drop_b
