import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_concept, random_image
from oracles import NumpyDenoiser, loss_from_log
from mmcustom.errors import EmptyPriors, InvalidToken, TimestepOutOfRange
from mmcustom.priorkit import (
    DrawLog,
    NoiseSchedule,
    combined_loss,
    concept_loss,
    denoise_loss,
    generate_priors,
    load_priors,
    make_composite,
    noise_image,
    save_priors,
)


def test_composite_descriptor():
    d = make_composite("sks", "a red toy")
    assert d.rendered == "sks a red toy"
    for bad in ["", "s k", "tab\t"]:
        with pytest.raises(InvalidToken):
            make_composite(bad, "a red toy")


@pytest.mark.parametrize(
    "alpha,sigma",
    [((1.0, 0.9), (0.0,)), ((0.5, 0.9), (0.8, 0.4)), ((0.5, 0.9), (0.1, 0.2)), ((float("nan"),), (0.0,))],
)
def test_schedule_validation(alpha, sigma):
    with pytest.raises(ValueError):
        NoiseSchedule(alpha, sigma)


def test_schedule_lookup(stub):
    sched = stub.schedule()
    assert sched.total_steps == 10
    assert sched.at(1) == (0.9, pytest.approx(np.sqrt(1 - 0.81)))
    for t in (0, 11):
        with pytest.raises(TimestepOutOfRange):
            sched.at(t)


@settings(max_examples=50)
@given(st.integers(1, 10), st.integers(0, 2**31))
def test_noise_image_formula(t, seed):
    rng = np.random.default_rng(seed)
    x, eps = rng.standard_normal((2, 3, 4, 4))
    sched = NoiseSchedule(tuple(1 - i / 10 for i in range(1, 11)), tuple(np.sqrt(1 - (1 - i / 10) ** 2) for i in range(1, 11)))
    a, s = sched.at(t)
    np.testing.assert_allclose(noise_image(x, t, eps, sched), a * x + s * eps, rtol=0, atol=1e-12)


def test_noise_image_identity_and_shape_check():
    sched = NoiseSchedule((1.0,), (0.0,))
    x = torch.randn(3, 4, 4, dtype=torch.float64)
    assert torch.equal(noise_image(x, 1, torch.randn_like(x), sched), x)
    with pytest.raises(ValueError):
        noise_image(x, 1, torch.randn(3, 4, 5), sched)


def test_denoise_loss_matches_oracle_and_logs(stub):
    log = DrawLog()
    x = random_image(3)
    loss = denoise_loss(stub, x, "a red toy", stub.schedule(), np.random.default_rng(0), draws=4, log=log, label="q")
    oracle = NumpyDenoiser(stub)
    assert len(log.draws) == 4
    assert loss.item() == pytest.approx(np.mean([oracle.term(d) for d in log.draws]), abs=1e-9)


def test_draw_order_is_t_then_eps(stub):
    log = DrawLog()
    denoise_loss(stub, random_image(0), "c", stub.schedule(), np.random.default_rng(9), log=log)
    ref = np.random.default_rng(9)
    assert log.draws[0].t == int(ref.integers(1, 11))
    np.testing.assert_array_equal(log.draws[0].eps, ref.standard_normal((3, 16, 16)))


@pytest.mark.parametrize("mode", ["all", "one"])
@pytest.mark.parametrize("lam", [0.0, 0.5, 2.0])
def test_concept_loss_oracle(stub, mode, lam):
    log = DrawLog()
    c = make_concept()
    loss = concept_loss(stub, c, lam, np.random.default_rng(1), prior_mode=mode, log=log)
    assert len(log.by_label("prior/")) == (3 if mode == "all" else 1)
    assert loss.item() == pytest.approx(loss_from_log(NumpyDenoiser(stub), log, lam, 1), abs=1e-9)


def test_draws_do_not_depend_on_lambda(stub):
    logs = []
    for lam in (0.0, 1.0):
        log = DrawLog()
        concept_loss(stub, make_concept(), lam, np.random.default_rng(5), log=log)
        logs.append([(d.label, d.t) for d in log.draws])
    assert logs[0] == logs[1]


def test_empty_priors_with_positive_lambda(stub):
    c = make_concept(n_priors=0)
    with pytest.raises(EmptyPriors):
        concept_loss(stub, c, 1.0, np.random.default_rng(0))
    assert torch.isfinite(concept_loss(stub, c, 0.0, np.random.default_rng(0)))


def test_token_instance_prompt(stub):
    log = DrawLog()
    concept_loss(stub, make_concept(), 0.0, np.random.default_rng(0), instance_prompt="token", log=log)
    assert log.by_label("instance/")[0].condition == "sks"
    assert log.by_label("prior/")[0].condition == "a red toy"


def test_combined_is_sum_and_order_independent_per_concept(stub):
    a, b = make_concept("sks", "a red toy", seed=0), make_concept("zwx", "a blue cup", seed=1, ref="b.png")
    rngs = lambda: [np.random.default_rng(10), np.random.default_rng(11)]  # noqa: E731
    ab = combined_loss(stub, [a, b], 1.0, rngs())
    ba = combined_loss(stub, [b, a], 1.0, rngs()[::-1])
    assert ab.item() == pytest.approx(ba.item(), abs=1e-12)
    single = [concept_loss(stub, c, 1.0, r) for c, r in zip([a, b], rngs())]
    assert ab.item() == pytest.approx((single[0] + single[1]).item(), abs=1e-12)


def test_combined_with_one_concept_is_bitwise_single(stub):
    c = make_concept()
    assert torch.equal(combined_loss(stub, [c], 0.7, [np.random.default_rng(3)]),
                       concept_loss(stub, c, 0.7, np.random.default_rng(3)))
    assert torch.equal(combined_loss(stub, [c], 0.7, np.random.default_rng(4)),
                       concept_loss(stub, c, 0.7, np.random.default_rng(4)))


def test_generate_and_store_priors(stub, tmp_path):
    priors = generate_priors(stub, "a red toy", 3, seed=5, steps=10)
    assert [p.seed for p in priors] == [5, 6, 7]
    assert all(p.prompt == "a red toy" and p.image.shape == (3, 16, 16) for p in priors)
    assert not torch.equal(priors[0].image, priors[1].image)
    again = generate_priors(stub, "a red toy", 1, seed=5, steps=10)
    assert torch.equal(again[0].image, priors[0].image)

    save_priors(priors, tmp_path / "store", stub.backend_id)
    loaded = load_priors(tmp_path / "store")
    assert [p.seed for p in loaded] == [5, 6, 7]
    # PNG quantisation error is at most half a grey level
    assert torch.max(torch.abs(loaded[0].image - priors[0].image)) <= 1.0 / 255 + 1e-9


def test_priors_use_pretrained_weights(stub):
    before = generate_priors(stub, "a red toy", 1, seed=0, steps=10)[0].image
    with torch.no_grad():
        stub._params["unet.conv_in.bias"].add_(0.3)
    after = generate_priors(stub, "a red toy", 1, seed=0, steps=10)[0].image
    assert torch.equal(before, after)
