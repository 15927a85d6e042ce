import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from srfusion.flow import (ConditionalFlow, FlowConfig, FlowTrainConfig, SampleStack, encode_lr,
                           forward_flow, inverse_flow, latent_noise, load_flow, load_stack,
                           nll_loss, parse_seeds, sample, sample_stack, save_flow, save_stack,
                           train_flow)
from srfusion.tensors import to_tensor

from conftest import SMALL_FLOW, randomize_
from oracles import fd_gradient_check, numerical_jacobian, relative_errors

TOY_FLOW = dict(channels=1, scale=4, levels=1, steps=2, hidden=8,
                encoder_channels=4, encoder_blocks=1)


def random_flow(seed=0, dtype=torch.float32, **kw):
    cfg = dict(SMALL_FLOW, seed=seed)
    cfg.update(kw)
    flow = ConditionalFlow(FlowConfig(**cfg)).to(dtype)
    return randomize_(flow, seed)


def random_pair(n, seed, dtype=torch.float32, hr=32, channels=3, scale=4):
    g = torch.Generator().manual_seed(seed)
    y = torch.rand(n, channels, hr, hr, generator=g, dtype=torch.float64).to(dtype)
    x = torch.rand(n, channels, hr // scale, hr // scale, generator=g, dtype=torch.float64).to(dtype)
    return y, x


# -- encoder ----------------------------------------------------------------


def test_encode_lr_deterministic_and_shaped():
    flow = ConditionalFlow(FlowConfig())
    x = torch.rand(3, 8, 8)
    a, b = encode_lr(x, flow), encode_lr(x, flow)
    assert torch.equal(a, b)
    assert a.shape == (64, 8, 8)
    assert torch.isfinite(encode_lr(torch.zeros(3, 8, 8), flow)).all()


def test_encode_lr_rejects_wrong_channels():
    with pytest.raises(ValueError):
        encode_lr(torch.rand(1, 8, 8), ConditionalFlow(FlowConfig()))


# -- invertibility and log-determinant --------------------------------------


@pytest.mark.parametrize("seed", range(3))
def test_round_trip_single_precision(seed):
    flow = random_flow(seed)
    y, x = random_pair(4, seed)
    with torch.no_grad():
        z, logdet = forward_flow(y, x, flow)
        back = inverse_flow(z, x, flow)
    assert z.numel() == y.numel()
    assert torch.isfinite(logdet).all()
    assert (back - y).abs().max() < 1e-4


def test_round_trip_double_precision():
    flow = random_flow(1, torch.float64)
    y, x = random_pair(2, 1, torch.float64)
    with torch.no_grad():
        back = inverse_flow(forward_flow(y, x, flow)[0], x, flow)
    assert (back - y).abs().max() < 1e-10


def test_unbatched_api_round_trip():
    flow = random_flow(2)
    y, x = random_pair(1, 2)
    with torch.no_grad():
        z, ld = forward_flow(y[0], x[0], flow)
        assert z.ndim == 3 and ld.ndim == 0
        assert (inverse_flow(z, x[0], flow) - y[0]).abs().max() < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_logdet_matches_numerical_jacobian(seed):
    flow = randomize_(ConditionalFlow(FlowConfig(**TOY_FLOW, seed=seed)).double(), seed, std=0.3)
    y, x = random_pair(1, seed, torch.float64, hr=4, channels=1)

    def f(flat):
        return flow(flat.view(1, 1, 4, 4), x)[0].flatten()

    with torch.no_grad():
        jac = numerical_jacobian(f, y)
        _, logdet = flow(y, x)
    num = torch.linalg.slogdet(jac)[1].item()
    assert abs(logdet.item() - num) / max(abs(num), 1e-12) < 1e-3


def _make_identity(flow):
    with torch.no_grad():
        for steps in flow.levels:
            for i, step in enumerate(steps):
                step.actnorm.loc.zero_()
                step.actnorm.logs.zero_()
                c = step.invconv.weight.shape[0]
                perm = torch.roll(torch.arange(c), i + 1)
                step.invconv.weight.copy_(torch.eye(c)[perm])
                last = step.coupling.net[-1]
                last.weight.zero_()
                last.bias.zero_()
    return flow


def test_identity_coupling_gives_permuted_squeeze():
    flow = _make_identity(ConditionalFlow(FlowConfig(**SMALL_FLOW, mean_shift=False)))
    y, x = random_pair(2, 7)
    with torch.no_grad():
        z, logdet = flow(y, x)
    assert torch.allclose(logdet, torch.zeros(2), atol=1e-5)
    sq = F.pixel_unshuffle(F.pixel_unshuffle(y, 2), 2)
    # channel permutations commute with the squeeze up to another permutation
    assert torch.equal(z.sort(dim=1).values, sq.sort(dim=1).values)


def test_identity_flow_is_squeeze_and_inverse_is_unsqueeze():
    flow = _make_identity(ConditionalFlow(FlowConfig(**SMALL_FLOW, mean_shift=False)))
    with torch.no_grad():
        for steps in flow.levels:
            for step in steps:
                step.invconv.weight.copy_(torch.eye(step.invconv.weight.shape[0]))
    y, x = random_pair(2, 8)
    with torch.no_grad():
        z, logdet = flow(y, x)
        assert torch.equal(z, F.pixel_unshuffle(F.pixel_unshuffle(y, 2), 2))
        assert torch.equal(logdet, torch.zeros(2))
        assert torch.equal(flow.reverse(z, x), F.pixel_shuffle(F.pixel_shuffle(z, 2), 2))


def test_shape_errors():
    flow = random_flow(0)
    with pytest.raises(ValueError):
        forward_flow(torch.rand(1, 3, 32, 32), torch.rand(1, 3, 16, 16), flow)
    with pytest.raises(ValueError):
        inverse_flow(torch.rand(1, 48, 4, 4), torch.rand(1, 3, 8, 8), flow)
    with pytest.raises(ValueError):
        forward_flow(torch.full((1, 3, 32, 32), float("nan")), torch.rand(1, 3, 8, 8), flow)


def test_zero_latent_is_deterministic_center():
    flow = random_flow(3)
    x = torch.rand(1, 3, 8, 8)
    z = torch.zeros(1, 48, 8, 8)
    with torch.no_grad():
        assert torch.equal(inverse_flow(z, x, flow), inverse_flow(z, x, flow))


# -- NLL -------------------------------------------------------------------


def test_nll_identity_flow_zero_latent_is_gaussian_constant():
    flow = _make_identity(ConditionalFlow(FlowConfig(**SMALL_FLOW, mean_shift=False)).double())
    with torch.no_grad():
        for steps in flow.levels:
            for step in steps:
                step.invconv.weight.copy_(torch.eye(step.invconv.weight.shape[0]))
    y = torch.zeros(1, 3, 32, 32, dtype=torch.float64)
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    d = 3 * 32 * 32
    assert nll_loss(y, x, flow).item() == pytest.approx(0.5 * d * math.log(2 * math.pi), rel=1e-12)


def test_nll_deterministic():
    flow = random_flow(4)
    y, x = random_pair(2, 4)
    assert nll_loss(y, x, flow).item() == nll_loss(y, x, flow).item()


def test_nll_gradient_matches_finite_differences():
    flow = random_flow(5, torch.float64)
    y, x = random_pair(2, 5, torch.float64)
    pairs = fd_gradient_check(lambda: nll_loss(y, x, flow), flow.flow_parameters(), 24, seed=5)
    assert max(relative_errors(pairs)) < 1e-3


# -- training ----------------------------------------------------------------


def test_zero_iterations_returns_initialisation(toy_manifest):
    fresh = ConditionalFlow(FlowConfig(**SMALL_FLOW))
    trained, log = train_flow(toy_manifest, FlowTrainConfig(iterations=0, encoder_iterations=0),
                              FlowConfig(**SMALL_FLOW))
    for (k, a), (_, b) in zip(fresh.state_dict().items(), trained.state_dict().items()):
        assert torch.equal(a, b), k
    assert log["nll_per_dim"] == []


def test_training_deterministic(toy_manifest):
    cfg = FlowTrainConfig(iterations=5, encoder_iterations=3, batch_size=4, seed=3)
    a, _ = train_flow(toy_manifest, cfg, FlowConfig(**SMALL_FLOW))
    b, _ = train_flow(toy_manifest, cfg, FlowConfig(**SMALL_FLOW))
    for (k, p), (_, q) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(p, q), k


def test_nll_decreases(trained_small_flow):
    _, log = trained_small_flow
    nll = log["nll_per_dim"]
    assert len(nll) == 200
    assert np.mean(nll[-10:]) < np.mean(nll[:10])


def test_divergence_aborts(toy_manifest):
    flow = ConditionalFlow(FlowConfig(**SMALL_FLOW))
    with torch.no_grad():
        flow.levels[0][0].coupling.net[0].weight.fill_(float("nan"))
    with pytest.raises(FloatingPointError):
        train_flow(toy_manifest, FlowTrainConfig(iterations=3, encoder_iterations=0), flow=flow)


def test_empty_training_set():
    with pytest.raises(ValueError):
        train_flow((torch.empty(0, 3, 32, 32), torch.empty(0, 3, 8, 8)))


def test_train_log_written(toy_manifest, tmp_path):
    train_flow(toy_manifest, FlowTrainConfig(iterations=2, encoder_iterations=2, batch_size=2),
               FlowConfig(**SMALL_FLOW), log_path=tmp_path / "log.tsv")
    lines = (tmp_path / "log.tsv").read_text().splitlines()
    assert lines[0] == "phase\tstep\tloss" and len(lines) == 5


# -- sampling ------------------------------------------------------------------


@pytest.fixture(scope="module")
def lr_image(toy_manifest):
    _, lr = toy_manifest.load_pairs()
    return to_tensor(lr[0])


def test_zero_temperature_is_seed_independent(trained_small_flow, lr_image):
    flow, _ = trained_small_flow
    a = sample(lr_image, 0.0, 1, flow)
    b = sample(lr_image, 0.0, 99, flow)
    assert torch.equal(a, b)
    with torch.no_grad():
        center = inverse_flow(torch.zeros(48, 8, 8), lr_image, flow).clamp(0, 1)
    assert torch.equal(a, center)


def test_sample_deterministic(trained_small_flow, lr_image):
    flow, _ = trained_small_flow
    assert torch.equal(sample(lr_image, 0.9, 4, flow), sample(lr_image, 0.9, 4, flow))
    assert not torch.equal(sample(lr_image, 0.9, 4, flow), sample(lr_image, 0.9, 5, flow))


def test_negative_temperature_rejected(trained_small_flow, lr_image):
    with pytest.raises(ValueError):
        sample(lr_image, -0.1, 0, trained_small_flow[0])


def test_latent_noise_scaling():
    eps = latent_noise((10000,), 3, torch.float64)
    assert abs(eps.std().item() - 1.0) < 0.03


def _sample_variance(flow, lrs, tau, seeds=range(10)):
    return float(np.mean([sample_stack(x, tau, seeds, flow).samples.var(dim=0).mean().item()
                          for x in lrs]))


def test_temperature_variance_monotone(trained_small_flow, toy_manifest):
    flow, _ = trained_small_flow
    _, lr = toy_manifest.load_pairs()
    lrs = [to_tensor(l) for l in lr[:4]]
    v = [_sample_variance(flow, lrs, t) for t in (0.0, 0.1, 0.5, 0.9)]
    assert v[0] == 0.0
    assert v[1] < v[2] < v[3]


def test_stack_k1_equals_sample(trained_small_flow, lr_image):
    flow, _ = trained_small_flow
    st = sample_stack(lr_image, 0.9, [7], flow)
    assert torch.equal(st.samples[0], sample(lr_image, 0.9, 7, flow))


def test_stack_matches_individual_samples(trained_small_flow, lr_image):
    flow, _ = trained_small_flow
    st = sample_stack(lr_image, 0.9, [3, 1, 2], flow)
    for i, s in enumerate(st.seeds):
        assert torch.allclose(st.samples[i], sample(lr_image, 0.9, s, flow), atol=1e-6)


def test_stack_zero_temperature_identical(trained_small_flow, lr_image):
    st = sample_stack(lr_image, 0.0, range(5), trained_small_flow[0])
    assert all(torch.equal(st.samples[0], s) for s in st.samples)


def test_stack_25_distinct(trained_small_flow, lr_image):
    st = sample_stack(lr_image, 0.9, range(25), trained_small_flow[0])
    assert st.k == 25 and st.samples.shape == (25, 3, 32, 32)
    flat = st.samples.flatten(1)
    diffs = (flat[:, None] - flat[None]).abs().amax(-1)
    assert (diffs + torch.eye(25)).min() > 0


def test_duplicate_seeds_rejected(trained_small_flow, lr_image):
    with pytest.raises(ValueError):
        sample_stack(lr_image, 0.9, [1, 2, 1], trained_small_flow[0])
    with pytest.raises(ValueError):
        SampleStack(lr_image, torch.zeros(2, 3, 32, 32), [0, 0], 0.9)


def test_parse_seeds():
    assert parse_seeds("0..24") == list(range(25))
    assert parse_seeds("3,1,4") == [3, 1, 4]


# -- persistence ---------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(trained_small_flow, lr_image, tmp_path):
    flow, _ = trained_small_flow
    save_flow(tmp_path / "f.ckpt", flow)
    back = load_flow(tmp_path / "f.ckpt")
    for (k, a), (_, b) in zip(flow.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), k
    assert torch.equal(sample(lr_image, 0.9, 2, flow), sample(lr_image, 0.9, 2, back))


def test_checkpoint_kind_checked(tmp_path):
    from srfusion.fusion import FusionNet, load_fusion, save_fusion
    save_fusion(tmp_path / "n.ckpt", FusionNet())
    with pytest.raises(ValueError):
        load_flow(tmp_path / "n.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"")
    with pytest.raises(Exception):
        load_flow(tmp_path / "junk.ckpt")


def test_stack_dir_round_trip(trained_small_flow, lr_image, tmp_path):
    st = sample_stack(lr_image, 0.9, [5, 6, 7], trained_small_flow[0])
    save_stack(tmp_path / "s", st)
    back = load_stack(tmp_path / "s")
    assert back.seeds == [5, 6, 7] and back.temperature == 0.9
    assert (back.samples - st.samples).abs().max() <= 0.5 / 255 + 1e-6


@pytest.mark.parametrize("lo", [0.0, 0.25, 0.5])
def test_coupling_scale_bounds(lo):
    from srfusion.flow import CondAffineCoupling
    c = CondAffineCoupling(4, 2, 8, min_scale=lo).double()
    ha, cond = torch.rand(1, 2, 3, 3, dtype=torch.float64), torch.rand(1, 2, 3, 3, dtype=torch.float64)
    _, one = c._params(ha, cond)
    assert torch.equal(one, torch.ones_like(one))
    last = c.net[-1]
    for big, expected in ((-60.0, lo), (60.0, 2.0)):
        with torch.no_grad():
            last.bias.fill_(big)
        _, scale = c._params(ha, cond)
        assert torch.allclose(scale, torch.full_like(scale, expected), atol=1e-12)
    with pytest.raises(ValueError):
        CondAffineCoupling(4, 2, 8, min_scale=1.0)
