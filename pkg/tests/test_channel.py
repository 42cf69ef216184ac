import math
import warnings

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stsc.channel import (ChannelContractError, ChannelContractWarning, ChannelSpec, SymbolVector, empirical_snr_db,
                          equalize, make_rng, sample_fading, snr_to_noise_variance, stream_seed, transmit)

N_MC = 10**6


def unit_symbols(shape, seed=0, dtype=torch.complex128):
    s = torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)
    return s / s.abs().pow(2).mean().sqrt()


@pytest.mark.parametrize("snr,var", [(0, 1.0), (10, 0.1), (12, 10 ** -1.2)])
def test_noise_variance(snr, var):
    assert snr_to_noise_variance(snr) == pytest.approx(var, rel=1e-12)
    assert snr_to_noise_variance(12) == pytest.approx(0.0631, abs=1e-4)


def test_awgn_fading_is_one():
    h = sample_fading(ChannelSpec("awgn"), 7, make_rng(0))
    assert torch.equal(h, torch.ones(7, dtype=torch.complex64))


@pytest.mark.parametrize("kind", ["rayleigh", "rician"])
def test_fading_second_moment(kind):
    h = sample_fading(ChannelSpec(kind, rician_k=10), N_MC, make_rng(1), torch.complex128)
    assert float(h.abs().pow(2).mean()) == pytest.approx(1.0, rel=0.01)
    if kind == "rician":
        assert abs(complex(h.mean()) - math.sqrt(10 / 11)) < 0.01
    else:
        assert abs(complex(h.mean())) < 0.01


@pytest.mark.parametrize("kind", ["awgn", "rician", "rayleigh"])
@pytest.mark.parametrize("snr", [0, 6, 12, 18])
def test_empirical_snr_calibration(kind, snr):
    # 10^6 symbols spread over 10^5 fading blocks, so the fading average itself is tight
    s = unit_symbols((100_000, 10), seed=snr)
    y = transmit(s, ChannelSpec(kind, float(snr)), make_rng(10, kind, snr))
    # received signal power h*s against the noise; E|h|^2 = 1 so the target is the nominal SNR
    measured = empirical_snr_db(y.fading.reshape(-1, 1) * s, y.noise)
    assert abs(measured - snr) < 0.1
    assert abs(empirical_snr_db(s, y.noise) - snr) < 0.1


def test_block_fading_constant_per_item():
    s = unit_symbols((4, 16))
    y = transmit(s, ChannelSpec("rayleigh", 100.0), make_rng(3), noise_variance=0.0)
    ratio = y.symbols / s
    assert torch.allclose(ratio, ratio[:, :1].expand_as(ratio), atol=1e-12)


def test_noiseless_awgn_is_exact():
    s = unit_symbols((3, 8))
    assert torch.equal(transmit(s, ChannelSpec("awgn"), make_rng(0), noise_variance=0.0).symbols, s)


def test_noiseless_rayleigh_inverts_exactly():
    s = unit_symbols((5, 8))
    spec = ChannelSpec("rayleigh", 0.0)
    y = transmit(s, spec, make_rng(2), noise_variance=0.0)
    assert torch.allclose(y.symbols / y.fading.reshape(-1, 1), s, atol=1e-14)
    assert torch.allclose(equalize(y, spec).symbols, s, atol=1e-14)


def test_equalize_identity_cases():
    y = SymbolVector(unit_symbols((2, 4)), torch.ones(2, dtype=torch.complex128))
    assert equalize(y, ChannelSpec("awgn")) is y
    none = ChannelSpec("rayleigh", csi="none")
    z = transmit(unit_symbols((2, 4)), none, make_rng(1))
    assert torch.equal(equalize(z, none).symbols, z.symbols)


def test_equalize_guard():
    y = SymbolVector(unit_symbols((2, 4)), torch.tensor([1e-7, 1.0], dtype=torch.complex128))
    with pytest.raises(FloatingPointError):
        equalize(y, ChannelSpec("rayleigh"))


def test_deep_fades_resampled_under_perfect_csi():
    y = transmit(unit_symbols((20000, 2)), ChannelSpec("rayleigh"), make_rng(5))
    h = y.fading.abs()
    assert float(h.min()) >= 1e-3


def test_power_contract_warning_and_error():
    s = 2 * unit_symbols((2, 8))
    with pytest.warns(ChannelContractWarning):
        transmit(s, ChannelSpec(), make_rng(0))
    with pytest.raises(ChannelContractError):
        transmit(s, ChannelSpec(), make_rng(0), strict=True)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        transmit(unit_symbols((2, 8)), ChannelSpec(), make_rng(0))


def test_frozen_draw_replays():
    s = unit_symbols((3, 8))
    spec = ChannelSpec("rician", 3.0)
    first = transmit(s, spec, make_rng(9))
    again = transmit(s, spec, frozen=first)
    assert torch.equal(first.symbols, again.symbols)


def test_gradient_wrt_symbols_is_h():
    s = unit_symbols((2, 3)).requires_grad_(True)
    y = transmit(s, ChannelSpec("rayleigh", 5.0), make_rng(4))
    (g,) = torch.autograd.grad(y.symbols.real.sum(), s)
    # d Re(h s)/d s in the conjugate-gradient convention torch uses is conj(h)
    assert torch.allclose(g, y.fading.conj().reshape(-1, 1).expand_as(g).detach())


def test_determinism_and_stream_separation():
    s = unit_symbols((2, 8))
    spec = ChannelSpec("rician", 6.0)
    assert torch.equal(transmit(s, spec, make_rng(7, "a")).symbols, transmit(s, spec, make_rng(7, "a")).symbols)
    assert not torch.equal(transmit(s, spec, make_rng(7, "a")).symbols, transmit(s, spec, make_rng(7, "b")).symbols)


@given(st.integers(0, 2**62), st.text(max_size=8), st.integers(0, 100))
def test_stream_seed_range_and_stability(seed, label, worker):
    v = stream_seed(seed, label, worker)
    assert 0 <= v < 2**63
    assert v == stream_seed(seed, label, worker)


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(["awgn", "rician", "rayleigh"]), st.floats(-5, 30))
def test_transmit_shape_and_finiteness(kind, snr):
    y = transmit(unit_symbols((3, 10)), ChannelSpec(kind, snr), make_rng(1))
    assert y.symbols.shape == (3, 10) and torch.isfinite(torch.view_as_real(y.symbols)).all()


def test_spec_validation():
    with pytest.raises(ValueError):
        ChannelSpec("fancy")
    with pytest.raises(ValueError):
        ChannelSpec("rician", rician_k=0)
    with pytest.raises(ValueError):
        ChannelSpec(csi="partial")
    with pytest.raises(TypeError):
        transmit(torch.ones(2, 4), ChannelSpec(), make_rng(0))
