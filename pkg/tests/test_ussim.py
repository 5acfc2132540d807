import numpy as np
import pytest
from dataclasses import replace

from savfi.beamform import analytic_signal
from savfi.flowfield import Region, StraightVessel
from savfi.phantom import ScattererCloud
from savfi.ussim import (
    ProbeConfig,
    impulse_response,
    raw_excitation,
    simulate_event,
    simulate_sequence,
    two_way_pulse,
)

P = ProbeConfig()


def _spectrum(sig, fs, n=8192):
    return np.fft.rfftfreq(n, 1 / fs), np.abs(np.fft.rfft(sig, n))


def test_raw_segment_length_and_taper_ends():
    raw = raw_excitation(P)
    assert len(raw) == 15
    assert raw[0] == 0.0
    assert raw[-1] == pytest.approx(0.0, abs=1e-15)


def test_single_stage_bandwidth():
    f, s = _spectrum(impulse_response(P), P.fs)
    band = f[s >= s.max() / 2]
    assert abs(band.max() - band.min() - 0.6 * P.f0) < 0.15 * 0.6 * P.f0


def test_two_way_pulse_peak_and_norm():
    pulse, center = two_way_pulse(P)
    assert np.abs(pulse).max() == pytest.approx(1.0)
    f, s = _spectrum(pulse, P.fs)
    assert abs(f[s.argmax()] - P.f0) <= f[1]
    env = np.abs(analytic_signal(np.pad(pulse, 64), axis=0))
    assert abs(env.argmax() - 64 - center) <= 1


def test_bad_probe():
    with pytest.raises(ValueError):
        ProbeConfig(fs=10e6)
    with pytest.raises(ValueError):
        ProbeConfig(source_depth=1e-3)


def _cloud(points, amps, region=Region(-2e-3, 2e-3, 0.018, 0.022)):
    return ScattererCloud(np.array(points, float), np.array(amps, float), region)


def test_zero_amplitude_gives_zero_rf():
    rf = simulate_event(_cloud([[0, 0.02], [1e-3, 0.021]], [0, 0]), P, 0)
    assert not rf.any()


def test_time_of_flight_on_axis():
    probe = replace(P, n_elements=129)  # element 64 sits at x = 0
    cloud = _cloud([[0.0, 0.02]], [1.0])
    t0, n = 20e-6, 400
    rf = simulate_event(cloud, probe, 2, t0, n)  # source 2 sits at (0, -10 mm)
    tau = (0.03 - 0.01 + 0.02) / 1540.0
    assert tau == pytest.approx(25.97e-6, abs=5e-9)
    env = np.abs(analytic_signal(rf[64], axis=0))
    t_peak = t0 + env.argmax() / probe.fs
    assert abs(t_peak - tau) <= 1 / probe.fs


def test_linear_in_amplitude():
    pts = [[0.0, 0.02], [5e-4, 0.0205]]
    a = simulate_event(_cloud(pts, [1.0, 0.5]), P, 1)
    b = simulate_event(_cloud(pts, [2.0, 0.5]), P, 1)
    only = simulate_event(_cloud(pts, [1.0, 0.0]), P, 1)
    np.testing.assert_allclose(b - a, only, atol=1e-12)


def test_scatterer_behind_array_rejected():
    with pytest.raises(ValueError):
        simulate_event(_cloud([[0.0, -1e-3]], [1.0], Region(-1e-3, 1e-3, -2e-3, 1e-3)), P, 0)


def test_noise_needs_generator():
    with pytest.raises(ValueError):
        simulate_event(_cloud([[0.0, 0.02]], [1.0]), replace(P, snr_db=20.0), 0)


def test_one_frame_is_five_events():
    s = StraightVessel(peak_velocity=0.0)
    data = simulate_sequence(s, _cloud([[0, 0.02]], [1.0], s.region), P, 1)
    assert data.n_events == 5
    np.testing.assert_array_equal(data.sources, np.arange(5))


def test_static_scene_repeats_per_source():
    s = StraightVessel(peak_velocity=0.0)
    cloud = _cloud([[0, 0.02], [1e-3, 0.019]], [1.0, -0.7], s.region)
    data = simulate_sequence(s, cloud, P, 2)
    for k in range(5):
        np.testing.assert_array_equal(data.samples[k], data.samples[k + 5])


def test_lateral_shift_between_same_source_events():
    s = StraightVessel(peak_velocity=0.01, radius=0.05, center=(0.0, 0.02),
                       region=Region(-5e-3, 5e-3, 0.015, 0.025))
    cloud = _cloud([[0.0, 0.02]], [1.0], s.region)
    _, end = simulate_sequence(s, cloud, P, 1, return_cloud=True)
    # 5 advection steps of 1/prf each: 10 mm/s over 1 ms
    np.testing.assert_allclose(end.positions[0] - cloud.positions[0], [1e-5, 0.0], atol=1e-12)
