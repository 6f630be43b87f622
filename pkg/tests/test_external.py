import os

import numpy as np
import pytest

from conftest import SRC
from optiacoustic.errors import ProviderError, ProviderTimeout
from optiacoustic.external import CachedProvider, ExternalProvider, RecordingProvider, echo_command


@pytest.fixture
def env():
    return {**os.environ, "PYTHONPATH": str(SRC)}


@pytest.fixture
def recorded(tmp_path, oracle, make_frame):
    """A cache directory holding the predictions for one tracked pair."""
    cache = tmp_path / "cache"
    f0, f1 = make_frame(0), make_frame(1, eye=(0.03, -0.7, 0.6))
    recorder = RecordingProvider(oracle, cache)
    expected = {(0, 0): recorder.predict_pair(f0, f0), (1, 0): recorder.predict_pair(f1, f0)}
    return cache, (f0, f1), expected


def test_recording_provider_writes_cache_files(recorded):
    cache, _, _ = recorded
    assert sorted(p.name for p in cache.iterdir()) == ["0_0.oapm", "1_0.oapm"]


def test_cached_provider_serves_recorded_predictions(recorded):
    cache, (f0, f1), expected = recorded
    pred = CachedProvider(cache).predict_pair(f1, f0)
    np.testing.assert_allclose(pred.X_ii, expected[(1, 0)].X_ii, rtol=1e-6)
    with pytest.raises(ProviderError):
        CachedProvider(cache).predict_pair(f0, f1)


def test_echo_subprocess_round_trip(recorded, env, tmp_path):
    cache, (f0, f1), expected = recorded
    with ExternalProvider(echo_command(cache), timeout=30.0, workdir=tmp_path, env=env) as provider:
        a = provider.predict_pair(f0, f0)
        b = provider.predict_pair(f1, f0)
        with pytest.raises(ProviderError):
            provider.predict_pair(f0, f1)
    np.testing.assert_allclose(a.C_i, expected[(0, 0)].C_i, rtol=1e-6)
    np.testing.assert_allclose(b.X_ij, expected[(1, 0)].X_ij, rtol=1e-6)
    assert (tmp_path / "frame_000001.png").exists()


def test_slow_provider_times_out_and_restarts(recorded, env):
    cache, (f0, _), _ = recorded
    provider = ExternalProvider(echo_command(cache, delay=5.0), timeout=0.5, env=env)
    try:
        with pytest.raises(ProviderTimeout):
            provider.predict_pair(f0, f0)
        assert provider._proc is None
    finally:
        provider.close()


def test_missing_provider_executable_raises(make_frame, tmp_path):
    provider = ExternalProvider([str(tmp_path / "no-such-provider")], timeout=1.0)
    f0 = make_frame(0)
    with pytest.raises(ProviderError, match="cannot start"):
        provider.predict_pair(f0, f0)
    provider.close()
