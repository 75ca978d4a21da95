import datetime as dt
import json

import numpy as np
import pytest

from timo.sampler import (
    CityCenter,
    ManifestError,
    SampleManifest,
    build_manifest,
    generate_synthetic_sits,
    load_cities,
    manifest_from_json,
    manifest_to_json,
    meters_per_degree,
    read_manifest,
    read_tensor,
    sample_locations,
    sample_timestamp_grid,
    write_manifest,
    write_tensor,
)

WUHAN = CityCenter("Wuhan", 30.5928, 114.3055)


def _offsets_km(locs, city):
    m_lat, m_lon = meters_per_degree(city.lat)
    lat = np.array([a for a, _, _ in locs])
    lon = np.array([b for _, b, _ in locs])
    return (lat - city.lat) * m_lat / 1000, (lon - city.lon) * m_lon / 1000


def test_meters_per_degree_reference_values():
    m_lat, m_lon = meters_per_degree(0.0)
    assert m_lat == pytest.approx(110574.3, abs=1.0)
    assert m_lon == pytest.approx(111319.5, abs=1.0)
    assert meters_per_degree(60.0)[1] == pytest.approx(55799.98, abs=1.0)


def test_zero_sigma_hits_city_centre():
    locs = sample_locations([WUHAN], 20, sigma_km=0.0, seed=3)
    assert all((lat, lon, name) == (WUHAN.lat, WUHAN.lon, "Wuhan") for lat, lon, name in locs)


def test_gaussian_offsets_match_sigma():
    locs = sample_locations([WUHAN], 10_000, sigma_km=50.0, seed=0)
    north, east = _offsets_km(locs, WUHAN)
    for s in (north.std(ddof=1), east.std(ddof=1)):
        assert abs(s / 50.0 - 1) <= 0.03
    assert abs(north.std() / east.std() - 1) <= 0.05
    assert abs(north.mean()) < 2.0 and abs(east.mean()) < 2.0


def test_sampling_is_deterministic():
    assert sample_locations([WUHAN], 5, seed=9) == sample_locations([WUHAN], 5, seed=9)
    assert sample_locations([WUHAN], 5, seed=9) != sample_locations([WUHAN], 5, seed=10)


def test_city_validation(tmp_path):
    with pytest.raises(ValueError):
        CityCenter("nowhere", 95.0, 0.0)
    with pytest.raises(ValueError):
        sample_locations([], 3)
    path = tmp_path / "c.csv"
    path.write_text("name,lat,lon\nParis,48.85,2.35\nLima,-12.05,-77.04\n", encoding="utf-8")
    assert [c.name for c in load_cities(path)] == ["Paris", "Lima"]


def test_timestamp_grid_default():
    grid = sample_timestamp_grid()
    want = ["2017-06-30", "2017-12-30", "2018-06-30", "2018-12-30", "2019-06-30",
            "2019-12-30", "2020-06-30", "2020-12-30", "2021-06-30", "2021-12-30"]
    assert [d.isoformat() for d in grid] == want


@pytest.mark.parametrize("seed", range(20))
def test_timestamp_grid_gaps(seed):
    grid = sample_timestamp_grid(seed, jitter=7)
    gaps = [(b - a).days for a, b in zip(grid, grid[1:])]
    assert len(grid) == 10 and all(181 <= g <= 184 for g in gaps)


def test_timestamp_jitter_bounds():
    base = sample_timestamp_grid()
    for s in range(30):
        off = (sample_timestamp_grid(s, jitter=5)[0] - base[0]).days
        assert -5 <= off <= 5
    with pytest.raises(ValueError):
        sample_timestamp_grid(0, jitter=-1)


def test_manifest_round_trip(tmp_path):
    m = build_manifest([WUHAN, CityCenter("Paris", 48.8566, 2.3522)], 25, seed=4, jitter=3)
    path = tmp_path / "m.json"
    write_manifest(m, path)
    raw = path.read_bytes()
    back = read_manifest(path)
    assert back == m
    write_manifest(back, path)
    assert path.read_bytes() == raw


def test_empty_manifest(tmp_path):
    write_manifest(SampleManifest(), tmp_path / "e.json")
    assert read_manifest(tmp_path / "e.json").records == []


def test_manifest_missing_timestamp_names_record():
    doc = json.loads(manifest_to_json(build_manifest([WUHAN], 3, seed=1)))
    doc["records"][1]["timestamps"].pop()
    with pytest.raises(ManifestError, match="record 1"):
        manifest_from_json(json.dumps(doc))


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda r: r.pop("lat"), "missing"),
        (lambda r: r["timestamps"].reverse(), "increasing"),
        (lambda r: r.update(lat=120.0), "range"),
        (lambda r: r["timestamps"].__setitem__(0, "2017-13-01"), "bad timestamp"),
    ],
)
def test_manifest_schema_errors(mutate, message):
    doc = json.loads(manifest_to_json(build_manifest([WUHAN], 1)))
    mutate(doc["records"][0])
    with pytest.raises(ManifestError, match=message):
        manifest_from_json(json.dumps(doc))


def test_manifest_not_json():
    with pytest.raises(ManifestError):
        manifest_from_json("{")


# ---------------------------------------------------------------- synthetic SITS

def test_static_scene_frames_identical():
    d = generate_synthetic_sits(4, 3, 16, 16, seed=1, season_amp=0.0, noise_sigma=0.0).data
    assert all(np.array_equal(d[0], d[t]) for t in range(4))


def test_change_region_shift():
    s = generate_synthetic_sits(6, 2, 32, 32, seed=2, season_amp=0.0, noise_sigma=0.0, change_step=3,
                                change_amp=0.1)
    r0, r1, c0, c1 = s.change_region
    base = generate_synthetic_sits(6, 2, 32, 32, seed=2, season_amp=0.0, noise_sigma=0.0).data
    np.testing.assert_array_equal(s.data[:3], base[:3])
    diff = s.data[3:, :, r0:r1, c0:c1] - base[3:, :, r0:r1, c0:c1]
    inside = base[3:, :, r0:r1, c0:c1] + 0.1 <= 1.0
    np.testing.assert_allclose(diff[inside], 0.1, atol=1e-12)


def test_synthetic_deterministic_and_bounded():
    a = generate_synthetic_sits(3, 4, 32, 32, seed=5).data
    b = generate_synthetic_sits(3, 4, 32, 32, seed=5).data
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0 and a.max() <= 1 and np.all(np.isfinite(a))
    with pytest.raises(ValueError):
        generate_synthetic_sits(0, 1, 8, 8)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_tensor_file_round_trip(tmp_path, dtype):
    a = generate_synthetic_sits(2, 3, 8, 8, seed=1).data.astype(dtype)
    write_tensor(tmp_path / "t.bin", a)
    raw = (tmp_path / "t.bin").read_bytes()
    assert raw[:4] == b"TSIT" and int.from_bytes(raw[8:12], "little") == (0 if dtype == np.float32 else 1)
    b = read_tensor(tmp_path / "t.bin")
    assert b.dtype == a.dtype and b.tobytes() == a.tobytes()


def test_tensor_file_truncated(tmp_path):
    write_tensor(tmp_path / "t.bin", np.ones((2, 2)))
    (tmp_path / "t.bin").write_bytes((tmp_path / "t.bin").read_bytes()[:-1])
    with pytest.raises(ValueError):
        read_tensor(tmp_path / "t.bin")


def test_dates_are_dates():
    assert all(isinstance(d, dt.date) for d in sample_timestamp_grid())
