"""Location/timestamp sampling manifests and synthetic image time series."""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

START_DATE = dt.date(2017, 6, 30)
N_TIMESTAMPS = 10
STEP_MONTHS = 6
WINDOW_DAYS = 15


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class CityCenter:
    name: str
    lat: float
    lon: float

    def __post_init__(self) -> None:
        if not (-90.0 <= self.lat <= 90.0 and -180.0 <= self.lon <= 180.0):
            raise ValueError(f"city {self.name!r} has out-of-range coordinates ({self.lat}, {self.lon})")


@dataclass
class ManifestRecord:
    location_id: int
    lat: float
    lon: float
    city: str
    timestamps: list[str]
    window_days: int = WINDOW_DAYS


@dataclass
class SampleManifest:
    records: list[ManifestRecord] = field(default_factory=list)


def load_cities(path: str | Path) -> list[CityCenter]:
    """Read a CSV with ``name,lat,lon`` columns."""
    with open(path, newline="", encoding="utf-8") as fh:
        return [CityCenter(r["name"], float(r["lat"]), float(r["lon"])) for r in csv.DictReader(fh)]


# --------------------------------------------------------------------------
# geography
# --------------------------------------------------------------------------

def meters_per_degree(lat_deg: float) -> tuple[float, float]:
    """(meters per degree latitude, meters per degree longitude) at a latitude."""
    phi = math.radians(lat_deg)
    m_lat = 111132.92 - 559.82 * math.cos(2 * phi) + 1.175 * math.cos(4 * phi) - 0.0023 * math.cos(6 * phi)
    m_lon = 111412.84 * math.cos(phi) - 93.5 * math.cos(3 * phi) + 0.118 * math.cos(5 * phi)
    return m_lat, m_lon


def _record_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def sample_location(cities: list[CityCenter], sigma_km: float, rng: np.random.Generator):
    city = cities[int(rng.integers(len(cities)))]
    north_km, east_km = rng.normal(0.0, 1.0, 2) * sigma_km
    m_lat, m_lon = meters_per_degree(city.lat)
    lat = city.lat + north_km * 1000.0 / m_lat
    lon = city.lon + east_km * 1000.0 / max(m_lon, 1e-9)
    lat = min(90.0, max(-90.0, lat))
    lon = (lon + 180.0) % 360.0 - 180.0
    return lat, lon, city.name


def sample_locations(cities: list[CityCenter], n: int, sigma_km: float = 50.0, seed: int = 0):
    """``n`` locations: a uniformly chosen city plus an isotropic Gaussian offset.

    The offset has per-axis standard deviation ``sigma_km`` in a local tangent
    plane and is converted to degrees at the city's latitude. Record ``i``
    draws from its own generator seeded by ``(seed, i)``.
    """
    if not cities:
        raise ValueError("empty city list")
    if n < 1:
        raise ValueError("n must be >= 1")
    return [sample_location(cities, sigma_km, _record_rng(seed, i)) for i in range(n)]


# --------------------------------------------------------------------------
# time
# --------------------------------------------------------------------------

def add_months(d: dt.date, months: int) -> dt.date:
    y, m = divmod(d.month - 1 + months, 12)
    year, month = d.year + y, m + 1
    last = (dt.date(year + month // 12, month % 12 + 1, 1) - dt.timedelta(days=1)).day
    return dt.date(year, month, min(d.day, last))


def base_timestamp_grid() -> list[dt.date]:
    return [add_months(START_DATE, STEP_MONTHS * i) for i in range(N_TIMESTAMPS)]


def sample_timestamp_grid(seed: int = 0, jitter: int = 0) -> list[dt.date]:
    """Ten dates at six-month steps from 2017-06-30, shifted by one shared offset."""
    if jitter < 0:
        raise ValueError("jitter must be >= 0 days")
    offset = int(np.random.default_rng(seed).integers(-jitter, jitter + 1)) if jitter else 0
    return [d + dt.timedelta(days=offset) for d in base_timestamp_grid()]


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------

def build_manifest(
    cities: list[CityCenter], n: int, sigma_km: float = 50.0, seed: int = 0, jitter: int = 0
) -> SampleManifest:
    records = []
    for i in range(n):
        rng = _record_rng(seed, i)
        lat, lon, city = sample_location(cities, sigma_km, rng)
        offset = int(rng.integers(-jitter, jitter + 1)) if jitter else 0
        stamps = [(d + dt.timedelta(days=offset)).isoformat() for d in base_timestamp_grid()]
        records.append(ManifestRecord(i, lat, lon, city, stamps))
    return SampleManifest(records)


def manifest_to_json(manifest: SampleManifest) -> str:
    return json.dumps({"records": [asdict(r) for r in manifest.records]}, indent=2, ensure_ascii=False)


def validate_record(raw: dict, position: int) -> ManifestRecord:
    ident = raw.get("location_id", f"#{position}")
    missing = {"location_id", "lat", "lon", "city", "timestamps", "window_days"} - set(raw)
    if missing:
        raise ManifestError(f"record {ident}: missing fields {sorted(missing)}")
    stamps = raw["timestamps"]
    if not isinstance(stamps, list) or len(stamps) != N_TIMESTAMPS:
        raise ManifestError(f"record {ident}: expected {N_TIMESTAMPS} timestamps, got "
                            f"{len(stamps) if isinstance(stamps, list) else type(stamps).__name__}")
    try:
        dates = [dt.date.fromisoformat(s) for s in stamps]
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"record {ident}: bad timestamp ({exc})") from None
    if any(b <= a for a, b in zip(dates, dates[1:])):
        raise ManifestError(f"record {ident}: timestamps not strictly increasing")
    if not (-90 <= raw["lat"] <= 90 and -180 <= raw["lon"] <= 180):
        raise ManifestError(f"record {ident}: coordinates out of range")
    return ManifestRecord(int(raw["location_id"]), float(raw["lat"]), float(raw["lon"]), str(raw["city"]),
                          list(stamps), int(raw["window_days"]))


def manifest_from_json(text: str) -> SampleManifest:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("records"), list):
        raise ManifestError("manifest must be an object with a 'records' array")
    return SampleManifest([validate_record(r, i) for i, r in enumerate(doc["records"])])


def write_manifest(manifest: SampleManifest, path: str | Path) -> None:
    Path(path).write_text(manifest_to_json(manifest) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> SampleManifest:
    return manifest_from_json(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# synthetic SITS
# --------------------------------------------------------------------------

@dataclass
class SyntheticSITS:
    data: np.ndarray  # (T, C, H, W)
    seed: int
    season_amp: float
    change_step: int | None
    noise_sigma: float
    change_amp: float = 0.0
    change_region: tuple[int, int, int, int] | None = None  # (row0, row1, col0, col1)


def _smooth_field(rng: np.random.Generator, C: int, H: int, W: int, n_waves: int = 4) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(H) / H, np.arange(W) / W, indexing="ij")
    field_ = np.zeros((C, H, W))
    for c in range(C):
        for _ in range(n_waves):
            fy, fx = rng.integers(1, 4, 2)
            phase = rng.uniform(0, 2 * np.pi)
            field_[c] += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    field_ /= n_waves
    return 0.5 + 0.35 * field_


def generate_synthetic_sits(
    T: int,
    C: int,
    H: int,
    W: int,
    seed: int = 0,
    season_amp: float = 0.1,
    change_step: int | None = None,
    change_amp: float = 0.2,
    noise_sigma: float = 0.01,
) -> SyntheticSITS:
    """Smooth base scene + per-channel seasonal cycle (period 2 steps) +
    optional abrupt change in one rectangle from ``change_step`` on + noise,
    clipped to [0, 1]."""
    if min(T, C, H, W) < 1:
        raise ValueError("all dimensions must be positive")
    rng = np.random.default_rng(seed)
    base = _smooth_field(rng, C, H, W)
    phase = rng.uniform(0, 2 * np.pi, C)
    t = np.arange(T)
    season = season_amp * np.sin(np.pi * t[:, None] + phase[None, :])  # (T, C)
    data = base[None] + season[:, :, None, None]
    region = None
    if change_step is not None:
        r0, c0 = int(rng.integers(0, H // 2)), int(rng.integers(0, W // 2))
        region = (r0, r0 + H // 2, c0, c0 + W // 2)
        data[change_step:, :, region[0] : region[1], region[2] : region[3]] += change_amp
    if noise_sigma > 0:
        data = data + rng.normal(0.0, noise_sigma, data.shape)
    data = np.clip(data, 0.0, 1.0)
    return SyntheticSITS(data, seed, season_amp, change_step, noise_sigma, change_amp, region)


TSIT_MAGIC = b"TSIT"
TSIT_VERSION = 1
_TSIT_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}


def write_tensor(path: str | Path, a: np.ndarray) -> None:
    """Binary tensor: ``TSIT``, u32 version, u32 dtype (0=f32, 1=f64), u32 rank,
    u32 extents, then the little-endian row-major payload."""
    a = np.asarray(a)
    dt_ = np.dtype(a.dtype).newbyteorder("<")
    if dt_ not in _TSIT_CODES:
        raise TypeError(f"unsupported dtype {a.dtype}")
    head = TSIT_MAGIC + struct.pack(f"<III{a.ndim}I", TSIT_VERSION, _TSIT_CODES[dt_], a.ndim, *a.shape)
    Path(path).write_bytes(head + np.ascontiguousarray(a, dtype=dt_).tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != TSIT_MAGIC:
        raise ValueError(f"{path}: bad magic")
    version, code, rank = struct.unpack_from("<III", buf, 4)
    if version != TSIT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    shape = struct.unpack_from(f"<{rank}I", buf, 16)
    dt_ = {v: k for k, v in _TSIT_CODES.items()}[code]
    count = math.prod(shape)
    payload = 16 + 4 * rank
    if len(buf) != payload + count * dt_.itemsize:
        raise ValueError(f"{path}: payload size mismatch")
    return np.frombuffer(buf, dtype=dt_, count=count, offset=payload).reshape(shape).copy()
