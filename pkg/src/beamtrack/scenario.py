"""Synthetic uplink scenarios: drifting multipath users seen through a DFT beamspace.

Each user carries a handful of paths clustered inside a narrow angular spread.
Path angles random-walk by a bounded step per time slot and complex gains follow
a stationary AR(1). The beamspace truth is the unitary projection of the exact
array response onto the grid, so supports are identical across subcarriers by
construction; subcarriers differ through measurement noise only.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import yaml

from .dictionary import OffGridDictionary, dft_matrix, stacked_dictionary, steering_exact

__all__ = [
    "GAIN_AR_COEFF",
    "SUPPORT_ENERGY_FRACTION",
    "ScenarioConfig",
    "ChannelTruth",
    "MeasurementBatch",
    "generate_pilots",
    "generate_channel",
    "synthesize_measurement",
    "support_set",
    "theta_from_aoa_deg",
    "export_truth",
    "load_truth",
    "save_scenario_config",
]

# gain random walk keeps its stationary variance; support threshold is relative
GAIN_AR_COEFF = 0.999
SUPPORT_ENERGY_FRACTION = 0.01
_AOA_CLIP_DEG = 89.0


def theta_from_aoa_deg(phi_deg):
    """Grid-domain angle of a physical arrival angle for half-wavelength spacing."""
    return np.mod(np.pi * np.sin(np.radians(phi_deg)), 2.0 * np.pi)


@dataclass(frozen=True)
class ScenarioConfig:
    n_bs: int
    m_users: int
    pilot_len: int
    n_subcarriers: int
    snr_db: float
    aoa_range_deg: tuple
    angular_spread_deg: float
    paths_per_user: int
    drift_deg_per_step: float
    t_steps: int
    env_change_at: int | None
    rng_seed: int

    def __post_init__(self):
        set_ = object.__setattr__
        for name in ("n_bs", "m_users", "pilot_len", "n_subcarriers", "paths_per_user", "t_steps", "rng_seed"):
            set_(self, name, int(getattr(self, name)))
        for name in ("snr_db", "angular_spread_deg", "drift_deg_per_step"):
            set_(self, name, float(getattr(self, name)))
        set_(self, "aoa_range_deg", tuple(float(v) for v in self.aoa_range_deg))
        if self.env_change_at is not None:
            set_(self, "env_change_at", int(self.env_change_at))

        def fail(field, why):
            raise ValueError(f"{field}: {why}")

        if self.n_bs < 1:
            fail("n_bs", f"must be >= 1, got {self.n_bs}")
        if self.m_users < 1:
            fail("m_users", f"must be >= 1, got {self.m_users}")
        if self.pilot_len < self.m_users:
            fail("pilot_len", f"needs pilot_len >= m_users for orthogonal pilots, got {self.pilot_len} < {self.m_users}")
        if self.n_subcarriers < 1:
            fail("n_subcarriers", f"must be >= 1, got {self.n_subcarriers}")
        if not math.isfinite(self.snr_db):
            fail("snr_db", f"must be finite, got {self.snr_db}")
        lo, hi = self.aoa_range_deg
        if not (-90.0 <= lo <= hi <= 90.0):
            fail("aoa_range_deg", f"must satisfy -90 <= lo <= hi <= 90, got {self.aoa_range_deg}")
        if self.angular_spread_deg < 0:
            fail("angular_spread_deg", f"must be >= 0, got {self.angular_spread_deg}")
        if self.paths_per_user < 1:
            fail("paths_per_user", f"must be >= 1, got {self.paths_per_user}")
        if self.drift_deg_per_step < 0:
            fail("drift_deg_per_step", f"must be >= 0, got {self.drift_deg_per_step}")
        if self.t_steps < 1:
            fail("t_steps", f"must be >= 1, got {self.t_steps}")
        if self.env_change_at is not None and self.env_change_at < 1:
            fail("env_change_at", f"must be >= 1 when set, got {self.env_change_at}")
        if self.rng_seed < 0:
            fail("rng_seed", f"must be >= 0, got {self.rng_seed}")


@dataclass
class ChannelTruth:
    """Ground-truth trajectory. h has shape (n_steps, n_subcarriers, m_users * n_bs)."""

    config: ScenarioConfig | None
    path_angles_deg: np.ndarray | None  # (n_steps, m_users, paths)
    path_gains: np.ndarray | None  # (n_steps, m_users, paths)
    h: np.ndarray
    antenna: np.ndarray | None  # (n_steps, m_users, n_bs) exact array response
    supports: tuple  # per-step index arrays of beams above the energy threshold

    @property
    def n_steps(self) -> int:
        return self.h.shape[0]


@dataclass
class MeasurementBatch:
    """Received pilot blocks for one time slot: y[n] = stacked_dictionary(n) @ h[n] + noise."""

    y: np.ndarray  # (n_subcarriers, n_bs * pilot_len)
    alpha0_true: float
    t: int = 0


def support_set(h_flat: np.ndarray) -> np.ndarray:
    """Indices of beams holding more than the threshold fraction of the peak energy."""
    energy = np.abs(h_flat) ** 2
    return np.flatnonzero(energy > SUPPORT_ENERGY_FRACTION * energy.max())


def generate_pilots(m_users: int, pilot_len: int, power: np.ndarray) -> np.ndarray:
    """Mutually orthogonal pilots: scaled rows of the unitary DFT of size pilot_len.

    Row m has squared norm power[m]; the cross-gram is exactly diagonal.
    """
    power = np.atleast_1d(np.asarray(power, dtype=float))
    if pilot_len < m_users:
        raise ValueError(f"pilot_len {pilot_len} < m_users {m_users}: orthogonal pilots impossible")
    if power.shape != (m_users,):
        raise ValueError(f"power has shape {power.shape}, expected ({m_users},)")
    if np.any(power <= 0):
        raise ValueError(f"pilot powers must be positive, got {power}")
    l = np.arange(pilot_len)
    rows = np.exp(-2j * np.pi * np.outer(np.arange(m_users), l) / pilot_len) / np.sqrt(pilot_len)
    return rows * np.sqrt(power)[:, None]


def _draw_paths(rng, cfg):
    centers = rng.uniform(cfg.aoa_range_deg[0], cfg.aoa_range_deg[1], size=cfg.m_users)
    offsets = rng.uniform(
        -cfg.angular_spread_deg / 2, cfg.angular_spread_deg / 2, size=(cfg.m_users, cfg.paths_per_user)
    )
    angles = np.clip(centers[:, None] + offsets, -_AOA_CLIP_DEG, _AOA_CLIP_DEG)
    scale = math.sqrt(1.0 / (2.0 * cfg.paths_per_user))
    gains = scale * (
        rng.standard_normal(angles.shape) + 1j * rng.standard_normal(angles.shape)
    )
    return angles, gains


def generate_channel(cfg: ScenarioConfig) -> ChannelTruth:
    """Draw a full trajectory of drifting paths and its beamspace projection.

    Simulates time slots 0..t_steps inclusive; if env_change_at lies beyond
    t_steps the trajectory is extended through that slot. At env_change_at all
    path angles and gains are redrawn fresh.
    """
    rng = np.random.default_rng(cfg.rng_seed)
    last = cfg.t_steps if cfg.env_change_at is None else max(cfg.t_steps, cfg.env_change_at)
    n_steps = last + 1
    m, p, n_bs = cfg.m_users, cfg.paths_per_user, cfg.n_bs

    angles = np.empty((n_steps, m, p))
    gains = np.empty((n_steps, m, p), dtype=complex)
    angles[0], gains[0] = _draw_paths(rng, cfg)
    innov = math.sqrt((1.0 - GAIN_AR_COEFF**2) / (2.0 * cfg.paths_per_user))
    for t in range(1, n_steps):
        if cfg.env_change_at is not None and t == cfg.env_change_at:
            angles[t], gains[t] = _draw_paths(rng, cfg)
            continue
        step = rng.uniform(-cfg.drift_deg_per_step, cfg.drift_deg_per_step, size=(m, p))
        angles[t] = np.clip(angles[t - 1] + step, -_AOA_CLIP_DEG, _AOA_CLIP_DEG)
        gains[t] = GAIN_AR_COEFF * gains[t - 1] + innov * (
            rng.standard_normal((m, p)) + 1j * rng.standard_normal((m, p))
        )

    f = dft_matrix(n_bs)
    antenna = np.zeros((n_steps, m, n_bs), dtype=complex)
    h = np.empty((n_steps, cfg.n_subcarriers, m * n_bs), dtype=complex)
    supports = []
    for t in range(n_steps):
        for mi in range(m):
            for pi in range(p):
                theta = theta_from_aoa_deg(angles[t, mi, pi])
                antenna[t, mi] += gains[t, mi, pi] * steering_exact(n_bs, theta)
        h_flat = (f.conj().T @ antenna[t].T).T.reshape(m * n_bs)
        h[t] = np.broadcast_to(h_flat, (cfg.n_subcarriers, m * n_bs))
        supports.append(support_set(h_flat))
    return ChannelTruth(cfg, angles, gains, h, antenna, tuple(supports))


def synthesize_measurement(
    truth: ChannelTruth,
    dictionary: OffGridDictionary,
    snr_db: float,
    rng: np.random.Generator,
    noise_var: float | None = None,
) -> list[MeasurementBatch]:
    """Noisy pilot measurements for every time slot of a truth trajectory.

    One noise variance serves the whole run: the mean received energy per
    complex sample (over all slots and subcarriers) divided by the linear SNR.
    Pass snr_db = inf for noiseless output, or noise_var to pin the noise floor
    directly (required when the truth is identically zero).
    """
    n_steps, n_sub, _ = truth.h.shape
    clean = np.empty((n_steps, n_sub, dictionary.n_bs * dictionary.pilot_len), dtype=complex)
    if dictionary.shared_pilots:
        ups = stacked_dictionary(dictionary, 0)
        for t in range(n_steps):
            for n in range(n_sub):
                clean[t, n] = ups @ truth.h[t, n]
    else:
        ups_all = [stacked_dictionary(dictionary, n) for n in range(n_sub)]
        for t in range(n_steps):
            for n in range(n_sub):
                clean[t, n] = ups_all[n] @ truth.h[t, n]

    if noise_var is None:
        if snr_db == float("inf"):
            noise_var = 0.0
        elif not math.isfinite(snr_db):
            raise ValueError(f"snr_db must be finite or +inf, got {snr_db}")
        else:
            signal_power = float(np.mean(np.abs(clean) ** 2))
            if signal_power == 0.0:
                raise ValueError("truth is identically zero; pass noise_var explicitly")
            noise_var = signal_power / 10.0 ** (snr_db / 10.0)
    elif noise_var < 0:
        raise ValueError(f"noise_var must be >= 0, got {noise_var}")

    alpha0_true = float("inf") if noise_var == 0.0 else 1.0 / noise_var
    batches = []
    for t in range(n_steps):
        y = clean[t]
        if noise_var > 0.0:
            scale = math.sqrt(noise_var / 2.0)
            y = y + scale * (
                rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape)
            )
        batches.append(MeasurementBatch(y=y, alpha0_true=alpha0_true, t=t))
    return batches


# ------------------------------------------------------------- persistence

def _scenario_to_dict(cfg: ScenarioConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["aoa_range_deg"] = list(cfg.aoa_range_deg)
    return out


def _scenario_from_dict(data: dict) -> ScenarioConfig:
    return ScenarioConfig(**data)


def save_scenario_config(cfg: ScenarioConfig, path) -> None:
    """Write the scenario as a config file the CLI can consume directly."""
    with open(path, "w") as fh:
        yaml.safe_dump({"scenario": _scenario_to_dict(cfg)}, fh, sort_keys=False)


def export_truth(truth: ChannelTruth, path) -> None:
    """Binary audit dump of a generated trajectory (config embedded as text)."""
    if truth.config is None or truth.path_angles_deg is None:
        raise ValueError("only fully generated truths can be exported")
    np.savez(
        path,
        h=truth.h,
        path_angles_deg=truth.path_angles_deg,
        path_gains=truth.path_gains,
        antenna=truth.antenna,
        config_yaml=np.array(yaml.safe_dump(_scenario_to_dict(truth.config))),
    )


def load_truth(path) -> ChannelTruth:
    with np.load(path) as data:
        cfg = _scenario_from_dict(yaml.safe_load(str(data["config_yaml"][()])))
        h = data["h"]
        supports = tuple(support_set(h[t, 0]) for t in range(h.shape[0]))
        return ChannelTruth(
            config=cfg,
            path_angles_deg=data["path_angles_deg"],
            path_gains=data["path_gains"],
            h=h,
            antenna=data["antenna"],
            supports=supports,
        )
