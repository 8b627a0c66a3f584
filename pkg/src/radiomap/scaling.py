"""dB post-processing constants and radio-map error metrics.

Path loss is handled as a (negative) dB ratio ``P_rx / P_tx``.  Radio maps are
stored as grayscale images obtained by an affine map of the truncated dB range
onto ``[0, 1]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class ScalingConfig:
    """Link-budget parameters and the grayscale encoding derived from them."""

    bandwidth_hz: float = 10e6
    n0_dbm_hz: float = -174.0
    nf_db: float = 0.0
    snr_db: float = 0.0
    p_tx_dbm: float = 23.0
    pl_max_db: float = -50.0
    report_factor: float = 77.0

    def __post_init__(self):
        if not self.bandwidth_hz > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth_hz}")
        if not self.pl_max_db > self.pl_thr_db:
            raise ValueError("pl_max_db must exceed the SNR threshold path loss")

    @property
    def noise_dbm(self) -> float:
        return 10.0 * math.log10(self.bandwidth_hz) + self.n0_dbm_hz + self.nf_db

    @property
    def pl_thr_db(self) -> float:
        return -self.p_tx_dbm + self.snr_db + self.noise_dbm

    @property
    def pl_trnc_db(self) -> float:
        # headroom below the threshold is a quarter of the span above it, rounded up
        margin = math.ceil((self.pl_max_db - self.pl_thr_db) / 4.0 - 1e-9)
        return self.pl_thr_db - margin

    @property
    def gray_span_db(self) -> float:
        return self.pl_max_db - self.pl_trnc_db

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(
            noise_dbm=self.noise_dbm,
            pl_thr_db=self.pl_thr_db,
            pl_trnc_db=self.pl_trnc_db,
            gray_span_db=self.gray_span_db,
        )
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScalingConfig":
        keys = ("bandwidth_hz", "n0_dbm_hz", "nf_db", "snr_db", "p_tx_dbm", "pl_max_db", "report_factor")
        return cls(**{k: float(d[k]) for k in keys if k in d})


def compute_scaling(bandwidth_hz=10e6, n0_dbm_hz=-174.0, nf_db=0.0, snr_db=0.0,
                    p_tx_dbm=23.0, pl_max_db=-50.0, report_factor=77.0) -> ScalingConfig:
    return ScalingConfig(bandwidth_hz, n0_dbm_hz, nf_db, snr_db, p_tx_dbm, pl_max_db, report_factor)


def _finite(x, what):
    a = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} contains non-finite values")
    return a


def db_to_gray(pl_db, cfg: ScalingConfig):
    """Map path loss in dB to [0, 1]; PL_trnc -> 0, PL_max -> 1, clamped outside."""
    a = _finite(pl_db, "path loss")
    g = np.clip((a - cfg.pl_trnc_db) / cfg.gray_span_db, 0.0, 1.0)
    return g if g.ndim else float(g)


def gray_to_db(gray, cfg: ScalingConfig):
    """Inverse of :func:`db_to_gray` on [0, 1] (affine, not clamped)."""
    a = _finite(gray, "grayscale value")
    d = cfg.pl_trnc_db + cfg.gray_span_db * a
    return d if d.ndim else float(d)


def _pair(pred, target):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    return p, t


def rmse(pred, target, domain: str = "gray", cfg: ScalingConfig | None = None) -> float:
    """Root mean square error of grayscale maps.

    ``domain="db"`` reports the grayscale RMSE multiplied by ``cfg.report_factor``.
    """
    p, t = _pair(pred, target)
    value = float(np.sqrt(np.mean((p - t) ** 2)))
    if domain == "gray":
        return value
    if domain == "db":
        return value * (cfg or ScalingConfig()).report_factor
    raise ValueError(f"unknown domain {domain!r}")


def nmse(pred_db, target_db) -> float:
    """``sum((pred - target)**2) / sum(target**2)`` on maps already in dB."""
    p, t = _pair(pred_db, target_db)
    energy = float(np.sum(t ** 2))
    if energy == 0.0:
        raise ValueError("target has zero energy in dB domain")
    return float(np.sum((p - t) ** 2) / energy)


def nmse_db(pred, target, cfg: ScalingConfig | None = None) -> float:
    """NMSE of two grayscale maps after converting both to dB."""
    cfg = cfg or ScalingConfig()
    p, t = _pair(pred, target)
    return nmse(cfg.pl_trnc_db + cfg.gray_span_db * p, cfg.pl_trnc_db + cfg.gray_span_db * t)
