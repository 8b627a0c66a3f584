"""Input channels for the CNN.

Every channel is a 2D map over the scene grid.  Raw values are converted to
[-1, 1] with fixed per-channel bounds (never per-sample statistics) so the
encoding of a pixel does not depend on the rest of the sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .propagation import RX_HEIGHT, Scene, TxConfig, antenna_gain_and_slope, off_boresight, wrap_angle

HEIGHT_BOUNDS = (0.0, 40.0)


@dataclass(frozen=True)
class FeaturePreset:
    image: bool = True
    infrared: bool = True
    ndsm: bool = False
    coords: bool = False

    @property
    def n_channels(self) -> int:
        return 3 * self.image + self.infrared + 2 + self.ndsm + 7 * self.coords

    def to_dict(self) -> dict:
        return {"image": self.image, "infrared": self.infrared, "ndsm": self.ndsm, "coords": self.coords}


PRESETS = {
    "image": FeaturePreset(),
    "image_no_ir": FeaturePreset(infrared=False),
    "image_coords": FeaturePreset(coords=True),
    "image_ndsm": FeaturePreset(ndsm=True),
    "image_ndsm_coords": FeaturePreset(ndsm=True, coords=True),
}


@dataclass
class InputStack:
    channels: np.ndarray  # (C, H, W), values in [-1, 1]
    manifest: tuple[str, ...]
    bounds: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.manifest) != self.channels.shape[0] or len(self.bounds) != len(self.manifest):
            raise ValueError("manifest length must equal the channel count")

    def denormalize(self, name: str) -> np.ndarray:
        i = self.manifest.index(name)
        return denormalize(self.channels[i], self.bounds[i])


def normalize(x, bounds):
    lo, hi = bounds
    return np.clip(2.0 * (np.asarray(x, dtype=np.float64) - lo) / (hi - lo) - 1.0, -1.0, 1.0)


def denormalize(y, bounds):
    lo, hi = bounds
    return lo + (np.asarray(y, dtype=np.float64) + 1.0) * 0.5 * (hi - lo)


def _check_inside(tx: TxConfig, shape):
    h, w = shape
    if not (0 <= tx.row < h and 0 <= tx.col < w):
        raise ValueError(f"Tx ({tx.row}, {tx.col}) outside the {h}x{w} map")


def encode_tx_map(tx: TxConfig, shape) -> np.ndarray:
    _check_inside(tx, shape)
    out = np.zeros(shape)
    out[tx.row, tx.col] = tx.height
    return out


def encode_distance_map(tx: TxConfig, shape) -> np.ndarray:
    rr, cc = np.mgrid[0:shape[0], 0:shape[1]]
    return np.hypot(rr - tx.row, cc - tx.col)


def encode_azimuth_map(tx: TxConfig, shape) -> np.ndarray:
    """Signed angle in (-pi, pi] from the boresight azimuth to the direction of each pixel."""
    rr, cc = np.mgrid[0:shape[0], 0:shape[1]]
    direction = np.arctan2(tx.row - rr, cc - tx.col)
    out = wrap_angle(direction - tx.azimuth)
    out[tx.row, tx.col] = 0.0
    return out


def encode_grid_anchor(tx: TxConfig, shape) -> np.ndarray:
    """Column ramp, row ramp, constant Tx column, Tx row and Tx height."""
    h, w = shape
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.stack([cc, rr, np.full(shape, float(tx.col)), np.full(shape, float(tx.row)),
                     np.full(shape, float(tx.height))])


def encode_gain_floor(tx: TxConfig, shape, with_grad: bool = False):
    """Antenna gain (dB) towards each ground pixel at receiver height.

    With ``with_grad`` returns ``(gain, d gain/d azimuth, d gain/d elevation)``.
    """
    rr, cc = np.mgrid[0:shape[0], 0:shape[1]]
    if not with_grad:
        return antenna_gain_and_slope(tx.pattern, off_boresight(tx, rr, cc, RX_HEIGHT))[0]
    psi, dpsi_dphi, dpsi_dtheta = off_boresight(tx, rr, cc, RX_HEIGHT, with_grad=True)
    gain, slope = antenna_gain_and_slope(tx.pattern, psi)
    return gain, slope * dpsi_dphi, slope * dpsi_dtheta


def channel_bounds(name: str, shape, tx: TxConfig | None = None) -> tuple[float, float]:
    h, w = shape
    if name in ("red", "green", "blue", "infrared"):
        return (0.0, 1.0)
    if name in ("tx_height", "ndsm", "ga_tx_z"):
        return HEIGHT_BOUNDS
    if name == "gain_floor":
        return (tx.pattern.back_floor if tx is not None else -30.0, 0.0)
    if name == "distance":
        return (0.0, math.sqrt(2.0) * max(h, w))
    if name == "azimuth":
        return (-math.pi, math.pi)
    if name in ("ga_x", "ga_tx_x"):
        return (0.0, float(w - 1))
    if name in ("ga_y", "ga_tx_y"):
        return (0.0, float(h - 1))
    raise KeyError(name)


def manifest_for(preset: FeaturePreset) -> tuple[str, ...]:
    names = []
    if preset.image:
        names += ["red", "green", "blue"]
    if preset.infrared:
        names.append("infrared")
    names += ["tx_height", "gain_floor"]
    if preset.ndsm:
        names.append("ndsm")
    if preset.coords:
        names += ["distance", "azimuth", "ga_x", "ga_y", "ga_tx_x", "ga_tx_y", "ga_tx_z"]
    return tuple(names)


def assemble_input_stack(scene: Scene, tx: TxConfig, preset: FeaturePreset) -> InputStack:
    shape = scene.shape
    _check_inside(tx, shape)
    if scene.image.shape != (4,) + tuple(shape):
        raise ValueError(f"aerial image shape {scene.image.shape} inconsistent with map {shape}")
    names = manifest_for(preset)
    raw = {}
    if preset.image:
        raw.update(red=scene.image[0], green=scene.image[1], blue=scene.image[2])
    if preset.infrared:
        raw["infrared"] = scene.image[3]
    raw["tx_height"] = encode_tx_map(tx, shape)
    raw["gain_floor"] = encode_gain_floor(tx, shape)
    if preset.ndsm:
        raw["ndsm"] = scene.ndsm
    if preset.coords:
        raw["distance"] = encode_distance_map(tx, shape)
        raw["azimuth"] = encode_azimuth_map(tx, shape)
        ga = encode_grid_anchor(tx, shape)
        for i, n in enumerate(("ga_x", "ga_y", "ga_tx_x", "ga_tx_y", "ga_tx_z")):
            raw[n] = ga[i]
    bounds = tuple(channel_bounds(n, shape, tx) for n in names)
    channels = np.stack([normalize(raw[n], b) for n, b in zip(names, bounds)])
    return InputStack(channels, names, bounds)


def angle_sensitivity(tx: TxConfig, shape, manifest) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of the normalised stack with respect to (azimuth, elevation).

    Only the gain-floor and azimuth channels depend on the orientation.  Returns
    two ``(C, H, W)`` arrays.
    """
    d_phi = np.zeros((len(manifest),) + tuple(shape))
    d_theta = np.zeros_like(d_phi)
    if "gain_floor" in manifest:
        i = manifest.index("gain_floor")
        lo, hi = channel_bounds("gain_floor", shape, tx)
        _, gp, gt = encode_gain_floor(tx, shape, with_grad=True)
        d_phi[i] = 2.0 / (hi - lo) * gp
        d_theta[i] = 2.0 / (hi - lo) * gt
    if "azimuth" in manifest:
        i = manifest.index("azimuth")
        d_phi[i] = -1.0 / math.pi
        d_phi[i][tx.row, tx.col] = 0.0
    return d_phi, d_theta
