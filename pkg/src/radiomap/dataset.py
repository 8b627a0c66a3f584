"""Synthetic dataset generation, on-disk layout, manifest and scene-level splits.

Layout under the output directory::

    manifest.json
    scenes/scene_0000/image.png        RGBA, infrared in the alpha channel
    scenes/scene_0000/build.raw, .hdr  building heights (m)
    scenes/scene_0000/veg.raw, .hdr    vegetation heights (m)
    scenes/scene_0000/meta.json        seed, generator parameters, transmitters
    maps/map_000000.png                8-bit grayscale radio map
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .features import FeaturePreset, assemble_input_stack, manifest_for
from .propagation import (PropagationParams, Scene, SceneParams, TxConfig, generate_scene, sample_transmitters,
                          simulate_radio_map)
from .raster_io import (RasterError, read_png_gray, read_png_rgba, read_raw, sha256_file, write_png_gray,
                        write_png_rgba, write_raw)
from .scaling import ScalingConfig
from .training import Samples

SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass
class MapRecord:
    map_id: int
    scene: int
    tx: dict
    path: str
    sha256: str


@dataclass
class SceneRecord:
    scene: int
    seed: int
    dir: str
    files: dict  # name -> sha256


@dataclass
class DatasetManifest:
    seed: int
    size: int
    scaling: dict
    scene_params: dict
    scenes: list[SceneRecord] = field(default_factory=list)
    maps: list[MapRecord] = field(default_factory=list)
    splits: dict = field(default_factory=dict)  # scene id (str) -> split name
    channel_manifest: list[str] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported dataset schema {d.get('schema_version')}")
        d["scenes"] = [SceneRecord(**s) for s in d["scenes"]]
        d["maps"] = [MapRecord(**m) for m in d["maps"]]
        return cls(**d)

    def maps_in(self, split: str) -> list[MapRecord]:
        return [m for m in self.maps if self.splits.get(str(m.scene)) == split]


def _scene_params(size: int, params: SceneParams | None) -> SceneParams:
    if params is None:
        return SceneParams(size=size)
    if params.size != size:
        raise ValueError("scene params size disagrees with the requested size")
    return params


def split_dataset(counts: dict[int, int], fractions=(0.8, 0.1, 0.1), seed: int = 0) -> dict[int, str]:
    """Assign whole scenes to train/val/test so sample counts approach ``fractions``.

    Scenes are shuffled with ``seed``; the first three seed one split each and
    the rest go, one by one, to the split furthest below its target.
    """
    if len(fractions) != len(SPLITS) or any(f <= 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise ValueError("fractions must be three positive numbers summing to 1")
    ids = sorted(counts)
    if len(ids) < len(SPLITS):
        raise ValueError(f"need at least {len(SPLITS)} scenes to split, got {len(ids)}")
    order = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    total = sum(counts.values())
    have = [0] * len(SPLITS)
    out = {}
    for j, sid in enumerate(order):
        if j < len(SPLITS):
            k = j
        else:
            deficits = [fractions[i] * total - have[i] for i in range(len(SPLITS))]
            k = int(np.argmax(deficits))
        out[sid] = SPLITS[k]
        have[k] += counts[sid]
    return out


def generate_dataset(out_dir, n_maps: int, seed: int = 0, size: int = 64, tx_per_scene: int = 4,
                     scene_params: SceneParams | None = None, scaling: ScalingConfig | None = None,
                     fractions=(0.8, 0.1, 0.1)) -> DatasetManifest:
    """Write ``n_maps`` radio maps over ``ceil(n_maps / tx_per_scene)`` scenes; scene ``i`` uses seed ``seed + i``."""
    if n_maps < 1 or tx_per_scene < 1:
        raise ValueError("n_maps and tx_per_scene must be positive")
    out = Path(out_dir)
    scaling = scaling or ScalingConfig()
    params = _scene_params(size, scene_params)
    n_scenes = math.ceil(n_maps / tx_per_scene)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    (out / "maps").mkdir(parents=True, exist_ok=True)
    man = DatasetManifest(seed=seed, size=size, scaling=scaling.to_dict(), scene_params=asdict(params))
    map_id = 0
    for i in range(n_scenes):
        scene_seed = seed + i
        scene = generate_scene(scene_seed, params)
        sdir = out / "scenes" / f"scene_{i:04d}"
        sdir.mkdir(exist_ok=True)
        write_png_rgba(sdir / "image.png", scene.image)
        write_raw(sdir / "build.raw", scene.building, units="m")
        write_raw(sdir / "veg.raw", scene.vegetation, units="m")
        k = min(tx_per_scene, n_maps - map_id)
        txs = sample_transmitters(scene, k, np.random.default_rng([scene_seed, 1]))
        meta = {"seed": scene_seed, "scene_params": asdict(params), "transmitters": [t.to_dict() for t in txs]}
        (sdir / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        files = {n: sha256_file(sdir / n) for n in ("image.png", "build.raw", "veg.raw", "meta.json")}
        man.scenes.append(SceneRecord(i, scene_seed, f"scenes/scene_{i:04d}", files))
        for tx in txs:
            path = f"maps/map_{map_id:06d}.png"
            write_png_gray(out / path, simulate_radio_map(scene, tx, scaling))
            man.maps.append(MapRecord(map_id, i, tx.to_dict(), path, sha256_file(out / path)))
            map_id += 1
    counts = {s.scene: sum(1 for m in man.maps if m.scene == s.scene) for s in man.scenes}
    if len(counts) >= len(SPLITS):
        man.splits = {str(k): v for k, v in split_dataset(counts, fractions, seed).items()}
    else:
        man.splits = {str(k): "train" for k in counts}
    (out / "manifest.json").write_text(man.to_json())
    return man


def load_manifest(data_dir) -> DatasetManifest:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found")
    return DatasetManifest.from_json(path.read_text())


def verify_dataset(data_dir, man: DatasetManifest | None = None):
    """Check every referenced file against its recorded checksum."""
    root = Path(data_dir)
    man = man or load_manifest(root)
    for s in man.scenes:
        for name, digest in s.files.items():
            p = root / s.dir / name
            if not p.exists() or sha256_file(p) != digest:
                raise RasterError(f"{p}: missing or checksum mismatch")
    for m in man.maps:
        p = root / m.path
        if not p.exists() or sha256_file(p) != m.sha256:
            raise RasterError(f"{p}: missing or checksum mismatch")


def load_scene(data_dir, record: SceneRecord) -> Scene:
    d = Path(data_dir) / record.dir
    building = read_raw(d / "build.raw").astype(np.float64)
    vegetation = read_raw(d / "veg.raw").astype(np.float64)
    image = read_png_rgba(d / "image.png")
    if building.shape != vegetation.shape or image.shape[1:] != building.shape:
        raise RasterError(f"{d}: layer shapes disagree")
    meta = json.loads((d / "meta.json").read_text())
    return Scene(building, vegetation, image, record.seed, 1.0, SceneParams(**_tuples(meta["scene_params"])))


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def load_samples(data_dir, preset: FeaturePreset, split: str | None = None,
                 man: DatasetManifest | None = None) -> Samples:
    """Encode the stored scenes and maps of ``split`` (all maps if None)."""
    man = man or load_manifest(data_dir)
    records = man.maps if split is None else man.maps_in(split)
    if not records:
        raise ValueError(f"no samples in split {split!r}")
    scenes = {}
    xs, ys = [], []
    by_id = {s.scene: s for s in man.scenes}
    for m in records:
        if m.scene not in scenes:
            scenes[m.scene] = load_scene(data_dir, by_id[m.scene])
        tx = TxConfig.from_dict(m.tx)
        xs.append(assemble_input_stack(scenes[m.scene], tx, preset).channels)
        ys.append(read_png_gray(Path(data_dir) / m.path)[None])
    return Samples(np.asarray(xs, dtype=np.float32), np.asarray(ys, dtype=np.float32))


def synthetic_samples(n_scenes: int, tx_per_scene: int, preset: FeaturePreset, seed: int = 0, size: int = 64,
                      scaling: ScalingConfig | None = None, prop: PropagationParams | None = None
                      ) -> tuple[Samples, np.ndarray]:
    """In-memory samples (no quantisation) and the scene index of each sample."""
    scaling = scaling or ScalingConfig()
    xs, ys, groups = [], [], []
    for i in range(n_scenes):
        scene = generate_scene(seed + i, SceneParams(size=size))
        for tx in sample_transmitters(scene, tx_per_scene, np.random.default_rng([seed + i, 1])):
            xs.append(assemble_input_stack(scene, tx, preset).channels)
            ys.append(simulate_radio_map(scene, tx, scaling, prop)[None])
            groups.append(i)
    return (Samples(np.asarray(xs, dtype=np.float32), np.asarray(ys, dtype=np.float32)),
            np.asarray(groups))


def channel_manifest(preset: FeaturePreset) -> list[str]:
    return list(manifest_for(preset))
