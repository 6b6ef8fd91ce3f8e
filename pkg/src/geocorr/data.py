"""Dataset generation and the on-disk dataset format.

A dataset directory holds ``records.bin`` (all sequence records back to
back) and ``manifest.json`` (config snapshot, per-sequence offsets, split
tags and SHA-256 checksums). Every record is little-endian:

    magic b"GASPDS", u32 version
    u32 F, H, W, P, Q, feature_dim, text_len
    K: 9 f64 (shared intrinsics)
    frame clip times: F u16
    text ids: text_len u16
    per frame: camera R row-major + t (12 f64), depth map H*W f32, tokens P*Q*feature_dim f32
    u32 number of track sets, then per set:
        u16 rows, u16 cols, u32 T, grid indices T u16,
        T*F track rows (frame u16, u f32, v f32, patch u16, depth f32, visible u8)

Patch index 65535 on disk marks "no patch" (-1 in memory).
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptDataset, DatasetLeakage
from .geometry import CameraFrame, CameraModel, SamplingPolicy, TrackSet, sample_sequence_indices
from .language import Grammar
from .scenegen import RenderSettings, SceneSpec, pool_patch_depths, render_sequence, synthesize_scene

log = logging.getLogger(__name__)

MAGIC = b"GASPDS"
VERSION = 1
MANIFEST = "manifest.json"
RECORDS = "records.bin"
SPLITS = ("train", "test")

TRACK_DTYPE = np.dtype(
    [("frame", "<u2"), ("u", "<f4"), ("v", "<f4"), ("patch", "<u2"), ("depth", "<f4"), ("visible", "u1")]
)
NO_PATCH = 0xFFFF


def _tuple_fields(d: dict, names) -> dict:
    d = dict(d)
    for n in names:
        if n in d and d[n] is not None:
            d[n] = tuple(tuple(x) if isinstance(x, list) else x for x in d[n])
    return d


@dataclass(frozen=True)
class DataConfig:
    num_train: int = 200
    num_test: int = 200
    clip_length: int = 25
    seed: int = 0
    fine_grid: tuple[int, int] = (24, 24)
    coarse_grid: tuple[int, int] = (8, 8)
    scene: SceneSpec = field(default_factory=SceneSpec)
    render: RenderSettings = field(default_factory=RenderSettings)
    policy: SamplingPolicy = field(default_factory=SamplingPolicy)
    grammar: Grammar = field(default_factory=Grammar)

    def __post_init__(self):
        if self.num_train < 0 or self.num_test < 0 or self.num_train + self.num_test == 0:
            raise ConfigError("dataset needs at least one sequence")
        if self.clip_length < self.policy.seq_len_range[1]:
            raise ConfigError("clip_length shorter than the longest sampled sequence")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        d = dict(d)
        sub = {
            "scene": (SceneSpec, ()),
            "render": (RenderSettings, ("image_size", "patch_grid")),
            "policy": (SamplingPolicy, ("seq_len_range",)),
            "grammar": (Grammar, ()),
        }
        for key, (klass, tuples) in sub.items():
            if key in d:
                v = d[key]
                d[key] = v if isinstance(v, klass) else klass(**{k: tuple(x) if k in tuples else x for k, x in v.items()})
        for k in ("fine_grid", "coarse_grid"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class SequenceRecord:
    id: int
    split: str
    seed: int
    frame_times: np.ndarray  # (F,) clip indices
    intrinsics: np.ndarray  # (3, 3)
    cameras: list[CameraModel]
    depth_maps: np.ndarray  # (F, H, W)
    tokens: np.ndarray  # (F, P, Q, feature_dim)
    tracks: dict[str, TrackSet]  # keyed "RxC"
    text: np.ndarray  # instruction ids

    @property
    def num_frames(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def patch_grid(self) -> tuple[int, int]:
        return int(self.tokens.shape[1]), int(self.tokens.shape[2])

    @property
    def image_size(self) -> tuple[int, int]:
        return int(self.depth_maps.shape[1]), int(self.depth_maps.shape[2])

    @property
    def visual_tokens(self) -> np.ndarray:
        F, P, Q, D = self.tokens.shape
        return self.tokens.reshape(F, P * Q, D)

    @property
    def patch_depths(self) -> np.ndarray:
        return np.stack([pool_patch_depths(d, self.patch_grid) for d in self.depth_maps])

    def frames(self) -> list[CameraFrame]:
        return [CameraFrame(c, d, self.image_size) for c, d in zip(self.cameras, self.depth_maps)]


def sequence_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def generate_sequence(cfg: DataConfig, index: int, split: str) -> SequenceRecord:
    """Render sequence ``index``: scene, frame sampling, tokens, both track grids, instruction."""
    seed = sequence_seed(cfg.seed, index)
    spec = SceneSpec(**{**asdict(cfg.scene), "rng_seed": seed})
    scene = synthesize_scene(spec)
    times = sample_sequence_indices(cfg.clip_length, cfg.policy, seed)
    grids = (tuple(cfg.fine_grid), tuple(cfg.coarse_grid))
    seq = render_sequence(scene, cfg.render, len(times), spec, cfg.policy, frame_times=times, query_grids=grids)
    return SequenceRecord(
        id=index,
        split=split,
        seed=seed,
        frame_times=np.asarray(times, dtype=np.int64),
        intrinsics=cfg.render.intrinsics(),
        cameras=[f.camera for f in seq.frames],
        # stored as f32 on disk; round now so in-memory and reloaded data agree
        depth_maps=np.stack([f.depth_map for f in seq.frames]).astype(np.float32).astype(np.float64),
        tokens=seq.token_grids.astype(np.float32).astype(np.float64),
        tracks=_round_tracks(seq.extra_tracks),
        text=cfg.grammar.sample([seed, 7]),
    )


def _round_tracks(tracks: dict[str, TrackSet]) -> dict[str, TrackSet]:
    out = {}
    for key, ts in tracks.items():
        out[key] = TrackSet(
            uv=ts.uv.astype(np.float32).astype(np.float64),
            depth=ts.depth.astype(np.float32).astype(np.float64),
            visible=ts.visible.copy(),
            patch=ts.patch.copy(),
            grid_index=ts.grid_index.copy(),
            num_frames=ts.num_frames,
            query_grid=tuple(ts.query_grid),
            patch_grid=tuple(ts.patch_grid),
            image_size=tuple(ts.image_size),
        )
    return out


# ---------------------------------------------------------------- binary records


def encode_record(rec: SequenceRecord) -> bytes:
    F, P, Q, D = rec.tokens.shape
    H, W = rec.image_size
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<7I", F, H, W, P, Q, D, len(rec.text))]
    parts.append(np.asarray(rec.intrinsics, dtype="<f8").tobytes())
    parts.append(np.asarray(rec.frame_times, dtype="<u2").tobytes())
    parts.append(np.asarray(rec.text, dtype="<u2").tobytes())
    for f in range(F):
        parts.append(rec.cameras[f].as_extrinsic_vector().astype("<f8").tobytes())
        parts.append(rec.depth_maps[f].astype("<f4").tobytes())
        parts.append(rec.tokens[f].astype("<f4").tobytes())
    parts.append(struct.pack("<I", len(rec.tracks)))
    for key in sorted(rec.tracks):
        ts = rec.tracks[key]
        T = len(ts)
        parts.append(struct.pack("<HHI", ts.query_grid[0], ts.query_grid[1], T))
        parts.append(np.asarray(ts.grid_index, dtype="<u2").tobytes())
        rows = np.zeros((T, F), dtype=TRACK_DTYPE)
        rows["frame"] = np.arange(F)[None, :]
        rows["u"] = ts.uv[..., 0]
        rows["v"] = ts.uv[..., 1]
        rows["patch"] = np.where(ts.patch < 0, NO_PATCH, ts.patch)
        rows["depth"] = ts.depth
        rows["visible"] = ts.visible
        parts.append(rows.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise CorruptDataset("record truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()


def decode_record(buf: bytes, rec_id: int, split: str, seed: int) -> SequenceRecord:
    r = _Reader(buf)
    if bytes(r.take(len(MAGIC))) != MAGIC:
        raise CorruptDataset("bad record magic")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CorruptDataset(f"unsupported record version {version}")
    F, H, W, P, Q, D, M = r.unpack("<7I")
    K = r.array("<f8", 9).reshape(3, 3)
    times = r.array("<u2", F).astype(np.int64)
    text = r.array("<u2", M).astype(np.int64)
    cams, depths, tokens = [], np.empty((F, H, W)), np.empty((F, P, Q, D))
    for f in range(F):
        ext = r.array("<f8", 12)
        cams.append(CameraModel(K, ext[:9].reshape(3, 3), ext[9:]))
        depths[f] = r.array("<f4", H * W).reshape(H, W)
        tokens[f] = r.array("<f4", P * Q * D).reshape(P, Q, D)
    (num_sets,) = r.unpack("<I")
    tracks = {}
    for _ in range(num_sets):
        rows_q, cols_q, T = r.unpack("<HHI")
        grid_index = r.array("<u2", T).astype(np.int64)
        tab = r.array(TRACK_DTYPE, T * F).reshape(T, F)
        if T and not (tab["frame"] == np.arange(F)[None, :]).all():
            raise CorruptDataset("track table frame column out of order")
        patch = tab["patch"].astype(np.int64)
        patch[patch == NO_PATCH] = -1
        tracks[f"{rows_q}x{cols_q}"] = TrackSet(
            uv=np.stack([tab["u"], tab["v"]], axis=-1).astype(np.float64),
            depth=tab["depth"].astype(np.float64),
            visible=tab["visible"].astype(bool),
            patch=patch,
            grid_index=grid_index,
            num_frames=F,
            query_grid=(rows_q, cols_q),
            patch_grid=(P, Q),
            image_size=(H, W),
        )
    if r.pos != len(r.buf):
        raise CorruptDataset("trailing bytes after record")
    return SequenceRecord(rec_id, split, seed, times, K, cams, depths, tokens, tracks, text)


# ---------------------------------------------------------------- dataset directory


@dataclass
class Dataset:
    config: DataConfig
    records: list[SequenceRecord]

    def split(self, name: str) -> list[SequenceRecord]:
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]

    def check_disjoint(self) -> None:
        train = {r.id for r in self.records if r.split == "train"}
        test = {r.id for r in self.records if r.split == "test"}
        if train & test:
            raise DatasetLeakage(f"ids in both splits: {sorted(train & test)[:10]}")


def build_dataset(cfg: DataConfig) -> Dataset:
    """Train ids ``0..num_train-1`` then test ids after them."""
    recs = [generate_sequence(cfg, i, "train") for i in range(cfg.num_train)]
    recs += [generate_sequence(cfg, cfg.num_train + i, "test") for i in range(cfg.num_test)]
    return Dataset(cfg, recs)


def write_dataset(ds: Dataset, out_dir) -> Path:
    ds.check_disjoint()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    blob = hashlib.sha256()
    with open(out / RECORDS, "wb") as fh:
        for rec in ds.records:
            data = encode_record(rec)
            fh.write(data)
            blob.update(data)
            entries.append(
                {
                    "id": rec.id,
                    "split": rec.split,
                    "seed": rec.seed,
                    "offset": offset,
                    "length": len(data),
                    "num_frames": rec.num_frames,
                    "patch_grid": list(rec.patch_grid),
                    "sha256": hashlib.sha256(data).hexdigest(),
                }
            )
            offset += len(data)
    manifest = {
        "format": "GASPDS",
        "version": VERSION,
        "num_sequences": len(entries),
        "config": ds.config.to_dict(),
        "records_sha256": blob.hexdigest(),
        "sequences": entries,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def read_manifest(path) -> dict:
    p = Path(path)
    try:
        manifest = json.loads((p / MANIFEST).read_text())
    except FileNotFoundError:
        raise CorruptDataset(f"no manifest in {p}") from None
    except json.JSONDecodeError as e:
        raise CorruptDataset(f"manifest is not valid JSON: {e}") from None
    if manifest.get("format") != "GASPDS" or manifest.get("version") != VERSION:
        raise CorruptDataset("unknown dataset format or version")
    ids = {"train": set(), "test": set()}
    for e in manifest["sequences"]:
        if e["split"] not in ids:
            raise CorruptDataset(f"unknown split tag {e['split']!r}")
        ids[e["split"]].add(e["id"])
    if ids["train"] & ids["test"]:
        raise DatasetLeakage(f"ids in both splits: {sorted(ids['train'] & ids['test'])[:10]}")
    return manifest


def read_dataset(path, splits=SPLITS) -> Dataset:
    """Load and verify a dataset directory, keeping only ``splits``."""
    p = Path(path)
    manifest = read_manifest(p)
    try:
        raw = (p / RECORDS).read_bytes()
    except FileNotFoundError:
        raise CorruptDataset(f"no {RECORDS} in {p}") from None
    if hashlib.sha256(raw).hexdigest() != manifest["records_sha256"]:
        raise CorruptDataset("records checksum mismatch")
    recs = []
    for e in manifest["sequences"]:
        if e["split"] not in splits:
            continue
        chunk = raw[e["offset"] : e["offset"] + e["length"]]
        if hashlib.sha256(chunk).hexdigest() != e["sha256"]:
            raise CorruptDataset(f"sequence {e['id']} checksum mismatch")
        recs.append(decode_record(chunk, e["id"], e["split"], e["seed"]))
    return Dataset(DataConfig.from_dict(manifest["config"]), recs)
