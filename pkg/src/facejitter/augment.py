"""Pose and lighting jitter sampling, batch rendering and training schedules.

Every variant draws from its own generator seeded by a hash of (global seed,
record id, variant index), so any single variant can be regenerated in
isolation and batch output does not depend on the worker count.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .fitting import FitConfig, FitError, FitResult, fit, load_landmarks
from .imaging import read_png, write_png
from .model import MorphableModel
from .relight import LightingSpec, relight
from .render import HeadMesh, PoseSpec, render_pose

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "facejitter.manifest/1"
OUTPUT_SCHEMA = "facejitter.variants/1"
SCHEDULE_SCHEMA = "facejitter.schedule/1"
ORIGINAL = "original"


class BatchFailure(RuntimeError):
    """Every record of a batch failed."""


@dataclass(frozen=True)
class JitterPolicy:
    yaw_range: float = math.radians(45.0)
    pitch_range: float = math.radians(15.0)
    roll_range: float = math.radians(15.0)
    directional: tuple = (0.2, 1.0)   # w_d uniform range
    ambient_drop: tuple = (0.0, 0.5)  # w_a = 1 - w_d * u, u uniform in this range
    n_pose: int = 5
    n_light: int = 5

    def __post_init__(self):
        object.__setattr__(self, "directional", tuple(float(x) for x in self.directional))
        object.__setattr__(self, "ambient_drop", tuple(float(x) for x in self.ambient_drop))
        if min(self.yaw_range, self.pitch_range, self.roll_range) < 0:
            raise ValueError("jitter ranges must be non-negative")
        if self.n_pose < 0 or self.n_light < 0:
            raise ValueError("jitter counts must be non-negative")
        lo, hi = self.directional
        if not 0 <= lo <= hi:
            raise ValueError("directional weight range must satisfy 0 <= lo <= hi")
        lo, hi = self.ambient_drop
        if not 0 <= lo <= hi:
            raise ValueError("ambient drop range must satisfy 0 <= lo <= hi")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}


def variant_seed(seed: int, record_id: str, index: int) -> int:
    digest = hashlib.sha256(f"{int(seed)}\x1f{record_id}\x1f{int(index)}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def variant_name(index: int, policy: JitterPolicy) -> str:
    if index < policy.n_pose:
        return f"pose-{index}"
    return f"light-{index - policy.n_pose}"


def sample_pose_jitter(rng: np.random.Generator, policy: JitterPolicy, source, width: int,
                       height: int) -> PoseSpec:
    """Uniform yaw/pitch/roll deltas added to the source pose; scale and offset kept."""
    d = rng.uniform(-1.0, 1.0, 3) * np.array([policy.yaw_range, policy.pitch_range, policy.roll_range])
    return PoseSpec.from_source(source, width, height, float(d[0]), float(d[1]), float(d[2]))


def sample_lighting_jitter(rng: np.random.Generator, policy: JitterPolicy) -> LightingSpec:
    """Direction uniform on the camera-facing hemisphere (travel direction z < 0)."""
    while True:
        v = rng.uniform(-1.0, 1.0, 3)
        r = float(np.linalg.norm(v))
        if 1e-6 < r <= 1.0 and v[2] < 0.0:
            break
    wd = float(rng.uniform(*policy.directional))
    wa = 1.0 - wd * float(rng.uniform(*policy.ambient_drop))
    return LightingSpec(tuple(v / r), wa, wd)


@dataclass
class Variant:
    index: int
    name: str
    kind: str  # "pose" | "light"
    seed: int
    spec: dict
    image: np.ndarray | None = None

    def metadata(self) -> dict:
        return {"index": self.index, "name": self.name, "kind": self.kind, "seed": self.seed,
                "spec": self.spec}


@dataclass
class JitterSet:
    variants: list
    failed: bool = False
    reason: str = ""


def fit_usable(fit_result: FitResult | None, image: int = 0) -> str:
    """Empty string if the fit can drive rendering, else the reason it cannot."""
    if fit_result is None:
        return "no fit"
    if not fit_result.converged:
        return "fit did not converge"
    im = fit_result.images[image]
    if im.dropped or im.camera is None:
        return "image dropped from the fit"
    return ""


def generate_jitters(record_id: str, image: np.ndarray, fit_result: FitResult | None,
                     model: MorphableModel, policy: JitterPolicy, seed: int,
                     image_index: int = 0, render: bool = True) -> JitterSet:
    """``n_pose`` pose variants via render_pose and ``n_light`` lighting variants via relight."""
    reason = fit_usable(fit_result, image_index)
    if reason:
        return JitterSet([], True, reason)
    if policy.n_pose + policy.n_light == 0:
        return JitterSet([])
    H, W = image.shape[:2]
    cam = fit_result.images[image_index].camera
    mesh = HeadMesh.from_fit(fit_result, model, image_index) if render else None
    out = []
    for index in range(policy.n_pose + policy.n_light):
        s = variant_seed(seed, record_id, index)
        rng = np.random.default_rng(s)
        if index < policy.n_pose:
            pose = sample_pose_jitter(rng, policy, cam, W, H)
            img = render_pose(image, fit_result, model, pose, image_index, mesh) if render else None
            out.append(Variant(index, variant_name(index, policy), "pose", s, pose.to_dict(), img))
        else:
            light = sample_lighting_jitter(rng, policy)
            img = relight(image, fit_result, model, light, image_index, mesh) if render else None
            out.append(Variant(index, variant_name(index, policy), "light", s, light.to_dict(), img))
    return JitterSet(out)


# ---------------------------------------------------------------- manifests

@dataclass
class ManifestRecord:
    record_id: str
    subject: str
    image: str
    landmarks: str
    fit: str | None = None
    failed: bool = False
    reason: str = ""

    def __post_init__(self):
        if not self.record_id or not self.image or not self.landmarks:
            raise ValueError("manifest record needs non-empty id, image and landmark paths")

    def to_dict(self) -> dict:
        d = {"schema": MANIFEST_SCHEMA, "record_id": self.record_id, "subject": self.subject,
             "image": self.image, "landmarks": self.landmarks}
        if self.fit:
            d["fit"] = self.fit
        if self.failed:
            d["failed"] = True
            d["reason"] = self.reason
        return d


@dataclass
class DatasetManifest:
    records: list
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [r.record_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest record ids must be unique")

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        records = []
        with open(path) as f:
            for n, line in enumerate(f, 1):
                if not line.strip():
                    continue
                d = json.loads(line)
                schema = d.pop("schema", MANIFEST_SCHEMA)
                if schema != MANIFEST_SCHEMA:
                    raise ValueError(f"{path}:{n}: unsupported manifest schema {schema!r}")
                try:
                    records.append(ManifestRecord(**d))
                except TypeError as exc:
                    raise ValueError(f"{path}:{n}: bad manifest record ({exc})") from None
        return cls(records, path.parent)

    def save(self, path) -> None:
        with open(path, "w") as f:
            for r in self.records:
                f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


@dataclass
class OutputRecord:
    record_id: str
    subject: str
    image: str
    status: str  # "ok" | "failed"
    reason: str = ""
    fit: str | None = None
    variants: list = field(default_factory=list)  # Variant.metadata() plus "path"

    def to_dict(self) -> dict:
        return {"schema": OUTPUT_SCHEMA, "record_id": self.record_id, "subject": self.subject,
                "image": self.image, "status": self.status, "reason": self.reason,
                "fit": self.fit, "variants": self.variants}

    @classmethod
    def from_dict(cls, d: dict) -> "OutputRecord":
        d = dict(d)
        d.pop("schema", None)
        return cls(**d)

    @property
    def failed(self) -> bool:
        return self.status != "ok"


def load_output_manifest(path) -> list[OutputRecord]:
    with open(path) as f:
        return [OutputRecord.from_dict(json.loads(line)) for line in f if line.strip()]


def save_output_manifest(path, records) -> None:
    with open(path, "w") as f:
        for r in sorted(records, key=lambda r: r.record_id):
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


# ---------------------------------------------------------------- batch

_WORKER: dict = {}


def _init_worker(model, policy, seed, out_dir, fit_config):
    _WORKER.update(model=model, policy=policy, seed=seed, out_dir=Path(out_dir), fit_config=fit_config)


def _safe_name(record_id: str) -> str:
    keep = "".join(c if c.isalnum() or c in "-_." else "_" for c in record_id)
    return f"{keep}-{hashlib.sha256(record_id.encode()).hexdigest()[:8]}"


def _process(record: ManifestRecord, root: Path) -> OutputRecord:
    w = _WORKER
    out = OutputRecord(record.record_id, record.subject, record.image, "failed")
    if record.failed:
        out.reason = record.reason or "flagged as failed in the input manifest"
        return out
    try:
        image = read_png(root / record.image if not Path(record.image).is_absolute() else record.image)
    except Exception as exc:  # noqa: BLE001 - any unreadable input is a record failure
        out.reason = f"unreadable image: {exc}"
        return out
    try:
        if record.fit:
            fp = Path(record.fit)
            fit_result = FitResult.load(fp if fp.is_absolute() else root / fp)
        else:
            lp = Path(record.landmarks)
            sets = load_landmarks(lp if lp.is_absolute() else root / lp)
            if len(sets) != 1:
                raise ValueError(f"expected one landmark set, found {len(sets)}")
            fit_result = fit(sets, w["model"], w["fit_config"])
    except (OSError, ValueError, KeyError, FitError) as exc:
        out.reason = f"fit failed: {exc}"
        return out
    name = _safe_name(record.record_id)
    out_dir = w["out_dir"]
    if not record.fit:
        (out_dir / "fits").mkdir(parents=True, exist_ok=True)
        fit_result.save(out_dir / "fits" / f"{name}.json")
        out.fit = f"fits/{name}.json"
    else:
        out.fit = record.fit
    jit = generate_jitters(record.record_id, image, fit_result, w["model"], w["policy"], w["seed"])
    if jit.failed:
        out.reason = jit.reason
        return out
    vdir = out_dir / "variants" / name
    vdir.mkdir(parents=True, exist_ok=True)
    for v in jit.variants:
        write_png(vdir / f"{v.name}.png", v.image)
        out.variants.append({**v.metadata(), "path": f"variants/{name}/{v.name}.png"})
    out.status = "ok"
    return out


def default_workers() -> int:
    env = os.environ.get("FACEJITTER_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"FACEJITTER_WORKERS must be an integer, got {env!r}") from None
    return max(1, os.cpu_count() or 1)


def augment_batch(manifest: DatasetManifest, model: MorphableModel, policy: JitterPolicy, seed: int,
                  out_dir, workers: int | None = None, fit_config: FitConfig | None = None) -> list[OutputRecord]:
    """Fit (when no fit is given) and render jitters for every record.

    Writes ``variants.jsonl`` (sorted by record id) plus variant PNGs under
    ``out_dir``. Record failures are listed, not raised; if every record
    fails, :class:`BatchFailure` is raised after the manifest is written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    workers = default_workers() if workers is None else max(1, int(workers))
    fit_config = fit_config or FitConfig()
    args = (model, policy, seed, out_dir, fit_config)
    recs = manifest.records
    if workers == 1 or len(recs) <= 1:
        _init_worker(*args)
        results = [_process(r, manifest.root) for r in recs]
    else:
        import multiprocessing as mp
        ctx = mp.get_context("spawn")
        with ProcessPoolExecutor(min(workers, len(recs)), mp_context=ctx,
                                 initializer=_init_worker, initargs=args) as pool:
            results = list(pool.map(_process, recs, [manifest.root] * len(recs)))
    save_output_manifest(out_dir / "variants.jsonl", results)
    for r in results:
        if r.failed:
            log.warning("record %s failed: %s", r.record_id, r.reason)
    if recs and all(r.failed for r in results):
        raise BatchFailure("every record in the batch failed")
    return sorted(results, key=lambda r: r.record_id)


# ---------------------------------------------------------------- schedules

@dataclass
class TrainingSchedule:
    strategy: str  # "random" | "dual"
    p: float
    epochs: int
    seed: int
    entries: list  # (epoch, position, record id, variant name or "original")

    def per_epoch(self, epoch: int) -> list:
        return [e for e in self.entries if e[0] == epoch]

    def save(self, path) -> None:
        with open(path, "w") as f:
            for ep, pos, rid, var in self.entries:
                f.write(json.dumps({"epoch": ep, "position": pos, "record_id": rid, "variant": var}) + "\n")

    def metadata(self) -> dict:
        return {"schema": SCHEDULE_SCHEMA, "strategy": self.strategy, "p": self.p,
                "epochs": self.epochs, "seed": self.seed, "entries": len(self.entries)}


def _available(records) -> list[tuple[str, list]]:
    out = []
    for r in records:
        if isinstance(r, OutputRecord):
            names = [] if r.failed else [v["name"] for v in r.variants]
            out.append((r.record_id, names))
        else:
            rid, names = r
            out.append((rid, list(names)))
    return out


def build_training_schedule(records, strategy: str, p: float = 0.5, epochs: int = 1,
                            seed: int = 0) -> TrainingSchedule:
    """Per-epoch shuffled schedule implementing random-jitter-P or dual jitter.

    ``records`` are output-manifest records or ``(record id, [variant names])``
    pairs. Records without variants (failed) are always scheduled as originals;
    under the dual strategy their jittered slot also falls back to the original.
    """
    if strategy not in ("random", "dual"):
        raise ValueError(f"unknown schedule strategy {strategy!r}")
    if not 0.0 <= p <= 1.0 or not math.isfinite(p):
        raise ValueError(f"P must lie in [0, 1], got {p}")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    avail = _available(records)
    entries = []
    for epoch in range(epochs):
        rng = np.random.default_rng([int(seed), epoch])
        if strategy == "random":
            items = []
            for rid, names in avail:
                swap = rng.random() < p
                pick = int(rng.integers(len(names))) if names else 0
                items.append((rid, names[pick] if swap and names else ORIGINAL))
        else:
            items = []
            for rid, names in avail:
                items.append((rid, ORIGINAL))
                items.append((rid, names[int(rng.integers(len(names)))] if names else ORIGINAL))
        order = rng.permutation(len(items))
        entries.extend((epoch, pos, items[i][0], items[i][1]) for pos, i in enumerate(order))
    return TrainingSchedule(strategy, float(p), int(epochs), int(seed), entries)
