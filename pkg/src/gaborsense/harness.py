"""Sweep protocol: sample noise parameters, generate perturbation sets,
evaluate every oracle on every perturbation, and emit report data.

Determinism contract: per-perturbation RNG streams are derived as
mix(master_seed, perturbation_id), records are flushed to CSV strictly in
id order, and float cells are written with repr() (shortest round-trip),
so a rerun with the same config is byte-identical regardless of the
number of workers, and any record can be recomputed from its stored
perturbation file exactly.
"""

import csv
import io
import json
import math
import os
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .errors import (
    ConfigError,
    DatasetEmpty,
    DegenerateField,
    ShapeMismatch,
    UnreadableFile,
    ZeroPoints,
)
from .metrics import (
    _index_ordered_mean,
    flip_flags,
    histogram,
    pearson_correlation_matrix,
    prediction_gaps,
    quartiles,
)
from .noise import AnisotropicNoiseParams, gabor_noise
from .oracle import predict_batch, resolve_oracle
from .perturb import (
    PerturbationField,
    apply_batch,
    random_uniform_perturbation,
    read_gnp,
    to_perturbation,
    write_gnp,
)
from .rng import SplitMix64, derive_seed

DATASET_MAGIC = "IMB1"
GROUP_MEAN_BINS = 8
TRANSFER_TOP_K = 10
# Bounded deterministic rescatter for the rare all-cancelling lattice draw.
MAX_FIELD_ATTEMPTS = 100

DEFAULT_RANGES = {"sigma": (1.5, 9.0), "lambda": (1.5, 9.0), "omega": (0.0, math.pi)}


@dataclass(frozen=True)
class OracleSpec:
    name: str
    command: str


@dataclass
class SweepConfig:
    n_perturbations: int = 1000
    dataset_path: str = ""
    n_images: int | None = None
    epsilon: float = 12.0
    ranges: dict = field(default_factory=lambda: dict(DEFAULT_RANGES))
    kernel_size: int = 23
    density: float = 1.0
    master_seed: int = 0
    oracles: list = field(default_factory=lambda: [OracleSpec("builtin", "builtin")])
    include_random_baseline: bool = True
    mode: str = "scaled"
    out_dir: str = "sweep_out"
    jobs: int = 1

    def __post_init__(self):
        if self.n_perturbations < 1:
            raise ConfigError("n_perturbations must be >= 1")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.mode not in ("scaled", "sign"):
            raise ConfigError(f"mode must be 'scaled' or 'sign', got {self.mode!r}")
        if self.kernel_size < 1:
            raise ConfigError("kernel_size must be >= 1")
        if self.density <= 0:
            raise ConfigError("density must be positive")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if not self.dataset_path:
            raise ConfigError("dataset_path is required")
        ranges = {}
        for key in ("sigma", "lambda", "omega"):
            if key not in self.ranges:
                raise ConfigError(f"ranges missing component {key!r}")
            lo, hi = self.ranges[key]
            if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
                raise ConfigError(f"ranges[{key!r}] must satisfy lower <= upper")
            ranges[key] = (float(lo), float(hi))
        self.ranges = ranges
        specs = []
        for entry in self.oracles:
            if isinstance(entry, OracleSpec):
                specs.append(entry)
            elif isinstance(entry, str):
                specs.append(OracleSpec(name=_default_oracle_name(entry), command=entry))
            elif isinstance(entry, dict) and {"name", "command"} <= set(entry):
                specs.append(OracleSpec(name=str(entry["name"]), command=str(entry["command"])))
            else:
                raise ConfigError(f"oracles entries need name and command, got {entry!r}")
        if not specs:
            raise ConfigError("oracles must list at least one oracle")
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise ConfigError(f"oracle names must be unique, got {names}")
        self.oracles = specs

    @classmethod
    def from_json(cls, path: str) -> "SweepConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise UnreadableFile(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        ranges = raw.get("ranges")
        if isinstance(ranges, dict):
            raw["ranges"] = {k: tuple(v) for k, v in ranges.items()}
        return cls(**raw)

    def to_jsonable(self) -> dict:
        return {
            "n_perturbations": self.n_perturbations,
            "dataset_path": self.dataset_path,
            "n_images": self.n_images,
            "epsilon": self.epsilon,
            "ranges": {k: list(v) for k, v in self.ranges.items()},
            "kernel_size": self.kernel_size,
            "density": self.density,
            "master_seed": self.master_seed,
            "oracles": [{"name": s.name, "command": s.command} for s in self.oracles],
            "include_random_baseline": self.include_random_baseline,
            "mode": self.mode,
            "out_dir": self.out_dir,
            "jobs": self.jobs,
        }


def _default_oracle_name(command: str) -> str:
    if command.startswith("builtin"):
        return command.replace(":", "-")
    if command.startswith("tcp://"):
        return command[len("tcp://") :].replace(":", "-").replace("/", "-")
    return os.path.basename(command.split()[0])


def sample_theta(ranges: dict, rng: SplitMix64) -> dict:
    """Uniform draw of {sigma, omega, lambda}; draw order sigma, omega, lambda."""
    sigma = rng.uniform(*ranges["sigma"])
    omega = rng.uniform(*ranges["omega"])
    lam = rng.uniform(*ranges["lambda"])
    return {"sigma": sigma, "omega": omega, "lambda": lam}


def gabor_perturbation_for_id(cfg: SweepConfig, pert_id: int, width: int, height: int) -> PerturbationField:
    """Deterministic Gabor perturbation for one sweep id.

    The id's stream provides the theta draw, then a field seed. Lattices
    whose visible contribution cancels below the normalization floor are
    rescattered with a further seed from the same stream (bounded, and
    recorded in provenance as 'attempt').
    """
    stream = SplitMix64(derive_seed(cfg.master_seed, pert_id))
    theta = sample_theta(cfg.ranges, stream)
    for attempt in range(MAX_FIELD_ATTEMPTS):
        field_seed = stream.next_u64()
        params = AnisotropicNoiseParams(
            sigma=theta["sigma"],
            omega=theta["omega"],
            lambda_freq=theta["lambda"],
            kernel_size=cfg.kernel_size,
            seed=field_seed,
        )
        try:
            noise = gabor_noise(params, width, height, density=cfg.density)
        except DegenerateField:
            continue
        provenance = {
            "kind": "gabor",
            "sigma": theta["sigma"],
            "omega": theta["omega"],
            "lambda": theta["lambda"],
            "kernel_size": cfg.kernel_size,
            "density": cfg.density,
            "mode": cfg.mode,
            "attempt": attempt,
        }
        return to_perturbation(
            noise, cfg.epsilon, mode=cfg.mode, provenance=provenance, seed=field_seed
        )
    raise ZeroPoints(
        f"no usable lattice for id {pert_id} after {MAX_FIELD_ATTEMPTS} attempts"
    )


def random_perturbation_for_id(cfg: SweepConfig, pert_id: int, width: int, height: int) -> PerturbationField:
    seed = derive_seed(cfg.master_seed, pert_id)
    return random_uniform_perturbation(width, height, cfg.epsilon, seed)


# -- dataset I/O ---------------------------------------------------------------


def save_dataset(path: str, images: np.ndarray) -> None:
    """Write a raw image-stack file: JSON header line + float32 payload."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim != 4:
        raise ShapeMismatch(f"expected (N, H, W, C) stack, got shape {arr.shape}")
    header = {
        "magic": DATASET_MAGIC,
        "count": int(arr.shape[0]),
        "height": int(arr.shape[1]),
        "width": int(arr.shape[2]),
        "channels": int(arr.shape[3]),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(arr.astype("<f4").tobytes(order="C"))


def _load_raw_dataset(path: str) -> tuple[np.ndarray, list[str]]:
    try:
        with open(path, "rb") as fh:
            header_line = fh.readline()
            payload = fh.read()
    except OSError as exc:
        raise UnreadableFile(f"cannot read dataset {path}: {exc}") from exc
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise UnreadableFile(f"dataset {path} has a malformed header") from exc
    if header.get("magic") != DATASET_MAGIC:
        raise UnreadableFile(
            f"dataset {path} magic {header.get('magic')!r} != {DATASET_MAGIC!r}"
        )
    count = int(header["count"])
    shape = (count, int(header["height"]), int(header["width"]), int(header["channels"]))
    expected_bytes = int(np.prod(shape)) * 4
    if len(payload) != expected_bytes:
        raise UnreadableFile(
            f"dataset {path} payload is {len(payload)} bytes, expected {expected_bytes}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
    names = [f"{os.path.basename(path)}[{i}]" for i in range(count)]
    return values, names


def _load_png_dir(path: str) -> tuple[np.ndarray, list[str]]:
    from PIL import Image, UnidentifiedImageError

    names = sorted(n for n in os.listdir(path) if n.lower().endswith(".png"))
    if not names:
        raise DatasetEmpty(f"no .png files in {path}")
    images = []
    shapes = {}
    for name in names:
        full = os.path.join(path, name)
        try:
            with Image.open(full) as img:
                arr = np.asarray(img.convert("RGB"), dtype=np.float64)
        except (OSError, UnidentifiedImageError) as exc:
            raise UnreadableFile(f"cannot read image {full}: {exc}") from exc
        images.append(arr)
        shapes.setdefault(arr.shape, []).append(name)
    if len(shapes) > 1:
        raise ShapeMismatch(f"inconsistent image shapes in {path}: {shapes}")
    return np.stack(images), names


def load_dataset(
    path: str, expected_shape: tuple[int, int, int] | None = None
) -> tuple[np.ndarray, list[str]]:
    """Images plus display names from a PNG directory or a raw stack file."""
    if os.path.isdir(path):
        images, names = _load_png_dir(path)
    elif os.path.exists(path):
        images, names = _load_raw_dataset(path)
    else:
        raise UnreadableFile(f"dataset path {path} does not exist")
    if images.shape[0] == 0:
        raise DatasetEmpty(f"dataset {path} holds no images")
    if expected_shape is not None and tuple(images.shape[1:]) != tuple(expected_shape):
        offenders = ", ".join(names[:5])
        raise ShapeMismatch(
            f"dataset images are {images.shape[1:]}, oracle expects "
            f"{tuple(expected_shape)} (e.g. {offenders})"
        )
    return images, names


def _subsample(
    images: np.ndarray, names: list[str], n_images: int | None, master_seed: int
) -> tuple[np.ndarray, list[str], list[int] | None]:
    if n_images is None or n_images >= len(images):
        return images, names, None
    if n_images < 1:
        raise ConfigError("n_images must be >= 1")
    rng = SplitMix64(derive_seed(master_seed, 0xD5))
    order = list(range(len(images)))
    # Fisher-Yates with the documented stream; first n_images entries win.
    for i in range(len(order) - 1, 0, -1):
        j = rng.next_u64() % (i + 1)
        order[i], order[j] = order[j], order[i]
    picked = sorted(order[:n_images])
    return images[picked], [names[i] for i in picked], picked


# -- sweep ---------------------------------------------------------------------

CSV_FIXED_COLUMNS = ("id", "kind", "sigma", "omega", "lambda", "seed")


def _records_header(oracle_names: list[str]) -> list[str]:
    cols = list(CSV_FIXED_COLUMNS)
    for name in oracle_names:
        cols.append(f"{name}_usens")
        cols.append(f"{name}_uevas")
    return cols


def _format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class SweepResult:
    records: list[dict]
    per_input: list[dict]
    report: dict
    records_path: str
    per_input_path: str
    report_path: str


def _atomic_write(path: str, data: bytes) -> None:
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _PerInputAccumulator:
    """Running per-image sums of gaps/flips over the Gabor set."""

    def __init__(self, n_oracles: int, n_images: int):
        self.sens = np.zeros((n_oracles, n_images), dtype=np.float64)
        self.evas = np.zeros((n_oracles, n_images), dtype=np.float64)
        self.count = 0

    def add(self, contributions: list[tuple[list[float], list[int]]]) -> None:
        for oi, (gaps, flips) in enumerate(contributions):
            self.sens[oi] += np.asarray(gaps)
            self.evas[oi] += np.asarray(flips, dtype=np.float64)
        self.count += 1

    def save(self, path: str) -> None:
        buf = io.BytesIO()
        np.savez(buf, sens=self.sens, evas=self.evas, count=self.count)
        _atomic_write(path, buf.getvalue())

    @classmethod
    def load(cls, path: str, n_oracles: int, n_images: int) -> "_PerInputAccumulator":
        data = np.load(path)
        acc = cls(n_oracles, n_images)
        if data["sens"].shape != acc.sens.shape:
            raise UnreadableFile(f"checkpoint {path} does not match this config")
        acc.sens = data["sens"]
        acc.evas = data["evas"]
        acc.count = int(data["count"])
        return acc


def _read_existing_records(path: str, header: list[str]) -> list[dict]:
    if not os.path.exists(path):
        return []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        return []
    if rows[0] != header:
        raise UnreadableFile(
            f"existing records file {path} has a different column layout; "
            "remove it or use a fresh out_dir"
        )
    records = []
    for expected_id, row in enumerate(rows[1:]):
        rec = dict(zip(header, row))
        if int(rec["id"]) != expected_id:
            raise UnreadableFile(
                f"records file {path} is not an ordered prefix at row {expected_id}"
            )
        records.append(rec)
    return records


def run_sweep(cfg: SweepConfig) -> SweepResult:
    """Execute the sweep protocol; resumable and parallelism-invariant.

    Records land in out_dir/records.csv in id order (Gabor ids first, then
    random-baseline ids), every perturbation is stored under
    out_dir/perturbations/, per-input averages go to out_dir/per_input.csv,
    and the aggregate report to out_dir/report.json.
    """
    os.makedirs(cfg.out_dir, exist_ok=True)
    pert_dir = os.path.join(cfg.out_dir, "perturbations")
    os.makedirs(pert_dir, exist_ok=True)
    records_path = os.path.join(cfg.out_dir, "records.csv")
    per_input_path = os.path.join(cfg.out_dir, "per_input.csv")
    report_path = os.path.join(cfg.out_dir, "report.json")
    checkpoint_path = os.path.join(cfg.out_dir, "per_input_checkpoint.npz")

    oracles = [resolve_oracle(spec.command) for spec in cfg.oracles]
    try:
        return _run_sweep_with_oracles(
            cfg,
            oracles,
            records_path=records_path,
            per_input_path=per_input_path,
            report_path=report_path,
            checkpoint_path=checkpoint_path,
            pert_dir=pert_dir,
        )
    finally:
        for oracle in oracles:
            close = getattr(oracle, "close", None)
            if close is not None:
                close()


def _run_sweep_with_oracles(
    cfg: SweepConfig,
    oracles: list,
    *,
    records_path: str,
    per_input_path: str,
    report_path: str,
    checkpoint_path: str,
    pert_dir: str,
) -> SweepResult:
    descriptor = oracles[0].descriptor
    shape = descriptor.input_shape
    for spec, oracle in zip(cfg.oracles, oracles):
        if oracle.descriptor.input_shape != shape:
            raise ConfigError(
                f"oracle {spec.name!r} input shape {oracle.descriptor.input_shape} "
                f"differs from {cfg.oracles[0].name!r} {shape}; sweeps share one dataset"
            )
    height, width = shape[0], shape[1]

    images, names = load_dataset(cfg.dataset_path, expected_shape=shape)
    images, names, picked = _subsample(images, names, cfg.n_images, cfg.master_seed)

    n_gabor = cfg.n_perturbations
    n_random = cfg.n_perturbations if cfg.include_random_baseline else 0
    total = n_gabor + n_random
    oracle_names = [spec.name for spec in cfg.oracles]
    header = _records_header(oracle_names)

    existing = _read_existing_records(records_path, header)
    done = len(existing)
    if done > total:
        raise UnreadableFile(
            f"records file {records_path} has {done} rows but config wants {total}"
        )

    if done and os.path.exists(checkpoint_path):
        accumulator = _PerInputAccumulator.load(checkpoint_path, len(oracles), len(images))
    else:
        accumulator = _PerInputAccumulator(len(oracles), len(images))
        if done:
            # Records exist but the per-input checkpoint is gone; rebuild it
            # from the stored perturbation files (deterministic, oracle-priced).
            for rec in existing:
                if rec["kind"] != "gabor":
                    continue
                pert = read_gnp(_pert_path(pert_dir, int(rec["id"])))
                accumulator.add(
                    [_evaluate(oracle, images, pert)[2] for oracle in oracles]
                )

    clean_predictions = [predict_batch(oracle, images) for oracle in oracles]

    # Connections admit one in-flight request, so each worker thread talks
    # through its own clone. Clones are closed before returning.
    local = threading.local()
    clones: list = []
    clones_lock = threading.Lock()

    def worker_oracles() -> list:
        mine = getattr(local, "oracles", None)
        if mine is None:
            mine = []
            for oracle in oracles:
                clone = oracle.clone()
                mine.append(clone)
                if clone is not oracle:
                    with clones_lock:
                        clones.append(clone)
            local.oracles = mine
        return mine

    def build_perturbation(pert_id: int) -> PerturbationField:
        if pert_id < n_gabor:
            return gabor_perturbation_for_id(cfg, pert_id, width, height)
        return random_perturbation_for_id(cfg, pert_id, width, height)

    def work(pert_id: int):
        pert = build_perturbation(pert_id)
        per_oracle = []
        for oracle, clean in zip(worker_oracles(), clean_predictions):
            adv = predict_batch(oracle, apply_batch(images, pert))
            gaps = prediction_gaps(clean, adv)
            flips = flip_flags(clean, adv)
            per_oracle.append((gaps, flips))
        return pert, per_oracle

    lock = threading.Lock()
    state = {"next": done, "buffer": {}, "records": list(existing)}

    def flush_ready(records_fh) -> None:
        wrote = False
        while state["next"] in state["buffer"]:
            pert_id = state["next"]
            pert, per_oracle = state["buffer"].pop(pert_id)
            write_gnp(_pert_path(pert_dir, pert_id), pert)
            row = _record_row(pert_id, n_gabor, pert, per_oracle, oracle_names)
            records_fh.write(
                ",".join(_format_cell(row[col]) for col in header) + "\n"
            )
            state["records"].append({k: _format_cell(v) for k, v in row.items()})
            if pert_id < n_gabor:
                accumulator.add(per_oracle)
            state["next"] += 1
            wrote = True
        if wrote:
            records_fh.flush()
            accumulator.save(checkpoint_path)

    failure: list[BaseException] = []
    mode = "a" if done else "w"
    try:
        with open(records_path, mode, encoding="utf-8", newline="") as records_fh:
            if not done:
                records_fh.write(",".join(header) + "\n")
                records_fh.flush()
            if done < total:
                with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
                    def task(pert_id: int) -> None:
                        if failure:
                            return
                        try:
                            result = work(pert_id)
                        except BaseException as exc:
                            with lock:
                                if not failure:
                                    failure.append(exc)
                            return
                        with lock:
                            state["buffer"][pert_id] = result
                            flush_ready(records_fh)

                    list(pool.map(task, range(done, total)))
            if failure:
                raise failure[0]
    finally:
        for clone in clones:
            clone.close()

    records = state["records"]
    per_input = _per_input_rows(names, oracle_names, accumulator)
    _write_per_input(per_input_path, per_input, oracle_names)
    report = build_report(
        records,
        cfg,
        oracle_names=oracle_names,
        subsample_indices=picked,
        n_images_used=len(images),
    )
    _atomic_write(
        report_path,
        json.dumps(report, indent=2, sort_keys=True).encode("utf-8") + b"\n",
    )
    if os.path.exists(checkpoint_path):
        os.unlink(checkpoint_path)
    return SweepResult(
        records=records,
        per_input=per_input,
        report=report,
        records_path=records_path,
        per_input_path=per_input_path,
        report_path=report_path,
    )


def _pert_path(pert_dir: str, pert_id: int) -> str:
    return os.path.join(pert_dir, f"pert_{pert_id:06d}.gnp")


def _evaluate(oracle, images, pert) -> tuple[float, float, tuple[list, list]]:
    clean = predict_batch(oracle, images)
    adv = predict_batch(oracle, apply_batch(images, pert))
    gaps = prediction_gaps(clean, adv)
    flips = flip_flags(clean, adv)
    usens = _index_ordered_mean(gaps)
    uevas = _index_ordered_mean([float(f) for f in flips])
    return usens, uevas, (gaps, flips)


def _record_row(
    pert_id: int,
    n_gabor: int,
    pert: PerturbationField,
    per_oracle: list[tuple[list[float], list[int]]],
    oracle_names: list[str],
) -> dict:
    if pert_id < n_gabor:
        row = {
            "id": pert_id,
            "kind": "gabor",
            "sigma": float(pert.provenance["sigma"]),
            "omega": float(pert.provenance["omega"]),
            "lambda": float(pert.provenance["lambda"]),
            "seed": pert.seed,
        }
    else:
        row = {
            "id": pert_id,
            "kind": "random",
            "sigma": "",
            "omega": "",
            "lambda": "",
            "seed": pert.seed,
        }
    for name, (gaps, flips) in zip(oracle_names, per_oracle):
        row[f"{name}_usens"] = _index_ordered_mean(gaps)
        row[f"{name}_uevas"] = _index_ordered_mean([float(f) for f in flips])
    return row


def _per_input_rows(
    names: list[str], oracle_names: list[str], acc: _PerInputAccumulator
) -> list[dict]:
    rows = []
    for i, name in enumerate(names):
        row = {"image_index": i, "filename": name}
        for oi, oracle_name in enumerate(oracle_names):
            if acc.count:
                row[f"{oracle_name}_asens"] = float(acc.sens[oi, i]) / acc.count
                row[f"{oracle_name}_aevas"] = float(acc.evas[oi, i]) / acc.count
            else:
                row[f"{oracle_name}_asens"] = 0.0
                row[f"{oracle_name}_aevas"] = 0.0
        rows.append(row)
    return rows


def _write_per_input(path: str, rows: list[dict], oracle_names: list[str]) -> None:
    cols = ["image_index", "filename"]
    for name in oracle_names:
        cols.append(f"{name}_asens")
        cols.append(f"{name}_aevas")
    out = io.StringIO()
    out.write(",".join(cols) + "\n")
    for row in rows:
        out.write(",".join(_format_cell(row[c]) for c in cols) + "\n")
    _atomic_write(path, out.getvalue().encode("utf-8"))


# -- analysis ------------------------------------------------------------------


def read_records(path: str) -> list[dict]:
    """Rows of a records CSV written by run_sweep (or shaped like one)."""
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames
            if header is None:
                raise UnreadableFile(f"records file {path} is empty")
            missing = [c for c in CSV_FIXED_COLUMNS if c not in header]
            if missing:
                raise UnreadableFile(f"records file {path} lacks columns {missing}")
            records = list(reader)
    except OSError as exc:
        raise UnreadableFile(f"cannot read records {path}: {exc}") from exc
    if not records:
        raise DatasetEmpty(f"records file {path} has no rows")
    return records


def _record_float(record: dict, column: str) -> float:
    return float(record[column])


def transfer_report(records: list[dict], source_oracle: str, k: int = TRANSFER_TOP_K) -> list[dict]:
    """Top-k records by the source oracle's universal evasion, ties by id."""
    column = f"{source_oracle}_uevas"
    if records and column not in records[0]:
        raise ConfigError(f"records lack column {column!r}")
    ranked = sorted(
        records, key=lambda r: (-_record_float(r, column), int(r["id"]))
    )
    return ranked[:k]


def parameter_group_means(
    records: list[dict],
    param: str,
    bins: int = GROUP_MEAN_BINS,
    value_range: tuple[float, float] | None = None,
    evasion_column: str | None = None,
) -> dict:
    """Mean universal evasion per equal-width parameter bin (Gabor records).

    Empty bins are flagged with a null mean. The bin range defaults to the
    observed min/max of the parameter.
    """
    if param not in ("sigma", "omega", "lambda"):
        raise ConfigError(f"param must be sigma, omega, or lambda, got {param!r}")
    if bins < 1:
        raise ConfigError("bins must be >= 1")
    gabor = [r for r in records if r["kind"] == "gabor"]
    if not gabor:
        raise DatasetEmpty("no gabor records to group")
    if evasion_column is None:
        evasion_column = _first_evasion_column(gabor[0])
    values = [_record_float(r, param) for r in gabor]
    evasions = [_record_float(r, evasion_column) for r in gabor]
    lo, hi = value_range if value_range is not None else (min(values), max(values))
    if not hi > lo:
        hi = lo + 1.0
    width = (hi - lo) / bins
    sums = [0.0] * bins
    counts = [0] * bins
    for v, e in zip(values, evasions):
        idx = min(max(int((v - lo) / width), 0), bins - 1)
        sums[idx] += e
        counts[idx] += 1
    edges = [lo + i * width for i in range(bins + 1)]
    means = [sums[i] / counts[i] if counts[i] else None for i in range(bins)]
    return {
        "param": param,
        "evasion_column": evasion_column,
        "edges": edges,
        "means": means,
        "counts": counts,
    }


def _first_evasion_column(record: dict) -> str:
    for key in record:
        if key.endswith("_uevas"):
            return key
    raise ConfigError("records have no *_uevas column")


def build_report(
    records: list[dict],
    cfg: SweepConfig | None,
    *,
    oracle_names: list[str] | None = None,
    subsample_indices: list[int] | None = None,
    n_images_used: int | None = None,
) -> dict:
    """Aggregate quartiles, histograms, correlations, group means, transfer.

    The generated_at stamp is metadata only and is excluded from
    byte-identity comparisons between reruns.
    """
    if not records:
        raise DatasetEmpty("cannot report on zero records")
    if oracle_names is None:
        oracle_names = sorted(
            {key[: -len("_usens")] for key in records[0] if key.endswith("_usens")}
        )
    gabor = [r for r in records if r["kind"] == "gabor"]
    random_recs = [r for r in records if r["kind"] == "random"]

    tables = {}
    for name in oracle_names:
        tables[name] = {}
        for kind, rows in (("gabor", gabor), ("random", random_recs)):
            if not rows:
                continue
            entry = {}
            for metric, column in (
                ("universal_sensitivity", f"{name}_usens"),
                ("universal_evasion", f"{name}_uevas"),
            ):
                column_values = [_record_float(r, column) for r in rows]
                q1, q2, q3 = quartiles(column_values)
                # Histograms are defined on the canonical [0, 1] metric
                # range; hand-fed record files may hold other scales.
                in_range = all(0.0 <= v <= 1.0 for v in column_values)
                entry[metric] = {
                    "q1": q1,
                    "q2": q2,
                    "q3": q3,
                    "n": len(column_values),
                    "histogram": histogram(column_values) if in_range else None,
                }
            tables[name][kind] = entry

    correlation = None
    if gabor:
        columns = {
            "sigma": [_record_float(r, "sigma") for r in gabor],
            "omega": [_record_float(r, "omega") for r in gabor],
            "lambda": [_record_float(r, "lambda") for r in gabor],
        }
        for name in oracle_names:
            columns[f"{name}_usens"] = [_record_float(r, f"{name}_usens") for r in gabor]
            columns[f"{name}_uevas"] = [_record_float(r, f"{name}_uevas") for r in gabor]
        if len(gabor) >= 2:
            result = pearson_correlation_matrix(columns)
            matrix = [
                [None if not result.defined[i][j] else result.matrix[i][j] for j in range(len(result.labels))]
                for i in range(len(result.labels))
            ]
            correlation = {"labels": list(result.labels), "matrix": matrix}

    group_means = {}
    if gabor:
        for param in ("sigma", "omega", "lambda"):
            value_range = cfg.ranges[param] if cfg is not None else None
            group_means[param] = {
                name: parameter_group_means(
                    gabor,
                    param,
                    value_range=value_range,
                    evasion_column=f"{name}_uevas",
                )
                for name in oracle_names
            }

    transfer = {
        name: transfer_report(records, name) for name in oracle_names
    }

    report = {
        "config": cfg.to_jsonable() if cfg is not None else None,
        "metadata": {
            "generated_at": datetime.now(timezone.utc).isoformat(),
            "quantile_method": "linear",
            "subsample_indices": subsample_indices,
            "n_images_used": n_images_used,
        },
        "oracles": oracle_names,
        "tables": tables,
        "correlation": correlation,
        "parameter_group_means": group_means,
        "transfer": transfer,
    }
    return report
