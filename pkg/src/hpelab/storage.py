"""On-disk formats: field snapshots, trajectory directories, checkpoints.

Everything numeric is written little-endian float64 (complex values as
interleaved real/imaginary pairs), so round trips are bitwise. Field files
carry a 4-byte magic, the grid extents, and a dtype code, with a JSON
sidecar next to them for metadata that does not affect decoding. Model
checkpoints put a JSON header (architecture, physics, tensor manifest) in
front of the raw tensor payloads.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .fields import ComplexField, GridSpec, RealField
from .simulate import PhysParams, SystemKind, Trajectory

FIELD_MAGIC = b"FLD1"
CHECKPOINT_MAGIC = b"HPEW"

_DTYPE_REAL = 0
_DTYPE_COMPLEX = 1


class StorageError(Exception):
    """Unreadable or inconsistent file content."""


# ----- single-field files -----


def write_field(path, field, meta: dict | None = None) -> Path:
    """Binary field plus a ``<path>.json`` sidecar; returns the data path."""
    path = Path(path)
    values = field.values
    if isinstance(field, ComplexField):
        code, payload = _DTYPE_COMPLEX, values.astype("<c16").tobytes(order="C")
    elif isinstance(field, RealField):
        code, payload = _DTYPE_REAL, values.astype("<f8").tobytes(order="C")
    else:
        raise StorageError(f"cannot serialize {type(field).__name__}")
    grid = field.grid
    header = FIELD_MAGIC + struct.pack("<IIB", grid.nx, grid.ny, code)
    path.write_bytes(header + payload)
    sidecar = {"dx": grid.dx, "dy": grid.dy}
    sidecar.update(meta or {})
    Path(str(path) + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n"
    )
    return path


def read_field(path) -> tuple[RealField | ComplexField, dict]:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 13 or blob[:4] != FIELD_MAGIC:
        raise StorageError(f"{path} is not a field file (bad magic)")
    nx, ny, code = struct.unpack("<IIB", blob[4:13])
    if code == _DTYPE_REAL:
        dtype, cls = np.dtype("<f8"), RealField
    elif code == _DTYPE_COMPLEX:
        dtype, cls = np.dtype("<c16"), ComplexField
    else:
        raise StorageError(f"{path}: unknown dtype code {code}")
    sidecar_path = Path(str(path) + ".json")
    meta = json.loads(sidecar_path.read_text()) if sidecar_path.exists() else {}
    try:
        grid = GridSpec(nx, ny, dx=meta.get("dx", 1.0), dy=meta.get("dy", 1.0))
    except ValueError as exc:
        raise StorageError(f"{path}: {exc}") from exc
    expect = nx * ny * dtype.itemsize
    payload = blob[13:]
    if len(payload) != expect:
        raise StorageError(
            f"{path}: payload holds {len(payload)} bytes, expected {expect}"
        )
    values = np.frombuffer(payload, dtype=dtype).reshape(nx, ny)
    return cls(grid, values.astype(dtype.base, copy=True)), meta


# ----- trajectory directories -----


def write_trajectory(dirpath, traj: Trajectory) -> Path:
    """One field file per snapshot plus a manifest tying them together."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    files = []
    for i, snap in enumerate(traj.snapshots):
        name = f"{i:05d}.fld"
        write_field(dirpath / name, snap, {"time": float(traj.times[i])})
        files.append(name)
    manifest = {
        "format": "trajectory",
        "system": traj.system.value,
        "grid": {"nx": traj.grid.nx, "ny": traj.grid.ny,
                 "dx": traj.grid.dx, "dy": traj.grid.dy},
        "times": [float(t) for t in traj.times],
        "params": dataclasses.asdict(traj.params) if traj.params else None,
        "seed": traj.seed,
        "noise_sigma": traj.noise_sigma,
        "files": files,
    }
    (dirpath / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    return dirpath


def read_trajectory(dirpath) -> Trajectory:
    dirpath = Path(dirpath)
    manifest_path = dirpath / "manifest.json"
    if not manifest_path.exists():
        raise StorageError(f"{dirpath} has no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != "trajectory":
        raise StorageError(f"{dirpath}: unrecognized manifest format")
    snapshots = [read_field(dirpath / name)[0] for name in manifest["files"]]
    params = PhysParams(**manifest["params"]) if manifest["params"] else None
    return Trajectory(
        system=SystemKind(manifest["system"]),
        grid=snapshots[0].grid,
        times=np.asarray(manifest["times"], dtype=np.float64),
        snapshots=snapshots,
        params=params,
        seed=manifest.get("seed"),
        noise_sigma=manifest.get("noise_sigma", 0.0),
    )


# ----- model checkpoints -----


def _config_to_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    d["patch"] = list(d["patch"])
    return d


def _config_from_dict(d: dict):
    from .afno import AFNOConfig

    d = dict(d)
    d["patch"] = tuple(d["patch"])
    return AFNOConfig(**d)


def save_checkpoint(path, model) -> Path:
    """Header (JSON) + raw little-endian tensor payloads; bitwise stable."""
    from .hpe import HPEModelParams

    if not isinstance(model, HPEModelParams):
        raise StorageError("only scenario models can be checkpointed")
    path = Path(path)
    named = model.named_tensors()
    manifest = []
    payloads = []
    for name, t in named:
        if t.is_complex:
            dtype = "c16"
            payloads.append(t.data.astype("<c16").tobytes(order="C"))
        else:
            dtype = "f8"
            payloads.append(t.data.astype("<f8").tobytes(order="C"))
        manifest.append({"name": name, "shape": list(t.data.shape), "dtype": dtype})
    header = {
        "version": 1,
        "scenario": model.scenario.value,
        "system": model.system.value,
        "dt": model.dt,
        "seed": model.seed,
        "grid": {"nx": model.grid.nx, "ny": model.grid.ny,
                 "dx": model.grid.dx, "dy": model.grid.dy},
        "phys": dataclasses.asdict(model.phys),
        "kernel": dataclasses.asdict(model.kernel),
        "level1": _config_to_dict(model.level1.config) if model.level1 else None,
        "level2": _config_to_dict(model.level2.config) if model.level2 else None,
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in payloads:
            fh.write(blob)
    return path


def load_checkpoint(path):
    """Rebuild the scenario model; tensors come back bitwise identical."""
    from .afno import init_afno_params
    from .hpe import HPEModelParams, KernelMapConfig, ScenarioKind

    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 8 or blob[:4] != CHECKPOINT_MAGIC:
        raise StorageError(f"{path} is not a checkpoint (bad magic)")
    (header_len,) = struct.unpack("<I", blob[4:8])
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise StorageError(f"{path}: unreadable header") from exc
    if header.get("version") != 1:
        raise StorageError(f"{path}: unsupported version {header.get('version')}")

    grid = GridSpec(**header["grid"])
    offset = 8 + header_len
    arrays = {}
    for entry in header["tensors"]:
        dtype = np.dtype("<" + entry["dtype"])
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = n * dtype.itemsize
        chunk = blob[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise StorageError(f"{path}: truncated payload at {entry['name']}")
        arrays[entry["name"]] = (
            np.frombuffer(chunk, dtype=dtype)
            .reshape(entry["shape"])
            .astype(dtype.base, copy=True)
        )
        offset += nbytes
    if offset != len(blob):
        raise StorageError(f"{path}: {len(blob) - offset} trailing bytes")

    def restore(cfg_dict, prefix):
        if cfg_dict is None:
            return None
        params = init_afno_params(_config_from_dict(cfg_dict), grid, seed=0)
        for name, t in params.named_tensors():
            key = f"{prefix}.{name}"
            if key not in arrays:
                raise StorageError(f"{path}: tensor {key} missing")
            if tuple(arrays[key].shape) != t.data.shape:
                raise StorageError(f"{path}: tensor {key} has wrong shape")
            t.data = arrays[key]
        return params

    model = HPEModelParams(
        scenario=ScenarioKind(header["scenario"]),
        system=SystemKind(header["system"]),
        grid=grid,
        dt=header["dt"],
        phys=PhysParams(**header["phys"]),
        kernel=KernelMapConfig(**header["kernel"]),
        level1=restore(header["level1"], "level1"),
        level2=restore(header["level2"], "level2"),
        seed=header.get("seed", 0),
    )
    return model


# ----- tabular and image output -----


def format_float(x: float) -> str:
    """Shortest decimal that parses back to the same float64."""
    return f"{float(x):.17g}"


def write_csv(path, header: list[str], rows) -> Path:
    """Comma-separated, LF newlines, floats at full precision."""
    path = Path(path)
    lines = [",".join(header)]
    for row in rows:
        cells = [
            format_float(v) if isinstance(v, (int, float, np.floating)) else str(v)
            for v in row
        ]
        if len(cells) != len(header):
            raise StorageError("row width does not match header")
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n", newline="\n")
    return path


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise StorageError(f"{path} is empty")
    header = lines[0].split(",")
    return header, [line.split(",") for line in lines[1:] if line]


def render_pgm(path, field: RealField, lo: float | None = None,
               hi: float | None = None) -> Path:
    """16-bit grayscale PGM (P5, big-endian samples per the format spec)."""
    if not isinstance(field, RealField):
        raise StorageError("render a real field (take the modulus first)")
    path = Path(path)
    values = field.values
    lo = float(np.min(values)) if lo is None else float(lo)
    hi = float(np.max(values)) if hi is None else float(hi)
    if hi - lo > 1e-300:
        scaled = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    else:
        scaled = np.zeros_like(values)
    pixels = np.round(scaled * 65535.0).astype(">u2")
    # image rows are x slices: width = ny, height = nx
    header = f"P5\n{field.grid.ny} {field.grid.nx}\n65535\n".encode("ascii")
    path.write_bytes(header + pixels.tobytes(order="C"))
    return path


def unrender_pgm(path) -> np.ndarray:
    """Read back a P5/65535 file as the raw uint16 lattice (nx, ny)."""
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5":
        raise StorageError(f"{path} is not a binary PGM")
    width, height = (int(v) for v in parts[1].split())
    if parts[2] != b"65535":
        raise StorageError(f"{path}: expected 16-bit samples")
    data = np.frombuffer(parts[3], dtype=">u2")
    if data.size != width * height:
        raise StorageError(f"{path}: pixel count mismatch")
    return data.reshape(height, width).astype(np.uint16)
