"""Binary artifacts: magic, u64 header length, JSON header, little-endian float32 blob.

The header records every array's offset and shape, the SHA-256 of the blob
and the hash of the config that produced it. The creation time lives in the
header only, so reruns give byte-identical blobs.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import time
from pathlib import Path

import numpy as np

MAGIC = b"VDART\x00\x01\n"


class ArtifactError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def atomic_write(path: str | os.PathLike, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix="." + path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_artifact(path, kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None,
                   config: dict | None = None) -> Path:
    parts, index, off = [], {}, 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype="<f4")
        b = a.tobytes()
        index[name] = {"offset": off, "shape": list(a.shape)}
        parts.append(b)
        off += len(b)
    blob = b"".join(parts)
    header = {
        "kind": kind,
        "arrays": index,
        "payload_sha256": hashlib.sha256(blob).hexdigest(),
        "config": config or {},
        "config_hash": config_hash(config or {}),
        "meta": meta or {},
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    h = canonical_json(header).encode()
    return atomic_write(path, MAGIC + struct.pack("<Q", len(h)) + h + blob)


def read_artifact(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise ArtifactError(f"missing artifact {path}") from None
    if raw[:len(MAGIC)] != MAGIC:
        raise ArtifactError(f"{path} is not an artifact file")
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(raw[start:start + hlen])
    except ValueError as e:
        raise ArtifactError(f"{path}: corrupt header") from e
    blob = raw[start + hlen:]
    if hashlib.sha256(blob).hexdigest() != header.get("payload_sha256"):
        raise ArtifactError(f"{path}: payload checksum mismatch")
    if kind is not None and header.get("kind") != kind:
        raise ArtifactError(f"{path} holds a {header.get('kind')!r}, expected {kind!r}")
    arrays = {}
    for name, info in header["arrays"].items():
        n = int(np.prod(info["shape"])) if info["shape"] else 1
        end = info["offset"] + 4 * n
        if end > len(blob):
            raise ArtifactError(f"{path}: array {name!r} runs past the payload")
        arrays[name] = np.frombuffer(blob[info["offset"]:end], dtype="<f4").reshape(info["shape"]).astype(np.float32)
    return header, arrays


def payload_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC):len(MAGIC) + 8])
    return raw[len(MAGIC) + 8 + hlen:]


def write_json(path, obj) -> Path:
    return atomic_write(path, (json.dumps(obj, sort_keys=True, indent=1, default=_jsonable) + "\n").encode())


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ArtifactError(f"missing artifact {path}") from None
    except ValueError as e:
        raise ArtifactError(f"{path}: corrupt JSON") from e


# ------------------------------------------------------------- typed I/O


def save_model(path, model, heads: dict | None = None, meta: dict | None = None, config: dict | None = None):
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    arrays.update({f"head/{k}": v for k, v in (heads or {}).items()})
    m = {"model_config": model.cfg.to_dict(), "model_id": model.model_id, **(meta or {})}
    return write_artifact(path, "model", arrays, m, config)


def load_model(path):
    from .models.config import ModelConfig
    from .models.vit import ViT

    header, arrays = read_artifact(path, "model")
    cfg = ModelConfig.from_dict(header["meta"]["model_config"])
    params = {k[6:]: v for k, v in arrays.items() if k.startswith("param/")}
    heads = {k[5:]: v for k, v in arrays.items() if k.startswith("head/")}
    model = ViT(cfg, params)
    missing = set(ViT(cfg).params) - set(params)
    if missing:
        raise ArtifactError(f"{path}: missing parameters {sorted(missing)[:3]}")
    return model, heads, header


def save_teacher(path, teacher, config: dict | None = None):
    arrays = {f"param/{k}": v for k, v in teacher.model.params.items()}
    arrays.update({f"proto/{a}": p for a, p in teacher.prototypes.items()})
    meta = {"model_config": teacher.model.cfg.to_dict(), "names": {a: list(v) for a, v in teacher.names.items()}}
    return write_artifact(path, "teacher", arrays, meta, config)


def load_teacher(path):
    from .models.config import ModelConfig
    from .models.teacher import TeacherEncoder
    from .models.vit import ViT

    header, arrays = read_artifact(path, "teacher")
    cfg = ModelConfig.from_dict(header["meta"]["model_config"])
    params = {k[6:]: v for k, v in arrays.items() if k.startswith("param/")}
    protos = {k[6:]: v for k, v in arrays.items() if k.startswith("proto/")}
    norms = np.concatenate([np.linalg.norm(p, axis=1) for p in protos.values()])
    if not np.allclose(norms, 1.0, atol=1e-5):
        raise ArtifactError(f"{path}: prototypes are not unit-normalized")
    names = {a: tuple(v) for a, v in header["meta"]["names"].items()}
    return TeacherEncoder(ViT(cfg, params), protos, names), header


def save_decomposition(path, dec, config: dict | None = None):
    keys = [{"component": str(k.component), "token": k.token, "grid": k.grid, "cls": k.cls} for k in dec.keys]
    meta = {"keys": keys, "model_id": dec.model_id, "granularity": dec.granularity,
            "n_layers_decomposed": dec.n_layers_decomposed,
            "residual": float(dec.residual().max()) if dec.n_images else 0.0, **{k: v for k, v in dec.meta.items()
                                                                                 if k != "residual"}}
    return write_artifact(path, "decomposition", {"vectors": dec.vectors, "z": dec.z}, meta, config)


def load_decomposition(path, tol: float = 1e-5):
    """Load and re-verify the reconstruction identity (raises ReconstructionError)."""
    from .decompose import ComponentId, Decomposition, Key

    header, arrays = read_artifact(path, "decomposition")
    m = header["meta"]
    keys = [Key(ComponentId.parse(k["component"]), k["token"], k["grid"], k["cls"]) for k in m["keys"]]
    if arrays["vectors"].shape[1] != len(keys):
        raise ArtifactError(f"{path}: {len(keys)} keys for {arrays['vectors'].shape[1]} contributions")
    extra = {k: v for k, v in m.items() if k not in ("keys", "model_id", "granularity", "n_layers_decomposed")}
    dec = Decomposition(keys, arrays["vectors"], arrays["z"], m["model_id"], m["granularity"],
                        m["n_layers_decomposed"], extra)
    dec.meta["residual"] = dec.verify(tol)
    return dec, header


def save_aligner(path, al, config: dict | None = None):
    meta = al.to_header()
    return write_artifact(path, "aligner", {"maps": al.maps}, meta, config)


def load_aligner(path):
    from .align import Aligner

    header, arrays = read_artifact(path, "aligner")
    m = header["meta"]
    maps = arrays["maps"]
    if maps.ndim != 3 or maps.shape[0] != len(m["components"]) or maps.shape[1:] != (m["d_ref"], m["d"]):
        raise ArtifactError(f"{path}: map shape {maps.shape} disagrees with the header")
    if not np.all(np.isfinite(maps)):
        raise ArtifactError(f"{path}: non-finite map entries")
    return Aligner(maps, list(m["components"]), m["lam"], m["seed"], m["tied"], m["log"]), header


def save_scores(path, S, config: dict | None = None):
    d = json.loads(S.to_json())
    d["config"] = config or {}
    d["config_hash"] = config_hash(config or {})
    return write_json(path, d)


def load_scores(path):
    from .attribution import ScoreMatrix

    d = read_json(path)
    S = ScoreMatrix.from_json(json.dumps(d))
    if not np.all(np.isfinite(S.scores)) or np.abs(S.scores).max(initial=0) > 1 + 1e-6:
        raise ArtifactError(f"{path}: scores outside [-1, 1]")
    return S, d
