"""Datasets and on-disk formats.

Checkpoint and key files share one container layout::

    AUTHNET-<KIND> <version>\\n
    key=value\\n            (manifest, UTF-8, sorted keys)
    ...
    manifest_sha256=<hex>\\n   (hash of the manifest lines above it)
    \\n
    <u64 little-endian length><length bytes of little-endian float64>  (repeated)

The manifest carries ``payload_sha256`` over the blob section, so tampering
with either part is detected on load.
"""

from __future__ import annotations

import csv
import gzip
import hashlib
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
FORMAT_VERSION = 1


class DataFormatError(ValueError):
    pass


class BadMagicError(DataFormatError):
    pass


class TruncatedError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


class VersionMismatchError(DataFormatError):
    pass


class HashMismatchError(DataFormatError):
    pass


class ConstraintViolationError(DataFormatError):
    pass


@dataclass
class IdxDataset:
    images: np.ndarray  # [N, C, H, W] in [0, 1]
    labels: np.ndarray  # [N] int64

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images vs {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "IdxDataset":
        return IdxDataset(self.images[idx], self.labels[idx])


def _read_bytes(path) -> bytes:
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def _parse_idx(data: bytes, expected_magic: int, path) -> np.ndarray:
    if len(data) < 4:
        raise TruncatedError(f"{path}: file shorter than the IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise TruncatedError(f"{path}: truncated dimension list")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims))
    if len(data) - header < count:
        raise TruncatedError(f"{path}: payload has {len(data) - header} bytes, expected {count}")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> IdxDataset:
    """Parse an IDX image/label pair (optionally gzip-compressed)."""
    raw = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, labels_path)
    if raw.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{raw.shape[0]} images but {labels.shape[0]} labels")
    images = raw.astype(np.float64)[:, None, :, :] / 255.0
    return IdxDataset(images, labels.astype(np.int64))


def write_idx(images_path, labels_path, images_u8: np.ndarray, labels: np.ndarray):
    """Write uint8 images [N, H, W] and labels [N] as IDX (used for fixtures)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I", IMAGE_MAGIC) + struct.pack(">3I", *images_u8.shape))
        f.write(images_u8.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def load_mnist(data_dir, split: str = "train") -> IdxDataset:
    prefix = "train" if split == "train" else "t10k"
    d = Path(data_dir)
    paths = []
    for kind in ("images-idx3-ubyte", "labels-idx1-ubyte"):
        for name in (f"{prefix}-{kind}", f"{prefix}-{kind}.gz"):
            if (d / name).exists():
                paths.append(d / name)
                break
        else:
            raise FileNotFoundError(f"missing {prefix}-{kind}[.gz] in {d}")
    return load_idx(*paths)


def gen_synthetic(k: int, n_per_class: int, shape=(1, 12, 12), separation: float = 1.0,
                  seed: int = 0) -> IdxDataset:
    """Class-conditional Gaussian blob images.

    Each class owns a blob centre; an image is a Gaussian bump placed at that
    centre (scaled by ``separation``) plus pixel noise, clipped to [0, 1].
    With separation 0 every class draws from the same distribution.
    """
    if k < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    angles = 2 * np.pi * np.arange(k) / k
    cy = (h - 1) / 2 + 0.3 * h * np.sin(angles)
    cx = (w - 1) / 2 + 0.3 * w * np.cos(angles)
    images, labels = [], []
    for cls in range(k):
        bump = np.exp(-((yy - cy[cls]) ** 2 + (xx - cx[cls]) ** 2) / (2 * (0.12 * h) ** 2))
        base = 0.3 + separation * 0.6 * (bump - bump.mean())
        noise = rng.normal(0.0, 0.15, size=(n_per_class, c, h, w))
        images.append(np.clip(base[None, None] + noise, 0.0, 1.0))
        labels.append(np.full(n_per_class, cls))
    images = np.concatenate(images)
    labels = np.concatenate(labels).astype(np.int64)
    order = rng.permutation(len(labels))
    return IdxDataset(images[order], labels[order])


# --- containers -------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_container(path, kind: str, manifest: dict, blobs: list[np.ndarray]):
    payload = io.BytesIO()
    for blob in blobs:
        raw = np.ascontiguousarray(blob, dtype="<f8").tobytes()
        payload.write(struct.pack("<Q", len(raw)))
        payload.write(raw)
    payload = payload.getvalue()
    fields = dict(manifest)
    fields["format_version"] = FORMAT_VERSION
    fields["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    lines = [f"AUTHNET-{kind} {FORMAT_VERSION}"]
    lines += [f"{key}={_fmt(fields[key])}" for key in sorted(fields)]
    body = "\n".join(lines) + "\n"
    body += f"manifest_sha256={hashlib.sha256(body.encode()).hexdigest()}\n\n"
    Path(path).write_bytes(body.encode("utf-8") + payload)


def read_container(path, kind: str) -> tuple[dict, list[np.ndarray]]:
    data = Path(path).read_bytes()
    split = data.find(b"\n\n")
    if split < 0:
        raise DataFormatError(f"{path}: missing manifest terminator")
    text = data[:split + 1].decode("utf-8")
    payload = data[split + 2:]
    lines = text.splitlines()
    head = lines[0].split()
    if len(head) != 2 or head[0] != f"AUTHNET-{kind}":
        raise BadMagicError(f"{path}: not an AUTHNET-{kind} file")
    if int(head[1]) != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {head[1]}, expected {FORMAT_VERSION}")
    if not lines[-1].startswith("manifest_sha256="):
        raise DataFormatError(f"{path}: missing manifest hash")
    body = "\n".join(lines[:-1]) + "\n"
    if hashlib.sha256(body.encode()).hexdigest() != lines[-1].split("=", 1)[1]:
        raise HashMismatchError(f"{path}: manifest hash mismatch")
    manifest = dict(line.split("=", 1) for line in lines[1:-1])
    if hashlib.sha256(payload).hexdigest() != manifest.get("payload_sha256"):
        raise HashMismatchError(f"{path}: payload hash mismatch")
    blobs, pos = [], 0
    while pos < len(payload):
        if pos + 8 > len(payload):
            raise TruncatedError(f"{path}: truncated blob header")
        (n,) = struct.unpack("<Q", payload[pos:pos + 8])
        pos += 8
        if pos + n > len(payload) or n % 8:
            raise TruncatedError(f"{path}: truncated blob")
        blobs.append(np.frombuffer(payload[pos:pos + n], dtype="<f8").astype(np.float64))
        pos += n
    return manifest, blobs


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t != "")


def save_checkpoint(path, model, seg_index: int | None = None, seed: int | None = None,
                    extra: dict | None = None):
    manifest = {
        "arch": model.arch,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "stages": list(model.stages),
    }
    if seg_index is not None:
        manifest["seg_index"] = seg_index
    if seed is not None:
        manifest["seed"] = seed
    manifest.update(extra or {})
    write_container(path, "CKPT", manifest, model.params())


def load_checkpoint(path):
    """Returns ``(model, manifest)``; parameters are restored bit-exactly."""
    from authnet.nncore import build_model

    manifest, blobs = read_container(path, "CKPT")
    model = build_model(manifest["arch"], seed=None, input_shape=_ints(manifest["input_shape"]))
    model.stages = _ints(manifest["stages"])
    params = model.params()
    if len(params) != len(blobs):
        raise DataFormatError(f"{path}: {len(blobs)} blobs for {len(params)} parameters")
    for p, b in zip(params, blobs):
        if p.size != b.size:
            raise DataFormatError(f"{path}: blob of size {b.size} for parameter of shape {p.shape}")
        p[...] = b.reshape(p.shape)
    return model, manifest


def save_key(path, key):
    manifest = {
        "mask_shape": list(key.mask.shape),
        "offset_shape": list(key.offset.shape),
        "eps_m": key.eps_m,
        "eps_u": key.eps_u,
        "mask_mode": key.mask_mode,
        "auth_bits": list(key.auth_bits),
        "gamma_target": key.gamma_target,
        "seg_index": key.seg_index,
    }
    write_container(path, "KEY", manifest, [key.mask, key.offset])


def load_key(path):
    from authnet.pipeline import AuthKey, KeyConstraintError

    manifest, blobs = read_container(path, "KEY")
    if len(blobs) != 2:
        raise DataFormatError(f"{path}: expected mask and offset blobs")
    try:
        return AuthKey(
            mask=blobs[0].reshape(_ints(manifest["mask_shape"])),
            offset=blobs[1].reshape(_ints(manifest["offset_shape"])),
            eps_m=float(manifest["eps_m"]),
            eps_u=float(manifest["eps_u"]),
            auth_bits=_ints(manifest["auth_bits"]),
            seg_index=int(manifest["seg_index"]),
            gamma_target=float(manifest["gamma_target"]),
            mask_mode=manifest["mask_mode"],
        )
    except KeyConstraintError as exc:
        raise ConstraintViolationError(f"{path}: {exc}") from None


# --- CSV --------------------------------------------------------------------

CSV_SCHEMAS = {
    "metrics": ["epoch", "loss", "acc_leg", "acc_ill", "gap", "cc"],
    "radii": ["sample_id", "class", "kind", "radius"],
    "embedded": ["x", "y", "class", "kind", "correct"],
    "attack": ["kind", "fraction", "acc_attacked", "acc_leg", "acc_ill", "seed"],
}


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def export_csv(path, rows: list[dict], columns: list[str] | str):
    """Write rows with a fixed column order; ``columns`` may name a schema."""
    if isinstance(columns, str):
        columns = CSV_SCHEMAS[columns]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(c)) for c in columns])


def export_matrix(path, matrix: np.ndarray):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow([f"c{j}" for j in range(matrix.shape[1])])
        for row in matrix:
            writer.writerow([repr(float(v)) for v in row])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
