"""Versioned binary container for parameters, adapted statistics, and
dataset tensors, plus the on-disk dataset layout.

Container layout (all integers little-endian):

    magic            4 bytes  b"FUSB"
    version          uint32
    meta_len         uint32   UTF-8 JSON blob follows
    n_entries        uint32
    per entry:       name_len uint16, name bytes,
                     ndim uint8, dims uint32 * ndim,
                     offset uint64 (float32 elements into the data block)
    data             float32, little-endian, concatenated

Writes go through a temp file + rename so readers never observe a torn
file.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import LoadError
from .layers import BatchNorm, Conv, Dense, Model, NetworkSpec, PixelHead
from .stainsim import CenterDataset, StainTransform

MAGIC = b"FUSB"
VERSION = 1


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_container(path, tensors: dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    header = [MAGIC, struct.pack("<I", VERSION)]
    header.append(struct.pack("<I", len(meta_blob)))
    header.append(meta_blob)
    header.append(struct.pack("<I", len(tensors)))
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        header.append(struct.pack("<H", len(nb)))
        header.append(nb)
        header.append(struct.pack("<B", arr32.ndim))
        header.append(struct.pack(f"<{arr32.ndim}I", *arr32.shape))
        header.append(struct.pack("<Q", offset))
        chunks.append(arr32.tobytes())
        offset += arr32.size
    atomic_write_bytes(path, b"".join(header) + b"".join(chunks))


def load_container(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"container not found: {path}")
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise LoadError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    pos = 4
    (version,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if version != VERSION:
        raise LoadError(f"{path}: unsupported container version {version}")
    (meta_len,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    meta = json.loads(blob[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    (n_entries,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    table = []
    for _ in range(n_entries):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        (offset,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        table.append((name, shape, offset))
    data = np.frombuffer(blob, dtype="<f4", offset=pos)
    tensors = {}
    for name, shape, offset in table:
        size = int(np.prod(shape)) if shape else 1
        tensors[name] = data[offset : offset + size].reshape(shape).copy()
    return tensors, meta


# ---------------------------------------------------------------------------
# model checkpoints


def _layer_entries(model: Model) -> dict[str, np.ndarray]:
    entries: dict[str, np.ndarray] = {}
    conv_i = bn_i = 0
    for layer in model.layers:
        if isinstance(layer, Conv):
            conv_i += 1
            entries[f"conv{conv_i}/weight"] = layer.weight.value
            if layer.bias is not None:
                entries[f"conv{conv_i}/bias"] = layer.bias.value
        elif isinstance(layer, BatchNorm):
            bn_i += 1
            st = layer.state
            entries[f"bn{bn_i}/gamma"] = st.gamma
            entries[f"bn{bn_i}/alpha"] = st.alpha
            entries[f"bn{bn_i}/source_mean"] = st.source_mean
            entries[f"bn{bn_i}/source_var"] = st.source_var
            entries[f"bn{bn_i}/target_mean"] = st.target_mean
            entries[f"bn{bn_i}/target_var"] = st.target_var
        elif isinstance(layer, Dense):
            entries["head/weight"] = layer.weight.value
            entries["head/bias"] = layer.bias.value
        elif isinstance(layer, PixelHead):
            entries["head/weight"] = layer.weight.value
            entries["head/bias"] = layer.bias.value
    return entries


def save_model(path, model: Model, extra_meta: Optional[dict] = None) -> None:
    meta = {"kind": "model", "network": asdict(model.spec)}
    meta["network"]["channels"] = list(model.spec.channels)
    if extra_meta:
        meta.update(extra_meta)
    save_container(path, _layer_entries(model), meta)


def load_model(path) -> tuple[Model, dict]:
    from .layers import build_model

    tensors, meta = load_container(path)
    if meta.get("kind") != "model":
        raise LoadError(f"{path} is not a model checkpoint (kind={meta.get('kind')!r})")
    net = dict(meta["network"])
    net["channels"] = tuple(net["channels"])
    spec = NetworkSpec(**net)
    model = build_model(spec, seed=0)
    conv_i = bn_i = 0
    for layer in model.layers:
        if isinstance(layer, Conv):
            conv_i += 1
            layer.weight.value[...] = tensors[f"conv{conv_i}/weight"]
            if layer.bias is not None:
                layer.bias.value[...] = tensors[f"conv{conv_i}/bias"]
        elif isinstance(layer, BatchNorm):
            bn_i += 1
            st = layer.state
            st.gamma[...] = tensors[f"bn{bn_i}/gamma"]
            st.alpha[...] = tensors[f"bn{bn_i}/alpha"]
            st.source_mean = tensors[f"bn{bn_i}/source_mean"].astype(np.float64)
            st.source_var = tensors[f"bn{bn_i}/source_var"].astype(np.float64)
            st.target_mean = tensors[f"bn{bn_i}/target_mean"].astype(np.float64)
            st.target_var = tensors[f"bn{bn_i}/target_var"].astype(np.float64)
        elif isinstance(layer, (Dense, PixelHead)):
            layer.weight.value[...] = tensors["head/weight"]
            layer.bias.value[...] = tensors["head/bias"]
    return model, meta


def save_sidecar(path, states, protocol_meta: dict) -> None:
    """Adapted-state sidecar: per-layer target statistics plus the
    protocol settings that produced them."""
    entries = {}
    for i, st in enumerate(states, start=1):
        entries[f"bn{i}/target_mean"] = st.target_mean
        entries[f"bn{i}/target_var"] = st.target_var
    save_container(path, entries, {"kind": "adapted-stats", **protocol_meta})


def load_sidecar(path, model: Model) -> dict:
    tensors, meta = load_container(path)
    if meta.get("kind") != "adapted-stats":
        raise LoadError(f"{path} is not an adapted-state sidecar")
    for i, st in enumerate(model.bn_states(), start=1):
        st.target_mean = tensors[f"bn{i}/target_mean"].astype(np.float64)
        st.target_var = tensors[f"bn{i}/target_var"].astype(np.float64)
        st.target_steps = int(meta.get("steps", 0))
    return meta


# ---------------------------------------------------------------------------
# dataset directories


def save_dataset(dataset: CenterDataset, directory, split: str) -> None:
    """One center split on disk: an image container (entries img/00000...)
    plus a tab-separated manifest naming every entry, its label, mask
    entry, center id, and the transform parameters."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    lines = []
    mask_container = {}
    tjson = dataset.transform.to_json()
    for i in range(dataset.n):
        name = f"img/{i:05d}"
        tensors[name] = dataset.images[i]
        mask_name = "-"
        if dataset.masks is not None:
            mask_name = f"mask/{i:05d}"
            mask_container[mask_name] = dataset.masks[i]
        label = "-" if dataset.labels is None else str(int(dataset.labels[i]))
        lines.append("\t".join([name, label, mask_name, dataset.center_id, tjson]))
    meta = {"center_id": dataset.center_id, "task": dataset.task, "seed": dataset.seed}
    save_container(directory / f"{split}_images.fusb", tensors, meta)
    if mask_container:
        save_container(directory / f"{split}_masks.fusb", mask_container, meta)
    atomic_write_text(directory / f"{split}.tsv", "\n".join(lines) + "\n")


def load_dataset(directory, split: str, with_labels: bool = True) -> CenterDataset:
    """Read a center split back. with_labels=False is the adaptation
    path: label and mask columns are skipped entirely."""
    directory = Path(directory)
    manifest = directory / f"{split}.tsv"
    if not manifest.is_file():
        raise LoadError(f"manifest not found: {manifest}")
    tensors, meta = load_container(directory / f"{split}_images.fusb")
    masks_tensors = None
    mask_path = directory / f"{split}_masks.fusb"
    if with_labels and mask_path.is_file():
        masks_tensors, _ = load_container(mask_path)

    images, labels, masks = [], [], []
    center_id = meta.get("center_id", directory.name)
    transform_json = None
    for lineno, line in enumerate(manifest.read_text("utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise LoadError(f"{manifest}:{lineno}: expected 5 tab-separated fields")
        name, label, mask_name, _center, tjson = parts
        if name not in tensors:
            raise LoadError(f"{manifest}:{lineno}: entry {name!r} missing from container")
        images.append(tensors[name])
        transform_json = tjson
        if with_labels:
            labels.append(-1 if label == "-" else int(label))
            if mask_name != "-":
                if masks_tensors is None or mask_name not in masks_tensors:
                    raise LoadError(
                        f"{manifest}:{lineno}: mask entry {mask_name!r} missing"
                    )
                masks.append(masks_tensors[mask_name])
    if not images:
        raise LoadError(f"{manifest} lists no samples (empty dataset)")

    label_arr = None
    if with_labels and labels and not all(l == -1 for l in labels):
        label_arr = np.asarray(labels, dtype=np.int64)
    return CenterDataset(
        center_id=center_id,
        task=meta.get("task", "classification"),
        images=np.stack(images),
        labels=label_arr,
        masks=np.stack(masks) if masks else None,
        seed=int(meta.get("seed", 0)),
        transform=StainTransform.from_json(transform_json)
        if transform_json
        else StainTransform.identity(),
    )
