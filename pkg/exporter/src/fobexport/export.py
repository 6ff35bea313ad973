"""Export embeddings from a frozen local vision-language checkpoint to FOBO.

For every image the exporter records the projected, unit-normalized global
feature and per-patch features, plus the attention queries of the patch
tokens and the key of the global (CLS) token from a chosen vision attention
block, head-averaged. The output file is the primary pipeline's FOBO
format, written through its public dataset API so every export passes the
same validation as synthetic fixtures.

The model directory must hold a transformers CLIP checkpoint saved locally
(config + weights); nothing is downloaded. `init_reference_model` creates
a small randomly initialized checkpoint for offline, desk-scale use.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from transformers import CLIPConfig, CLIPModel

from patchood.data import EmbeddingDataset, EmbeddingRecord, save_dataset, validate

log = logging.getLogger("fobexport")

# channel statistics used by CLIP-style preprocessing
_MEAN = np.array([0.48145466, 0.4578275, 0.40821073], dtype=np.float32)
_STD = np.array([0.26862954, 0.26130258, 0.27577711], dtype=np.float32)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


class ExportError(RuntimeError):
    """Raised when an export cannot be completed."""


@dataclass
class ExportManifest:
    model_dir: str
    layer: int
    head_averaged: bool
    n_patches: int
    d: int
    d_k: int
    n_records: int
    class_names: list[str]
    split_tag: str
    checksum: str
    skipped: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(vars(self))


def init_reference_model(out_dir, image_size: int = 64, patch_size: int = 16,
                         hidden_size: int = 64, num_heads: int = 4,
                         num_layers: int = 2, projection_dim: int = 32,
                         vocab_size: int = 512, seed: int = 0) -> Path:
    """Create and save a small randomly initialized frozen checkpoint.

    Stands in for downloaded pretrained weights in offline environments;
    the architecture (and therefore every exported shape) matches the real
    thing, only the weight values differ.
    """
    torch.manual_seed(seed)
    config = CLIPConfig(
        projection_dim=projection_dim,
        text_config={
            "hidden_size": hidden_size, "intermediate_size": 2 * hidden_size,
            "num_attention_heads": num_heads, "num_hidden_layers": num_layers,
            "vocab_size": vocab_size, "max_position_embeddings": 77,
            "projection_dim": projection_dim,
        },
        vision_config={
            "hidden_size": hidden_size, "intermediate_size": 2 * hidden_size,
            "num_attention_heads": num_heads, "num_hidden_layers": num_layers,
            "image_size": image_size, "patch_size": patch_size,
            "projection_dim": projection_dim,
        },
    )
    model = CLIPModel(config)
    out_dir = Path(out_dir)
    model.save_pretrained(out_dir)
    return out_dir


def load_model(model_dir) -> CLIPModel:
    model_dir = Path(model_dir)
    if not (model_dir / "config.json").exists():
        raise ExportError(f"no local checkpoint at {model_dir}")
    model = CLIPModel.from_pretrained(model_dir)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def preprocess(image: Image.Image, image_size: int) -> np.ndarray:
    """Resize to the square model input and normalize channels; (3, S, S)."""
    img = image.convert("RGB").resize((image_size, image_size), Image.BICUBIC)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = (arr - _MEAN) / _STD
    return arr.transpose(2, 0, 1)


def _qk_capture(model: CLIPModel, layer: int):
    """Forward hooks on the q/k projections of one vision attention block."""
    layers = model.vision_model.encoder.layers
    if not (-len(layers) <= layer < len(layers)):
        raise ExportError(f"layer {layer} out of range for {len(layers)} blocks")
    attn = layers[layer].self_attn
    store = {}
    handles = [
        attn.q_proj.register_forward_hook(lambda m, i, o: store.__setitem__("q", o)),
        attn.k_proj.register_forward_hook(lambda m, i, o: store.__setitem__("k", o)),
    ]
    return store, handles


def _head_average(x: torch.Tensor, num_heads: int) -> np.ndarray:
    """(batch, seq, hidden) -> (batch, seq, head_dim) averaged over heads."""
    b, s, h = x.shape
    return x.reshape(b, s, num_heads, h // num_heads).mean(dim=2).numpy()


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


@torch.no_grad()
def embed_images(model: CLIPModel, pixel_values: torch.Tensor, layer: int = -1):
    """Joint-space features and head-averaged Q/K for a batch of images.

    Returns (global_features (B, d), patch_features (B, N, d),
    patch_queries (B, N, d_k), global_keys (B, d_k)); features unit-norm.
    """
    store, handles = _qk_capture(model, layer)
    try:
        out = model.vision_model(pixel_values=pixel_values)
    finally:
        for h in handles:
            h.remove()
    num_heads = model.config.vision_config.num_attention_heads
    q = _head_average(store["q"], num_heads)      # (B, 1 + N, d_k)
    k = _head_average(store["k"], num_heads)

    post = model.vision_model.post_layernorm(out.last_hidden_state)
    joint = model.visual_projection(post).numpy()  # (B, 1 + N, d)
    global_features = _normalize_rows(joint[:, 0])
    patch_features = _normalize_rows(joint[:, 1:])
    return (global_features, patch_features, q[:, 1:], k[:, 0])


def list_images(image_dir, class_names: list[str]):
    """Yield (path, label) pairs, sorted for determinism.

    With per-class subdirectories the directory name gives the label;
    images directly in image_dir are treated as unlabeled (OOD export).
    Listing order is sorted paths, so duplicates by content are allowed
    but each path appears once per occurrence in the filesystem.
    """
    image_dir = Path(image_dir)
    if not image_dir.is_dir():
        raise ExportError(f"image directory {image_dir} does not exist")
    name_to_label = {n: i for i, n in enumerate(class_names)}
    pairs = []
    for path in sorted(image_dir.rglob("*")):
        if not (path.is_file() and path.suffix.lower() in IMAGE_SUFFIXES):
            continue
        parent = path.parent.name
        if path.parent == image_dir:
            pairs.append((path, None))
        elif parent in name_to_label:
            pairs.append((path, name_to_label[parent]))
        else:
            raise ExportError(f"directory {parent!r} is not a listed class")
    return pairs


def export_features(image_dir, class_names: list[str], out_path, model_dir,
                    layer: int = -1, batch_size: int = 8,
                    split_tag: str | None = None) -> ExportManifest:
    """Embed every decodable image under image_dir and write one FOBO file.

    Undecodable images are skipped and logged; a feature-dimension mismatch
    against an established header aborts. The manifest (with a checksum of
    the written file) is saved as JSON next to the FOBO file.
    """
    if not class_names:
        raise ExportError("class list must be nonempty")
    model = load_model(model_dir)
    vision_cfg = model.config.vision_config
    image_size = vision_cfg.image_size
    n_patches = (image_size // vision_cfg.patch_size) ** 2
    d = model.config.projection_dim
    d_k = vision_cfg.hidden_size // vision_cfg.num_attention_heads

    pairs = list_images(image_dir, class_names)
    skipped = []
    decoded = []
    for path, label in pairs:
        try:
            with Image.open(path) as img:
                decoded.append((preprocess(img, image_size), label))
        except Exception as exc:  # undecodable image: skip, keep exporting
            log.warning("skipping %s: %s", path, exc)
            skipped.append(str(path))

    if split_tag is None:
        labeled = [lab for _, lab in decoded if lab is not None]
        if labeled and len(labeled) != len(decoded):
            raise ExportError("mixed labeled and unlabeled images in one export")
        split_tag = "id_train" if labeled else "ood_test"

    records = []
    for start in range(0, len(decoded), batch_size):
        chunk = decoded[start:start + batch_size]
        pixels = torch.from_numpy(np.stack([c[0] for c in chunk]))
        gf, pf, pq, gk = embed_images(model, pixels, layer=layer)
        if gf.shape[1] != d or pf.shape[1] != n_patches:
            raise ExportError(
                f"feature shape {gf.shape[1]}x{pf.shape[1]} does not match "
                f"header {d}x{n_patches}")
        for j, (_, label) in enumerate(chunk):
            records.append(EmbeddingRecord(
                global_feature=gf[j].astype(np.float32),
                patch_features=pf[j].astype(np.float32),
                patch_queries=pq[j].astype(np.float32),
                global_key=gk[j].astype(np.float32),
                label=label,
            ))

    ds = EmbeddingDataset(records, list(class_names), d, d_k, n_patches, split_tag)
    report = validate(ds)
    if not report.ok:
        raise ExportError("export failed validation: " + report.violations[0])
    out_path = Path(out_path)
    save_dataset(ds, out_path)

    manifest = ExportManifest(
        model_dir=str(model_dir), layer=layer, head_averaged=True,
        n_patches=n_patches, d=d, d_k=d_k, n_records=len(records),
        class_names=list(class_names), split_tag=split_tag,
        checksum=hashlib.sha256(out_path.read_bytes()).hexdigest(),
        skipped=skipped,
    )
    out_path.with_suffix(".manifest.json").write_text(
        json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# Class-name text embeddings
#
# FOBT binary: magic "FOBT" | version u32 | M u32 | d u32
# | M x (name_len u32, UTF-8 bytes) | M x d f32 rows (unit norm)
# ---------------------------------------------------------------------------

_TOKEN_MAGIC = b"FOBT"
_TOKEN_VERSION = 1
_TOKEN_HEADER = struct.Struct("<4sIII")


def _byte_token_ids(name: str, vocab_size: int, bos: int, eos: int,
                    max_len: int) -> list[int]:
    """Deterministic byte-level token ids for one class name.

    A real deployment would use the checkpoint's own subword tokenizer;
    byte-level encoding keeps the export fully offline and deterministic
    while exercising the same text tower.
    """
    raw = name.encode("utf-8")[: max_len - 2]
    if not raw:
        raise ExportError("cannot tokenize an empty class name")
    body = [2 + (b % (vocab_size - 3)) for b in raw]
    return [bos] + body + [eos]


@torch.no_grad()
def export_class_tokens(class_names: list[str], out_path, model_dir) -> np.ndarray:
    """Embed class names with the frozen text tower; write unit-norm rows."""
    if not class_names:
        raise ExportError("class list must be nonempty")
    model = load_model(model_dir)
    text_cfg = model.config.text_config
    vocab = text_cfg.vocab_size
    eos = text_cfg.eos_token_id if text_cfg.eos_token_id < vocab else vocab - 1
    bos = text_cfg.bos_token_id if text_cfg.bos_token_id < vocab else vocab - 2
    max_len = text_cfg.max_position_embeddings

    ids = [_byte_token_ids(n, vocab, bos, eos, max_len) for n in class_names]
    width = max(len(i) for i in ids)
    input_ids = torch.full((len(ids), width), eos, dtype=torch.long)
    attention = torch.zeros((len(ids), width), dtype=torch.long)
    for r, seq in enumerate(ids):
        input_ids[r, : len(seq)] = torch.tensor(seq)
        attention[r, : len(seq)] = 1
    text_out = model.text_model(input_ids=input_ids, attention_mask=attention)
    feats = model.text_projection(text_out.pooler_output)
    rows = _normalize_rows(feats.numpy().astype(np.float64)).astype(np.float32)

    with open(out_path, "wb") as fh:
        fh.write(_TOKEN_HEADER.pack(_TOKEN_MAGIC, _TOKEN_VERSION,
                                    len(class_names), rows.shape[1]))
        for name in class_names:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        fh.write(np.ascontiguousarray(rows, dtype="<f4").tobytes())
    return rows


def load_class_tokens(path):
    """Read a FOBT file; returns (class_names, rows float32 (M, d))."""
    blob = Path(path).read_bytes()
    if len(blob) < _TOKEN_HEADER.size:
        raise ExportError("truncated class-token file")
    magic, version, M, d = _TOKEN_HEADER.unpack_from(blob, 0)
    if magic != _TOKEN_MAGIC:
        raise ExportError("bad magic in class-token file")
    if version != _TOKEN_VERSION:
        raise ExportError(f"unsupported class-token version {version}")
    off = _TOKEN_HEADER.size
    names = []
    for _ in range(M):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        names.append(blob[off:off + nlen].decode("utf-8"))
        off += nlen
    if len(blob) - off != 4 * M * d:
        raise ExportError("truncated class-token payload")
    rows = np.frombuffer(blob, dtype="<f4", count=M * d, offset=off).reshape(M, d).copy()
    return names, rows
