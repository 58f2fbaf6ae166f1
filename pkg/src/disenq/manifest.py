"""Dataset directory format.

A dataset directory holds:

* ``manifest.json`` — header (frame/token/dim counts, label vocab sizes)
  plus one record per clip: clip_id, labels, feature_file, optional
  text_file. Paths are relative to the directory.
* per-clip feature files: 4 little-endian int32 header values
  ``[frames, tokens, dim, version=1]`` followed by float32 data.
* optional per-clip text files: 3 little-endian int32 header values
  ``[3, text_dim, version=1]`` followed by the three stream embeddings as
  concatenated float32 vectors (biometrics, motion, non-biometrics).
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Optional

import numpy as np

from .world import Dataset, TextTriplet, VideoSample

FEATURE_VERSION = 1
MANIFEST_NAME = "manifest.json"


class ManifestError(ValueError):
    """Raised for malformed dataset directories."""


def write_feature_file(path, array: np.ndarray):
    """Write a (frames, tokens, dim) float32 array with its 4-int header."""
    array = np.ascontiguousarray(array, dtype="<f4")
    if array.ndim != 3:
        raise ManifestError(f"feature array must be 3-d, got shape {array.shape}")
    header = np.array([*array.shape, FEATURE_VERSION], dtype="<i4")
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(array.tobytes())


def read_feature_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = np.frombuffer(fh.read(16), dtype="<i4")
        if header.size != 4:
            raise ManifestError(f"{path}: truncated feature header")
        frames, tokens, dim, version = (int(x) for x in header)
        if version != FEATURE_VERSION:
            raise ManifestError(f"{path}: unsupported feature version {version}")
        data = np.frombuffer(fh.read(), dtype="<f4")
    expected = frames * tokens * dim
    if data.size != expected:
        raise ManifestError(
            f"{path}: feature payload has {data.size} values, header implies {expected}")
    return data.reshape(frames, tokens, dim).copy()


def write_text_file(path, triplet: TextTriplet):
    arrays = [np.ascontiguousarray(v, dtype="<f4") for v in
              (triplet.biometrics, triplet.motion, triplet.nonbiometrics)]
    dims = {a.shape for a in arrays}
    if len(dims) != 1 or arrays[0].ndim != 1:
        raise ManifestError("text triplet vectors must be 1-d with a common dimension")
    header = np.array([3, arrays[0].shape[0], FEATURE_VERSION], dtype="<i4")
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        for a in arrays:
            fh.write(a.tobytes())


def read_text_file(path) -> TextTriplet:
    with open(path, "rb") as fh:
        header = np.frombuffer(fh.read(12), dtype="<i4")
        if header.size != 3:
            raise ManifestError(f"{path}: truncated text header")
        count, dim, version = (int(x) for x in header)
        if count != 3:
            raise ManifestError(f"{path}: expected 3 text streams, header says {count}")
        if version != FEATURE_VERSION:
            raise ManifestError(f"{path}: unsupported text version {version}")
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != 3 * dim:
        raise ManifestError(
            f"{path}: text payload has {data.size} values, header implies {3 * dim}")
    vecs = data.reshape(3, dim)
    return TextTriplet(biometrics=vecs[0].copy(), motion=vecs[1].copy(),
                       nonbiometrics=vecs[2].copy())


def write_dataset(dataset: Dataset, out_dir, force: bool = False) -> Path:
    """Write a dataset as a manifest directory. Refuses to write into an
    existing non-empty directory unless force is set."""
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise FileExistsError(
            f"{out_dir} exists and is not empty (pass force=True / --force to overwrite)")
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    if dataset.has_texts:
        (out_dir / "texts").mkdir(parents=True, exist_ok=True)

    records = []
    for i, sample in enumerate(dataset.samples):
        feature_rel = f"features/{sample.clip_id}.bin"
        write_feature_file(out_dir / feature_rel, sample.frames)
        record = {
            "clip_id": sample.clip_id,
            "identity": int(sample.identity),
            "action": int(sample.action),
            "clothing": int(sample.clothing),
            "view": int(sample.view),
            "key_frame_index": int(sample.key_frame_index),
            "feature_file": feature_rel,
        }
        if dataset.has_texts:
            text_rel = f"texts/{sample.clip_id}.bin"
            write_text_file(out_dir / text_rel, dataset.texts[i])
            record["text_file"] = text_rel
        records.append(record)

    manifest = {
        "version": 1,
        "frames_per_clip": dataset.frames_per_clip,
        "tokens_per_frame": dataset.tokens_per_frame,
        "token_dim": dataset.token_dim,
        "text_dim": dataset.text_dim if dataset.has_texts else None,
        "num_identities": dataset.num_identities,
        "num_actions": dataset.num_actions,
        "num_clothing": dataset.num_clothing,
        "num_views": dataset.num_views,
        "clips": records,
    }
    with open(out_dir / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out_dir


def _require(manifest: dict, key: str):
    if key not in manifest:
        raise ManifestError(f"manifest missing required key {key!r}")
    return manifest[key]


def ingest_manifest(path) -> Dataset:
    """Load a dataset directory (or a manifest.json path) into a Dataset.

    Feature files must agree with the manifest header on frames/tokens/dim;
    labels must fall inside the declared vocabulary sizes. Text files are
    all-or-nothing: a manifest mixing clips with and without text is
    rejected; one with none yields an inference-only dataset.
    """
    path = Path(path)
    manifest_path = path / MANIFEST_NAME if path.is_dir() else path
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest at {manifest_path}")
    base = manifest_path.parent
    with open(manifest_path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{manifest_path}: invalid JSON ({exc})") from exc

    frames_per_clip = int(_require(manifest, "frames_per_clip"))
    tokens_per_frame = int(_require(manifest, "tokens_per_frame"))
    token_dim = int(_require(manifest, "token_dim"))
    text_dim = manifest.get("text_dim")
    vocab = {k: int(_require(manifest, k)) for k in
             ("num_identities", "num_actions", "num_clothing", "num_views")}
    clips = _require(manifest, "clips")
    if not isinstance(clips, list) or not clips:
        raise ManifestError("manifest has no clips")

    with_text = [bool(rec.get("text_file")) for rec in clips]
    if any(with_text) and not all(with_text):
        raise ManifestError("manifest mixes clips with and without text_file")
    has_texts = all(with_text)

    samples, texts = [], [] if has_texts else None
    for rec in clips:
        clip_id = rec.get("clip_id", "<missing clip_id>")
        for label_key, vocab_key in (("identity", "num_identities"),
                                     ("action", "num_actions"),
                                     ("clothing", "num_clothing"),
                                     ("view", "num_views")):
            value = rec.get(label_key)
            if value is None or not 0 <= int(value) < vocab[vocab_key]:
                raise ManifestError(
                    f"clip {clip_id}: unknown {label_key} label {value!r} "
                    f"(vocabulary size {vocab[vocab_key]})")
        feature_path = base / _require(rec, "feature_file")
        if not feature_path.exists():
            raise ManifestError(f"clip {clip_id}: missing feature file {feature_path}")
        frames = read_feature_file(feature_path)
        if frames.shape != (frames_per_clip, tokens_per_frame, token_dim):
            raise ManifestError(
                f"clip {clip_id}: feature shape {frames.shape} does not match manifest "
                f"header ({frames_per_clip}, {tokens_per_frame}, {token_dim})")
        key_frame = int(rec.get("key_frame_index", frames_per_clip // 2))
        if not 0 <= key_frame < frames_per_clip:
            raise ManifestError(f"clip {clip_id}: key_frame_index {key_frame} out of range")
        samples.append(VideoSample(
            clip_id=str(clip_id), frames=frames,
            identity=int(rec["identity"]), action=int(rec["action"]),
            clothing=int(rec["clothing"]), view=int(rec["view"]),
            key_frame_index=key_frame))
        if has_texts:
            text_path = base / rec["text_file"]
            if not text_path.exists():
                raise ManifestError(f"clip {clip_id}: missing text file {text_path}")
            triplet = read_text_file(text_path)
            if text_dim is not None and triplet.biometrics.shape[0] != int(text_dim):
                raise ManifestError(
                    f"clip {clip_id}: text dim {triplet.biometrics.shape[0]} does not "
                    f"match manifest text_dim {text_dim}")
            texts.append(triplet)

    if has_texts and text_dim is None:
        text_dim = texts[0].biometrics.shape[0]
    return Dataset(
        samples=samples, texts=texts,
        frames_per_clip=frames_per_clip, tokens_per_frame=tokens_per_frame,
        token_dim=token_dim, text_dim=int(text_dim) if has_texts else None,
        num_identities=vocab["num_identities"], num_actions=vocab["num_actions"],
        num_clothing=vocab["num_clothing"], num_views=vocab["num_views"])
