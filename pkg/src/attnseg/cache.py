"""On-disk cache of feature stacks.

Layout::

    <root>/<set_key>/manifest.json     extractors, params hash, channel names
    <root>/<set_key>/<image_id>.npz    stack (C, H, W) float32 + image_sha

``set_key`` hashes the extractor list together with every extractor
parameter, so changing any parameter lands in a fresh directory. Writes go
through a temporary file and ``os.replace`` so concurrent writers never
leave a torn file behind.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .features import ExtractorParams, FeatureStack, canonical_extractors, extract, params_hash

CACHE_ENV = "ATTNSEG_CACHE_DIR"


def default_cache_root(fallback=None) -> Path | None:
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    return Path(fallback) if fallback is not None else None


def image_sha(image: np.ndarray) -> str:
    arr = np.ascontiguousarray(np.asarray(image, dtype=np.float32))
    h = hashlib.sha256(arr.tobytes())
    h.update(str(arr.shape).encode())
    return h.hexdigest()[:16]


def set_key(extractors, params: ExtractorParams) -> str:
    order = canonical_extractors(extractors)
    return f"{'-'.join(order)}_{params_hash(params)}"


def _atomic_write(path: Path, write) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp_", suffix=path.suffix)
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


class FeatureCache:
    def __init__(self, root, extractors, params: ExtractorParams = ExtractorParams(), mask_guided: bool = False):
        self.extractors = canonical_extractors(extractors)
        self.params = params
        self.mask_guided = mask_guided
        key = set_key(self.extractors, params) + ("_masked" if mask_guided else "")
        self.dir = Path(root) / key
        self.hits = 0
        self.misses = 0

    def path_for(self, image_id: str) -> Path:
        return self.dir / f"{image_id}.npz"

    def load(self, image_id: str, image: np.ndarray) -> FeatureStack | None:
        p = self.path_for(image_id)
        if not p.exists():
            return None
        with np.load(p, allow_pickle=False) as z:
            if str(z["image_sha"]) != image_sha(image):
                return None
            return FeatureStack(z["stack"].astype(np.float64), [str(n) for n in z["names"]],
                                [str(n) for n in z["provenance"]])

    def store(self, image_id: str, image: np.ndarray, stack: FeatureStack) -> None:
        def write(tmp):
            with open(tmp, "wb") as fh:
                np.savez_compressed(
                    fh, stack=stack.data.astype(np.float32), names=np.array(stack.names),
                    provenance=np.array(stack.provenance), image_sha=np.array(image_sha(image)),
                )
        _atomic_write(self.path_for(image_id), write)

    def get(self, image_id: str, image: np.ndarray, mask=None) -> FeatureStack:
        cached = self.load(image_id, image)
        if cached is not None:
            self.hits += 1
            return cached
        self.misses += 1
        guide = (np.asarray(mask) > 0).astype(np.uint8) if (self.mask_guided and mask is not None) else None
        stack = extract(image, self.extractors, guide, self.params)
        self.store(image_id, image, stack)
        return stack

    def write_manifest(self, names: list[str], image_ids: list[str]) -> Path:
        manifest = {
            "extractors": list(self.extractors),
            "params_hash": params_hash(self.params),
            "mask_guided": self.mask_guided,
            "num_channels": len(names),
            "channels": names,
            "images": sorted(image_ids),
        }
        path = self.dir / "manifest.json"
        if path.exists():
            old = json.loads(path.read_text())
            manifest["images"] = sorted(set(old.get("images", [])) | set(image_ids))
        _atomic_write(path, lambda tmp: Path(tmp).write_text(json.dumps(manifest, indent=2)))
        return path
