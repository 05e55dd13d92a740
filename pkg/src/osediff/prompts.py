"""Prompt extraction and the toy tag embedder.

Conditioning text is a short list of tags. The embedder maps each known
tag to a fixed random vector (seeded from the tag's digest, so identical
across processes); unknown words collapse onto the null row, which makes
an arbitrary negative-prompt string behave like the unconditional
embedding while still being, literally, the encoding of that string.

Three extractors are provided: ``null`` (fixed empty embedding),
``tag-stub`` (a deterministic image-statistics classifier over the toy
texture vocabulary), and ``cmd:<exe>`` (tags read from a subprocess, the
hook for real extractors).
"""

import hashlib
import subprocess
import tempfile
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ExtractorError
from .textures import TEXTURE_CLASSES

NULL_TOKEN = "<null>"
CONTRAST_TAGS = ("low-contrast", "high-contrast")
DEFAULT_VOCABULARY = tuple(TEXTURE_CLASSES) + CONTRAST_TAGS

_EMBED_DIM = 32


class TagEmbedder:
    """Fixed random-projection token embedder over a small tag vocabulary."""

    def __init__(self, dim: int = _EMBED_DIM, vocabulary=DEFAULT_VOCABULARY):
        self.dim = dim
        self.vocabulary = tuple(vocabulary)
        self._null_row = self._token_vector(NULL_TOKEN)

    def _token_vector(self, token: str) -> np.ndarray:
        digest = hashlib.blake2s(token.encode("utf-8"), digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        return (rng.standard_normal(self.dim) / np.sqrt(self.dim)).astype(np.float32)

    @property
    def null_embedding(self) -> np.ndarray:
        """The fixed empty embedding: a single null-token row."""
        return self._null_row[None, :].copy()

    def embed(self, tags) -> np.ndarray:
        """Embed a tag sequence as [tokens, dim]; empty input yields the null embedding."""
        rows = []
        for tag in tags:
            tag = tag.strip().lower()
            rows.append(self._token_vector(tag) if tag in self.vocabulary else self._null_row)
        if not rows:
            rows = [self._null_row]
        return np.stack(rows).astype(np.float32)

    def embed_text(self, text: str) -> np.ndarray:
        """Embed free text by splitting on commas (negative prompts arrive this way)."""
        return self.embed([w for w in (p.strip() for p in text.split(",")) if w])


def embed_batch(embedder: TagEmbedder, tag_lists) -> np.ndarray:
    """Stack per-image embeddings to [B, L, dim], padding short ones with null rows."""
    embs = [embedder.embed(tags) for tags in tag_lists]
    max_len = max(e.shape[0] for e in embs)
    out = np.tile(embedder.null_embedding, (len(embs), max_len, 1)).astype(np.float32)
    for i, e in enumerate(embs):
        out[i, : e.shape[0]] = e
    return out


def _texture_stats(img: np.ndarray) -> dict:
    luma = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    luma = luma.astype(np.float64)
    h, w = luma.shape
    std = float(luma.std())

    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    design = np.stack([np.ones(h * w), xx.ravel(), yy.ravel()], axis=1)
    coef, *_ = np.linalg.lstsq(design, luma.ravel(), rcond=None)
    resid = luma.ravel() - design @ coef
    ss_tot = float(((luma - luma.mean()) ** 2).sum())
    plane_r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0

    gy, gx = np.gradient(luma)
    jxx, jyy, jxy = float((gx * gx).sum()), float((gy * gy).sum()), float((gx * gy).sum())
    tr = jxx + jyy
    det = jxx * jyy - jxy * jxy
    disc = max(tr * tr - 4.0 * det, 0.0) ** 0.5
    anisotropy = disc / tr if tr > 0 else 0.0

    spec = np.abs(np.fft.fft2(luma - luma.mean())) ** 2
    spec[0, 0] = 0.0
    total = float(spec.sum())
    fy = np.fft.fftfreq(h) * h
    fx = np.fft.fftfreq(w) * w
    radius = np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    if total > 0:
        radial_centroid = float((spec * radius).sum() / total)
        peak_frac = float(np.sort(spec.ravel())[-4:].sum() / total)
    else:
        radial_centroid, peak_frac = 0.0, 0.0
    return {
        "std": std,
        "plane_r2": plane_r2,
        "anisotropy": anisotropy,
        "radial_centroid": radial_centroid,
        "peak_frac": peak_frac,
    }


def classify_texture(img: np.ndarray) -> str:
    """Deterministic texture-class guess from luma statistics."""
    s = _texture_stats(img)
    if s["std"] < 1e-6 or s["plane_r2"] > 0.90:
        return "gradient"
    if s["anisotropy"] > 0.80:
        return "stripes"
    if s["radial_centroid"] < 3.0:
        return "blobs"
    if s["peak_frac"] > 0.35:
        return "checker"
    return "noise"


def texture_tags(img: np.ndarray) -> list[str]:
    """Tag set emitted by the tag-stub extractor: class tag plus a contrast bucket."""
    luma = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    contrast = "high-contrast" if float(luma.std()) > 0.30 else "low-contrast"
    return [classify_texture(img), contrast]


class NullExtractor:
    name = "null"

    def tags(self, img: np.ndarray) -> list[str]:
        return []

    def extract(self, img: np.ndarray, embedder: TagEmbedder) -> np.ndarray:
        return embedder.null_embedding


class TagStubExtractor:
    name = "tag-stub"

    def tags(self, img: np.ndarray) -> list[str]:
        return texture_tags(img)

    def extract(self, img: np.ndarray, embedder: TagEmbedder) -> np.ndarray:
        return embedder.embed(self.tags(img))


class CommandExtractor:
    """Runs ``cmd <png-path>`` and embeds whitespace/comma-separated stdout tags."""

    def __init__(self, command: str):
        if not command:
            raise ConfigurationError("empty extractor command")
        self.command = command
        self.name = f"cmd:{command}"

    def tags(self, img: np.ndarray) -> list[str]:
        from .images import save_image

        with tempfile.TemporaryDirectory(prefix="osediff-extract-") as tmp:
            path = Path(tmp) / "input.png"
            save_image(path, img)
            try:
                proc = subprocess.run(
                    [self.command, str(path)], capture_output=True, text=True, timeout=60)
            except (OSError, subprocess.TimeoutExpired) as e:
                raise ExtractorError(f"prompt extractor {self.command!r} failed: {e}") from e
        if proc.returncode != 0:
            raise ExtractorError(
                f"prompt extractor {self.command!r} exited {proc.returncode}: "
                f"{proc.stderr.strip()[:200]}")
        return [w for w in proc.stdout.replace(",", " ").split() if w]

    def extract(self, img: np.ndarray, embedder: TagEmbedder) -> np.ndarray:
        return embedder.embed(self.tags(img))


def make_extractor(spec: str):
    if spec == "null":
        return NullExtractor()
    if spec == "tag-stub":
        return TagStubExtractor()
    if spec.startswith("cmd:"):
        return CommandExtractor(spec[len("cmd:"):])
    raise ConfigurationError(
        f"unknown prompt extractor {spec!r}; expected null, tag-stub, or cmd:<exe>")
