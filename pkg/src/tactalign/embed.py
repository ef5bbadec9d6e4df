"""Embedding providers for touch, vision and language.

Vision and text come from frozen providers behind a small interface; the
tactile encoder is a ViT trained to land directly in the providers' space.
"""

from __future__ import annotations

import hashlib
import json
import os
import subprocess
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

BACKGROUND_TEXT = "background"


def unit(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(n == 0):
        raise ValueError("cannot normalize a zero vector")
    return v / n


class TextProvider(Protocol):
    dim: int

    def embed_text(self, text: str) -> np.ndarray: ...


class ImageProvider(Protocol):
    dim: int

    def embed_image(self, image: np.ndarray) -> np.ndarray: ...


class ProviderUnavailable(RuntimeError):
    pass


def _seeded_vector(key: str, dim: int, seed: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}:{key}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return unit(rng.standard_normal(dim))


class HashTextProvider:
    """Deterministic text stub: every token maps to a fixed pseudo-random unit vector.

    With ``granularity="token"`` a comma-separated label string embeds as the
    normalized sum of its token vectors; with ``"string"`` the whole string is
    hashed, so any textual difference gives an unrelated vector.
    """

    def __init__(self, dim: int = 512, seed: int = 0, granularity: str = "token"):
        if granularity not in ("token", "string"):
            raise ValueError("granularity must be 'token' or 'string'")
        self.dim = dim
        self.seed = seed
        self.granularity = granularity
        self._cache: dict[str, np.ndarray] = {}

    def embed_text(self, text: str) -> np.ndarray:
        if not isinstance(text, str) or not text.strip():
            raise ValueError("text must be a nonempty string")
        hit = self._cache.get(text)
        if hit is None:
            if self.granularity == "string":
                hit = _seeded_vector(text, self.dim, self.seed)
            else:
                tokens = [t.strip().lower() for t in text.split(",") if t.strip()]
                hit = unit(sum(_seeded_vector(t, self.dim, self.seed) for t in tokens))
            hit.setflags(write=False)
            self._cache[text] = hit
        return hit


class LookupTextProvider:
    """Text provider backed by an explicit string -> vector table."""

    def __init__(self, table: dict[str, Sequence[float]], normalize: bool = True):
        self._table = {k: (unit(v) if normalize else np.asarray(v, float)) for k, v in table.items()}
        dims = {v.shape[0] for v in self._table.values()}
        if len(dims) > 1:
            raise ValueError("all vectors must share one dimension")
        self.dim = dims.pop() if dims else 0

    def embed_text(self, text: str) -> np.ndarray:
        try:
            return self._table[text]
        except KeyError:
            raise ProviderUnavailable(f"no embedding for {text!r}") from None


class ProjectionImageProvider:
    """Deterministic image stub: a fixed Gaussian random projection of the centred raster.

    Random projections approximately preserve angles, so images that are
    similar after centring stay similar in embedding space.
    """

    def __init__(self, dim: int = 512, seed: int = 1):
        self.dim = dim
        self.seed = seed
        self._matrices: dict[int, np.ndarray] = {}

    def _matrix(self, n: int) -> np.ndarray:
        m = self._matrices.get(n)
        if m is None:
            rng = np.random.default_rng([self.seed, n])
            m = rng.standard_normal((n, self.dim)) / np.sqrt(self.dim)
            self._matrices[n] = m
        return m

    def embed_images(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        flat = x.reshape(x.shape[0], -1)
        flat = flat - flat.mean(axis=1, keepdims=True)
        return unit(flat @ self._matrix(flat.shape[1]))

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        return self.embed_images(np.asarray(image)[None])[0]


class ClipProvider:
    """Adapter over a pretrained CLIP checkpoint from ``transformers``.

    Images are expected preprocessed (normalized, square) as (H, W, 3) rasters.
    """

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32", device: str = "cpu"):
        try:
            from transformers import CLIPModel, CLIPTokenizer
        except ImportError as exc:
            raise ProviderUnavailable("transformers is not installed") from exc
        try:
            self.model = CLIPModel.from_pretrained(model_name).to(device).eval()
            self.tokenizer = CLIPTokenizer.from_pretrained(model_name)
        except Exception as exc:
            raise ProviderUnavailable(f"cannot load {model_name}: {exc}") from exc
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.device = device
        self.dim = self.model.config.projection_dim
        self.image_size = self.model.config.vision_config.image_size

    @torch.no_grad()
    def embed_text(self, text: str) -> np.ndarray:
        if not text.strip():
            raise ValueError("text must be a nonempty string")
        tokens = self.tokenizer([text], padding=True, return_tensors="pt").to(self.device)
        return unit(self.model.get_text_features(**tokens)[0].double().cpu().numpy())

    @torch.no_grad()
    def embed_images(self, images: np.ndarray) -> np.ndarray:
        x = torch.as_tensor(np.asarray(images), dtype=torch.float32).permute(0, 3, 1, 2)
        if x.shape[-1] != self.image_size:
            x = F.interpolate(x, size=self.image_size, mode="bilinear", align_corners=False)
        feats = self.model.get_image_features(pixel_values=x.to(self.device))
        return unit(feats.double().cpu().numpy())

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        return self.embed_images(np.asarray(image)[None])[0]


PROVIDERS: dict[str, Callable[..., object]] = {
    "hash-stub": HashTextProvider,
    "projection-stub": ProjectionImageProvider,
    "clip": ClipProvider,
}


def register_provider(name: str, factory: Callable[..., object]) -> None:
    PROVIDERS[name] = factory


def get_provider(name: str, **kwargs):
    try:
        factory = PROVIDERS[name]
    except KeyError:
        raise ProviderUnavailable(f"unknown provider {name!r}; known: {sorted(PROVIDERS)}") from None
    return factory(**kwargs)


def embed_text(label_text: str, provider: TextProvider) -> np.ndarray:
    return provider.embed_text(label_text)


def embed_vision(image: np.ndarray, provider: ImageProvider) -> np.ndarray:
    return provider.embed_image(image)


# ---------------------------------------------------------------- tactile encoder

_FULL = {
    "tiny": dict(depth=12, width=192, heads=3),
    "small": dict(depth=12, width=384, heads=6),
    "base": dict(depth=12, width=768, heads=12),
}
_TOY = {
    "tiny": dict(depth=2, width=64, heads=4),
    "small": dict(depth=3, width=96, heads=4),
    "base": dict(depth=4, width=128, heads=8),
}


@dataclass(frozen=True)
class TactileEncoderConfig:
    size: str = "tiny"
    patch_size: int = 16
    depth: int = 12
    heads: int = 3
    width: int = 192
    output_dim: int = 512
    input_size: int = 224
    mlp_ratio: float = 4.0
    toy: bool = False

    def __post_init__(self):
        if self.size not in _FULL:
            raise ValueError(f"size must be one of {sorted(_FULL)}")
        if self.input_size % self.patch_size:
            raise ValueError("input_size must be a multiple of patch_size")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")

    @classmethod
    def preset(cls, size: str = "tiny", toy: bool = False, output_dim: int | None = None) -> "TactileEncoderConfig":
        if toy:
            return cls(size=size, patch_size=8, input_size=32, output_dim=output_dim or 64, toy=True, **_TOY[size])
        return cls(size=size, patch_size=16, input_size=224, output_dim=output_dim or 512, **_FULL[size])

    def to_dict(self) -> dict:
        return asdict(self)


class _Block(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        hidden = int(width * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, width))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class TactileEncoder(nn.Module):
    """ViT whose final linear head maps the class token straight into the shared space."""

    def __init__(self, cfg: TactileEncoderConfig):
        super().__init__()
        self.cfg = cfg
        n_patches = (cfg.input_size // cfg.patch_size) ** 2
        self.patch = nn.Conv2d(3, cfg.width, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.width))
        self.pos = nn.Parameter(torch.zeros(1, n_patches + 1, cfg.width))
        self.blocks = nn.ModuleList(_Block(cfg.width, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.width)
        self.head = nn.Linear(cfg.width, cfg.output_dim)
        nn.init.trunc_normal_(self.pos, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.apply(self._init)

    @staticmethod
    def _init(m):
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Un-normalized head output for a (B, 3, S, S) batch."""
        s = self.cfg.input_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != s or x.shape[3] != s:
            raise ValueError(f"expected input of shape (B, 3, {s}, {s}), got {tuple(x.shape)}")
        x = self.patch(x).flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1) + self.pos
        for block in self.blocks:
            x = block(x)
        return self.head(self.norm(x[:, 0]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.features(x), dim=-1)


def n_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def to_tensor(images) -> torch.Tensor:
    """(H, W, 3) or (B, H, W, 3) rasters to a channels-first float tensor."""
    x = torch.as_tensor(np.asarray(images))
    if x.ndim == 3:
        x = x.unsqueeze(0)
    return x.permute(0, 3, 1, 2).contiguous()


def embed_tactile(image, encoder: TactileEncoder) -> torch.Tensor:
    """Unit-norm embedding(s) of preprocessed tactile raster(s); differentiable in the encoder."""
    if isinstance(image, torch.Tensor):
        x = image if image.ndim == 4 else image.unsqueeze(0)
    else:
        x = to_tensor(image)
    dtype = next(encoder.parameters()).dtype
    out = encoder(x.to(dtype))
    return out[0] if (not isinstance(image, torch.Tensor) and np.ndim(image) == 3) else out


# ---------------------------------------------------------------- label text


@dataclass(frozen=True)
class LabelTextComposer:
    shuffle: bool = True
    subset_min: int = 1
    subset_max: int = 5
    template: str | None = None

    def __post_init__(self):
        if not 1 <= self.subset_min <= self.subset_max:
            raise ValueError("need 1 <= subset_min <= subset_max")
        if self.template is not None and "{}" not in self.template:
            raise ValueError("template must contain a '{}' slot")


def compose_label_text(
    labels: Sequence[str],
    composer: LabelTextComposer,
    rng: np.random.Generator,
    background: bool = False,
) -> str:
    """Random subset of the adjectives, joined with ", ", optionally wrapped in the template.

    No-contact samples always get the literal text ``"background"``.
    """
    if background:
        return BACKGROUND_TEXT
    if not labels:
        raise ValueError("labels must be nonempty")
    labels = list(labels)
    hi = min(composer.subset_max, len(labels))
    lo = min(composer.subset_min, hi)
    size = int(rng.integers(lo, hi + 1))
    if composer.shuffle:
        chosen = [labels[i] for i in rng.permutation(len(labels))[:size]]
    else:
        chosen = labels[:size]
    text = ", ".join(chosen)
    return composer.template.format(text) if composer.template else text


def fuse_latents(tactile, vision) -> np.ndarray:
    """Element-wise mean of two unit embeddings, re-normalized."""
    a = np.asarray(tactile, dtype=np.float64)
    b = np.asarray(vision, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return unit((a + b) / 2.0)


# ---------------------------------------------------------------- checkpoints


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def save_checkpoint(path: str | os.PathLike, encoder: TactileEncoder, **state) -> Path:
    """Write ``path`` (torch blob) and ``path`` + ``.json`` (sidecar descriptor)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {"encoder": encoder.state_dict(), "encoder_config": encoder.cfg.to_dict(), **state}
    torch.save(blob, path)
    sidecar = {
        "architecture": encoder.cfg.to_dict(),
        "output_dim": encoder.cfg.output_dim,
        "norm_stats": state.get("norm_stats", "tactile"),
        "epoch": state.get("epoch"),
        "git_describe": git_describe(),
    }
    path.with_name(path.name + ".json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[TactileEncoder, dict]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    encoder = TactileEncoder(TactileEncoderConfig(**blob["encoder_config"]))
    state = blob["encoder"]
    dtype = next(iter(state.values())).dtype
    encoder.to(dtype).load_state_dict(state)
    encoder.eval()
    return encoder, blob
