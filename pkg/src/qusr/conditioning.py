"""Quality-aware prompts and their token embeddings.

Captions come from an OpenAI-compatible multimodal endpoint (optional) or from a
deterministic template over the degradation parameters. A small trainable text
encoder turns captions into the ``T x d`` conditioning matrix, and owns the
learned null token used for the unconditional branch.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import re
import tempfile
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import TextEncoderConfig
from .errors import ProtocolError, RemoteError
from .imaging import DegradationParams, content_key

log = logging.getLogger(__name__)

INSTRUCTION = ("Please describe this low-resolution image, evaluating its quality based on "
               "clarity, color, noise, and lighting.")
ENDPOINT_ENV = "QUSR_MLLM_ENDPOINT"
KEY_ENV = "QUSR_MLLM_KEY"


@dataclass(frozen=True)
class QualityPrompt:
    text: str
    source: str  # "remote" | "stub" | "cached"
    image_key: str = ""


# ---------------------------------------------------------------------------
# captioning
# ---------------------------------------------------------------------------

# (upper bound exclusive, phrase); the last bucket is open-ended
BLUR_BUCKETS = ((0.5, "sharp details"), (1.5, "slightly blurry"), (2.5, "blurry"),
                (float("inf"), "very blurry"))
NOISE_BUCKETS = ((0.01, "clean"), (0.05, "mildly noisy"), (float("inf"), "noisy"))
JPEG_VISIBLE_BELOW = 70


def _bucket(value: float, table) -> str:
    for upper, phrase in table:
        if value < upper:
            return phrase
    return table[-1][1]


def stub_text(params: DegradationParams) -> str:
    parts = [_bucket(params.blur_sigma, BLUR_BUCKETS), "natural color",
             _bucket(params.noise_sigma, NOISE_BUCKETS)]
    q = params.compression_quality
    if q is not None:
        parts.append("visible compression artifacts" if q < JPEG_VISIBLE_BELOW
                     else "no compression artifacts")
    parts.append("even lighting")
    return "A low-resolution photo; " + ", ".join(parts) + "."


def caption_stub(params: DegradationParams, image_key: str = "") -> QualityPrompt:
    return QualityPrompt(stub_text(params), "stub", image_key)


class PromptCache:
    """One UTF-8 text file per image content hash."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path(self, key: str) -> Path:
        return self.root / f"{key}.txt"

    def get(self, key: str) -> Optional[str]:
        p = self.path(key)
        return p.read_text(encoding="utf-8") if p.exists() else None

    def put(self, key: str, text: str) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".tmp-", suffix=".txt")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, self.path(key))


def _post_chat(endpoint: str, api_key: str, image_bytes: bytes, model: str, timeout: float) -> str:
    payload = {
        "model": model,
        "messages": [{
            "role": "user",
            "content": [
                {"type": "image_url",
                 "image_url": {"url": "data:image/png;base64," + base64.b64encode(image_bytes).decode()}},
                {"type": "text", "text": INSTRUCTION},
            ],
        }],
        "max_tokens": 256,
        "temperature": 0,
    }
    req = urllib.request.Request(
        endpoint, data=json.dumps(payload).encode(), method="POST",
        headers={"Content-Type": "application/json", "Authorization": f"Bearer {api_key}"})
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        body = resp.read()
    try:
        text = json.loads(body)["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise ProtocolError(f"malformed chat-completions response: {exc}") from None
    if isinstance(text, list):  # content-part form
        text = "".join(part.get("text", "") for part in text if isinstance(part, dict))
    if not isinstance(text, str) or not text.strip():
        raise ProtocolError("empty caption returned by endpoint")
    return text


def caption_remote(image_path: str | Path, endpoint: Optional[str] = None, api_key: Optional[str] = None,
                   cache: Optional[PromptCache] = None, model: str = "Qwen2.5-VL-7B-Instruct",
                   attempts: int = 3, backoff: float = 1.0, timeout: float = 60.0) -> QualityPrompt:
    """Caption one image through the remote MLLM, using the cache when possible.

    Transport and HTTP failures are retried ``attempts`` times with exponential
    backoff, then raised as :class:`RemoteError`. Malformed or empty responses
    raise :class:`ProtocolError` immediately.
    """
    key = content_key(image_path)
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            return QualityPrompt(hit, "cached", key)
    endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
    api_key = api_key if api_key is not None else os.environ.get(KEY_ENV, "")
    if not endpoint:
        raise RemoteError(f"no endpoint given and ${ENDPOINT_ENV} is unset")
    image_bytes = Path(image_path).read_bytes()
    last: Exception | None = None
    for attempt in range(attempts):
        try:
            text = _post_chat(endpoint, api_key, image_bytes, model, timeout)
            break
        except ProtocolError:
            raise
        except (urllib.error.URLError, OSError, TimeoutError) as exc:
            last = exc
            log.warning("caption attempt %d/%d failed: %s", attempt + 1, attempts, exc)
            if attempt + 1 < attempts:
                time.sleep(backoff * 2 ** attempt)
    else:
        raise RemoteError(f"captioning {image_path} failed after {attempts} attempts: {last}")
    if cache is not None:
        cache.put(key, text)
    return QualityPrompt(text, "remote", key)


def caption_many(paths: Sequence[str | Path], max_in_flight: int = 4, **kwargs) -> list[QualityPrompt]:
    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        return list(pool.map(lambda p: caption_remote(p, **kwargs), paths))


# ---------------------------------------------------------------------------
# text encoder
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def token_ids(text: str, vocab_buckets: int, max_tokens: int) -> list[int]:
    ids = []
    for tok in tokenize(text)[:max_tokens]:
        digest = hashlib.blake2b(tok.encode("utf-8"), digest_size=8).digest()
        ids.append(int.from_bytes(digest, "little") % vocab_buckets)
    return ids


class TextEncoder(nn.Module):
    def __init__(self, cfg: TextEncoderConfig = TextEncoderConfig()):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.token_emb = nn.Embedding(cfg.vocab_buckets, cfg.d)
        self.pos_emb = nn.Parameter(torch.randn(cfg.max_tokens, cfg.d) * 0.02)
        layer = nn.TransformerEncoderLayer(cfg.d, cfg.heads, dim_feedforward=2 * cfg.d, dropout=0.0,
                                           batch_first=True, norm_first=True)
        self.blocks = nn.TransformerEncoder(layer, cfg.layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(cfg.d)
        self.null_token = nn.Parameter(torch.randn(1, cfg.d) * 0.02)
        nn.init.normal_(self.token_emb.weight, std=0.02)

    @property
    def dim(self) -> int:
        return self.cfg.d

    def null_embedding(self) -> torch.Tensor:
        return self.null_token

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = self.token_emb(ids) + self.pos_emb[: ids.shape[1]]
        x = self.blocks(x, src_key_padding_mask=~mask)
        return self.norm(x)

    def encode_batch(self, texts: Sequence[Optional[str]]) -> tuple[torch.Tensor, torch.Tensor]:
        """Embed a batch of captions as padded ``(B, T, d)`` plus a ``(B, T)`` validity mask.

        Empty or ``None`` captions map to the null token (a single valid row).
        """
        seqs = [token_ids(t or "", self.cfg.vocab_buckets, self.cfg.max_tokens) for t in texts]
        width = max([len(s) for s in seqs] + [1])
        ids = torch.zeros(len(seqs), width, dtype=torch.long)
        mask = torch.zeros(len(seqs), width, dtype=torch.bool)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = torch.tensor(s, dtype=torch.long)
            mask[i, : len(s)] = True
        rows: list[Optional[torch.Tensor]] = [None] * len(seqs)
        sel = [i for i, seq in enumerate(seqs) if seq]
        if sel:
            emb = self(ids[sel], mask[sel])
            for j, i in enumerate(sel):
                rows[i] = emb[j]
        for i, seq in enumerate(seqs):
            if not seq:
                rows[i] = F.pad(self.null_token, (0, 0, 0, width - 1))
                mask[i, 0] = True
        out = torch.stack(rows)
        return out, mask

    def null_batch(self, batch: int) -> tuple[torch.Tensor, torch.Tensor]:
        ctx = self.null_token.expand(batch, 1, -1)
        return ctx, torch.ones(batch, 1, dtype=torch.bool)


def encode_text(prompt: QualityPrompt | str, encoder: TextEncoder) -> torch.Tensor:
    """``T x d`` embedding of one caption (``1 x d`` null row for empty text)."""
    text = prompt.text if isinstance(prompt, QualityPrompt) else prompt
    ids = token_ids(text, encoder.cfg.vocab_buckets, encoder.cfg.max_tokens)
    if not ids:
        return null_embedding(encoder)
    ids_t = torch.tensor([ids], dtype=torch.long)
    return encoder(ids_t, torch.ones_like(ids_t, dtype=torch.bool))[0]


def null_embedding(encoder: TextEncoder) -> torch.Tensor:
    return encoder.null_embedding()
