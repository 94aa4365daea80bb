"""Embedding matrices: binary file format, JSONL text corpora and a remote embeddings client."""

from __future__ import annotations

import json
import logging
import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import httpx
import numpy as np

from .errors import ConfigError, EmbeddingServiceError, FormatError

log = logging.getLogger(__name__)

MAGIC = b"CAMEMB00"
VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<8sIQQB")
HEADER_SIZE = _HEADER.size  # 29 bytes


def write_embeddings(matrix: np.ndarray, path: str | Path) -> None:
    x = np.asarray(matrix)
    if x.ndim != 2:
        raise FormatError("embedding matrix must be 2-D")
    x = np.ascontiguousarray(x, dtype="<f4")
    if not np.all(np.isfinite(x)):
        raise FormatError("embedding matrix contains non-finite values")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, x.shape[0], x.shape[1], DTYPE_F32))
        fh.write(x.tobytes())


def read_embeddings(path: str | Path) -> np.ndarray:
    """Read a CAMEMB00 file into an (n, d) float32 array."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: file shorter than the {HEADER_SIZE}-byte header")
    magic, version, n, d, dtype = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    payload = raw[HEADER_SIZE:]
    expected = n * d * 4
    if len(payload) != expected:
        if len(payload) < expected and d > 0:
            row = (len(payload) // 4) // d
            raise FormatError(
                f"{path}: truncated payload at row {row} "
                f"({len(payload) // 4} of {n * d} floats present)"
            )
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    x = np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float32)
    bad = ~np.isfinite(x).all(axis=1)
    if bad.any():
        raise FormatError(f"{path}: non-finite value in row {int(np.argmax(bad))}")
    return x


@dataclass(frozen=True)
class TextRecord:
    node_id: int
    text: str


def read_jsonl_texts(path: str | Path) -> list[TextRecord]:
    records: list[TextRecord] = []
    seen: set[int] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise FormatError(f"{path}:{lineno}: expected a JSON object")
            node_id, text = obj.get("node_id"), obj.get("text")
            if not isinstance(node_id, int) or isinstance(node_id, bool):
                raise FormatError(f"{path}:{lineno}: missing or non-integer 'node_id'")
            if not isinstance(text, str):
                raise FormatError(f"{path}:{lineno}: missing or non-string 'text'")
            if node_id in seen:
                raise FormatError(f"{path}:{lineno}: duplicate node_id {node_id}")
            seen.add(node_id)
            records.append(TextRecord(node_id, text))
    return records


@dataclass(frozen=True)
class EmbeddingServiceConfig:
    endpoint_url: str
    model_name: str = "text-embedding-3-small"
    batch_size: int = 100
    timeout: float = 30.0
    auth_token_env: Optional[str] = None
    max_retries: int = 3
    backoff: float = 0.5
    max_concurrency: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_retries < 1:
            raise ConfigError("max_retries must be >= 1")
        if self.max_concurrency < 1:
            raise ConfigError("max_concurrency must be >= 1")


def _post_batch(client: httpx.Client, config: EmbeddingServiceConfig, texts: list[str]) -> list[list[float]]:
    last_err: Exception | None = None
    for attempt in range(config.max_retries):
        if attempt:
            time.sleep(config.backoff * 2 ** (attempt - 1))
        try:
            resp = client.post(config.endpoint_url, json={"model": config.model_name, "input": texts})
            resp.raise_for_status()
            data = resp.json()["data"]
            if len(data) != len(texts):
                raise EmbeddingServiceError(
                    f"service returned {len(data)} embeddings for {len(texts)} inputs"
                )
            return [item["embedding"] for item in data]
        except (httpx.HTTPError, KeyError, TypeError, ValueError) as exc:
            log.warning("embedding request failed (attempt %d/%d): %s", attempt + 1, config.max_retries, exc)
            last_err = exc
    raise EmbeddingServiceError(
        f"embedding request failed after {config.max_retries} attempts: {last_err}"
    )


def fetch_embeddings(records: list[TextRecord], config: EmbeddingServiceConfig) -> np.ndarray:
    """Embed ``records`` via a remote service; row i corresponds to records[i]."""
    if not records:
        raise EmbeddingServiceError("no records to embed")
    headers = {}
    if config.auth_token_env:
        token = os.environ.get(config.auth_token_env)
        if not token:
            raise EmbeddingServiceError(
                f"auth token environment variable {config.auth_token_env} is not set"
            )
        headers["Authorization"] = f"Bearer {token}"

    texts = [r.text for r in records]
    batches = [texts[i : i + config.batch_size] for i in range(0, len(texts), config.batch_size)]
    with httpx.Client(timeout=config.timeout, headers=headers) as client:
        if config.max_concurrency == 1:
            results = [_post_batch(client, config, b) for b in batches]
        else:
            with ThreadPoolExecutor(max_workers=config.max_concurrency) as pool:
                results = list(pool.map(lambda b: _post_batch(client, config, b), batches))

    rows = [vec for batch in results for vec in batch]
    dims = {len(v) for v in rows}
    if len(dims) != 1:
        raise EmbeddingServiceError(f"inconsistent embedding dimensions across batches: {sorted(dims)}")
    x = np.asarray(rows, dtype=np.float32)
    if not np.all(np.isfinite(x)):
        raise EmbeddingServiceError("service returned non-finite embedding values")
    return x
