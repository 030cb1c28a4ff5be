"""Byte tokenizer, corpus loading, batching, run configs and the checkpoint format.

Checkpoint layout (all integers little-endian)::

    offset 0   4 bytes   magic b"INAT"
    offset 4   u32       format version (currently 1)
    offset 8   u64       header length H in bytes
    offset 16  H bytes   UTF-8 JSON header
    16 + H     ...       payload: raw tensor data, concatenated

The header holds ``model_config``, ``tokenizer``, ``meta`` (seed, step and
any other provenance) and ``tensors``: a list of ``{name, shape, dtype,
offset, nbytes}`` entries. ``dtype`` is ``"f32"`` or ``"f64"``, data is
C-order little-endian and ``offset`` is relative to the payload start.
Entries are stored in order without gaps.
"""

from __future__ import annotations

import dataclasses
import importlib
import inspect
import json
import logging
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .model import ModelConfig, ModelParams, tensor_names
from .tensor import Rng

log = logging.getLogger(__name__)

VOCAB_SIZE = 257
SEPARATOR = 256
TOKENIZER_SPEC = {"kind": "byte", "vocab_size": VOCAB_SIZE, "separator_id": SEPARATOR}

MAGIC = b"INAT"
FORMAT_VERSION = 1
_DTYPE_CODES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


# ---------------------------------------------------------------- tokenizer


def tokenize(data: bytes) -> list[int]:
    return list(bytes(data))


def detokenize(ids) -> bytes:
    """Inverse of :func:`tokenize`. Separator ids are dropped."""
    arr = np.asarray(list(ids), dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() > SEPARATOR):
        raise ValueError(f"token id out of range [0, {SEPARATOR}]")
    return bytes(arr[arr != SEPARATOR].astype(np.uint8).tolist())


def encode_documents(docs: list[bytes]) -> np.ndarray:
    """Concatenate tokenized documents with the separator id between them."""
    out: list[int] = []
    for i, doc in enumerate(docs):
        if i:
            out.append(SEPARATOR)
        out.extend(doc)
    return np.asarray(out, dtype=np.int64)


DOC_BREAK = b"\f"


def read_corpus(path: str | Path) -> np.ndarray:
    """Token ids of a corpus file; form feeds separate documents."""
    raw = Path(path).read_bytes()
    if not raw:
        raise ValueError(f"corpus {path} is empty")
    docs = [d.strip(b"\n") for d in raw.split(DOC_BREAK)]
    return encode_documents([d for d in docs if d])


def write_corpus(path: str | Path, docs: list[bytes]) -> None:
    Path(path).write_bytes((b"\n" + DOC_BREAK + b"\n").join(docs))


_CORPUS_MODULES = (
    "abc", "argparse", "ast", "asyncio", "base64", "bisect", "bz2", "calendar", "cmd", "codecs",
    "collections", "concurrent.futures", "configparser", "contextlib", "copy", "csv", "ctypes",
    "dataclasses", "datetime", "decimal", "difflib", "dis", "doctest", "email", "enum", "fileinput",
    "fnmatch", "fractions", "ftplib", "functools", "getopt", "gettext", "glob", "gzip", "hashlib",
    "heapq", "hmac", "html.parser", "http.client", "http.server", "imaplib", "inspect", "io",
    "ipaddress", "json", "locale", "logging", "lzma", "mailbox", "mimetypes", "multiprocessing",
    "netrc", "numbers", "operator", "optparse", "os", "pathlib", "pdb", "pickle", "pkgutil",
    "platform", "plistlib", "poplib", "pprint", "profile", "pydoc", "queue", "quopri", "random",
    "re", "reprlib", "sched", "secrets", "selectors", "shelve", "shlex", "shutil", "signal",
    "smtplib", "socket", "socketserver", "sqlite3", "ssl", "statistics", "string", "struct",
    "subprocess", "symtable", "tarfile", "tempfile", "textwrap", "threading", "timeit", "token",
    "tokenize", "trace", "traceback", "types", "typing", "unittest", "urllib.parse",
    "urllib.request", "uuid", "warnings", "wave", "weakref", "xml.dom.minidom", "xml.etree.ElementTree",
    "zipfile", "zipimport",
)


def _docstrings(modname: str) -> list[bytes]:
    try:
        mod = importlib.import_module(modname)
    except Exception:  # platform-specific modules
        return []
    objs: list = [mod]
    for _, obj in sorted(vars(mod).items()):
        if getattr(obj, "__module__", None) != mod.__name__:
            continue
        if inspect.isclass(obj):
            objs.append(obj)
            objs += [o for _, o in sorted(vars(obj).items()) if inspect.isfunction(o)]
        elif inspect.isfunction(obj):
            objs.append(obj)
    out = []
    for obj in objs:
        doc = obj.__doc__ if obj is mod else inspect.getdoc(obj)
        if isinstance(doc, str) and len(doc) >= 80:
            out.append(doc.strip().encode("utf-8"))
    return out


def reference_documents() -> list[bytes]:
    """English technical prose shipped with CPython: help topics and stdlib docstrings."""
    from pydoc_data.topics import topics

    docs = [topics[k].strip().encode("utf-8") for k in sorted(topics)]
    for name in _CORPUS_MODULES:
        docs += _docstrings(name)
    return docs


def build_reference_corpus(out_dir: str | Path, train_bytes: int = 1_000_000, eval_every: int = 10) -> tuple[Path, Path]:
    """Write ``train.txt`` and a held-out ``eval.txt`` (every ``eval_every``-th document)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, held = [], []
    size = 0
    for i, doc in enumerate(reference_documents()):
        if i % eval_every == eval_every - 1:
            held.append(doc)
        elif size < train_bytes:
            train.append(doc)
            size += len(doc) + 1
    train_path, eval_path = out_dir / "train.txt", out_dir / "eval.txt"
    write_corpus(train_path, train)
    write_corpus(eval_path, held)
    return train_path, eval_path


# ---------------------------------------------------------------- batching


def batchify(ids, context_length: int, seed: int | None = 0) -> np.ndarray:
    """Contiguous non-overlapping chunks [n_chunks, CL], remainder dropped.

    Chunk order is shuffled by ``seed``; ``seed=None`` keeps corpus order.
    """
    if context_length < 2:
        raise ValueError(f"context length must be >= 2, got {context_length}")
    arr = np.asarray(ids, dtype=np.int64)
    n = arr.size // context_length
    if n == 0:
        log.warning("corpus of %d ids is shorter than context length %d; no chunks", arr.size, context_length)
        return np.empty((0, context_length), dtype=np.int64)
    chunks = arr[: n * context_length].reshape(n, context_length)
    if seed is not None:
        chunks = chunks[Rng(seed).permutation(n)]
    return chunks


# ---------------------------------------------------------------- checkpoints


class CheckpointError(ValueError):
    """A checkpoint failed validation; ``check`` names the failing test."""

    def __init__(self, check: str, message: str):
        super().__init__(f"{check}: {message}")
        self.check = check


@dataclass
class Checkpoint:
    params: ModelParams
    meta: dict = field(default_factory=dict)
    extra: dict[str, np.ndarray] = field(default_factory=dict)  # e.g. optimizer moments
    tokenizer: dict = field(default_factory=lambda: dict(TOKENIZER_SPEC))

    @property
    def config(self) -> ModelConfig:
        return self.params.config


def _dtype_code(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    raise ValueError(f"unsupported tensor dtype {arr.dtype}")


def checkpoint_bytes(params: ModelParams, meta: dict | None = None, extra: dict[str, np.ndarray] | None = None) -> bytes:
    arrays = [(n, t.data) for n, t in params.named_tensors()]
    arrays += sorted((extra or {}).items())
    manifest, chunks, offset = [], [], 0
    for name, arr in arrays:
        code = _dtype_code(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": code, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "model_config": params.config.to_dict(),
        "tokenizer": dict(TOKENIZER_SPEC),
        "meta": dict(meta or {}),
        "tensors": manifest,
    }
    hbytes = json.dumps(header, sort_keys=True, indent=1).encode("utf-8")
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def save_checkpoint(params: ModelParams, path: str | Path, meta: dict | None = None, extra: dict[str, np.ndarray] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(params, meta, extra))
    tmp.replace(path)
    return path


def read_header(blob: bytes) -> tuple[dict, int]:
    """Parse and validate the fixed prefix and JSON header; returns (header, payload start)."""
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("magic", f"expected {MAGIC!r}, found {blob[:4]!r}")
    version, hlen = struct.unpack("<IQ", blob[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointError("version", f"unsupported format version {version}")
    if 16 + hlen > len(blob):
        raise CheckpointError("header", f"header length {hlen} exceeds file size {len(blob)}")
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError("header", f"unparseable header ({e})") from None
    for key in ("model_config", "tokenizer", "meta", "tensors"):
        if key not in header:
            raise CheckpointError("header", f"missing key {key!r}")
    return header, 16 + hlen


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    header, start = read_header(blob)
    payload = memoryview(blob)[start:]
    arrays: dict[str, np.ndarray] = {}
    expected = 0
    for entry in header["tensors"]:
        name, code = entry["name"], entry["dtype"]
        if code not in _DTYPE_CODES:
            raise CheckpointError("manifest", f"tensor {name!r} has unknown dtype {code!r}")
        dt = _DTYPE_CODES[code]
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if entry["offset"] != expected:
            raise CheckpointError("manifest", f"tensor {name!r} at offset {entry['offset']}, expected {expected}")
        if entry["nbytes"] != count * dt.itemsize:
            raise CheckpointError("manifest", f"tensor {name!r} byte size does not match its shape")
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise CheckpointError("bounds", f"tensor {name!r} ends at {end}, payload has {len(payload)} bytes")
        arr = np.frombuffer(payload[entry["offset"] : end], dtype=dt).reshape(entry["shape"])
        arrays[name] = arr.astype(dt.newbyteorder("="), copy=True)
        expected = end
    if expected != len(payload):
        raise CheckpointError("bounds", f"{len(payload) - expected} trailing payload bytes")
    try:
        config = ModelConfig.from_dict(header["model_config"])
    except (TypeError, ValueError) as e:
        raise CheckpointError("config", str(e)) from None
    param_names = set(tensor_names(config))
    try:
        params = ModelParams.from_named(config, {k: v for k, v in arrays.items() if k in param_names})
    except (KeyError, ValueError) as e:
        raise CheckpointError("tensors", str(e)) from None
    extra = {k: v for k, v in arrays.items() if k not in param_names}
    return Checkpoint(params, header["meta"], extra, header["tokenizer"])


# ---------------------------------------------------------------- run configs


@dataclass
class PathsConfig:
    train_corpus: str = "data/train.txt"
    eval_corpus: str = "data/eval.txt"
    out_dir: str = "runs/default"


@dataclass
class RunConfig:
    """Everything a train/finetune/bench command needs, as one YAML document."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: "TrainConfig" = None  # type: ignore[assignment]
    paths: PathsConfig = field(default_factory=PathsConfig)
    eval_lengths: list[int] = field(default_factory=lambda: [8, 16, 32, 64, 128])

    def __post_init__(self):
        if self.train is None:
            from .training import TrainConfig

            self.train = TrainConfig()

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": dataclasses.asdict(self.train),
            "paths": dataclasses.asdict(self.paths),
            "eval_lengths": list(self.eval_lengths),
        }

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        from .training import TrainConfig

        data = dict(data or {})
        unknown = set(data) - {"model", "train", "paths", "eval_lengths"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        train = _build(TrainConfig, data.get("train", {}), "train")
        if "betas" in (data.get("train") or {}):
            train.betas = tuple(train.betas)
        return cls(
            model=_build(ModelConfig, data.get("model", {}), "model"),
            train=train,
            paths=_build(PathsConfig, data.get("paths", {}), "paths"),
            eval_lengths=[int(x) for x in data.get("eval_lengths", [8, 16, 32, 64, 128])],
        )

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        return cls.from_dict(yaml.safe_load(text))

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.loads(Path(path).read_text())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())


def _build(cls, data: dict, section: str):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return cls(**data)
