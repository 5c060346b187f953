"""Binary matrix files, projector files, experiment configs and CSV reports.

Matrix file layout (little-endian)::

    b"RFI1" | rows: u32 | cols: u32 | rows*cols float64, row-major

A projector file is ``b"RFIP" | K: u32 | mode: u32 | classes: u32`` followed
by matrix blocks: selected indices (1 x k), U_tilde, beta_tilde, scores
(0 x 0 when absent) and, for the classwise mode, one basis per class.
All writes go to a temporary file in the target directory and are renamed
into place.
"""

from __future__ import annotations

import csv
import hashlib
import io
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .core import RobustnessScoreTable, RobustProjector

MATRIX_MAGIC = b"RFI1"
PROJECTOR_MAGIC = b"RFIP"
_HEADER = struct.Struct("<4sII")
_PROJ_HEADER = struct.Struct("<4sIII")
MODES = ("global-union", "classwise-bc")


class FormatError(ValueError):
    """Malformed file contents."""


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_matrix(a) -> bytes:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError("only 2-D arrays can be stored")
    rows, cols = a.shape
    if rows > 0xFFFFFFFF or cols > 0xFFFFFFFF:
        raise ValueError("matrix too large for a 32-bit header")
    return _HEADER.pack(MATRIX_MAGIC, rows, cols) + np.ascontiguousarray(a, dtype="<f8").tobytes()


def _decode_matrix(buf: bytes, offset: int = 0):
    if len(buf) - offset < _HEADER.size:
        raise FormatError("truncated matrix header")
    magic, rows, cols = _HEADER.unpack_from(buf, offset)
    if magic != MATRIX_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    start = offset + _HEADER.size
    end = start + 8 * rows * cols
    if len(buf) < end:
        raise FormatError(f"payload holds {len(buf) - start} bytes, header needs {8 * rows * cols}")
    a = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=start).reshape(rows, cols)
    return a.astype(np.float64), end


def decode_matrix(buf: bytes) -> np.ndarray:
    a, end = _decode_matrix(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after the payload")
    return a


def write_matrix(path, a) -> None:
    atomic_write(path, encode_matrix(a))


def read_matrix(path) -> np.ndarray:
    return decode_matrix(Path(path).read_bytes())


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def encode_projector(proj: RobustProjector) -> bytes:
    C = proj.beta_tilde.shape[1]
    parts = [_PROJ_HEADER.pack(PROJECTOR_MAGIC, int(proj.K), MODES.index(proj.mode), C),
             encode_matrix(np.asarray(proj.selected_indices, dtype=np.float64).reshape(1, -1)),
             encode_matrix(proj.U_tilde),
             encode_matrix(proj.beta_tilde)]
    if proj.scores is None:
        parts.append(encode_matrix(np.zeros((0, 0))))
    else:
        parts.append(encode_matrix(proj.scores.scores))
    for basis in proj.class_bases:
        parts.append(encode_matrix(basis))
    return b"".join(parts)


def decode_projector(buf: bytes) -> RobustProjector:
    if len(buf) < _PROJ_HEADER.size:
        raise FormatError("truncated projector header")
    magic, K, mode, C = _PROJ_HEADER.unpack_from(buf, 0)
    if magic != PROJECTOR_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if mode >= len(MODES):
        raise FormatError(f"unknown mode code {mode}")
    off = _PROJ_HEADER.size
    idx, off = _decode_matrix(buf, off)
    U, off = _decode_matrix(buf, off)
    beta, off = _decode_matrix(buf, off)
    scores, off = _decode_matrix(buf, off)
    bases = []
    if MODES[mode] == "classwise-bc":
        for _ in range(C):
            basis, off = _decode_matrix(buf, off)
            bases.append(basis)
    if off != len(buf):
        raise FormatError("trailing bytes in projector file")
    table = None
    if scores.size:
        table = RobustnessScoreTable(scores, np.argsort(-scores, axis=1, kind="stable"), np.zeros((0, 0)))
    return RobustProjector(idx.ravel().astype(np.int64), U, beta, K, MODES[mode], table, tuple(bases))


def write_projector(path, proj: RobustProjector) -> None:
    atomic_write(path, encode_projector(proj))


def read_projector(path) -> RobustProjector:
    return decode_projector(Path(path).read_bytes())


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _flag(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default)
CONFIG_SCHEMA = {
    # data
    "task": (str, "planted"),
    "d": (int, 12),
    "n": (int, 600),
    "n_test": (int, 400),
    "classes": (int, 3),
    "covariance": (str, "identity"),
    "noise_sigma": (float, 0.0),
    "feature_kind": (str, "linear"),
    "feature_dim": (int, 0),
    "x_file": (str, ""),
    "y_file": (str, ""),
    "weights_file": (str, ""),
    "projector_file": (str, ""),
    # attack
    "norm": (str, "l2"),
    "epsilon": (float, 0.5),
    "step": (float, 0.0),
    "iters": (int, 0),
    "loss": (str, "cross-entropy"),
    "random_start": (_flag, False),
    "seed": (int, 0),
    # robust inference
    "K": (int, 0),
    "mode": (str, "global-union"),
    "k_range": (str, ""),
    # dynamics
    "eta": (float, 0.0),
    "gamma": (float, 1.0),
    "T": (int, 200),
    "t_grid": (_floats, (0.0, 1.0, 10.0, 100.0)),
    "delta": (float, 0.1),
    # NTK experiment
    "deltas": (_floats, (0.01, 0.05, 0.1)),
    "pgd_iters": (int, 50),
    "n_probes": (int, 1),
    "eig_rel_tol": (float, 1e-10),
    # output
    "out_dir": (str, "."),
}


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict

    @classmethod
    def parse(cls, text: str = "", overrides: dict | None = None,
              defaults: dict | None = None) -> "ExperimentConfig":
        """Parse ``key = value`` lines (``#`` starts a comment); unknown keys raise.

        Precedence: ``overrides``, then the text, then ``defaults``, then the
        schema defaults.
        """
        raw = dict(defaults or {})
        unknown = sorted(set(raw) - set(CONFIG_SCHEMA))
        if unknown:
            raise ValueError(f"unknown default keys: {', '.join(unknown)}")
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            raw[key] = value
        raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
        unknown = sorted(set(raw) - set(CONFIG_SCHEMA))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        values = {}
        for key, (parse, default) in CONFIG_SCHEMA.items():
            if key in raw:
                v = raw[key]
                try:
                    values[key] = parse(v) if isinstance(v, str) else v
                except ValueError as exc:
                    raise ValueError(f"bad value for {key}: {v!r}") from exc
            else:
                values[key] = default
        return cls(values)

    @classmethod
    def load(cls, path, overrides: dict | None = None, defaults: dict | None = None) -> "ExperimentConfig":
        return cls.parse(Path(path).read_text(), overrides, defaults)

    def __getitem__(self, key):
        return self.values[key]

    def canonical(self) -> str:
        return "".join(f"{k}={_render(self.values[k])}\n" for k in sorted(self.values))

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def render_csv(columns: Iterable[str], rows: Iterable, config: ExperimentConfig | None = None,
               footer: dict | None = None) -> bytes:
    """CSV text with the resolved config and its hash as leading ``#`` comments."""
    buf = io.StringIO()
    if config is not None:
        buf.write(f"# config_hash={config.digest}\n")
        for line in config.canonical().splitlines():
            buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(columns))
    for row in rows:
        w.writerow([_cell(v) for v in row])
    for k, v in (footer or {}).items():
        buf.write(f"# {k}={_cell(v)}\n")
    return buf.getvalue().encode("utf-8")


def write_csv(path, columns, rows, config=None, footer=None) -> None:
    atomic_write(path, render_csv(columns, rows, config, footer))


def read_csv(path):
    """Header and data rows of a report, skipping comment lines."""
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


def csv_comments(path) -> dict:
    out = {}
    for ln in Path(path).read_text().splitlines():
        if ln.startswith("# ") and "=" in ln:
            k, v = ln[2:].split("=", 1)
            out.setdefault(k, v)
    return out
