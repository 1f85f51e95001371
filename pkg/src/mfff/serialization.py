"""On-disk formats: checkpoints, numeric CSV files and dataset ingestion.

Checkpoint layout::

    MFFF-CKPT 1\\n
    <one line of JSON with sorted keys>\\n
    <encoder parameters, little-endian float64>
    <decoder parameters, little-endian float64>

The JSON header records the manifold, both network architectures, the
latent distribution and any extra metadata (loss weights, training config).
Writing the same model twice yields identical bytes.

CSV files hold one point per row written with 17 significant digits, so
floats survive a write/read cycle exactly.
"""
import csv
import json
import math
import os
import tempfile

import numpy as np

from . import distributions, geometry, nnet
from .exceptions import OffManifoldRow, ParseError
from .flow import FlowModel

MAGIC = b"MFFF-CKPT 1\n"
FLOAT_FORMAT = "%.17g"


def atomic_write_bytes(path, data):
    """Write ``data`` to ``path`` through a temporary file and a rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def format_float(value):
    return FLOAT_FORMAT % value


def csv_text(header, rows):
    """Render rows of numbers (or strings) as CSV text."""
    lines = [",".join(header)] if header else []
    for row in rows:
        lines.append(",".join(v if isinstance(v, str) else format_float(v) for v in row))
    return "\n".join(lines) + "\n"


def write_csv(path, header, rows):
    atomic_write_text(path, csv_text(header, rows))


def write_points(path, points, extra=None, extra_name="log_density"):
    points = np.atleast_2d(np.asarray(points, dtype=float))
    header = [f"x{i}" for i in range(points.shape[1])]
    rows = points
    if extra is not None:
        header.append(extra_name)
        rows = np.column_stack([points, extra])
    write_csv(path, header, rows)


def read_numeric_csv(path, columns=None):
    """Read a numeric CSV, skipping a header line if present.

    Blank lines and lines starting with ``#`` are ignored. Raises
    :class:`ParseError` (with the 1-based line number) for malformed rows.
    """
    rows, header_ok = [], True
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            try:
                values = [float(v) for v in row]
            except ValueError:
                if header_ok and not rows:
                    header_ok = False
                    continue
                raise ParseError(f"non-numeric value in {row!r}", lineno) from None
            header_ok = False
            if columns is not None and len(values) != columns:
                raise ParseError(f"expected {columns} columns, found {len(values)}", lineno)
            if not all(math.isfinite(v) for v in values):
                raise ParseError("non-finite value", lineno)
            if rows and len(values) != len(rows[0][1]):
                raise ParseError("inconsistent column count", lineno)
            rows.append((lineno, values))
    if not rows:
        raise ParseError(f"{path} contains no data rows")
    return np.array([v for _, v in rows], dtype=float)


# ---------------------------------------------------------------------------
# dataset ingestion

INGEST_FORMATS = ("angles", "unit_vectors", "rotmat9", "latlon_degrees")
INGEST_TOL = 1e-3


def latlon_to_unit(latlon_degrees):
    """Latitude/longitude in degrees to ``(cos lat cos lon, cos lat sin lon, sin lat)``."""
    lat, lon = np.radians(np.asarray(latlon_degrees, dtype=float)).T
    return np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=1)


def canonicalize(raw, fmt, manifold):
    """Turn parsed rows into embedded points, rejecting rows off the manifold."""
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    if fmt == "angles":
        if not isinstance(manifold, geometry.Torus):
            raise ValueError("the angles format needs a torus")
        points = manifold.from_angles(raw)
    elif fmt == "latlon_degrees":
        if not (isinstance(manifold, geometry.Sphere) and manifold.n == 2):
            raise ValueError("the latlon_degrees format needs S^2")
        if np.any(np.abs(raw[:, 0]) > 90.0) or np.any(np.abs(raw[:, 1]) > 180.0):
            bad = int(np.flatnonzero((np.abs(raw[:, 0]) > 90.0) | (np.abs(raw[:, 1]) > 180.0))[0])
            raise OffManifoldRow(bad, math.inf)
        points = latlon_to_unit(raw)
    elif fmt == "unit_vectors":
        if isinstance(manifold, (geometry.Sphere, geometry.Torus)):
            blocks = raw.reshape(len(raw), -1, 2) if isinstance(manifold, geometry.Torus) else raw[:, None, :]
            dev = np.max(np.abs(np.linalg.norm(blocks, axis=-1) - 1.0), axis=1)
            bad = np.flatnonzero(~(dev <= INGEST_TOL))
            if len(bad):
                raise OffManifoldRow(int(bad[0]), float(dev[bad[0]]))
            points = manifold.project(raw)
        else:
            points = raw
    elif fmt == "rotmat9":
        if not isinstance(manifold, geometry.SpecialOrthogonal3):
            raise ValueError("the rotmat9 format needs SO(3)")
        points = np.empty_like(raw)
        for i, row in enumerate(raw):
            try:
                points[i] = manifold.project(row)
            except (ArithmeticError, ValueError):
                raise OffManifoldRow(i, math.inf) from None
        moved = np.linalg.norm(points - raw, axis=1)
        bad = np.flatnonzero(moved > INGEST_TOL)
        if len(bad):
            raise OffManifoldRow(int(bad[0]), float(moved[bad[0]]))
    else:
        raise ValueError(f"unknown dataset format {fmt!r}; expected one of {INGEST_FORMATS}")
    dist = manifold.distance_to_manifold(points)
    bad = np.flatnonzero(~(dist <= manifold.on_manifold_tol))
    if len(bad):
        raise OffManifoldRow(int(bad[0]), float(dist[bad[0]]))
    return points


def expected_columns(fmt, manifold):
    return {"angles": manifold.n, "unit_vectors": manifold.m,
            "rotmat9": 9, "latlon_degrees": 2}.get(fmt)


def ingest_dataset(path, fmt, manifold):
    """Read a CSV dataset in one of :data:`INGEST_FORMATS` onto ``manifold``."""
    if fmt not in INGEST_FORMATS:
        raise ValueError(f"unknown dataset format {fmt!r}; expected one of {INGEST_FORMATS}")
    raw = read_numeric_csv(path, columns=expected_columns(fmt, manifold))
    return canonicalize(raw, fmt, manifold)


# ---------------------------------------------------------------------------
# checkpoints

def checkpoint_bytes(model, extra=None):
    header = {
        "manifold": model.manifold.describe(),
        "encoder": model.encoder.spec.to_dict(),
        "decoder": model.decoder.spec.to_dict(),
        "latent": model.latent.to_dict(),
        "extra": extra or {},
    }
    text = json.dumps(header, sort_keys=True, separators=(",", ":"))
    body = np.concatenate([model.encoder.flat, model.decoder.flat]).astype("<f8").tobytes()
    return MAGIC + text.encode("utf-8") + b"\n" + body


def save_checkpoint(path, model, extra=None):
    atomic_write_bytes(path, checkpoint_bytes(model, extra))


def parse_checkpoint(data):
    """Inverse of :func:`checkpoint_bytes`; returns ``(model, extra)``."""
    if not data.startswith(MAGIC):
        raise ValueError("not a checkpoint file (bad magic line)")
    end = data.index(b"\n", len(MAGIC))
    header = json.loads(data[len(MAGIC):end].decode("utf-8"))
    manifold = geometry.manifold_from_description(header["manifold"])
    enc_spec = nnet.NetworkSpec(**header["encoder"])
    dec_spec = nnet.NetworkSpec(**header["decoder"])
    flat = np.frombuffer(data[end + 1:], dtype="<f8").astype(float)
    if flat.size != enc_spec.n_params + dec_spec.n_params:
        raise ValueError("checkpoint body size does not match the stored architecture")
    encoder = nnet.NetworkParams(enc_spec, flat[: enc_spec.n_params].copy())
    decoder = nnet.NetworkParams(dec_spec, flat[enc_spec.n_params:].copy())
    latent = distributions.distribution_from_dict(header["latent"], manifold)
    return FlowModel(manifold, encoder, decoder, latent), header["extra"]


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
