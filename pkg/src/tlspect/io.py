"""Bit-exact file formats: spectrum container, manifests, track lists.

All writers are atomic (temp file in the destination directory, then
os.replace) and embed the config hash and toolkit version, so a run is
reproducible from its artifacts alone. Nothing here writes timestamps;
rerunning a command with the same config and seed must reproduce every
output byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

import numpy as np

from . import __version__
from .constants import H, si_to_debye, debye_to_si
from .pipeline import TlsTrack
from .synth import BiasSpectrum

MAGIC = b"TLSPECT1\n"


class DataError(RuntimeError):
    """Corrupt, truncated, or wrongly typed input file."""


def _atomic_write(path, data: bytes):
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".",
                               prefix=os.path.basename(path) + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x):
    """Shortest round-trip decimal for a float, stable across runs."""
    return repr(float(x))


# ---------------------------------------------------------------------------
# spectrum container
# ---------------------------------------------------------------------------

def write_spectrum(path, spectrum: BiasSpectrum, config_hash=""):
    """Serialise a rendered sweep.

    Layout: magic, 8-byte little-endian header length, JSON header
    (axes, seed, resonator metadata, body checksum), then the complex
    grid as float64 little-endian re/im pairs, frequency-major.
    """
    grid = np.ascontiguousarray(spectrum.s21, dtype=np.complex128)
    body = grid.tobytes()
    header = {
        "format": MAGIC.decode().strip(),
        "version": __version__,
        "config_hash": config_hash,
        "n_freq": int(spectrum.freq.size),
        "n_bias": int(spectrum.bias.size),
        "freq_hz": [float(v) for v in spectrum.freq],
        "bias_vpm": [float(v) for v in spectrum.bias],
        "body_sha256": hashlib.sha256(body).hexdigest(),
        "meta": {k: (int(v) if isinstance(v, (int, np.integer)) else
                     float(v) if isinstance(v, (float, np.floating)) else v)
                 for k, v in spectrum.meta.items()},
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob = MAGIC + len(hdr).to_bytes(8, "little") + hdr + body
    _atomic_write(path, blob)


def read_spectrum(path) -> BiasSpectrum:
    """Load and verify a spectrum container."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}")
    if not blob.startswith(MAGIC):
        raise DataError(f"{path}: bad magic, not a spectrum file")
    off = len(MAGIC)
    if len(blob) < off + 8:
        raise DataError(f"{path}: truncated header length")
    hlen = int.from_bytes(blob[off:off + 8], "little")
    off += 8
    if len(blob) < off + hlen:
        raise DataError(f"{path}: truncated header")
    try:
        header = json.loads(blob[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable header: {exc}")
    off += hlen
    body = blob[off:]
    n_freq, n_bias = int(header["n_freq"]), int(header["n_bias"])
    expect = n_freq * n_bias * 16
    if len(body) != expect:
        raise DataError(f"{path}: body is {len(body)} bytes, expected {expect}")
    if hashlib.sha256(body).hexdigest() != header["body_sha256"]:
        raise DataError(f"{path}: body checksum mismatch")
    s21 = np.frombuffer(body, dtype=np.complex128).reshape(n_freq, n_bias)
    meta = dict(header.get("meta", {}))
    meta["config_hash"] = header.get("config_hash", "")
    meta["version"] = header.get("version", "")
    return BiasSpectrum(freq=np.array(header["freq_hz"], dtype=np.float64),
                        bias=np.array(header["bias_vpm"], dtype=np.float64),
                        s21=s21.copy(), meta=meta)


# ---------------------------------------------------------------------------
# ground-truth manifest
# ---------------------------------------------------------------------------

_MANIFEST_COLS = ("delta_ghz", "delta0_ghz", "pz_debye", "gamma_khz",
                  "sigma_noise_khz", "vertex_bias_vpm", "observable")


def write_manifest(path, tls_list, window=None, config_hash="", seed=None):
    """Ground-truth defect table for a rendered spectrum.

    One row per sampled defect with its vertex position; observable is 1
    where the vertex sits inside the given window.
    """
    from .synth import ensemble_arrays, observable_vertex_mask

    lines = [f"# config_hash={config_hash}",
             f"# version={__version__}"]
    if seed is not None:
        lines.append(f"# seed={int(seed)}")
    lines.append(",".join(_MANIFEST_COLS))
    if len(tls_list):
        delta, delta0, pz, gam, sig = ensemble_arrays(tls_list)
        if window is not None:
            obs = observable_vertex_mask(delta, delta0, pz, window)
        else:
            obs = np.zeros(delta.size, dtype=bool)
        with np.errstate(divide="ignore", invalid="ignore"):
            vb = np.where(pz != 0.0, -delta / (2.0 * pz), np.inf)
        two_pi = 2.0 * np.pi
        for i in range(delta.size):
            lines.append(",".join([
                _fmt(delta[i] / H / 1e9),
                _fmt(delta0[i] / H / 1e9),
                _fmt(si_to_debye(pz[i])),
                _fmt(gam[i] / two_pi / 1e3),
                _fmt(sig[i] / two_pi / 1e3),
                _fmt(vb[i]),
                str(int(obs[i])),
            ]))
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_manifest(path):
    """Manifest back as a dict of float64 arrays plus header comments."""
    rows, comments = _read_csv(path, _MANIFEST_COLS)
    out = {k: np.array([r[i] for r in rows], dtype=np.float64)
           for i, k in enumerate(_MANIFEST_COLS)}
    out["observable"] = out["observable"].astype(bool)
    out.update(comments)
    return out


# ---------------------------------------------------------------------------
# track lists
# ---------------------------------------------------------------------------

_TRACK_COLS = ("delta0_ghz", "vertex_bias_kvpm", "pz_debye", "rss", "n_points")


def write_tracks(path, tracks, config_hash="", extra_comments=()):
    """Admitted defect tracks as CSV with provenance comments."""
    lines = [f"# config_hash={config_hash}",
             f"# version={__version__}"]
    lines.extend(f"# {c}" for c in extra_comments)
    lines.append(",".join(_TRACK_COLS))
    for t in tracks:
        lines.append(",".join([
            _fmt(t.delta0 / H / 1e9),
            _fmt(t.vertex_bias / 1e3),
            _fmt(si_to_debye(t.pz)),
            _fmt(t.rss),
            str(int(t.n_points)),
        ]))
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_tracks(path):
    """Track list back as TlsTrack objects (all admitted, vertex-crossing)."""
    rows, comments = _read_csv(path, _TRACK_COLS)
    tracks = [
        TlsTrack(delta0=r[0] * 1e9 * H,
                 vertex_bias=r[1] * 1e3,
                 pz=debye_to_si(r[2]),
                 rss=r[3],
                 n_points=int(r[4]),
                 crosses_vertex=True)
        for r in rows
    ]
    return tracks, comments


def _read_csv(path, expected_cols):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}")
    comments = {}
    rows = []
    header_seen = False
    for ln, line in enumerate(raw.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                key, _, val = body.partition("=")
                comments[key.strip()] = val.strip()
            continue
        if not header_seen:
            if tuple(line.split(",")) != tuple(expected_cols):
                raise DataError(f"{path}:{ln}: unexpected columns {line!r}")
            header_seen = True
            continue
        parts = line.split(",")
        if len(parts) != len(expected_cols):
            raise DataError(f"{path}:{ln}: expected {len(expected_cols)} "
                            f"fields, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise DataError(f"{path}:{ln}: {exc}")
    if not header_seen:
        raise DataError(f"{path}: missing header row")
    return rows, comments
