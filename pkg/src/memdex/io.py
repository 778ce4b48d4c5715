"""Text file formats: keypoints, deep vectors, manifest, thresholds, scores, ROC.

All reals are written with 17 significant digits so a write/read/write cycle
reproduces the bytes exactly. Parsers reject non-finite tokens and report the
offending file and line.
"""

from __future__ import annotations

import csv
import io
import math
import os
from pathlib import Path

import numpy as np

from memdex.binarize import ThresholdTable
from memdex.evaluation import RocCurve, ScoreMatrix
from memdex.model import (
    DEFAULT_D_KP,
    DataFormatError,
    Dataset,
    DeepVector,
    DimensionMismatchError,
    KeypointSet,
    SubjectRecord,
)

MANIFEST_HEADER = ["subject_id", "family_id", "group_label", "keypoint_file", "vector_file"]
SCORE_HEADER = ["query_id", "candidate_id", "shallow", "deep", "fused", "valid"]


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def _real(tok: str, path, line: int) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise DataFormatError(f"not a number: {tok!r}", path, line) from None
    if not math.isfinite(v):
        raise DataFormatError(f"non-finite value {tok!r}", path, line)
    return v


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _lines(path):
    try:
        with open(path) as fh:
            return fh.read().splitlines()
    except FileNotFoundError:
        raise DataFormatError("file not found", path) from None


# -- keypoints -------------------------------------------------------------------

def format_keypoints(kps: KeypointSet) -> str:
    out = [f"KEYPOINTS {len(kps)} {kps.dim}"]
    for pos, scale, desc in zip(kps.positions, kps.scales, kps.descriptors):
        out.append(" ".join(fmt(v) for v in (*pos, scale, *desc)))
    return "\n".join(out) + "\n"


def read_keypoints(path, d_kp: int | None = None, subject_id: str | None = None) -> KeypointSet:
    lines = _lines(path)
    if not lines:
        raise DataFormatError("empty keypoint file", path, 1, subject_id)
    head = lines[0].split()
    if len(head) != 3 or head[0] != "KEYPOINTS":
        raise DataFormatError("expected header 'KEYPOINTS <count> <D_kp>'", path, 1, subject_id)
    try:
        count, dim = int(head[1]), int(head[2])
    except ValueError:
        raise DataFormatError("malformed KEYPOINTS header", path, 1, subject_id) from None
    if d_kp is not None and dim != d_kp:
        raise DimensionMismatchError(f"file declares D_kp={dim}, dataset declares {d_kp}",
                                     path, 1, subject_id)
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != count:
        raise DataFormatError(f"header declares {count} keypoints, found {len(body)}",
                              path, None, subject_id)
    rows = np.empty((count, 4 + dim))
    for i, ln in enumerate(body):
        toks = ln.split()
        if len(toks) != 4 + dim:
            raise DimensionMismatchError(
                f"expected {dim} descriptor values, found {len(toks) - 4}", path, i + 2,
                subject_id)
        rows[i] = [_real(t, path, i + 2) for t in toks]
        if rows[i, 3] <= 0:
            raise DataFormatError("keypoint scale must be positive", path, i + 2, subject_id)
    return KeypointSet(rows[:, :3], rows[:, 3], rows[:, 4:], dim)


# -- deep vectors ------------------------------------------------------------------

def format_vectors(vectors: list[tuple[str, DeepVector]]) -> str:
    dim = len(vectors[0][1]) if vectors else 0
    binary = bool(vectors) and all(v.is_binary for _, v in vectors)
    out = [f"VECTORS {len(vectors)} {dim}" + (" binary" if binary else "")]
    for sid, v in vectors:
        toks = ("1" if x else "0" for x in v.values) if binary else (fmt(x) for x in v.values)
        out.append(f"{sid} " + " ".join(toks))
    return "\n".join(out) + "\n"


def read_vectors(path, d_dv: int | None = None) -> dict[str, tuple[DeepVector, int]]:
    """Map subject_id -> (vector, line number)."""
    lines = _lines(path)
    if not lines:
        raise DataFormatError("empty vector file", path, 1)
    head = lines[0].split()
    if len(head) not in (3, 4) or head[0] != "VECTORS" or (len(head) == 4 and head[3] != "binary"):
        raise DataFormatError("expected header 'VECTORS <count> <D_dv> [binary]'", path, 1)
    count, dim = int(head[1]), int(head[2])
    binary = len(head) == 4
    if d_dv is not None and dim != d_dv:
        raise DimensionMismatchError(f"file declares D_dv={dim}, dataset declares {d_dv}", path, 1)
    out = {}
    body = [(i + 2, ln) for i, ln in enumerate(lines[1:]) if ln.strip()]
    if len(body) != count:
        raise DataFormatError(f"header declares {count} vectors, found {len(body)}", path)
    for lineno, ln in body:
        toks = ln.split()
        sid = toks[0]
        if len(toks) - 1 != dim:
            raise DimensionMismatchError(f"expected {dim} values, found {len(toks) - 1}",
                                         path, lineno, sid)
        if binary and any(t not in ("0", "1") for t in toks[1:]):
            raise DataFormatError("binary vector tokens must be 0 or 1", path, lineno, sid)
        if sid in out:
            raise DataFormatError("duplicate subject_id in vector file", path, lineno, sid)
        vals = [_real(t, path, lineno) for t in toks[1:]]
        out[sid] = (DeepVector(vals, is_binary=binary), lineno)
    return out


# -- manifest / dataset ------------------------------------------------------------

def load_dataset(manifest_path) -> Dataset:
    """Parse a manifest and every feature file it references, in manifest row order.

    An optional first line ``# d_kp=<n> d_dv=<n>`` declares the dimensions;
    D_kp defaults to 64 and D_dv to whatever the vector files declare.
    """
    manifest_path = Path(manifest_path)
    lines = _lines(manifest_path)
    d_kp, d_dv = DEFAULT_D_KP, None
    start = 0
    if lines and lines[0].startswith("#"):
        for tok in lines[0][1:].split():
            key, _, val = tok.partition("=")
            if key == "d_kp":
                d_kp = int(val)
            elif key == "d_dv":
                d_dv = int(val)
        start = 1
    rows = list(csv.reader(lines[start:]))
    if not rows or [c.strip() for c in rows[0]] != MANIFEST_HEADER:
        raise DataFormatError(f"manifest header must be {','.join(MANIFEST_HEADER)}",
                              manifest_path, start + 1)
    base = manifest_path.parent
    vec_cache: dict[Path, dict] = {}
    subjects = []
    seen = {}
    for i, row in enumerate(rows[1:]):
        lineno = start + i + 2
        if not row:
            continue
        if len(row) != 5:
            raise DataFormatError("manifest row must have 5 fields", manifest_path, lineno)
        sid, fam, grp, kp_file, vec_file = (c.strip() for c in row)
        if sid in seen:
            raise DataFormatError(f"duplicate subject_id (first on line {seen[sid]})",
                                  manifest_path, lineno, sid)
        seen[sid] = lineno
        if kp_file:
            kps = read_keypoints(base / kp_file, d_kp, sid)
        else:
            kps = KeypointSet.empty(d_kp)
        vec = None
        if vec_file:
            vpath = base / vec_file
            if vpath not in vec_cache:
                vec_cache[vpath] = read_vectors(vpath, d_dv)
            if sid not in vec_cache[vpath]:
                raise DataFormatError(f"subject missing from {vec_file}", manifest_path,
                                      lineno, sid)
            vec = vec_cache[vpath][sid][0]
            if d_dv is None:
                d_dv = len(vec)
            elif len(vec) != d_dv:
                raise DimensionMismatchError(f"deep vector dimension {len(vec)} != {d_dv}",
                                             vpath, vec_cache[vpath][sid][1], sid)
        try:
            subjects.append(SubjectRecord(sid, fam, grp, kps, vec))
        except ValueError as exc:
            raise DataFormatError(str(exc), manifest_path, lineno, sid) from None
    return Dataset(tuple(subjects), d_kp, d_dv)


def write_dataset(ds: Dataset, out_dir, manifest_name: str = "manifest.csv",
                  vector_name: str = "vectors.txt") -> Path:
    """Write keypoint files, one shared vector file and the manifest."""
    out_dir = Path(out_dir)
    (out_dir / "keypoints").mkdir(parents=True, exist_ok=True)
    vectors = [(s.subject_id, s.deep_vector) for s in ds if s.deep_vector is not None]
    if vectors:
        atomic_write_text(out_dir / vector_name, format_vectors(vectors))
    buf = io.StringIO()
    decl = f"# d_kp={ds.d_kp}" + (f" d_dv={ds.d_dv}" if ds.d_dv is not None else "")
    buf.write(decl + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_HEADER)
    for s in ds:
        kp_rel = f"keypoints/{s.subject_id}.key"
        atomic_write_text(out_dir / kp_rel, format_keypoints(s.keypoints))
        w.writerow([s.subject_id, s.instance_label, s.group_label, kp_rel,
                    vector_name if s.deep_vector is not None else ""])
    manifest = out_dir / manifest_name
    atomic_write_text(manifest, buf.getvalue())
    return manifest


def write_manifest_with_vectors(ds: Dataset, manifest_src, manifest_dst, vector_rel: str) -> None:
    """Copy a manifest, pointing every subject with a deep vector at ``vector_rel``."""
    lines = _lines(manifest_src)
    out = io.StringIO()
    start = 0
    if lines and lines[0].startswith("#"):
        out.write(lines[0] + "\n")
        start = 1
    w = csv.writer(out, lineterminator="\n")
    rows = list(csv.reader(lines[start:]))
    w.writerow(rows[0])
    src_base = Path(manifest_src).parent.resolve()
    dst_base = Path(manifest_dst).parent.resolve()
    for row in rows[1:]:
        if not row:
            continue
        sid, fam, grp, kp, vec = row
        if kp:
            kp = os.path.relpath(src_base / kp, dst_base)
        if vec:
            vec = vector_rel
        w.writerow([sid, fam, grp, kp, vec])
    atomic_write_text(manifest_dst, out.getvalue())


# -- thresholds --------------------------------------------------------------------

def format_thresholds(table: ThresholdTable) -> str:
    out = [f"THRESHOLDS {len(table)}"]
    for i, (t, g, dg) in enumerate(zip(table.taus, table.gains, table.degenerate_mask)):
        out.append(f"{i} {fmt(t)} {fmt(g)} {int(dg)}")
    return "\n".join(out) + "\n"


def write_thresholds(table: ThresholdTable, path) -> None:
    atomic_write_text(path, format_thresholds(table))


def read_thresholds(path) -> ThresholdTable:
    lines = _lines(path)
    head = lines[0].split() if lines else []
    if len(head) != 2 or head[0] != "THRESHOLDS":
        raise DataFormatError("expected header 'THRESHOLDS <D_dv>'", path, 1)
    dim = int(head[1])
    body = [(i + 2, ln.split()) for i, ln in enumerate(lines[1:]) if ln.strip()]
    if len(body) != dim:
        raise DataFormatError(f"header declares {dim} elements, found {len(body)}", path)
    taus, gains, deg = np.empty(dim), np.empty(dim), np.zeros(dim, dtype=bool)
    for j, (lineno, toks) in enumerate(body):
        if len(toks) != 4 or toks[0] != str(j) or toks[3] not in ("0", "1"):
            raise DataFormatError("expected '<index> <tau> <gain_bits> <0|1>'", path, lineno)
        taus[j] = _real(toks[1], path, lineno)
        gains[j] = _real(toks[2], path, lineno)
        deg[j] = toks[3] == "1"
    return ThresholdTable(taus, gains, deg)


# -- score matrix ------------------------------------------------------------------

def format_score_matrix(sm: ScoreMatrix, alpha: float) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCORE_HEADER)
    both = sm.has_shallow and sm.has_deep
    for i, q in enumerate(sm.subject_ids):
        for j, c in enumerate(sm.candidate_ids):
            if not sm.valid_mask[i, j]:
                w.writerow([q, c, "", "", "", 0])
                continue
            s, d = sm.shallow[i, j], sm.deep[i, j]
            s_txt = fmt(s) if np.isfinite(s) else ""
            d_txt = fmt(d) if np.isfinite(d) else ""
            if both:
                f = alpha * s + (1.0 - alpha) * d
            else:
                f = s if np.isfinite(s) else d
            w.writerow([q, c, s_txt, d_txt, fmt(f), 1])
    return buf.getvalue()


def write_score_matrix(sm: ScoreMatrix, path, alpha: float = 0.5) -> None:
    atomic_write_text(path, format_score_matrix(sm, alpha))


def read_score_matrix(path, protocol: str | None = None) -> ScoreMatrix:
    """Parse a score CSV. The protocol is inferred when not given: a matrix whose
    candidates are its own queries is a family matrix."""
    lines = _lines(path)
    rows = list(csv.reader(lines))
    if not rows or rows[0] != SCORE_HEADER:
        raise DataFormatError(f"score header must be {','.join(SCORE_HEADER)}", path, 1)
    queries, cands, cells = {}, {}, []
    for i, row in enumerate(rows[1:]):
        lineno = i + 2
        if len(row) != 6:
            raise DataFormatError("score row must have 6 fields", path, lineno)
        q, c, s, d, f, v = row
        queries.setdefault(q, len(queries))
        cands.setdefault(c, len(cands))
        if v not in ("0", "1"):
            raise DataFormatError("valid must be 0 or 1", path, lineno)
        cells.append((q, c, _real(s, path, lineno) if s else np.nan,
                      _real(d, path, lineno) if d else np.nan,
                      _real(f, path, lineno) if f else np.nan, v == "1"))
    shape = (len(queries), len(cands))
    shallow, deep, fused = (np.full(shape, np.nan) for _ in range(3))
    valid = np.zeros(shape, dtype=bool)
    for q, c, s, d, f, v in cells:
        i, j = queries[q], cands[c]
        shallow[i, j], deep[i, j], fused[i, j], valid[i, j] = s, d, f, v
    if protocol is None:
        protocol = "family" if set(cands) == set(queries) else "group"
    return ScoreMatrix(list(queries), list(cands), shallow, deep, valid, protocol, fused)


# -- ROC -----------------------------------------------------------------------------

def format_roc(roc: RocCurve) -> str:
    out = [f"# auc={fmt(roc.auc)} pos={roc.positives} neg={roc.negatives}",
           "threshold,fpr,tpr"]
    for t, (x, y) in zip(roc.thresholds, roc.points):
        out.append(f"{'inf' if np.isinf(t) else fmt(t)},{fmt(x)},{fmt(y)}")
    return "\n".join(out) + "\n"


def write_roc(roc: RocCurve, path) -> None:
    atomic_write_text(path, format_roc(roc))


def read_roc(path) -> RocCurve:
    lines = _lines(path)
    if len(lines) < 2 or not lines[0].startswith("# ") or lines[1] != "threshold,fpr,tpr":
        raise DataFormatError("expected '# auc=... pos=... neg=...' then 'threshold,fpr,tpr'",
                              path, 1)
    meta = dict(tok.split("=", 1) for tok in lines[0][2:].split())
    thr, pts = [], []
    for i, ln in enumerate(lines[2:]):
        lineno = i + 3
        t, x, y = ln.split(",")
        thr.append(np.inf if (t == "inf" and i == 0) else _real(t, path, lineno))
        pts.append((_real(x, path, lineno), _real(y, path, lineno)))
    return RocCurve(np.array(pts), np.array(thr), _real(meta["auc"], path, 1),
                    int(meta["pos"]), int(meta["neg"]))
