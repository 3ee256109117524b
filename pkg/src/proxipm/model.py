"""Problem construction: MPS/QPS parsing, canonical equality form,
slack reformulation, and regularization parameter selection.

Parsed problems are brought to the canonical form

    min  1/2 x'Hx + g'x   s.t.  Ax = b,  x_C >= 0,  x_F free,

by shifting and sign-flipping bounded variables, appending slack
columns for inequality rows, and appending one extra row per two-sided
bound.  The affine transform is recorded so objective values are always
reported in the original coordinates.  No presolve is applied; rank
deficient constraint matrices are accepted silently because the solver
regularizes every system it factorizes.
"""

from __future__ import annotations

import gzip
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .sparse import SparseMat, inf_norm

log = logging.getLogger(__name__)

_INF = np.inf


class ParseError(ValueError):
    """Malformed model file; carries the 1-based line number."""

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


@dataclass(frozen=True)
class VarTransform:
    """Affine map from canonical variables back to file coordinates.

    For original structural column j:
      position[j] >= 0:  x_orig[j] = shift[j] + sign[j] * x[position[j]]
      position[j] == -1: x_orig[j] = shift[j]          (fixed variable)
    Canonical columns beyond the structural ones are row/bound slacks.
    """

    position: np.ndarray
    sign: np.ndarray
    shift: np.ndarray
    obj_constant: float
    maximize: bool


@dataclass(frozen=True)
class QpModel:
    """Convex QP in canonical equality form."""

    H: SparseMat
    A: SparseMat
    g: np.ndarray
    b: np.ndarray
    cone_mask: np.ndarray  # True entries are the nonnegative variables
    name: str = ""
    transform: VarTransform | None = None
    n_file_rows: int = 0
    n_file_cols: int = 0
    diagnostics: tuple = ()

    def __post_init__(self):
        d = self.A.ncols
        m = self.A.nrows
        if self.H.shape != (d, d):
            raise ValueError("H must be d-by-d")
        if self.g.shape != (d,) or self.b.shape != (m,):
            raise ValueError("g/b lengths inconsistent with A")
        if self.cone_mask.shape != (d,) or self.cone_mask.dtype != bool:
            raise ValueError("cone_mask must be a boolean d-vector")

    @property
    def dim(self) -> int:
        return self.A.ncols

    @property
    def n_rows(self) -> int:
        return self.A.nrows

    @property
    def cone(self) -> np.ndarray:
        return np.flatnonzero(self.cone_mask)

    @property
    def free(self) -> np.ndarray:
        return np.flatnonzero(~self.cone_mask)

    @property
    def obj_constant(self) -> float:
        return self.transform.obj_constant if self.transform is not None else 0.0

    def objective(self, x: np.ndarray, original: bool = True) -> float:
        """Objective at a canonical point; ``original`` adds the constant
        accumulated by bound shifts and flips the sign of maximization
        problems, i.e. it reports the value in file coordinates."""
        x = np.asarray(x, dtype=float)
        Hs = self.H.to_scipy()
        val = 0.5 * float(x @ (Hs @ x)) + float(self.g @ x)
        if original:
            val += self.obj_constant
            if self.transform is not None and self.transform.maximize:
                val = -val
        return val

    def original_x(self, x: np.ndarray) -> np.ndarray:
        """Map a canonical point back to the file's structural variables."""
        if self.transform is None:
            return np.asarray(x, dtype=float).copy()
        t = self.transform
        out = t.shift.copy()
        kept = t.position >= 0
        out[kept] += t.sign[kept] * np.asarray(x, dtype=float)[t.position[kept]]
        return out


@dataclass(frozen=True)
class SlackModel:
    """Variable-replicated form: every variable gets a nonnegative copy z
    with coupling row x - z = 0, so the base model must be all-cone.
    Free variables of the source are split into positive/negative parts
    first; ``split_negative[j]`` is the column of the negative part."""

    base: QpModel
    source: QpModel
    split_negative: dict = field(default_factory=dict)

    @property
    def zdim(self) -> int:
        return self.base.dim

    @property
    def n_rows(self) -> int:
        return self.base.n_rows

    def block_sizes(self) -> tuple[int, int, int, int]:
        """Unknown sizes (x, z, y1, y2) of the coupled KKT system."""
        d = self.base.dim
        return (d, d, self.base.n_rows, d)

    def to_source_x(self, x: np.ndarray) -> np.ndarray:
        """Collapse split variables back to the source model's space."""
        x = np.asarray(x, dtype=float)
        if not self.split_negative:
            return x.copy()
        out = x[: self.source.dim].copy()
        for j, neg in self.split_negative.items():
            out[j] = x[j] - x[neg]
        return out

    def objective(self, x: np.ndarray, original: bool = True) -> float:
        return self.source.objective(self.to_source_x(x), original=original)


@dataclass(frozen=True)
class RegParams:
    """Primal/dual regularization weights; the solver keeps them fixed."""

    rho: float
    delta: float
    scale: float = 1.0

    def __post_init__(self):
        if not (self.rho > 0 and self.delta > 0):
            raise ValueError("regularization parameters must be positive")
        if self.rho != self.delta:
            raise ValueError("primal and dual regularization must coincide")


def compute_reg(model: QpModel, f: float = 1.0) -> RegParams:
    """rho = delta = f * max(1 / max(||A||_inf, ||H||_inf), 1e-10)."""
    if f < 1.0:
        raise ValueError("scale factor must be >= 1")
    norm = max(inf_norm(model.A), inf_norm(model.H))
    if norm == 0.0:
        raise ValueError("cannot size regularization: A and H are both zero")
    rho = f * max(1.0 / norm, 1e-10)
    return RegParams(rho=rho, delta=rho, scale=f)


# ---------------------------------------------------------------------------
# MPS / QPS reading


_SECTIONS = {"NAME", "ROWS", "COLUMNS", "RHS", "RANGES", "BOUNDS",
             "QUADOBJ", "QMATRIX", "OBJSENSE", "ENDATA"}

# fixed-format field boundaries (0-based, end-exclusive)
_FIXED_FIELDS = [(1, 3), (4, 12), (14, 22), (24, 36), (39, 47), (49, 61)]


def _fixed_tokens(line: str) -> list[str]:
    padded = line.ljust(61)
    out = [padded[a:b].strip() for a, b in _FIXED_FIELDS]
    while out and out[-1] == "":
        out.pop()
    return [t for t in out if t != ""]


def _dispatch(handler, raw, line, lineno):
    """Apply a card handler, preferring free-format tokens.

    Whitespace splitting handles every well-formed file; when it yields
    a structurally invalid card (a name containing blanks in a
    column-aligned file) the fixed-column slicing of the same card is
    tried before the error is reported.  Handlers validate the whole
    card before mutating the problem, so the retry is safe.
    """
    free = line.split()
    try:
        handler(raw, free, lineno)
    except ParseError:
        fixed = _fixed_tokens(line)
        if fixed == free:
            raise
        handler(raw, fixed, lineno)


def _open_source(source):
    """Yield text lines from a path, bytes, or file-like object;
    gzip streams are detected by their magic bytes."""
    if isinstance(source, (str, Path)):
        raw = Path(source).read_bytes()
    elif isinstance(source, bytes):
        raw = source
    elif hasattr(source, "read"):
        raw = source.read()
        if isinstance(raw, str):
            raw = raw.encode()
    else:
        raise TypeError("source must be a path, bytes, or file-like object")
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return io.StringIO(raw.decode("latin-1")).readlines()


def _number(token: str, lineno: int) -> float:
    try:
        return float(token)
    except ValueError:
        try:
            return float(token.lower().replace("d", "e"))
        except ValueError:
            raise ParseError(f"bad numeric field {token!r}", lineno) from None


class _RawProblem:
    """File-order accumulation of a problem before canonicalization."""

    def __init__(self):
        self.name = ""
        self.maximize = False
        self.row_names: list[str] = []
        self.row_types: list[str] = []
        self.row_index: dict[str, int] = {}
        self.obj_row: str | None = None
        self.col_names: list[str] = []
        self.col_index: dict[str, int] = {}
        self.entries: dict[tuple[int, int], float] = {}
        self.obj_coef: dict[int, float] = {}
        self.rhs: dict[int, float] = {}
        self.ranges: dict[int, float] = {}
        self.lower: dict[int, float] = {}
        self.upper: dict[int, float] = {}
        self.quad: dict[tuple[int, int], float] = {}
        self.quad_section: str | None = None
        self.obj_rhs = 0.0
        self.ignored_rows: set[str] = set()
        self.diagnostics: list[str] = []

    def col(self, name: str) -> int:
        j = self.col_index.get(name)
        if j is None:
            j = len(self.col_names)
            self.col_index[name] = j
            self.col_names.append(name)
        return j


def _parse_rhs_card(raw, t, lineno):
    _parse_value_card(raw, t, lineno, raw.rhs, allow_obj=True)


def _parse_ranges_card(raw, t, lineno):
    _parse_value_card(raw, t, lineno, raw.ranges, allow_obj=False)


def _parse_raw(lines) -> _RawProblem:
    raw = _RawProblem()
    section = None
    seen_sections = set()
    handlers = {
        "ROWS": _parse_row_card,
        "COLUMNS": _parse_column_card,
        "RHS": _parse_rhs_card,
        "RANGES": _parse_ranges_card,
        "BOUNDS": _parse_bound_card,
        "QUADOBJ": _parse_quad_card,
        "QMATRIX": _parse_quad_card,
    }

    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.lstrip().startswith("*"):
            continue
        if line[0] not in (" ", "\t"):
            head = line.split()
            keyword = head[0].upper()
            if keyword not in _SECTIONS:
                raise ParseError(f"malformed section header {head[0]!r}", lineno)
            if keyword in seen_sections and keyword != "NAME":
                raise ParseError(f"duplicate section {keyword}", lineno)
            seen_sections.add(keyword)
            section = keyword
            if keyword == "NAME":
                raw.name = head[1] if len(head) > 1 else ""
            elif keyword == "OBJSENSE" and len(head) > 1:
                raw.maximize = head[1].upper().startswith("MAX")
                section = None
            elif keyword == "ENDATA":
                break
            if keyword in ("QUADOBJ", "QMATRIX"):
                raw.quad_section = keyword
            continue

        if section == "OBJSENSE":
            raw.maximize = line.split()[0].upper().startswith("MAX")
        elif section in handlers:
            _dispatch(handlers[section], raw, line, lineno)
        elif section is None:
            raise ParseError("data card outside any section", lineno)
    else:
        raise ParseError("missing ENDATA", len(lines))
    if raw.obj_row is None:
        raise ParseError("no objective (N) row declared", 1)
    return raw


def _parse_row_card(raw, t, lineno):
    if len(t) != 2:
        raise ParseError("ROWS card needs a type and a name", lineno)
    rtype, rname = t[0].upper(), t[1]
    if rtype == "N":
        if raw.obj_row is None:
            raw.obj_row = rname
        else:
            raw.ignored_rows.add(rname)
            raw.diagnostics.append(f"line {lineno}: extra free row {rname} ignored")
        return
    if rtype not in ("E", "L", "G"):
        raise ParseError(f"unknown row type {rtype!r}", lineno)
    if rname in raw.row_index or rname == raw.obj_row:
        raise ParseError(f"duplicate row {rname!r}", lineno)
    raw.row_index[rname] = len(raw.row_names)
    raw.row_names.append(rname)
    raw.row_types.append(rtype)


def _pairs(t, lineno, what):
    if len(t) % 2 != 1 or len(t) < 3:
        raise ParseError(f"{what} card needs (row, value) pairs", lineno)
    return [(t[k], _number(t[k + 1], lineno)) for k in range(1, len(t), 2)]


def _parse_column_card(raw, t, lineno):
    if len(t) >= 3 and t[1].upper() == "'MARKER'":
        raise ParseError("integer markers are not supported", lineno)
    pairs = _pairs(t, lineno, "COLUMNS")
    cname = t[0]
    j = raw.col_index.get(cname, len(raw.col_names))
    for rname, _ in pairs:  # validate before touching the problem
        if rname == raw.obj_row:
            if j in raw.obj_coef:
                raise ParseError(f"duplicate objective entry for column {cname!r}", lineno)
        elif rname in raw.ignored_rows:
            continue
        elif rname not in raw.row_index:
            raise ParseError(f"unknown row {rname!r}", lineno)
        elif (raw.row_index[rname], j) in raw.entries:
            raise ParseError(f"duplicate entry for column {cname!r} in row {rname!r}", lineno)
    j = raw.col(cname)
    for rname, val in pairs:
        if rname == raw.obj_row:
            raw.obj_coef[j] = val
        elif rname in raw.ignored_rows:
            continue
        else:
            raw.entries[(raw.row_index[rname], j)] = val


def _parse_value_card(raw, t, lineno, target, allow_obj):
    if len(t) % 2 == 0:  # set name omitted: treat all tokens as pairs
        t = ["RHS"] + list(t)
    pairs = _pairs(t, lineno, "RHS/RANGES")
    for rname, _ in pairs:
        if rname == raw.obj_row:
            if not allow_obj:
                raise ParseError("RANGES entry on the objective row", lineno)
        elif rname in raw.ignored_rows:
            continue
        elif rname not in raw.row_index:
            raise ParseError(f"unknown row {rname!r}", lineno)
    for rname, val in pairs:
        if rname == raw.obj_row:
            raw.obj_rhs = val
        elif rname in raw.ignored_rows:
            continue
        else:
            target[raw.row_index[rname]] = val


_BOUND_KEYS_VALUE = {"LO", "UP", "FX"}
_BOUND_KEYS_FLAG = {"FR", "MI", "PL"}
_BOUND_KEYS_INTEGER = {"BV", "LI", "UI", "SC"}


def _parse_bound_card(raw, t, lineno):
    key = t[0].upper()
    if key in _BOUND_KEYS_INTEGER:
        raise ParseError(f"integer/semicontinuous bound {key} is not supported", lineno)
    if key not in _BOUND_KEYS_VALUE | _BOUND_KEYS_FLAG:
        raise ParseError(f"unknown bound key {key!r}", lineno)
    needs_value = key in _BOUND_KEYS_VALUE
    # flag bounds may carry a spurious value column in some files
    if (needs_value and len(t) != 4) or (not needs_value and len(t) not in (3, 4)):
        raise ParseError(f"malformed {key} bound card", lineno)
    cname = t[2]
    j = raw.col_index.get(cname)
    if j is None:
        raise ParseError(f"bound on unknown column {cname!r}", lineno)
    if needs_value:
        val = _number(t[3], lineno)
        if key == "LO":
            raw.lower[j] = val
        elif key == "UP":
            raw.upper[j] = val
            if val < 0.0 and j not in raw.lower:
                # classic MPS quirk: a negative upper bound with no explicit
                # lower bound removes the default lower bound of zero
                raw.lower[j] = -_INF
                raw.diagnostics.append(
                    f"line {lineno}: negative UP bound on {cname!r} frees the lower bound")
        else:  # FX
            raw.lower[j] = val
            raw.upper[j] = val
    else:
        if key == "FR":
            raw.lower[j] = -_INF
            raw.upper[j] = _INF
        elif key == "MI":
            raw.lower[j] = -_INF
        # PL: upper bound already +inf


def _parse_quad_card(raw, t, lineno):
    if len(t) != 3:
        raise ParseError("quadratic card needs two columns and a value", lineno)
    val = _number(t[2], lineno)
    i = raw.col_index.get(t[0])
    j = raw.col_index.get(t[1])
    if i is None or j is None:
        raise ParseError("quadratic entry on unknown column", lineno)
    if (i, j) in raw.quad:
        raise ParseError("duplicate quadratic entry", lineno)
    raw.quad[(i, j)] = val


# ---------------------------------------------------------------------------
# canonicalization


def _row_intervals(raw, lineno_hint=0):
    m0 = len(raw.row_types)
    lo = np.full(m0, -_INF)
    up = np.full(m0, _INF)
    for i, rt in enumerate(raw.row_types):
        r = raw.rhs.get(i, 0.0)
        if rt == "E":
            lo[i] = up[i] = r
        elif rt == "L":
            up[i] = r
        else:  # G
            lo[i] = r
    for i, rng in raw.ranges.items():
        rt = raw.row_types[i]
        if rt == "L":
            lo[i] = up[i] - abs(rng)
        elif rt == "G":
            up[i] = lo[i] + abs(rng)
        else:  # E: sign of the range selects the side
            if rng >= 0:
                up[i] = lo[i] + rng
            else:
                lo[i] = up[i] + rng
    return lo, up


def _assemble_quad(raw, n0):
    """Full symmetric H from the stored triangle(s); QUADOBJ gives one
    triangle (mirrored exactly), QMATRIX gives the full matrix (checked
    for symmetry to 1e-12 and averaged)."""
    if not raw.quad:
        return sp.csc_matrix((n0, n0))
    ii, jj, vv = [], [], []
    for (i, j), v in raw.quad.items():
        ii.append(i)
        jj.append(j)
        vv.append(v)
    Hraw = sp.coo_matrix((vv, (ii, jj)), shape=(n0, n0)).tocsc()
    if raw.quad_section == "QMATRIX":
        asym = abs(Hraw - Hraw.T)
        if asym.nnz and asym.max() > 1e-12 * (1.0 + abs(Hraw).max()):
            raw.diagnostics.append("QMATRIX is not symmetric; symmetrizing")
        return (Hraw + Hraw.T) * 0.5
    # QUADOBJ: mirror off-diagonal entries of the given triangle
    D = sp.diags(Hraw.diagonal())
    return Hraw + Hraw.T - D


def parse_mps(source, name: str | None = None) -> QpModel:
    """Read an MPS or QPS problem and return it in canonical form.

    ``source`` may be a path, raw bytes, or a file-like object; gzipped
    content is transparently decompressed.  RANGES and BOUNDS are
    honored: variables are shifted (and flipped) onto ``x >= 0`` and
    every two-sided bound contributes one extra equality row, so the
    result is exactly an equality-constrained cone problem.  Quadratic
    coefficients are stored as given; the objective evaluator applies
    the conventional one-half factor.
    """
    lines = _open_source(source)
    raw = _parse_raw(lines)

    m0 = len(raw.row_names)
    n0 = len(raw.col_names)
    row_lo, row_up = _row_intervals(raw)

    # structural columns in file order, then one slack per non-equality row
    ii = np.fromiter((k[0] for k in raw.entries), dtype=np.int64, count=len(raw.entries))
    jj = np.fromiter((k[1] for k in raw.entries), dtype=np.int64, count=len(raw.entries))
    vv = np.fromiter(raw.entries.values(), dtype=float, count=len(raw.entries))

    lower = np.zeros(n0)
    upper = np.full(n0, _INF)
    for j, v in raw.lower.items():
        lower[j] = v
    for j, v in raw.upper.items():
        upper[j] = v

    slack_cols = []   # (row, coef, lo, up)
    b = np.zeros(m0)
    for i in range(m0):
        lo, up = row_lo[i], row_up[i]
        if lo == up:
            b[i] = lo
        elif np.isfinite(up):
            b[i] = up                      # a x + s = up, s in [0, up - lo]
            slack_cols.append((i, 1.0, 0.0, up - lo))
        elif np.isfinite(lo):
            b[i] = lo                      # a x - s = lo, s >= 0
            slack_cols.append((i, -1.0, 0.0, _INF))
        else:
            raise ParseError(f"row {raw.row_names[i]!r} has no finite side")

    next_col = n0
    for (i, coef, lo, up) in slack_cols:
        ii = np.append(ii, i)
        jj = np.append(jj, next_col)
        vv = np.append(vv, coef)
        lower = np.append(lower, lo)
        upper = np.append(upper, up)
        next_col += 1
    n_ext = next_col

    A = sp.coo_matrix((vv, (ii, jj)), shape=(m0, n_ext)).tocsc()
    g = np.zeros(n_ext)
    for j, v in raw.obj_coef.items():
        g[j] = v
    H = _assemble_quad(raw, n0)
    H.resize((n_ext, n_ext))
    H = sp.csc_matrix(H)

    if raw.maximize:
        g = -g
        H = -H

    # affine change of variables x_ext = D xt + t with xt >= 0 where bounded
    sign = np.ones(n_ext)
    shift = np.zeros(n_ext)
    fixed = np.zeros(n_ext, dtype=bool)
    free = np.zeros(n_ext, dtype=bool)
    width = np.full(n_ext, _INF)       # finite width => extra bound row
    for j in range(n_ext):
        lo, up = lower[j], upper[j]
        if lo > up:
            raise ParseError(f"column {j} has empty bound interval [{lo}, {up}]")
        if np.isfinite(lo) and np.isfinite(up):
            shift[j] = lo
            if lo == up:
                fixed[j] = True
            else:
                width[j] = up - lo
        elif np.isfinite(lo):
            shift[j] = lo
        elif np.isfinite(up):
            sign[j] = -1.0
            shift[j] = up
        else:
            free[j] = True

    D = sp.diags(sign, format="csc")
    b_shift = b - A @ shift
    obj_constant = 0.5 * float(shift @ (H @ shift)) + float(g @ shift) - raw.obj_rhs
    g_shift = D @ (H @ shift + g)
    H_t = sp.csc_matrix(D @ H @ D)
    A_t = sp.csc_matrix(A @ D)

    keep = ~fixed
    keep_idx = np.flatnonzero(keep)
    A_t = A_t[:, keep_idx]
    H_t = H_t[keep_idx, :][:, keep_idx]
    g_t = g_shift[keep_idx]
    free_t = free[keep_idx]
    width_t = width[keep_idx]

    # one extra row and one extra slack column per two-sided bound
    bounded = np.flatnonzero(np.isfinite(width_t))
    n_keep = keep_idx.size
    d = n_keep + bounded.size
    m = m0 + bounded.size
    if bounded.size:
        A_coo = A_t.tocoo()
        rows = np.concatenate([A_coo.row,
                               m0 + np.arange(bounded.size),
                               m0 + np.arange(bounded.size)])
        cols = np.concatenate([A_coo.col, bounded,
                               n_keep + np.arange(bounded.size)])
        vals = np.concatenate([A_coo.data,
                               np.ones(bounded.size), np.ones(bounded.size)])
        A_f = sp.coo_matrix((vals, (rows, cols)), shape=(m, d)).tocsc()
        b_f = np.concatenate([b_shift, width_t[bounded]])
    else:
        A_f = A_t
        b_f = b_shift
    g_f = np.concatenate([g_t, np.zeros(bounded.size)])
    H_f = sp.csc_matrix(H_t)
    H_f.resize((d, d))
    cone = np.ones(d, dtype=bool)
    cone[np.flatnonzero(free_t)] = False

    position = np.full(n_ext, -1, dtype=np.int64)
    inv = np.full(n_ext, -1, dtype=np.int64)
    inv[keep_idx] = np.arange(n_keep)
    position[keep] = inv[keep]
    transform = VarTransform(position=position[:n0], sign=sign[:n0].copy(),
                             shift=shift[:n0].copy(), obj_constant=obj_constant,
                             maximize=raw.maximize)

    diagnostics = list(raw.diagnostics)
    if m > d:
        diagnostics.append(f"more rows than columns after canonicalization ({m} > {d})")
        log.warning("model %s: %s", raw.name, diagnostics[-1])

    return QpModel(H=SparseMat.from_scipy(H_f), A=SparseMat.from_scipy(A_f),
                   g=g_f, b=b_f, cone_mask=cone,
                   name=name or raw.name, transform=transform,
                   n_file_rows=m0, n_file_cols=n0,
                   diagnostics=tuple(diagnostics))


# ---------------------------------------------------------------------------
# writing (canonical form round-trips exactly)


def _fmt(v: float) -> str:
    return np.format_float_scientific(v, precision=16, trim="-")


def write_mps(model: QpModel, path_or_buf) -> None:
    """Write the canonical model; re-parsing reproduces (H, A, g, b, C)."""
    out = io.StringIO()
    out.write(f"NAME {model.name or 'MODEL'}\n")
    out.write("ROWS\n N  OBJ\n")
    for i in range(model.n_rows):
        out.write(f" E  R{i}\n")
    out.write("COLUMNS\n")
    A = model.A.to_scipy()
    H = model.H.to_scipy()
    for j in range(model.dim):
        cname = f"C{j}"
        if model.g[j] != 0.0:
            out.write(f"    {cname} OBJ {_fmt(model.g[j])}\n")
        for p in range(A.indptr[j], A.indptr[j + 1]):
            out.write(f"    {cname} R{A.indices[p]} {_fmt(A.data[p])}\n")
        if A.indptr[j] == A.indptr[j + 1] and model.g[j] == 0.0:
            out.write(f"    {cname} OBJ 0.0\n")   # keep empty columns alive
    out.write("RHS\n")
    for i in range(model.n_rows):
        if model.b[i] != 0.0:
            out.write(f"    RHS R{i} {_fmt(model.b[i])}\n")
    if model.obj_constant != 0.0:
        out.write(f"    RHS OBJ {_fmt(-model.obj_constant)}\n")
    if not model.cone_mask.all():
        out.write("BOUNDS\n")
        for j in model.free:
            out.write(f" FR BND C{j}\n")
    if H.nnz:
        out.write("QUADOBJ\n")
        Hc = sp.tril(H).tocoo()
        order = np.lexsort((Hc.row, Hc.col))
        for k in order:
            out.write(f"    C{Hc.col[k]} C{Hc.row[k]} {_fmt(Hc.data[k])}\n")
    out.write("ENDATA\n")
    text = out.getvalue()
    if isinstance(path_or_buf, (str, Path)):
        Path(path_or_buf).write_text(text)
    else:
        path_or_buf.write(text)


# ---------------------------------------------------------------------------
# slack reformulation


def to_slack(model: QpModel) -> SlackModel:
    """Replicate variables so all inequality information sits on z >= 0.

    Free variables are first split into positive and negative parts
    (the replicated form assumes every variable carries a nonnegativity
    constraint); the split is undone when mapping solutions back.
    """
    free_idx = model.free
    if free_idx.size == 0:
        return SlackModel(base=model, source=model, split_negative={})

    d = model.dim
    A = model.A.to_scipy()
    H = model.H.to_scipy()
    A_b = sp.hstack([A, -A[:, free_idx]], format="csc")
    H_fb = H[:, free_idx]
    H_b = sp.bmat([[H, -H_fb], [-H_fb.T, H[free_idx, :][:, free_idx]]], format="csc")
    g_b = np.concatenate([model.g, -model.g[free_idx]])
    cone = np.ones(d + free_idx.size, dtype=bool)
    base = QpModel(H=SparseMat.from_scipy(H_b), A=SparseMat.from_scipy(A_b),
                   g=g_b, b=model.b.copy(), cone_mask=cone,
                   name=model.name, transform=None,
                   n_file_rows=model.n_file_rows, n_file_cols=model.n_file_cols)
    split = {int(j): d + k for k, j in enumerate(free_idx)}
    return SlackModel(base=base, source=model, split_negative=split)
