"""Dataset ingestion and the synthetic toy corpus.

Structure formats: standard XYZ (count line, comment line, atom lines) and
a minimal SDF subset (V2000 connection tables only, records separated by
"$$$$"). SDF bond blocks are kept because they carry ground-truth
valencies. All parse errors name the offending line.

The toy generator builds molecules whose exact valencies are recovered by
the bundled bond table, so the valency loss on clean data is exactly zero;
that property is re-verified for every generated molecule.
"""

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import chem
from .autodiff import Tensor
from .geometry import random_rigid_motion, apply_rigid
from .gfloss import (
    bond_margins,
    decide_bonds,
    gf_loss,
    load_bond_table,
    pair_type_probs,
    predicted_valencies,
)

TOY_KINDS = ("diatomics", "chains", "templated-small-organics")
TOY_ELEMENTS = ("H", "C", "N", "O", "F")


class DataFormatError(ValueError):
    """Malformed input data; message carries the 1-based line number."""

    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


@dataclass
class Molecule:
    symbols: tuple
    coords: np.ndarray
    comment: str = ""
    properties: dict = field(default_factory=dict)
    bonds: tuple = None          # ground-truth (i, j, order), when known
    valencies: np.ndarray = None

    def __post_init__(self):
        self.symbols = tuple(self.symbols)
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.shape != (len(self.symbols), 3):
            raise ValueError(
                f"coords shape {self.coords.shape} does not match "
                f"{len(self.symbols)} symbols"
            )

    @property
    def n_atoms(self):
        return len(self.symbols)


@dataclass
class Dataset:
    molecules: list
    size_histogram: dict
    elements: tuple
    normalization: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.molecules)


# -- XYZ ------------------------------------------------------------------


def parse_xyz(data):
    """Parse one or more XYZ records; errors carry line numbers."""
    text = data.decode() if isinstance(data, bytes) else data
    lines = text.splitlines()
    mols = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        count_line = lines[i].strip()
        try:
            count = int(count_line)
        except ValueError:
            raise DataFormatError(f"malformed atom count {count_line!r}", i + 1)
        if count <= 0:
            raise DataFormatError(f"atom count must be positive, got {count}", i + 1)
        if i + 1 >= len(lines):
            raise DataFormatError("missing comment line", i + 2)
        comment = lines[i + 1]
        symbols, coords = [], []
        for k in range(count):
            j = i + 2 + k
            if j >= len(lines) or not lines[j].strip():
                raise DataFormatError(
                    f"expected atom {k + 1} of {count}, record truncated", j + 1
                )
            parts = lines[j].split()
            if len(parts) < 4:
                raise DataFormatError(
                    f"atom line needs symbol and 3 coordinates, got {lines[j]!r}",
                    j + 1,
                )
            sym = parts[0]
            if sym not in chem.ATOMIC_NUMBERS:
                raise DataFormatError(f"unknown element {sym!r}", j + 1)
            row = []
            for tok in parts[1:4]:
                try:
                    v = float(tok)
                except ValueError:
                    raise DataFormatError(f"non-numeric coordinate {tok!r}", j + 1)
                if not math.isfinite(v):
                    raise DataFormatError(f"non-finite coordinate {tok!r}", j + 1)
                row.append(v)
            symbols.append(sym)
            coords.append(row)
        mols.append(Molecule(tuple(symbols), np.array(coords), comment=comment))
        i += 2 + count
    return mols


def write_xyz(molecules):
    """Render molecules as XYZ text; 6 decimals, round-trip stable."""
    out = []
    for m in molecules:
        out.append(f"{m.n_atoms}\n{m.comment}\n")
        for sym, (x, y, z) in zip(m.symbols, m.coords):
            out.append(f"{sym} {x:.6f} {y:.6f} {z:.6f}\n")
    return "".join(out)


# -- SDF (V2000 subset) ----------------------------------------------------


def _split_sdf_records(lines):
    records, start, cur = [], 0, []
    for idx, line in enumerate(lines):
        if line.strip() == "$$$$":
            records.append((start, cur))
            cur, start = [], idx + 1
        else:
            cur.append(line)
    if any(l.strip() for l in cur):
        records.append((start, cur))
    return records


def parse_sdf_minimal(data):
    """Parse V2000 SDF records: coordinates, symbols, and the bond block."""
    text = data.decode() if isinstance(data, bytes) else data
    mols = []
    for base, rec in _split_sdf_records(text.splitlines()):
        if len(rec) < 4:
            raise DataFormatError("truncated record, no counts line", base + len(rec) + 1)
        counts = rec[3]
        if "V3000" in counts:
            raise DataFormatError("V3000 connection tables are not supported", base + 4)
        if "V2000" not in counts:
            raise DataFormatError(f"missing V2000 version tag in {counts!r}", base + 4)
        try:
            natoms, nbonds = int(counts[0:3]), int(counts[3:6])
        except ValueError:
            raise DataFormatError(f"malformed counts line {counts!r}", base + 4)
        symbols, coords = [], []
        for k in range(natoms):
            j = 4 + k
            if j >= len(rec):
                raise DataFormatError("truncated atom block", base + j + 1)
            line = rec[j]
            try:
                x, y, z = float(line[0:10]), float(line[10:20]), float(line[20:30])
            except ValueError:
                raise DataFormatError(f"malformed atom line {line!r}", base + j + 1)
            sym = line[31:34].strip()
            if sym not in chem.ATOMIC_NUMBERS:
                raise DataFormatError(f"unknown element {sym!r}", base + j + 1)
            symbols.append(sym)
            coords.append((x, y, z))
        bonds = []
        val = np.zeros(natoms)
        for k in range(nbonds):
            j = 4 + natoms + k
            if j >= len(rec):
                raise DataFormatError("truncated bond block", base + j + 1)
            line = rec[j]
            try:
                a, b, order = int(line[0:3]), int(line[3:6]), int(line[6:9])
            except ValueError:
                raise DataFormatError(f"malformed bond line {line!r}", base + j + 1)
            if not (1 <= a <= natoms and 1 <= b <= natoms) or a == b:
                raise DataFormatError(f"bond indices out of range in {line!r}", base + j + 1)
            if order not in (1, 2, 3):
                raise DataFormatError(f"unsupported bond type {order}", base + j + 1)
            i0, j0 = min(a, b) - 1, max(a, b) - 1
            bonds.append((i0, j0, order))
            val[i0] += order
            val[j0] += order
        mols.append(
            Molecule(
                tuple(symbols),
                np.array(coords),
                comment=rec[0].strip() if rec else "",
                bonds=tuple(bonds),
                valencies=val,
            )
        )
    return mols


def write_sdf(molecules, table=None):
    """Render molecules as V2000 SDF; bonds inferred from geometry when
    the molecule does not carry them."""
    out = []
    for m in molecules:
        bonds = m.bonds
        if bonds is None:
            if table is None:
                table = load_bond_table(sorted(set(s for mol in molecules for s in mol.symbols),
                                               key=lambda s: chem.ATOMIC_NUMBERS[s]))
            bonds = chem.infer_graph(m.coords, m.symbols, table).bonds
        out.append(f"{m.comment or 'molecule'}\n moldiff\n\n")
        out.append(f"{m.n_atoms:3d}{len(bonds):3d}  0  0  0  0  0  0  0  0999 V2000\n")
        for sym, (x, y, z) in zip(m.symbols, m.coords):
            out.append(
                f"{x:10.4f}{y:10.4f}{z:10.4f} {sym:<3} 0  0  0  0  0  0  0  0  0  0  0  0\n"
            )
        for a, b, o in bonds:
            out.append(f"{a + 1:3d}{b + 1:3d}{o:3d}  0\n")
        out.append("M  END\n$$$$\n")
    return "".join(out)


# -- file plumbing ---------------------------------------------------------


def load_structures(path):
    """Parse one structure file (.xyz or .sdf)."""
    p = Path(path)
    suffix = p.suffix.lower()
    if suffix == ".xyz":
        return parse_xyz(p.read_text())
    if suffix == ".sdf":
        return parse_sdf_minimal(p.read_text())
    raise DataFormatError(f"{p}: unsupported structure format {suffix!r}")


def collect_structures(path):
    """Load a file or every .xyz/.sdf under a directory.

    Returns (molecules, failures) where failures is a list of
    (path, message); unreadable files are reported, not fatal.
    """
    p = Path(path)
    if not p.exists():
        raise DataFormatError(f"{p}: no such file or directory")
    if p.is_dir():
        files = sorted(q for q in p.iterdir() if q.suffix.lower() in (".xyz", ".sdf"))
    else:
        files = [p]
    mols, failures = [], []
    for f in files:
        try:
            mols.extend(load_structures(f))
        except (DataFormatError, OSError) as e:
            failures.append((str(f), str(e)))
    return mols, failures


# -- toy corpus ------------------------------------------------------------


def _methyl_dirs(phase=0.0):
    """Three unit vectors at the tetrahedral angle to +x."""
    out = []
    for k in range(3):
        phi = phase + 2.0 * math.pi * k / 3.0
        out.append(
            (-1.0 / 3.0, (2.0 * math.sqrt(2) / 3.0) * math.cos(phi),
             (2.0 * math.sqrt(2) / 3.0) * math.sin(phi))
        )
    return np.array(out)


def _cone_dirs(axis_cos, n, phase=0.0):
    """n unit vectors with the given cosine to +x, evenly spread."""
    s = math.sqrt(1.0 - axis_cos * axis_cos)
    out = []
    for k in range(n):
        phi = phase + 2.0 * math.pi * k / n
        out.append((axis_cos, s * math.cos(phi), s * math.sin(phi)))
    return np.array(out)


def _chain_geometry(n_heavy):
    """H-capped zigzag oxygen chain; O-O 1.48, O-H 0.96, 105 deg angles."""
    L, LH, phi = 1.48, 0.96, math.radians(105.0)
    t, h = L * math.sin(phi / 2.0), L * math.cos(phi / 2.0)
    ox = np.array([(k * t, (k % 2) * h, 0.0) for k in range(n_heavy)])
    first = ox[0] + (LH / L) * np.array([-t, h, 0.0])
    last = ox[-1] + (LH / L) * np.array([t, h * (1.0 - 2.0 * ((n_heavy - 1) % 2)), 0.0])
    symbols = ("H",) + ("O",) * n_heavy + ("H",)
    coords = np.vstack([first, ox, last])
    val = np.array([1.0] + [2.0] * n_heavy + [1.0])
    return symbols, coords, val


def _organic_templates():
    ch, nh, oh, co, cc, oo, nn, cf = 1.09, 1.01, 0.96, 1.43, 1.54, 1.48, 1.45, 1.35
    temps = {}

    a = ch / math.sqrt(3.0)
    temps["methane"] = (
        ("C", "H", "H", "H", "H"),
        np.array([(0, 0, 0), (a, a, a), (a, -a, -a), (-a, a, -a), (-a, -a, a)], dtype=np.float64),
        np.array([4.0, 1, 1, 1, 1]),
    )

    dirs = _cone_dirs(math.cos(math.radians(112.0)), 3)
    temps["ammonia"] = (
        ("N", "H", "H", "H"),
        np.vstack([np.zeros(3), nh * dirs]),
        np.array([3.0, 1, 1, 1]),
    )

    sym, coords, val = _chain_geometry(1)
    temps["water"] = (sym, coords, val)

    c, o = np.zeros(3), np.array([co, 0.0, 0.0])
    hs = ch * _methyl_dirs()
    ho = o + oh * np.array([math.cos(math.radians(71.5)), math.sin(math.radians(71.5)), 0.0])
    temps["methanol"] = (
        ("C", "O", "H", "H", "H", "H"),
        np.vstack([c, o, hs, ho]),
        np.array([4.0, 2, 1, 1, 1, 1]),
    )

    c2 = np.array([cc, 0.0, 0.0])
    h1 = ch * _methyl_dirs()
    h2 = c2 - ch * _methyl_dirs(phase=math.pi / 3.0)
    temps["ethane"] = (
        ("C", "C", "H", "H", "H", "H", "H", "H"),
        np.vstack([np.zeros(3), c2, h1, h2]),
        np.array([4.0, 4, 1, 1, 1, 1, 1, 1]),
    )

    o2 = np.array([oo, 0.0, 0.0])
    hA = oh * np.array([math.cos(math.radians(100.0)), math.sin(math.radians(100.0)), 0.0])
    d = math.radians(113.0)
    hB = o2 + oh * np.array(
        [-math.cos(math.radians(100.0)),
         math.sin(math.radians(100.0)) * math.cos(d),
         math.sin(math.radians(100.0)) * math.sin(d)]
    )
    temps["peroxide"] = (
        ("O", "O", "H", "H"),
        np.vstack([np.zeros(3), o2, hA, hB]),
        np.array([2.0, 2, 1, 1]),
    )

    n2 = np.array([nn, 0.0, 0.0])
    cosv = math.cos(math.radians(112.0))
    ha = nh * _cone_dirs(cosv, 2, phase=math.radians(55.0))
    ha = ha * np.array([-1.0, 1.0, 1.0])  # point away from N2
    hb = n2 + nh * _cone_dirs(cosv, 2, phase=math.radians(145.0))
    temps["hydrazine"] = (
        ("N", "N", "H", "H", "H", "H"),
        np.vstack([np.zeros(3), n2, ha, hb]),
        np.array([3.0, 3, 1, 1, 1, 1]),
    )

    f = np.array([cf, 0.0, 0.0])
    temps["fluoromethane"] = (
        ("C", "F", "H", "H", "H"),
        np.vstack([np.zeros(3), f, ch * _methyl_dirs()]),
        np.array([4.0, 1, 1, 1, 1]),
    )
    return temps


_TEMPLATES = None


def verify_zero_gf(mol, table):
    """Check the generated molecule has exactly zero valency loss when the
    type probabilities are the true one-hots. Raises on violation."""
    idx = table.type_indices(mol.symbols)
    p_atom = np.zeros((mol.n_atoms, table.nf))
    p_atom[np.arange(mol.n_atoms), idx] = 1.0
    p_pair = pair_type_probs(Tensor(p_atom))
    decision = decide_bonds(bond_margins(mol.coords, table))
    v_pred = predicted_valencies(p_pair, decision)
    loss = float(gf_loss(v_pred, mol.valencies, 1.0).data)
    if loss != 0.0:
        raise RuntimeError(
            f"toy molecule {mol.comment!r} violates the zero valency-loss "
            f"property: loss={loss}, predicted={v_pred.data}, true={mol.valencies}"
        )


def _toy_molecule(kind, rng, table):
    global _TEMPLATES
    if kind == "diatomics":
        name = ("H2", "F2", "HF")[rng.integers(3)]
        syms = {"H2": ("H", "H"), "F2": ("F", "F"), "HF": ("H", "F")}[name]
        L = table.lengths[table.index(syms[0]), table.index(syms[1]), 0]
        coords = np.array([(-L / 2.0, 0, 0), (L / 2.0, 0, 0)])
        val = np.ones(2)
    elif kind == "chains":
        m = int(rng.integers(1, 7))
        name = f"chain-{m}"
        syms, coords, val = _chain_geometry(m)
    elif kind == "templated-small-organics":
        if _TEMPLATES is None:
            _TEMPLATES = _organic_templates()
        name = sorted(_TEMPLATES)[rng.integers(len(_TEMPLATES))]
        syms, coords, val = _TEMPLATES[name]
    else:
        raise ValueError(f"unknown toy kind {kind!r}; choose from {TOY_KINDS}")
    rot, trans = random_rigid_motion(rng)
    heavy = sum(1 for s in syms if s != "H")
    mol = Molecule(
        syms,
        apply_rigid(coords, rot, trans),
        comment=name,
        properties={"heavy_atoms": float(heavy)},
        valencies=np.asarray(val, dtype=np.float64),
    )
    verify_zero_gf(mol, table)
    return mol


def toy_dataset(kind, n, rng):
    if kind not in TOY_KINDS:
        raise ValueError(f"unknown toy kind {kind!r}; choose from {TOY_KINDS}")
    table = load_bond_table(TOY_ELEMENTS)
    mols = [_toy_molecule(kind, rng, table) for _ in range(n)]
    return build_dataset(mols, TOY_ELEMENTS)


# -- dataset assembly ------------------------------------------------------


def build_dataset(molecules, elements):
    elements = tuple(elements)
    allowed = set(elements)
    for i, m in enumerate(molecules):
        bad = [s for s in m.symbols if s not in allowed]
        if bad:
            raise DataFormatError(
                f"molecule {i}: element {bad[0]!r} outside the configured set {elements}"
            )
        if not np.all(np.isfinite(m.coords)):
            raise DataFormatError(f"molecule {i}: non-finite coordinates")
    hist = dict(sorted(Counter(m.n_atoms for m in molecules).items()))
    return Dataset(list(molecules), hist, elements)


def ensure_valencies(dataset, table):
    """Fill in ground-truth valencies via geometric bond inference where
    the input format did not provide them."""
    for m in dataset.molecules:
        if m.valencies is None:
            g = chem.infer_graph(m.coords, m.symbols, table)
            m.valencies = g.valencies().astype(np.float64)
            m.bonds = g.bonds


def split_indices(n, val_fraction, seed):
    """Deterministic shuffled train/validation index split."""
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in [0, 1), got {val_fraction}")
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def size_sampler(histogram, rng):
    """Draw a molecule size proportionally to the histogram counts."""
    if not histogram:
        raise ValueError("empty size histogram")
    sizes = np.array(sorted(histogram))
    counts = np.array([histogram[s] for s in sizes], dtype=np.float64)
    return int(rng.choice(sizes, p=counts / counts.sum()))


# -- property labels -------------------------------------------------------


def parse_property_csv(text):
    """Property table: header `index,<name>...`, one row per molecule.

    Returns (names, {index: {name: value}}).
    """
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataFormatError("empty property file", 1)
    if not header or header[0].strip() != "index":
        raise DataFormatError("property header must start with 'index'", 1)
    names = [h.strip() for h in header[1:]]
    if not names:
        raise DataFormatError("property file declares no property columns", 1)
    table = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(names) + 1:
            raise DataFormatError(
                f"expected {len(names) + 1} columns, got {len(row)}", lineno
            )
        try:
            idx = int(row[0])
            vals = {n: float(v) for n, v in zip(names, row[1:])}
        except ValueError:
            raise DataFormatError(f"non-numeric entry in {row!r}", lineno)
        table[idx] = vals
    return names, table


def attach_properties(dataset, names, table):
    missing = [i for i in range(len(dataset)) if i not in table]
    if missing:
        raise DataFormatError(
            f"property table misses molecule indices {missing[:5]}"
            + (" ..." if len(missing) > 5 else "")
        )
    for i, m in enumerate(dataset.molecules):
        m.properties.update(table[i])


def standardize_properties(dataset, train_idx, names=None):
    """Shift/scale properties to zero mean, unit variance on the training
    split; stores the stats on the dataset and rewrites all molecules."""
    if names is None:
        names = sorted(dataset.molecules[0].properties) if dataset.molecules else []
    for name in names:
        vals = np.array([dataset.molecules[i].properties[name] for i in train_idx])
        mean, std = float(vals.mean()), float(vals.std())
        if std == 0.0:
            raise ValueError(f"property {name!r} is constant on the training split")
        dataset.normalization[name] = {"mean": mean, "std": std}
        for m in dataset.molecules:
            m.properties[name] = (m.properties[name] - mean) / std
    return dataset.normalization
