"""Molecular graphs from point clouds, valence rules, and metrics.

Bond perception reuses the gfloss bond table with delta (known) types.
Validity is an internal valence-plus-connectivity check, not a
cheminformatics-toolkit sanitization; the difference is documented where
the metrics are reported.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

from . import kernels

ATOMIC_NUMBERS = {
    "H": 1, "C": 6, "N": 7, "O": 8, "F": 9, "Si": 14, "P": 15,
    "S": 16, "Cl": 17, "Br": 35, "I": 53,
}
SYMBOL_BY_NUMBER = {z: s for s, z in ATOMIC_NUMBERS.items()}

# allowed summed bond orders per element (neutral species)
ALLOWED_VALENCES = {
    "H": (1,), "C": (4,), "N": (3,), "O": (2,), "F": (1,),
    "Si": (4,), "P": (3, 5), "S": (2, 4, 6), "Cl": (1,), "Br": (1,), "I": (1,),
}

_RULES = {"highest": kernels.RULE_HIGHEST, "argmin": kernels.RULE_ARGMIN}


@dataclass
class MoleculeGraph:
    """Atoms plus perceived bonds; each bond stored once as (i, j, order), i<j."""

    symbols: tuple
    coords: np.ndarray
    bonds: tuple

    def __post_init__(self):
        self.symbols = tuple(self.symbols)
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.bonds = tuple((int(i), int(j), int(o)) for i, j, o in self.bonds)
        for i, j, o in self.bonds:
            if i == j:
                raise ValueError(f"self-bond on atom {i}")
            if not 1 <= o <= 3:
                raise ValueError(f"bond order {o} outside 1..3")

    @property
    def n_atoms(self):
        return len(self.symbols)

    def valencies(self):
        v = np.zeros(self.n_atoms, dtype=np.int64)
        for i, j, o in self.bonds:
            v[i] += o
            v[j] += o
        return v


def infer_graph(coords, symbols, table, rule="highest"):
    """Perceive bonds for known atom types from 3D coordinates."""
    for s in symbols:
        if s not in table.symbols:
            raise KeyError(f"element {s!r} not covered by the bond table")
    coords = np.asarray(coords, dtype=np.float64)
    dist = kernels.pairwise_dist_fwd(np.ascontiguousarray(coords))
    order = kernels.order_matrix(
        dist, table.type_indices(symbols), table.lengths, table.margins, _RULES[rule]
    )
    n = len(symbols)
    bonds = [
        (i, j, int(order[i, j])) for i in range(n) for j in range(i + 1, n) if order[i, j] > 0
    ]
    return MoleculeGraph(tuple(symbols), coords, tuple(bonds))


def stable_atom_flags(graph):
    """True per atom when its summed bond order is an allowed valency."""
    v = graph.valencies()
    flags = np.zeros(graph.n_atoms, dtype=bool)
    for i, s in enumerate(graph.symbols):
        allowed = ALLOWED_VALENCES.get(s)
        flags[i] = allowed is not None and int(v[i]) in allowed
    return flags


def atom_stability(graphs):
    """Fraction of atoms with allowed valency over the whole corpus."""
    total = sum(g.n_atoms for g in graphs)
    if total == 0:
        raise ValueError("empty corpus")
    good = sum(int(stable_atom_flags(g).sum()) for g in graphs)
    return good / total


def molecule_stability(graphs):
    """Fraction of molecules all of whose atoms are stable."""
    if not graphs:
        raise ValueError("empty corpus")
    return sum(bool(stable_atom_flags(g).all()) for g in graphs) / len(graphs)


def connected_components(n, bonds):
    """Component label per atom (0-based, label order by first atom)."""
    adj = [[] for _ in range(n)]
    for i, j, _ in bonds:
        adj[i].append(j)
        adj[j].append(i)
    labels = np.full(n, -1, dtype=np.int64)
    comp = 0
    for start in range(n):
        if labels[start] >= 0:
            continue
        stack = [start]
        labels[start] = comp
        while stack:
            u = stack.pop()
            for w in adj[u]:
                if labels[w] < 0:
                    labels[w] = comp
                    stack.append(w)
        comp += 1
    return labels


def largest_fragment(graph):
    """Subgraph of the biggest connected component (ties: lowest label)."""
    labels = connected_components(graph.n_atoms, graph.bonds)
    sizes = np.bincount(labels)
    keep = int(np.argmax(sizes))
    idx = np.flatnonzero(labels == keep)
    remap = {int(old): new for new, old in enumerate(idx)}
    bonds = tuple(
        (remap[i], remap[j], o) for i, j, o in graph.bonds if i in remap and j in remap
    )
    return MoleculeGraph(
        tuple(graph.symbols[i] for i in idx), graph.coords[idx], bonds
    )


def is_valid(graph, use_largest_fragment=False):
    """All valencies allowed and (strict mode) a single connected component."""
    if graph.n_atoms == 0:
        return False
    if use_largest_fragment:
        graph = largest_fragment(graph)
    else:
        labels = connected_components(graph.n_atoms, graph.bonds)
        if labels.max() != 0:
            return False
    return bool(stable_atom_flags(graph).all())


def validity(graphs, use_largest_fragment=False):
    if not graphs:
        raise ValueError("empty corpus")
    return sum(is_valid(g, use_largest_fragment) for g in graphs) / len(graphs)


# -- canonical form ----------------------------------------------------------


def _refine(colors, adj):
    """One round of neighborhood refinement; returns new color ids."""
    n = len(colors)
    sigs = []
    for i in range(n):
        neigh = sorted((o, colors[j]) for j, o in adj[i])
        sigs.append((colors[i], tuple(neigh)))
    order = {s: k for k, s in enumerate(sorted(set(sigs)))}
    return [order[s] for s in sigs]


def _refine_to_fixpoint(colors, adj):
    while True:
        new = _refine(colors, adj)
        if new == colors:
            return colors
        colors = new


def _certificate(colors, adj, symbols):
    """Canonical certificate; individualizes when refinement stalls."""
    colors = _refine_to_fixpoint(colors, adj)
    n = len(colors)
    counts = {}
    for c in colors:
        counts[c] = counts.get(c, 0) + 1
    split = [c for c in sorted(counts) if counts[c] > 1]
    if not split:
        rank = {i: r for r, (_, i) in enumerate(sorted((colors[i], i) for i in range(n)))}
        edges = sorted(
            (min(rank[i], rank[j]), max(rank[i], rank[j]), o)
            for i in range(n)
            for j, o in adj[i]
            if i < j
        )
        atoms = tuple(s for _, s in sorted((rank[i], symbols[i]) for i in range(n)))
        return (atoms, tuple(edges))
    # refinement is stuck (regular substructures): individualize members of
    # the first non-singleton class and take the smallest certificate
    target = split[0]
    members = [i for i in range(n) if colors[i] == target]
    fresh = max(colors) + 1
    if _mutually_twin(members, adj):
        # interchangeable atoms (e.g. the hydrogens of methane, or isolated
        # atoms in a bond-free cloud): one branch suffices
        branch = list(colors)
        branch[members[0]] = fresh
        return _certificate(branch, adj, symbols)
    best = None
    for i in members:
        branch = list(colors)
        branch[i] = fresh
        cert = _certificate(branch, adj, symbols)
        if best is None or cert < best:
            best = cert
    return best


def _mutually_twin(members, adj):
    """True when every pair in the class is swappable by an automorphism:
    identical outside-neighborhoods and uniform (or absent) intra-class edges."""
    mset = set(members)
    outside = None
    intra_orders = set()
    for i in members:
        out_i = frozenset((j, o) for j, o in adj[i] if j not in mset)
        if outside is None:
            outside = out_i
        elif out_i != outside:
            return False
        intra = [(j, o) for j, o in adj[i] if j in mset]
        intra_orders.update(o for _, o in intra)
        if len(intra) not in (0, len(members) - 1):
            return False
    return len(intra_orders) <= 1


def canonical_hash(graph):
    """Permutation-invariant hash of (symbols, bonds-with-orders)."""
    n = graph.n_atoms
    adj = [[] for _ in range(n)]
    for i, j, o in graph.bonds:
        adj[i].append((j, o))
        adj[j].append((i, o))
    init = {s: k for k, s in enumerate(sorted(set(graph.symbols)))}
    colors = [init[s] for s in graph.symbols]
    cert = _certificate(colors, adj, graph.symbols)
    return hashlib.sha256(repr(cert).encode()).hexdigest()


def uniqueness(graphs):
    """Fraction of distinct canonical forms (caller filters to valid ones)."""
    if not graphs:
        raise ValueError("empty corpus")
    return len({canonical_hash(g) for g in graphs}) / len(graphs)


def evaluate_corpus(graphs, use_largest_fragment=False):
    """The full metric suite as a flat dict."""
    valid_graphs = [g for g in graphs if is_valid(g, use_largest_fragment)]
    val = len(valid_graphs) / len(graphs)
    uniq = uniqueness(valid_graphs) if valid_graphs else 0.0
    return {
        "n_molecules": len(graphs),
        "atom_stability": atom_stability(graphs),
        "molecule_stability": molecule_stability(graphs),
        "validity": val,
        "uniqueness": uniq,
        "uniqueness_times_validity": uniq * val,
    }
