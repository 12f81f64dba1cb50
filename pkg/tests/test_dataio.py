"""File formats, toy corpus generation, dataset assembly, properties."""

import numpy as np
import pytest

from moldiff.dataio import (
    DataFormatError,
    Dataset,
    Molecule,
    attach_properties,
    build_dataset,
    collect_structures,
    ensure_valencies,
    load_structures,
    parse_property_csv,
    parse_sdf_minimal,
    parse_xyz,
    size_sampler,
    split_indices,
    standardize_properties,
    toy_dataset,
    write_sdf,
    write_xyz,
)
from moldiff.gfloss import load_bond_table

WATER_XYZ = """3
water
O 0.000000 0.000000 0.000000
H 0.960000 0.000000 0.000000
H -0.240000 0.930000 0.000000
"""


@pytest.fixture(scope="module")
def table():
    return load_bond_table(("H", "C", "N", "O", "F"))


class TestParseXyz:
    def test_single_record(self):
        mols = parse_xyz(WATER_XYZ)
        assert len(mols) == 1
        m = mols[0]
        assert m.symbols == ("O", "H", "H")
        assert m.comment == "water"
        assert m.coords[1, 0] == 0.96

    def test_multi_record_with_blank_lines(self):
        mols = parse_xyz(WATER_XYZ + "\n\n" + WATER_XYZ)
        assert len(mols) == 2

    def test_bytes_accepted(self):
        assert len(parse_xyz(WATER_XYZ.encode())) == 1

    def test_malformed_count(self):
        with pytest.raises(DataFormatError, match="line 1: malformed atom count"):
            parse_xyz("abc\ncomment\n")

    def test_nonpositive_count(self):
        with pytest.raises(DataFormatError, match="line 1: atom count must be positive"):
            parse_xyz("0\ncomment\n")

    def test_missing_comment(self):
        with pytest.raises(DataFormatError, match="line 2: missing comment"):
            parse_xyz("2")

    def test_truncated_record_points_at_missing_atom(self):
        text = "3\nwater\nO 0 0 0\nH 1 0 0\n"
        with pytest.raises(DataFormatError, match="line 5: expected atom 3 of 3"):
            parse_xyz(text)

    def test_short_atom_line(self):
        with pytest.raises(DataFormatError, match="line 3: atom line needs"):
            parse_xyz("1\nc\nH 0 0\n")

    def test_unknown_element(self):
        with pytest.raises(DataFormatError, match="line 3: unknown element 'Zz'"):
            parse_xyz("1\nc\nZz 0 0 0\n")

    def test_non_numeric_coordinate(self):
        with pytest.raises(DataFormatError, match="line 3: non-numeric coordinate 'x'"):
            parse_xyz("1\nc\nH 0 x 0\n")

    def test_non_finite_coordinate(self):
        with pytest.raises(DataFormatError, match="line 3: non-finite coordinate"):
            parse_xyz("1\nc\nH 0 nan 0\n")

    def test_error_lines_offset_in_second_record(self):
        text = WATER_XYZ + "2\nbroken\nH 0 0 0\n"
        with pytest.raises(DataFormatError, match="line 9: expected atom 2 of 2"):
            parse_xyz(text)

    def test_exception_carries_line_attribute(self):
        try:
            parse_xyz("abc\n")
        except DataFormatError as e:
            assert e.line == 1


class TestWriteXyz:
    def test_round_trip_byte_identical(self):
        rng = np.random.default_rng(0)
        mols = []
        for k in range(20):
            n = int(rng.integers(1, 9))
            syms = tuple(rng.choice(["H", "C", "N", "O", "F"], size=n))
            mols.append(Molecule(syms, rng.standard_normal((n, 3)) * 4, comment=f"m{k}"))
        text = write_xyz(mols)
        again = write_xyz(parse_xyz(text))
        assert again == text

    def test_six_decimals(self):
        m = Molecule(("H",), np.array([[1 / 3, 0.0, -2.0]]))
        assert "H 0.333333 0.000000 -2.000000" in write_xyz([m])


class TestSdf:
    def water(self):
        return Molecule(
            ("O", "H", "H"),
            np.array([[0.0, 0, 0], [0.96, 0, 0], [-0.24, 0.93, 0]]),
            comment="water",
            bonds=((0, 1, 1), (0, 2, 1)),
        )

    def test_round_trip(self):
        text = write_sdf([self.water()])
        mols = parse_sdf_minimal(text)
        assert len(mols) == 1
        m = mols[0]
        assert m.symbols == ("O", "H", "H")
        assert m.bonds == ((0, 1, 1), (0, 2, 1))
        assert m.valencies.tolist() == [2.0, 1.0, 1.0]
        assert np.allclose(m.coords, self.water().coords, atol=5e-5)

    def test_write_infers_missing_bonds(self, table):
        m = self.water()
        m.bonds = None
        text = write_sdf([m], table=table)
        assert parse_sdf_minimal(text)[0].bonds == ((0, 1, 1), (0, 2, 1))

    def test_multi_record(self):
        text = write_sdf([self.water(), self.water()])
        assert len(parse_sdf_minimal(text)) == 2

    def test_v3000_rejected(self):
        text = "m\n\n\n  0  0  0  0  0  0  0  0  0  0999 V3000\nM  END\n$$$$\n"
        with pytest.raises(DataFormatError, match="V3000"):
            parse_sdf_minimal(text)

    def test_version_tag_required(self):
        text = "m\n\n\n  1  0  junk\nline\nM  END\n$$$$\n"
        with pytest.raises(DataFormatError, match="missing V2000"):
            parse_sdf_minimal(text)

    def test_unsupported_bond_order(self):
        good = write_sdf([self.water()])
        bad = good.replace("  1  2  1  0", "  1  2  4  0")
        with pytest.raises(DataFormatError, match="unsupported bond type 4"):
            parse_sdf_minimal(bad)

    def test_bond_index_out_of_range(self):
        good = write_sdf([self.water()])
        bad = good.replace("  1  2  1  0", "  1  9  1  0")
        with pytest.raises(DataFormatError, match="out of range"):
            parse_sdf_minimal(bad)

    def test_truncated_atom_block(self):
        text = "m\n\n\n  2  0  0  0  0  0  0  0  0  0999 V2000\n"
        text += "    0.0000    0.0000    0.0000 H   0\n$$$$\n"
        with pytest.raises(DataFormatError, match="truncated atom block"):
            parse_sdf_minimal(text)


class TestFilePlumbing:
    def test_load_by_suffix(self, tmp_path):
        f = tmp_path / "w.xyz"
        f.write_text(WATER_XYZ)
        assert load_structures(f)[0].symbols == ("O", "H", "H")
        with pytest.raises(DataFormatError, match="unsupported structure format"):
            load_structures(tmp_path / "w.pdb")

    def test_collect_directory(self, tmp_path):
        (tmp_path / "a.xyz").write_text(WATER_XYZ)
        (tmp_path / "b.xyz").write_text("broken\n")
        (tmp_path / "notes.txt").write_text("ignored")
        mols, failures = collect_structures(tmp_path)
        assert len(mols) == 1
        assert len(failures) == 1
        assert failures[0][0].endswith("b.xyz")
        assert "malformed atom count" in failures[0][1]

    def test_missing_path(self, tmp_path):
        with pytest.raises(DataFormatError, match="no such file"):
            collect_structures(tmp_path / "absent.xyz")


class TestToyCorpus:
    @pytest.mark.parametrize("kind", ("diatomics", "chains", "templated-small-organics"))
    def test_generates_complete_molecules(self, kind):
        ds = toy_dataset(kind, 30, np.random.default_rng(0))
        assert len(ds) == 30
        assert sum(ds.size_histogram.values()) == 30
        for m in ds.molecules:
            assert m.valencies is not None
            assert m.properties["heavy_atoms"] == sum(1 for s in m.symbols if s != "H")
            assert all(s in ds.elements for s in m.symbols)

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown toy kind"):
            toy_dataset("polymers", 5, np.random.default_rng(0))

    def test_deterministic(self):
        a = toy_dataset("chains", 10, np.random.default_rng(7))
        b = toy_dataset("chains", 10, np.random.default_rng(7))
        for ma, mb in zip(a.molecules, b.molecules):
            assert ma.symbols == mb.symbols
            assert np.array_equal(ma.coords, mb.coords)

    def test_diatomic_bond_lengths(self, table):
        ds = toy_dataset("diatomics", 40, np.random.default_rng(1))
        for m in ds.molecules:
            d = np.linalg.norm(m.coords[0] - m.coords[1])
            i, j = table.index(m.symbols[0]), table.index(m.symbols[1])
            assert d == pytest.approx(table.lengths[i, j, 0], abs=1e-9)

    def test_chain_geometry(self):
        ds = toy_dataset("chains", 40, np.random.default_rng(2))
        for m in ds.molecules:
            n = m.n_atoms
            assert 3 <= n <= 8
            assert m.symbols[0] == "H" and m.symbols[-1] == "H"
            assert all(s == "O" for s in m.symbols[1:-1])
            gaps = np.linalg.norm(np.diff(m.coords, axis=0), axis=1)
            assert gaps[0] == pytest.approx(0.96, abs=1e-9)
            assert gaps[-1] == pytest.approx(0.96, abs=1e-9)
            for g in gaps[1:-1]:
                assert g == pytest.approx(1.48, abs=1e-9)

    def test_random_orientation(self):
        ds = toy_dataset("diatomics", 10, np.random.default_rng(3))
        axes = np.array([
            (m.coords[1] - m.coords[0]) / np.linalg.norm(m.coords[1] - m.coords[0])
            for m in ds.molecules
        ])
        assert axes.std(axis=0).max() > 0.1


class TestDatasetAssembly:
    def test_histogram_sorted(self):
        mols = [
            Molecule(("H",) * n, np.zeros((n, 3))) for n in (5, 3, 5, 4)
        ]
        ds = build_dataset(mols, ("H",))
        assert list(ds.size_histogram.items()) == [(3, 1), (4, 1), (5, 2)]

    def test_rejects_foreign_elements(self):
        mols = [Molecule(("H", "S"), np.zeros((2, 3)))]
        with pytest.raises(DataFormatError, match="element 'S' outside"):
            build_dataset(mols, ("H", "O"))

    def test_rejects_non_finite(self):
        mols = [Molecule(("H",), np.array([[np.inf, 0, 0]]))]
        with pytest.raises(DataFormatError, match="non-finite"):
            build_dataset(mols, ("H",))

    def test_ensure_valencies_fills_gaps(self, table):
        ds = build_dataset(parse_xyz(WATER_XYZ), ("H", "O"))
        assert ds.molecules[0].valencies is None
        ensure_valencies(ds, table)
        assert ds.molecules[0].valencies.tolist() == [2.0, 1.0, 1.0]
        assert ds.molecules[0].bonds == ((0, 1, 1), (0, 2, 1))


class TestSplits:
    def test_deterministic_disjoint(self):
        tr1, va1 = split_indices(100, 0.2, seed=5)
        tr2, va2 = split_indices(100, 0.2, seed=5)
        assert np.array_equal(tr1, tr2) and np.array_equal(va1, va2)
        assert len(va1) == 20 and len(tr1) == 80
        assert set(tr1) | set(va1) == set(range(100))
        assert set(tr1) & set(va1) == set()
        assert np.all(np.diff(tr1) > 0) and np.all(np.diff(va1) > 0)

    def test_seed_changes_split(self):
        _, va1 = split_indices(100, 0.2, seed=1)
        _, va2 = split_indices(100, 0.2, seed=2)
        assert not np.array_equal(va1, va2)

    def test_zero_fraction(self):
        tr, va = split_indices(10, 0.0, seed=0)
        assert len(tr) == 10 and len(va) == 0

    def test_bad_fraction(self):
        with pytest.raises(ValueError, match="val_fraction"):
            split_indices(10, 1.0, seed=0)


class TestSizeSampler:
    def test_empty_histogram(self):
        with pytest.raises(ValueError, match="empty size histogram"):
            size_sampler({}, np.random.default_rng(0))

    def test_matches_histogram_within_3_sigma(self):
        hist = {3: 900, 8: 100}
        rng = np.random.default_rng(4)
        n = 2000
        draws = np.array([size_sampler(hist, rng) for _ in range(n)])
        assert set(draws) <= {3, 8}
        p = 0.9
        got = (draws == 3).mean()
        sigma = np.sqrt(p * (1 - p) / n)
        assert abs(got - p) < 3 * sigma


class TestProperties:
    CSV = "index,gap,energy\n0,1.5,-40.0\n1,2.5,-41.0\n2,3.5,-42.0\n"

    def make_ds(self):
        mols = [Molecule(("H",), np.zeros((1, 3))) for _ in range(3)]
        return Dataset(mols, {1: 3}, ("H",))

    def test_parse(self):
        names, tab = parse_property_csv(self.CSV)
        assert names == ["gap", "energy"]
        assert tab[1]["gap"] == 2.5
        assert tab[2]["energy"] == -42.0

    def test_parse_errors(self):
        with pytest.raises(DataFormatError, match="line 1: empty property file"):
            parse_property_csv("")
        with pytest.raises(DataFormatError, match="must start with 'index'"):
            parse_property_csv("id,gap\n0,1\n")
        with pytest.raises(DataFormatError, match="no property columns"):
            parse_property_csv("index\n0\n")
        with pytest.raises(DataFormatError, match="line 3: expected 3 columns, got 2"):
            parse_property_csv("index,gap,energy\n0,1,2\n1,9\n")
        with pytest.raises(DataFormatError, match="non-numeric"):
            parse_property_csv("index,gap\n0,low\n")

    def test_attach_and_missing(self):
        ds = self.make_ds()
        names, tab = parse_property_csv(self.CSV)
        attach_properties(ds, names, tab)
        assert ds.molecules[2].properties["gap"] == 3.5
        del tab[1]
        with pytest.raises(DataFormatError, match="misses molecule indices \\[1\\]"):
            attach_properties(self.make_ds(), names, tab)

    def test_standardize_on_train_split(self):
        ds = self.make_ds()
        names, tab = parse_property_csv(self.CSV)
        attach_properties(ds, names, tab)
        train_idx = np.array([0, 1, 2])
        norm = standardize_properties(ds, train_idx, ["gap"])
        vals = np.array([m.properties["gap"] for m in ds.molecules])
        assert abs(vals.mean()) < 1e-9
        assert abs(vals.var() - 1.0) < 1e-6
        assert norm["gap"]["mean"] == pytest.approx(2.5)
        # untouched property keeps raw values
        assert ds.molecules[0].properties["energy"] == -40.0

    def test_standardize_rewrites_held_out_rows_with_train_stats(self):
        ds = self.make_ds()
        names, tab = parse_property_csv(self.CSV)
        attach_properties(ds, names, tab)
        standardize_properties(ds, np.array([0, 1]), ["gap"])
        mean, std = 2.0, 0.5
        assert ds.molecules[2].properties["gap"] == pytest.approx((3.5 - mean) / std)

    def test_constant_property_rejected(self):
        ds = self.make_ds()
        for m in ds.molecules:
            m.properties["flat"] = 7.0
        with pytest.raises(ValueError, match="constant on the training split"):
            standardize_properties(ds, np.array([0, 1, 2]), ["flat"])
