import numpy as np
import pytest

from vsrkit.linguistics import (
    LinguisticsError,
    build_mapping_matrix,
    build_window_mask,
    default_inventory,
    default_lexicon,
    load_inventory,
    load_lexicon,
    save_inventory,
    save_lexicon,
    text_to_labels,
)

# every viseme row of the bundled inventory: id -> (frequency %, symbols)
TABLE_ROWS = {
    0: (None, ["_"]),
    1: (0.01, ["ʔ"]),
    2: (3.08, ["p", "pʰ", "m"]),
    3: (1.34, ["f"]),
    4: (15.30, ["t", "tʰ", "n", "l"]),
    5: (12.91, ["k", "kʰ", "x", "ŋ"]),
    6: (7.34, ["tɕ", "tɕʰ", "ɕ"]),
    7: (8.00, ["tʂ", "tʂʰ", "ʂ", "ʐ"]),
    8: (2.32, ["ts", "tsʰ", "s"]),
    9: (8.81, ["ɑ"]),
    10: (11.43, ["e", "o", "ə", "ɚ"]),
    11: (15.56, ["ɪ", "ɹ̩", "ɻ̩"]),
    12: (7.81, ["ʊ"]),
    13: (0.69, ["y"]),
    14: (2.36, ["aʲ", "eʲ"]),
    15: (3.02, ["aʷ", "oʷ"]),
}


@pytest.fixture(scope="module")
def inv():
    return default_inventory()


@pytest.fixture(scope="module")
def lexicon(inv):
    return default_lexicon(inv)


def test_bundled_inventory_reproduces_every_row(inv):
    raw_total = sum(f for f, _ in TABLE_ROWS.values() if f) / 100.0
    for vid, (freq, symbols) in TABLE_ROWS.items():
        got = [inv.phonemes[i] for i in inv.phonemes_of_viseme(vid)]
        assert got == symbols, f"viseme {vid}"
        if freq is None:
            assert inv.viseme_frequency[vid] == 0.0
        else:
            # frequencies are renormalized after load; undo that to compare
            # against the printed column
            assert inv.viseme_frequency[vid] * raw_total == \
                pytest.approx(freq / 100.0, abs=1e-12)


def test_bundled_inventory_shape(inv):
    assert inv.num_visemes == 16
    assert inv.num_phonemes == 38  # 37 phonemes + blank
    assert inv.phonemes[0] == "_"
    assert inv.phoneme_to_viseme[0] == 0
    assert abs(sum(inv.viseme_frequency) - 1.0) < 1e-9
    assert all(1 <= v <= 15 for v in inv.phoneme_to_viseme[1:])


def test_specific_lookups(inv):
    assert inv.viseme_of(inv.phoneme_index("f")) == 3
    assert inv.viseme_of(inv.phoneme_index("y")) == 13


def test_load_errors(tmp_path):
    bad = tmp_path / "inv.tsv"

    bad.write_text("0\t0\t_\n1\tnot_a_number\tʔ\n", encoding="utf-8")
    with pytest.raises(LinguisticsError, match="malformed number"):
        load_inventory(bad)

    bad.write_text("0\t0\t_\n1\t0.5\tʔ\n1\t0.5\tp\n", encoding="utf-8")
    with pytest.raises(LinguisticsError, match="duplicate viseme"):
        load_inventory(bad)

    rows = ["0\t0\t_"] + [f"{v}\t{1 / 15}\tsym{v}" for v in range(1, 16)]
    rows[3] = "3\t" + str(1 / 15) + "\tsym2"  # duplicate phoneme symbol
    bad.write_text("\n".join(rows), encoding="utf-8")
    with pytest.raises(LinguisticsError, match="duplicate phoneme"):
        load_inventory(bad)

    rows = ["0\t0\t_"] + [f"{v}\t0.01\tsym{v}" for v in range(1, 16)]
    bad.write_text("\n".join(rows), encoding="utf-8")
    with pytest.raises(LinguisticsError, match="sum"):
        load_inventory(bad)

    bad.write_text("0\t0\t_\textra\n", encoding="utf-8")
    with pytest.raises(LinguisticsError, match="3 tab-separated"):
        load_inventory(bad)


def test_inventory_missing_rows(tmp_path):
    p = tmp_path / "short.tsv"
    p.write_text("0\t0\t_\n1\t1.0\tʔ\n", encoding="utf-8")
    with pytest.raises(LinguisticsError, match="missing viseme rows"):
        load_inventory(p)


def test_inventory_omitting_a_phoneme_breaks_the_lexicon(tmp_path, inv):
    # drop "m" from its viseme row, then load a lexicon that needs it
    src = [
        f"{vid}\t{0 if vid == 0 else freq / 100.0}\t"
        f"{','.join(s for s in symbols if s != 'm')}"
        for vid, (freq, symbols) in TABLE_ROWS.items()
    ]
    inv_path = tmp_path / "no_m.tsv"
    inv_path.write_text("\n".join(src), encoding="utf-8")
    no_m = load_inventory(inv_path)
    lex_path = tmp_path / "lex.tsv"
    lex_path.write_text("妈 m ɑ\n", encoding="utf-8")
    with pytest.raises(LinguisticsError, match="unmapped phoneme 'm'"):
        load_lexicon(lex_path, no_m)


def test_lexicon_rejects_blank_and_duplicates(tmp_path, inv):
    p = tmp_path / "lex.tsv"
    p.write_text("妈 m _\n", encoding="utf-8")
    with pytest.raises(LinguisticsError, match="blank"):
        load_lexicon(p, inv)
    p.write_text("妈 m ɑ\n妈 p ɑ\n", encoding="utf-8")
    with pytest.raises(LinguisticsError, match="duplicate"):
        load_lexicon(p, inv)
    p.write_text("word m ɑ\n", encoding="utf-8")
    with pytest.raises(LinguisticsError, match="single code point"):
        load_lexicon(p, inv)


def test_text_to_labels_empty(inv, lexicon):
    t = text_to_labels("", lexicon, inv)
    assert t.chars == () and t.phonemes == () and t.visemes == ()


def test_text_to_labels_single_char(inv, lexicon):
    t = text_to_labels("妈", lexicon, inv)
    assert [inv.phonemes[p] for p in t.phonemes] == ["m", "ɑ"]
    assert t.visemes == (2, 9)


def test_text_to_labels_reports_position(inv, lexicon):
    with pytest.raises(LinguisticsError, match="position 1"):
        text_to_labels("妈Z妈", lexicon, inv)


def test_labels_roundtrip_viseme_invariant(inv, lexicon):
    t = text_to_labels("国务院督察组将督促整改", lexicon, inv)
    assert t.visemes == inv.map_phonemes(t.phonemes)


def test_save_and_reload_inventory(tmp_path, inv):
    p = tmp_path / "inv.tsv"
    save_inventory(p, inv)
    again = load_inventory(p)
    assert again.phonemes == inv.phonemes
    assert again.phoneme_to_viseme == inv.phoneme_to_viseme
    assert np.allclose(again.viseme_frequency, inv.viseme_frequency)


def test_save_and_reload_lexicon(tmp_path, inv, lexicon):
    p = tmp_path / "lex.tsv"
    save_lexicon(p, lexicon, inv)
    again = load_lexicon(p, inv)
    assert [e.character for e in again.entries] == \
        [e.character for e in lexicon.entries]
    assert [e.phonemes for e in again.entries] == \
        [e.phonemes for e in lexicon.entries]


# ----------------------------------------------------------------------
# mapping matrix


def test_mapping_matrix_blank_rows_are_zero(inv):
    M = build_mapping_matrix([0, 0, 0], [1, 2, 3], inv)
    assert np.array_equal(M, np.zeros((3, 3)))


def test_mapping_matrix_distinct_classes(inv):
    p = inv.phoneme_index("p")
    t = inv.phoneme_index("t")
    M = build_mapping_matrix([2, 4], [p, t], inv)
    assert np.array_equal(M, np.eye(2))


def test_mapping_matrix_same_viseme_class(inv):
    p = inv.phoneme_index("p")
    ph = inv.phoneme_index("pʰ")
    M = build_mapping_matrix([2, 2], [p, ph], inv)
    assert np.array_equal(M, np.ones((2, 2)))


def test_mapping_matrix_matches_pairwise_lookup_oracle(inv):
    # entry (i, j) may depend only on the class pair; compare against a
    # full two-level table over every (viseme, phoneme) pair
    table = np.zeros((inv.num_visemes, inv.num_phonemes))
    for v in range(inv.num_visemes):
        for p in range(inv.num_phonemes):
            table[v, p] = 1.0 if v != 0 and inv.viseme_of(p) == v else 0.0
    rng = np.random.default_rng(0)
    for _ in range(50):
        T = int(rng.integers(1, 9))
        vis = rng.integers(0, inv.num_visemes, size=T)
        pho = rng.integers(0, inv.num_phonemes, size=T)
        M = build_mapping_matrix(vis, pho, inv)
        assert np.array_equal(M, table[np.ix_(vis, pho)])


def test_mapping_matrix_permutation_equivariance(inv):
    rng = np.random.default_rng(1)
    T = 7
    vis = rng.integers(0, inv.num_visemes, size=T)
    pho = rng.integers(0, inv.num_phonemes, size=T)
    sigma = rng.permutation(T)
    M = build_mapping_matrix(vis, pho, inv)
    M_perm = build_mapping_matrix(vis[sigma], pho[sigma], inv)
    assert np.array_equal(M_perm, M[np.ix_(sigma, sigma)])


def test_mapping_matrix_errors(inv):
    with pytest.raises(LinguisticsError, match="equal-length"):
        build_mapping_matrix([1, 2], [1], inv)
    with pytest.raises(LinguisticsError, match="viseme class out of range"):
        build_mapping_matrix([16], [1], inv)
    with pytest.raises(LinguisticsError, match="phoneme class out of range"):
        build_mapping_matrix([1], [99], inv)


# ----------------------------------------------------------------------
# window mask


def test_window_mask_width_one_is_identity():
    assert np.array_equal(build_window_mask(5, 1), np.eye(5))


def test_window_mask_wide_is_all_ones():
    assert np.array_equal(build_window_mask(3, 5), np.ones((3, 3)))


def test_window_mask_row_support():
    W = build_window_mask(10, 5)
    assert np.array_equal(np.flatnonzero(W[0]), [0, 1, 2])


def test_window_mask_structure():
    for T, w in [(1, 1), (4, 3), (9, 5), (6, 11)]:
        W = build_window_mask(T, w)
        assert np.array_equal(W, W.T)
        assert np.array_equal(np.diag(W), np.ones(T))
        r = w // 2
        for i in range(T):
            assert W[i].sum() == min(T - 1, i + r) - max(0, i - r) + 1


def test_window_mask_rejects_bad_width():
    with pytest.raises(LinguisticsError):
        build_window_mask(4, 2)
    with pytest.raises(LinguisticsError):
        build_window_mask(0, 1)
