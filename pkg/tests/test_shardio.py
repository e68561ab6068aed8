import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from plexuskit.graph_prep import prepare, synth_dataset
from plexuskit.grid import make_grid
from plexuskit.layout import chunk_bounds
from plexuskit.shardio import (ChecksumError, ManifestError, MissingShardError, SectionReader,
                               ShardManifest, TruncatedShardError, decode_file, encode_file,
                               file_digest, list_files, read_permutation, read_shard, write_shards)
from plexuskit.tensor_core import CsrMatrix, csr_block
from plexuskit.trainer import load_prepared, load_rank_shards


@pytest.fixture(scope="module")
def sharded(small_graph, tmp_path_factory):
    return small_graph, write_shards(small_graph, 4, 3, tmp_path_factory.mktemp("shards"))


def test_encode_decode_round_trip():
    rng = np.random.default_rng(0)
    secs = {"a": CsrMatrix.from_dense(rng.normal(size=(5, 4)) * (rng.random((5, 4)) < 0.5)),
            "d": rng.normal(size=(3, 2)), "i": np.array([3, -1, 7]), "b": np.array([True, False])}
    blob, index = encode_file(secs, "f64")
    back = decode_file(blob)
    assert back["a"].structurally_equal(secs["a"])
    assert back["a"].values.tobytes() == secs["a"].values.tobytes()
    assert back["d"].tobytes() == secs["d"].tobytes()
    assert back["i"].tolist() == [3, -1, 7] and back["b"].tolist() == [True, False]
    assert blob[:4] == b"PLXS"
    assert set(index) == set(secs)


def test_decode_rejects_bad_input():
    blob, _ = encode_file({"d": np.ones((2, 2))}, "f32")
    with pytest.raises(TruncatedShardError):
        decode_file(blob[:-3])
    with pytest.raises(Exception):
        decode_file(b"NOPE" + blob[4:])


def test_round_trip_bit_exact(sharded):
    g, m = sharded
    n = g.num_nodes
    for i in range(m.p):
        for j in range(m.q):
            sh = read_shard(m, i, j)
            r0, r1 = chunk_bounds(n, m.p, i)
            c0, c1 = chunk_bounds(n, m.q, j)
            for name, full in (("a_even", g.a_even), ("a_odd", g.a_odd)):
                ref = csr_block(full, r0, r1, c0, c1)
                assert sh[name].structurally_equal(ref)
                assert sh[name].values.tobytes() == ref.values.astype("<f8").tobytes()
            f0, f1 = chunk_bounds(g.num_features, m.q, j)
            assert np.array_equal(sh["features"], g.features[r0:r1, f0:f1])
    prow, pcol = read_permutation(m)
    assert np.array_equal(prow, g.perm.row) and np.array_equal(pcol, g.perm.col)


def test_reassembly_equals_source(sharded):
    g, m = sharded
    back = load_prepared(ShardManifest.load(m.root))
    assert back.a_even.structurally_equal(g.a_even)
    assert np.array_equal(back.a_odd.values, g.a_odd.values)
    assert np.array_equal(back.features, g.features)
    assert back.adjacency.structurally_equal(g.adjacency)
    for o in ("row", "col"):
        assert np.array_equal(back.labels_by_order[o], g.labels_by_order[o])
        assert np.array_equal(back.mask_by_order[o], g.mask_by_order[o])


def test_single_shard_is_whole_dataset(small_graph, tmp_path):
    m = write_shards(small_graph, 1, 1, tmp_path)
    sh = read_shard(m, 0, 0)
    assert sh["a_even"].structurally_equal(small_graph.a_even)
    assert np.array_equal(sh["features"], small_graph.features)
    assert m.rng == "philox"


def test_nnz_conservation_sbm_8x8(tmp_path):
    g = prepare(synth_dataset("sbm", {"features": 8}, seed=1), seed=1)
    m = write_shards(g, 8, 8, tmp_path)
    total = sum(read_shard(m, i, j)["a_even"].nnz for i in range(8) for j in range(8))
    assert total == g.a_even.nnz == m.nnz


def test_deterministic_bytes(small_graph, tmp_path):
    a = write_shards(small_graph, 2, 2, tmp_path / "a")
    b = write_shards(small_graph, 2, 2, tmp_path / "b", max_workers=4)
    for fa, fb in zip(list_files(a), list_files(b)):
        assert file_digest(fa) == file_digest(fb)


def test_manifest_is_json(sharded):
    _, m = sharded
    d = json.loads((m.root / "manifest.json").read_text())
    assert d["p"] == 4 and d["q"] == 3 and len(d["shards"]) == 12
    assert d["rng"] == "philox"


def test_unread_section_corruption_is_not_touched(small_graph, tmp_path):
    m = write_shards(small_graph, 1, 1, tmp_path)
    info = m.shard(0, 0)["sections"]["mask_col"]
    raw = bytearray(m.path(0, 0).read_bytes())
    raw[info["offset"] + info["length"] - 1] ^= 0xFF
    m.path(0, 0).write_bytes(bytes(raw))
    # a 3-layer model reads row-order masks only
    load_rank_shards(m, make_grid(1, 1, 1), 0, [16, 8, 8, 4])
    with pytest.raises(ChecksumError):
        SectionReader(m).section(0, 0, "mask_col")


def test_checksum_mismatch_names_file(small_graph, tmp_path):
    m = write_shards(small_graph, 2, 2, tmp_path)
    path = m.path(1, 0)
    info = m.shard(1, 0)["sections"]["a_even"]
    raw = bytearray(path.read_bytes())
    raw[info["offset"] + info["length"] - 1] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError, match="shard_001_000"):
        read_shard(m, 1, 0)
    with pytest.raises(ChecksumError, match="shard_001_000"):
        for r in range(8):
            load_rank_shards(m, make_grid(2, 2, 2), r, [16, 4, 4, 4])


def test_missing_file_names_file(small_graph, tmp_path):
    m = write_shards(small_graph, 2, 2, tmp_path)
    m.path(0, 1).unlink()
    with pytest.raises(MissingShardError, match="shard_000_001"):
        read_shard(m, 0, 1)
    with pytest.raises(MissingShardError):
        SectionReader(m).section(0, 1, "a_even")


def test_manifest_inconsistency(small_graph, tmp_path):
    m = write_shards(small_graph, 2, 2, tmp_path)
    d = json.loads((tmp_path / "manifest.json").read_text())
    d["nnz"] += 1
    (tmp_path / "manifest.json").write_text(json.dumps(d))
    with pytest.raises(ManifestError):
        ShardManifest.load(tmp_path)
    with pytest.raises(ManifestError):
        m.shard(5, 0)


@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 40), st.integers(0, 40),
       st.integers(0, 40), st.integers(0, 40))
def test_section_reader_slices(p, q, a, b, c, d):
    g = _shared_graph()
    m = _shared_manifest(p, q)
    n = g.num_nodes
    r0, r1 = sorted((a * n // 40, b * n // 40))
    c0, c1 = sorted((c * n // 40, d * n // 40))
    rd = SectionReader(m)
    got = rd.csr("a_odd", r0, r1, c0, c1)
    ref = csr_block(g.a_odd, r0, r1, c0, c1)
    assert got.structurally_equal(ref) and np.array_equal(got.values, ref.values)
    np.testing.assert_array_equal(rd.features(r0, r1, 0, g.num_features), g.features[r0:r1])
    np.testing.assert_array_equal(rd.vector("labels_col", c0, c1), g.labels_by_order["col"][c0:c1])


_CACHE = {}


def _shared_graph():
    if "g" not in _CACHE:
        ds = synth_dataset("sbm", {"nodes": 37, "communities": 3, "p_in": 0.3, "features": 5,
                                   "classes": 3}, seed=2)
        _CACHE["g"] = prepare(ds, seed=4)
    return _CACHE["g"]


def _shared_manifest(p, q):
    import tempfile
    key = (p, q)
    if key not in _CACHE:
        _CACHE[key] = write_shards(_shared_graph(), p, q, tempfile.mkdtemp(prefix="plx"))
    return _CACHE[key]


def test_rank_loader_matches_direct_slicing(small_graph, tmp_path):
    from plexuskit.trainer import rank_data_from_prepared
    m = write_shards(small_graph, 8, 8, tmp_path)
    grid = make_grid(2, 2, 2)
    dims = [16, 8, 8, 4]
    for r in range(grid.size):
        a = load_rank_shards(m, grid, r, dims)
        b = rank_data_from_prepared(small_graph, grid, r, dims)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels) and np.array_equal(a.mask, b.mask)
        for key in b.adjacency.shards:
            assert a.adjacency.shards[key].structurally_equal(b.adjacency.shards[key])
        # three adjacency planes, each overlapping at most (8/2 + 1)^2 files
        assert a.files_read <= 3 * (8 // 2 + 1) ** 2
        assert a.bytes_read < m.total_bytes()


def test_single_file_grid(small_graph, tmp_path):
    m = write_shards(small_graph, 1, 1, tmp_path)
    d = load_rank_shards(m, make_grid(1, 1, 1), 0, [16, 8, 4])
    assert d.files_read == 1
