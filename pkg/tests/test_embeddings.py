import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from curate.embeddings import HEADER, EmbeddingSet, l2_normalize, read_emb, read_header, write_emb
from curate.errors import DimensionMismatch, FormatError, UnknownId, ZeroVector


class TestEmbeddingSet:
    def test_from_array_assigns_sequential_ids(self):
        es = EmbeddingSet.from_array(np.ones((3, 2)))
        np.testing.assert_array_equal(es.ids, [0, 1, 2])
        assert es.data.dtype == np.float32
        assert es.dim == 2 and len(es) == 3

    def test_rejects_duplicate_ids(self):
        with pytest.raises(ValueError):
            EmbeddingSet(np.array([1, 1]), np.ones((2, 2)))

    def test_rejects_id_count_mismatch(self):
        with pytest.raises(DimensionMismatch):
            EmbeddingSet(np.array([1, 2, 3]), np.ones((2, 2)))

    def test_normalized_flag_is_checked(self):
        with pytest.raises(ValueError):
            EmbeddingSet.from_array([[1.0, 1.0]], normalized=True)

    def test_subset_follows_requested_order(self):
        es = EmbeddingSet(np.array([10, 20, 30]), np.arange(6).reshape(3, 2))
        sub = es.subset([30, 10])
        np.testing.assert_array_equal(sub.ids, [30, 10])
        np.testing.assert_array_equal(sub.data, [[4, 5], [0, 1]])

    def test_unknown_id(self):
        es = EmbeddingSet(np.array([10, 20]), np.ones((2, 2)))
        with pytest.raises(UnknownId):
            es.positions([15])


class TestNormalize:
    def test_three_four_five(self):
        out = l2_normalize(EmbeddingSet.from_array([[3.0, 4.0]]))
        np.testing.assert_allclose(out.data, [[0.6, 0.8]], rtol=1e-7)
        assert out.normalized

    def test_zero_row_names_its_id(self):
        es = EmbeddingSet(np.array([7, 8]), np.array([[1.0, 0.0], [0.0, 0.0]]))
        with pytest.raises(ZeroVector) as exc:
            l2_normalize(es)
        assert exc.value.id == 8

    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)),
                      elements=st.floats(-1e3, 1e3)))
    def test_rows_have_unit_norm(self, x):
        x = x[np.linalg.norm(x, axis=1) > 1e-3]
        if not len(x):
            return
        out = l2_normalize(EmbeddingSet.from_array(x))
        np.testing.assert_allclose(np.linalg.norm(out.data.astype(np.float64), axis=1), 1.0, atol=1e-6)


class TestEmb1Format:
    def test_header_layout(self, tmp_path):
        es = l2_normalize(EmbeddingSet.from_array(np.eye(3, 4)))
        write_emb(tmp_path / "a.emb", es)
        raw = (tmp_path / "a.emb").read_bytes()
        assert HEADER.size == 36
        assert raw[:4] == b"EMB1"
        assert struct.unpack("<I", raw[4:8]) == (1,)
        assert struct.unpack("<Q", raw[8:16]) == (3,)
        assert struct.unpack("<I", raw[16:20]) == (4,)
        assert raw[20] == 0 and raw[21] == 1
        assert raw[22:36] == bytes(14)
        assert len(raw) == 36 + 3 * 4 * 4
        np.testing.assert_array_equal(np.frombuffer(raw[36:], "<f4").reshape(3, 4), es.data)

    def test_round_trip_with_sidecar(self, tmp_path):
        es = EmbeddingSet(np.array([5, 3, 900]), np.arange(6, dtype=np.float32).reshape(3, 2))
        write_emb(tmp_path / "b.emb", es)
        assert (tmp_path / "b.emb.ids").exists()
        back = read_emb(tmp_path / "b.emb")
        np.testing.assert_array_equal(back.ids, es.ids)
        np.testing.assert_array_equal(back.data, es.data)
        assert not back.normalized

    def test_implicit_ids_write_no_sidecar(self, tmp_path):
        write_emb(tmp_path / "c.emb", EmbeddingSet.from_array(np.ones((2, 2))))
        assert not (tmp_path / "c.emb.ids").exists()

    def test_empty_set_round_trips(self, tmp_path):
        write_emb(tmp_path / "e.emb", EmbeddingSet.from_array(np.zeros((0, 5))))
        back = read_emb(tmp_path / "e.emb")
        assert len(back) == 0 and back.dim == 5

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.emb").write_bytes(b"NOPE" + bytes(32))
        with pytest.raises(FormatError):
            read_emb(tmp_path / "x.emb")

    def test_truncated_header(self, tmp_path):
        p = tmp_path / "t.emb"
        p.write_bytes(b"EMB1\x01")
        with open(p, "rb") as fh, pytest.raises(FormatError):
            read_header(fh)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "p.emb"
        write_emb(p, EmbeddingSet.from_array(np.ones((2, 3))))
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(FormatError):
            read_emb(p)

    def test_sidecar_length_mismatch(self, tmp_path):
        p = tmp_path / "s.emb"
        write_emb(p, EmbeddingSet.from_array(np.ones((2, 3))))
        (tmp_path / "s.emb.ids").write_bytes(np.array([1], "<u8").tobytes())
        with pytest.raises(FormatError):
            read_emb(p)
