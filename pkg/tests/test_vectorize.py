import hashlib
import math
import re
import struct
import subprocess
import sys

import numpy as np
import pytest

from tablelink.corpus import RelationSchema, TupleRecord
from tablelink.vectorize import (
    HashingEncoder,
    VectorizeError,
    VectorizerModel,
    embed_foreign_key,
    fit_vectorizer,
    read_vector_file,
    vectorize_attribute,
    vectorize_mention,
    vectorize_tuple,
    write_vector_file,
)
from tablelink.corpus import TextMention

from conftest import make_record


def hashing_oracle(text, dim, seed):
    """Independent re-implementation of the signed hashing scheme."""
    feats = []
    for i in range(len(text) - 2):
        feats.append((b"c3", text[i : i + 3]))
    for word in re.findall(r"\w+", text.lower()):
        feats.append((b"w", word))
    key = struct.pack("<q", seed)
    acc = [0.0] * dim
    for ns, f in feats:
        digest = hashlib.blake2b(ns + b"\x1f" + f.encode(), digest_size=8, key=key).digest()
        h = int.from_bytes(digest, "little")
        acc[(h >> 1) % dim] += 1.0 if h % 2 == 0 else -1.0
    norm = math.sqrt(sum(a * a for a in acc))
    return [a / norm for a in acc] if norm else acc


class TestHashingEncoder:
    def test_unit_norm_for_nondegenerate_text(self):
        enc = HashingEncoder(dim=64, seed=1)
        for text in ("IBM", "a longer sentence about things", "xy"):
            assert abs(np.linalg.norm(enc.encode(text)) - 1.0) < 1e-9

    def test_empty_text_is_zero(self):
        enc = HashingEncoder(dim=16, seed=0)
        assert np.all(enc.encode("") == 0.0)

    def test_ibm_matches_independent_oracle(self):
        enc = HashingEncoder(dim=8, seed=42)
        got = enc.encode("IBM")
        expected = hashing_oracle("IBM", 8, 42)
        # frozen from the oracle: one 3-gram and one word land in buckets 4/5
        h = 1.0 / math.sqrt(2.0)
        assert expected == [0.0, 0.0, 0.0, 0.0, -h, h, 0.0, 0.0]
        np.testing.assert_array_equal(got, expected)

    def test_oracle_agreement_on_longer_texts(self):
        enc = HashingEncoder(dim=32, seed=7)
        for text in ("200 Public Square", "HP Inc. reported", "Big Blue"):
            np.testing.assert_allclose(enc.encode(text), hashing_oracle(text, 32, 7), atol=1e-15)

    def test_deterministic_across_processes(self):
        enc = HashingEncoder(dim=32, seed=5)
        here = enc.encode("Cleveland, Ohio 44114").tobytes().hex()
        code = (
            "from tablelink.vectorize import HashingEncoder;"
            "print(HashingEncoder(dim=32, seed=5).encode('Cleveland, Ohio 44114')"
            ".tobytes().hex())"
        )
        other = subprocess.run(
            [sys.executable, "-c", code], capture_output=True, text=True, check=True
        ).stdout.strip()
        assert other == here

    def test_seed_changes_output(self):
        a = HashingEncoder(dim=32, seed=0).encode("IBM")
        b = HashingEncoder(dim=32, seed=1).encode("IBM")
        assert not np.array_equal(a, b)


@pytest.fixture
def numeric_schema():
    return RelationSchema(name="R", attributes=(("x", "numeric"),))


@pytest.fixture
def mixed_schema():
    return RelationSchema(
        name="R",
        attributes=(("desc", "text"), ("x", "numeric"), ("kind", "categorical")),
        foreign_keys=(("parent", "R"),),
    )


def population_std(values):
    mean = sum(values) / len(values)
    return math.sqrt(sum((v - mean) ** 2 for v in values) / len(values))


class TestFitVectorizer:
    def test_numeric_stats(self, numeric_schema):
        records = [make_record(numeric_schema, f"k{i}", x=float(v)) for i, v in enumerate((1, 2, 3))]
        model = fit_vectorizer(records, numeric_schema, HashingEncoder(dim=8, seed=0))
        mean, std = model.numeric_stats["x"]
        assert mean == pytest.approx(2.0, abs=1e-12)
        assert std == pytest.approx(population_std([1, 2, 3]), abs=1e-12)
        assert std == pytest.approx(0.81650, abs=1e-5)

    def test_categorical_vocab_has_unk(self):
        schema = RelationSchema(name="R", attributes=(("c", "categorical"),))
        records = [make_record(schema, f"k{i}", c=v) for i, v in enumerate("ABC")]
        model = fit_vectorizer(records, schema, HashingEncoder(dim=8, seed=0))
        assert len(model.vocabularies["c"]) == 4

    def test_all_null_numeric_fallback(self, numeric_schema):
        records = [make_record(numeric_schema, f"k{i}") for i in range(3)]
        model = fit_vectorizer(records, numeric_schema, HashingEncoder(dim=8, seed=0))
        assert model.numeric_stats["x"] == (0.0, 1.0)

    def test_zero_variance_fallback(self, numeric_schema):
        records = [make_record(numeric_schema, f"k{i}", x=7.0) for i in range(3)]
        model = fit_vectorizer(records, numeric_schema, HashingEncoder(dim=8, seed=0))
        assert model.numeric_stats["x"] == (7.0, 1.0)

    def test_empty_tuple_set_rejected(self, numeric_schema):
        with pytest.raises(VectorizeError, match="empty"):
            fit_vectorizer([], numeric_schema, HashingEncoder(dim=8, seed=0))

    def test_wrong_relation_rejected(self, numeric_schema):
        alien = TupleRecord(relation="Other", key="k", entity="k", values={})
        with pytest.raises(VectorizeError, match="relation"):
            fit_vectorizer([alien], numeric_schema, HashingEncoder(dim=8, seed=0))


class TestVectorizeAttribute:
    def test_one_hot(self):
        schema = RelationSchema(name="R", attributes=(("c", "categorical"),))
        records = [make_record(schema, f"k{i}", c=v) for i, v in enumerate("ABC")]
        model = fit_vectorizer(records, schema, HashingEncoder(dim=8, seed=0))
        np.testing.assert_array_equal(vectorize_attribute(model, "c", "B"), [0, 1, 0, 0])
        np.testing.assert_array_equal(vectorize_attribute(model, "c", "ZZZ"), [0, 0, 0, 1])
        np.testing.assert_array_equal(vectorize_attribute(model, "c", None), [0, 0, 0, 0])

    def test_numeric_normalization(self, numeric_schema):
        records = [make_record(numeric_schema, f"k{i}", x=float(v)) for i, v in enumerate((1, 2, 3))]
        model = fit_vectorizer(records, numeric_schema, HashingEncoder(dim=8, seed=0))
        mean, std = model.numeric_stats["x"]
        oracle = (3.0 - mean) / std
        got = vectorize_attribute(model, "x", 3.0)
        assert got.shape == (1,)
        assert got[0] == pytest.approx(oracle, abs=1e-15)
        assert got[0] == pytest.approx(1.22474, abs=1e-5)

    def test_null_text_is_zero_with_presence_bit_zero(self, mixed_schema):
        records = [make_record(mixed_schema, "k", desc="words here", x=1.0, kind="a")]
        model = fit_vectorizer(records, mixed_schema, HashingEncoder(dim=8, seed=0))
        assert np.all(vectorize_attribute(model, "desc", None) == 0.0)
        rec = make_record(mixed_schema, "k2", x=1.0, kind="a")
        vec = vectorize_tuple(model, rec)
        layout = {(kind, name): (off, dim) for kind, name, off, dim in model.layout()}
        p_off, p_dim = layout[("presence", "")]
        presence = vec[p_off : p_off + p_dim]
        np.testing.assert_array_equal(presence, [0.0, 1.0, 1.0, 0.0])

    def test_normalized_mean_zero_var_one(self, numeric_schema):
        rng = np.random.default_rng(3)
        values = rng.normal(50.0, 12.0, size=200)
        records = [make_record(numeric_schema, f"k{i}", x=float(v)) for i, v in enumerate(values)]
        model = fit_vectorizer(records, numeric_schema, HashingEncoder(dim=8, seed=0))
        normalized = np.array([vectorize_attribute(model, "x", float(v))[0] for v in values])
        assert abs(normalized.mean()) < 1e-9
        assert abs(normalized.var() - 1.0) < 1e-6


class TestForeignKeys:
    def make_model(self, records, schema):
        return fit_vectorizer(records, schema, HashingEncoder(dim=8, seed=0))

    def test_sum_of_depth_zero_vectors(self):
        schema = RelationSchema(
            name="R", attributes=(("a", "numeric"), ("b", "numeric")),
            foreign_keys=(("ref", "R"),),
        )
        t1 = make_record(schema, "t1", a=1.0)
        t2 = make_record(schema, "t2", b=1.0)
        model = self.make_model([t1, t2], schema)
        # stats over a single non-NULL value each: mean fallback keeps std 1
        lookup = {"t1": t1, "t2": t2}
        got = embed_foreign_key(model, ["t1", "t2"], lookup)
        expected = vectorize_tuple(model, t1, depth=0) + vectorize_tuple(model, t2, depth=0)
        np.testing.assert_array_equal(got, expected)

    def test_empty_fk_list_is_zero(self):
        schema = RelationSchema(
            name="R", attributes=(("a", "numeric"),), foreign_keys=(("ref", "R"),)
        )
        model = self.make_model([make_record(schema, "t", a=1.0)], schema)
        got = embed_foreign_key(model, [], {})
        assert got.shape == (model.fk_section_dim(),)
        assert np.all(got == 0.0)

    def test_dangling_target_counted(self):
        schema = RelationSchema(
            name="R", attributes=(("a", "numeric"),), foreign_keys=(("ref", "R"),)
        )
        model = self.make_model([make_record(schema, "t", a=1.0)], schema)
        got = embed_foreign_key(model, ["missing"], {})
        assert np.all(got == 0.0)
        assert model.diagnostics.dangling_fk_targets == 1

    def test_cycle_terminates_with_hand_unrolled_value(self):
        schema = RelationSchema(
            name="R", attributes=(("x", "numeric"),), foreign_keys=(("ref", "R"),)
        )
        a = TupleRecord(relation="R", key="a", entity="a", values={"x": 2.0},
                        fk_values={"ref": ["b"]})
        b = TupleRecord(relation="R", key="b", entity="b", values={"x": 3.0},
                        fk_values={"ref": ["a"]})
        model = self.make_model([a, b], schema)
        mean, std = model.numeric_stats["x"]
        assert (mean, std) == (2.5, 0.5)
        # depth-0 contribution of b omits b's own fk section:
        # [normalized x, presence(x), presence(ref)]
        oracle_b0 = [(3.0 - 2.5) / 0.5, 1.0, 1.0]
        got = vectorize_tuple(model, a, tuple_lookup={"a": a, "b": b})
        oracle = [(2.0 - 2.5) / 0.5] + oracle_b0 + [1.0, 1.0]
        np.testing.assert_array_equal(got, oracle)

    def test_linearity_in_target_multiset(self):
        schema = RelationSchema(
            name="R", attributes=(("x", "numeric"),), foreign_keys=(("ref", "R"),)
        )
        rng = np.random.default_rng(0)
        records = {
            f"t{i}": make_record(schema, f"t{i}", x=float(rng.normal())) for i in range(6)
        }
        model = self.make_model(list(records.values()), schema)
        l1 = ["t0", "t1", "t2"]
        l2 = ["t2", "t3", "t4", "t5"]
        combined = embed_foreign_key(model, l1 + l2, records)
        separate = embed_foreign_key(model, l1, records) + embed_foreign_key(model, l2, records)
        np.testing.assert_allclose(combined, separate, rtol=0, atol=1e-9)


class TestVectorizeTuple:
    def test_output_dim_arithmetic(self, mixed_schema):
        records = [
            make_record(mixed_schema, f"k{i}", desc=f"text {i}", x=float(i), kind=k)
            for i, k in enumerate("abc")
        ]
        model = fit_vectorizer(records, mixed_schema, HashingEncoder(dim=16, seed=0))
        # sections: text 16, numeric 1, categorical 4 (3 values + UNK),
        # fk D = base dim of the target (16 + 1 + 4 + 4 presence), presence 4
        d = model.fk_section_dim()
        assert d == 16 + 1 + 4 + 4
        assert model.dim() == 16 + 1 + 4 + d + 4
        vec = vectorize_tuple(model, records[0], tuple_lookup={})
        assert vec.shape == (model.dim(),)

    def test_determinism(self, mixed_schema):
        records = [make_record(mixed_schema, "k", desc="same text", x=2.0, kind="a")]
        model = fit_vectorizer(records, mixed_schema, HashingEncoder(dim=16, seed=0))
        v1 = vectorize_tuple(model, records[0], tuple_lookup={})
        v2 = vectorize_tuple(model, records[0], tuple_lookup={})
        assert v1.tobytes() == v2.tobytes()

    def test_all_null_tuple_is_zero(self, mixed_schema):
        records = [make_record(mixed_schema, "k", desc="text", x=1.0, kind="a")]
        model = fit_vectorizer(records, mixed_schema, HashingEncoder(dim=16, seed=0))
        vec = vectorize_tuple(model, make_record(mixed_schema, "empty"), tuple_lookup={})
        assert np.all(vec == 0.0)

    def test_dim_invariant_across_tuples(self, mixed_schema):
        records = [
            make_record(mixed_schema, "k1", desc="one two three", x=5.0, kind="a"),
            make_record(mixed_schema, "k2"),
            make_record(mixed_schema, "k3", kind="never seen before"),
        ]
        model = fit_vectorizer(records, mixed_schema, HashingEncoder(dim=16, seed=0))
        dims = {vectorize_tuple(model, r, tuple_lookup={}).shape for r in records}
        assert dims == {(model.dim(),)}


class TestVectorizeMention:
    def test_halves(self):
        enc = HashingEncoder(dim=32, seed=0)
        m1 = TextMention(id="1", span=(0, 3), mention_text="IBM",
                         sentence_text="IBM was founded long ago.")
        m2 = TextMention(id="2", span=(0, 3), mention_text="IBM",
                         sentence_text="Analysts wrote about IBM yesterday.")
        v1, v2 = vectorize_mention(enc, m1), vectorize_mention(enc, m2)
        assert v1.shape == (64,)
        np.testing.assert_array_equal(v1[:32], enc.encode("IBM"))
        np.testing.assert_array_equal(v1[:32], v2[:32])
        assert not np.array_equal(v1[32:], v2[32:])


class TestModelSerialization:
    def test_json_roundtrip_preserves_vectors(self, mixed_schema, tmp_path):
        records = [
            make_record(mixed_schema, f"k{i}", desc=f"words {i}", x=float(i), kind=k)
            for i, k in enumerate("aab")
        ]
        model = fit_vectorizer(records, mixed_schema, HashingEncoder(dim=16, seed=3))
        path = tmp_path / "vectorizer.json"
        model.save(path)
        again = VectorizerModel.load(path)
        for rec in records:
            np.testing.assert_array_equal(
                vectorize_tuple(model, rec, tuple_lookup={}),
                vectorize_tuple(again, rec, tuple_lookup={}),
            )

    def test_version_mismatch_rejected(self, mixed_schema, tmp_path):
        records = [make_record(mixed_schema, "k", desc="w", x=1.0, kind="a")]
        model = fit_vectorizer(records, mixed_schema, HashingEncoder(dim=8, seed=0))
        path = tmp_path / "vectorizer.json"
        model.save(path)
        blob = path.read_text().replace('"format_version": 1', '"format_version": 9')
        path.write_text(blob)
        with pytest.raises(VectorizeError, match="version"):
            VectorizerModel.load(path)


class TestVectorFiles:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        items = {f"key{i}": rng.normal(size=12) for i in range(20)}
        path = tmp_path / "x.vec"
        write_vector_file(path, items)
        back = read_vector_file(path)
        assert sorted(back) == sorted(items)
        for k, v in items.items():
            np.testing.assert_array_equal(back[k], v)

    def test_truncated_file_raises(self, tmp_path):
        path = tmp_path / "x.vec"
        write_vector_file(path, {"a": np.ones(4), "b": np.zeros(4)})
        data = path.read_bytes()
        path.write_bytes(data[:-1])
        with pytest.raises(VectorizeError, match="truncated|corrupt"):
            read_vector_file(path)

    def test_bad_magic_raises(self, tmp_path):
        path = tmp_path / "x.vec"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(VectorizeError, match="magic"):
            read_vector_file(path)

    def test_expected_dim_checked(self, tmp_path):
        path = tmp_path / "x.vec"
        write_vector_file(path, {"a": np.ones(4)})
        with pytest.raises(VectorizeError, match="dim"):
            read_vector_file(path, expected_dim=5)
