"""Language embeddings, the embedding store and k-means."""
import numpy as np
import pytest

from src.core.errors import DataValidationError, LanguageLookupError, ParseError
from src.services.corpus import Split
from src.services.embeddings import (
    EmbeddingStore,
    LanguageEmbedding,
    build_store,
    embed_language,
    kmeans,
    load_store,
    save_store,
)
from src.services.features import MelSpectrogram
from src.services.model import encode_speech, init_params


def make_store(vectors, model_id="m1"):
    vectors = {iso: np.asarray(v, dtype=np.float64) for iso, v in vectors.items()}
    dim = len(next(iter(vectors.values())))
    return EmbeddingStore(
        {iso: LanguageEmbedding(iso, v, 1, model_id) for iso, v in vectors.items()}, dim, model_id
    )


@pytest.fixture
def params(small_encoder):
    return init_params(small_encoder, ("aaa", "bbb"), seed=0)


@pytest.fixture
def specs():
    rng = np.random.default_rng(3)
    return [
        MelSpectrogram(data=rng.standard_normal((80, 20 + i)), source_id=f"u{i}") for i in range(4)
    ]


class TestEmbedLanguage:
    def test_single_sample_is_encoder_output(self, params, specs):
        emb = embed_language(params, specs[:1], "aaa")
        assert np.allclose(emb.vector, encode_speech(params, specs[0]))
        assert emb.n_samples == 1
        assert emb.model_id == params.checksum()

    def test_mean_of_two(self, params, specs):
        emb = embed_language(params, specs[:2], "aaa")
        expected = (encode_speech(params, specs[0]) + encode_speech(params, specs[1])) / 2
        assert np.allclose(emb.vector, expected)
        assert np.linalg.norm(emb.vector) <= 1.0 + 1e-6

    def test_order_independent(self, params, specs):
        a = embed_language(params, specs, "aaa")
        b = embed_language(params, list(reversed(specs)), "aaa")
        assert np.array_equal(a.vector, b.vector)

    def test_union_is_weighted_mean(self, params, specs):
        first = embed_language(params, specs[:1], "aaa")
        rest = embed_language(params, specs[1:], "aaa")
        union = embed_language(params, specs, "aaa")
        expected = (first.n_samples * first.vector + rest.n_samples * rest.vector) / 4
        assert union.n_samples == 4
        assert np.allclose(union.vector, expected, atol=1e-12)

    def test_empty(self, params):
        with pytest.raises(DataValidationError):
            embed_language(params, [], "aaa")

    def test_build_store_caps_samples(self, params, tone_features):
        manifest, features = tone_features(["aaa", "bbb"], {Split.TRAIN: 3, Split.TEST: 2})
        store = build_store(params, manifest, features, split=Split.TRAIN, max_samples=2)
        assert store.languages() == ["aaa", "bbb"]
        assert store.embeddings["aaa"].n_samples == 2
        assert store.embed_dim == 16

    def test_build_store_missing_features(self, params, tone_features):
        manifest, features = tone_features(["aaa"], {Split.TRAIN: 2})
        del features["aaa_train_001"]
        with pytest.raises(DataValidationError):
            build_store(params, manifest, features)


class TestStore:
    def test_lookup(self):
        store = make_store({"hin": [1.0, 0.0], "tel": [0.0, 1.0]})
        assert store.vector("tel").tolist() == [0.0, 1.0]
        with pytest.raises(LanguageLookupError):
            store.vector("kan")

    def test_mixed_dimensions_rejected(self):
        with pytest.raises(DataValidationError):
            EmbeddingStore(
                {
                    "hin": LanguageEmbedding("hin", np.ones(2), 1, "m"),
                    "tel": LanguageEmbedding("tel", np.ones(3), 1, "m"),
                },
                2,
                "m",
            )

    def test_mixed_models_rejected(self):
        with pytest.raises(DataValidationError):
            EmbeddingStore({"hin": LanguageEmbedding("hin", np.ones(2), 1, "other")}, 2, "m")

    def test_round_trip_is_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        store = make_store({iso: rng.standard_normal(5) for iso in ("hin", "kan", "tel")})
        save_store(store, tmp_path / "store.json")
        loaded = load_store(tmp_path / "store.json")
        assert loaded.model_id == store.model_id
        for iso in store.languages():
            assert np.array_equal(loaded.vector(iso), store.vector(iso))

    def test_malformed(self, tmp_path):
        path = tmp_path / "store.json"
        path.write_text("{oops")
        with pytest.raises(ParseError):
            load_store(path)


class TestKMeans:
    def test_k_equals_n(self):
        store = make_store({"aaa": [0.0, 0.0], "bbb": [5.0, 1.0], "ccc": [-3.0, 2.0]})
        result = kmeans(store, k=3, seed=0)
        assert sorted(result.assignments.values()) == [0, 1, 2]
        assert result.inertia == pytest.approx(0.0)

    def test_k_one_centroid_is_mean(self):
        vectors = {"aaa": [0.0, 0.0], "bbb": [2.0, 0.0], "ccc": [1.0, 3.0]}
        result = kmeans(make_store(vectors), k=1, seed=0)
        assert np.allclose(result.centroids[0], [1.0, 1.0])
        assert set(result.assignments.values()) == {0}

    def test_separated_blobs(self):
        rng = np.random.default_rng(4)
        vectors = {}
        for blob, center in enumerate([(0.0, 0.0), (10.0, 10.0), (-10.0, 10.0)]):
            for i in range(4):
                noise = 0.1 * rng.standard_normal(2)
                vectors[f"{'abc'[blob]}{'abcd'[i]}x"] = np.array(center) + noise
        result = kmeans(make_store(vectors), k=3, seed=1)
        for prefix in "abc":
            labels = {c for iso, c in result.assignments.items() if iso.startswith(prefix)}
            assert len(labels) == 1
        assert len(set(result.assignments.values())) == 3

    def test_inertia_non_increasing_and_deterministic(self):
        rng = np.random.default_rng(8)
        vectors = {f"{a}{b}z": rng.standard_normal(3) for a in "abcd" for b in "abcd"}
        store = make_store(vectors)
        result = kmeans(store, k=4, seed=2)
        trace = result.inertia_trace
        assert all(later <= earlier + 1e-12 for earlier, later in zip(trace, trace[1:]))
        assert kmeans(store, k=4, seed=2).assignments == result.assignments

    @pytest.mark.parametrize("k", [0, 4])
    def test_bad_k(self, k):
        store = make_store({"aaa": [0.0], "bbb": [1.0], "ccc": [2.0]})
        with pytest.raises(DataValidationError):
            kmeans(store, k=k)
