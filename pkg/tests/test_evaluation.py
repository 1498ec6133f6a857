"""Spearman correlation, report files, family classification and CER."""
import json
import math

import numpy as np
import pytest

from src.core.errors import (
    DataValidationError,
    InsufficientDataError,
    UndefinedCorrelationError,
)
from src.services.corpus import (
    DistanceTable,
    LanguageRegistry,
    Polarity,
    RegistryEntry,
    ScoreTable,
    Split,
    Task,
    load_distance_table,
    load_score_table,
)
from src.services.evaluation import (
    Anchor,
    best_measure,
    cer,
    correlate,
    emit_report,
    eval_family_classification,
    render_report_csv,
    spearman,
    summarize,
)
from src.services.model import Loss, TrainConfig, classify, init_params, train

ACOUSTIC = ("speech-sc", "multimodal", "speech-ce")
LINGUISTIC = ("phonological", "inventory", "featural")


def average_ranks(values):
    ranks = []
    for v in values:
        below = sum(1 for w in values if w < v)
        equal = sum(1 for w in values if w == v)
        ranks.append(below + (equal + 1) / 2)
    return ranks


def spearman_by_hand(xs, ys):
    rx, ry = average_ranks(xs), average_ranks(ys)
    mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    vx = sum((a - mx) ** 2 for a in rx)
    vy = sum((b - my) ** 2 for b in ry)
    return cov / math.sqrt(vx * vy)


@pytest.fixture
def mos(indic_tts_dir):
    return load_score_table(indic_tts_dir / "mos.csv", Task.MOS)


def table(indic_tts_dir, name):
    return load_distance_table(indic_tts_dir / f"{name}.csv", name)


class TestSpearman:
    def test_perfect(self):
        assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == 1.0
        assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0

    def test_ties(self):
        xs, ys = [1, 2, 2, 3], [1, 2, 3, 4]
        assert spearman(xs, ys) == pytest.approx(spearman_by_hand(xs, ys))

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_hand_computation(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 12))
        xs = rng.integers(0, 5, n).astype(float).tolist()
        ys = rng.normal(size=n).tolist()
        if len(set(xs)) == 1:
            xs[0] += 1.0
        assert spearman(xs, ys) == pytest.approx(spearman_by_hand(xs, ys), abs=1e-12)

    def test_short_inputs_match_hand_computation(self):
        rng = np.random.default_rng(77)
        checked = 0
        while checked < 200:
            n = int(rng.integers(3, 7))
            if checked % 2:
                xs, ys = rng.normal(size=n).tolist(), rng.normal(size=n).tolist()
            else:
                xs = rng.integers(0, 3, n).astype(float).tolist()
                ys = rng.integers(0, 3, n).astype(float).tolist()
            if len(set(xs)) == 1 or len(set(ys)) == 1:
                continue
            assert spearman(xs, ys) == pytest.approx(spearman_by_hand(xs, ys), abs=1e-12)
            if checked % 2:
                flipped = spearman(xs, [-y for y in ys])
                assert flipped == pytest.approx(-spearman(xs, ys), abs=1e-12)
            checked += 1

    def test_monotone_invariance_and_symmetry(self):
        rng = np.random.default_rng(1)
        xs, ys = rng.normal(size=8), rng.normal(size=8)
        rho = spearman(xs, ys)
        assert spearman(np.exp(xs), ys) == pytest.approx(rho)
        assert spearman(ys, xs) == pytest.approx(rho)
        assert spearman(-xs, ys) == pytest.approx(-rho)

    def test_too_few(self):
        with pytest.raises(InsufficientDataError):
            spearman([1.0], [2.0])

    def test_constant_side(self):
        with pytest.raises(UndefinedCorrelationError):
            spearman([1, 1, 1], [1, 2, 3])

    def test_length_mismatch(self):
        with pytest.raises(DataValidationError):
            spearman([1, 2, 3], [1, 2])


class TestCorrelate:
    @pytest.mark.parametrize("name", ACOUSTIC)
    def test_hindi_acoustic_columns(self, indic_tts_dir, mos, name):
        report = correlate(table(indic_tts_dir, name), mos, Anchor.FIX_TARGET, "hin")
        assert report.n == 5
        assert report.rho == pytest.approx(-8.5 / math.sqrt(95), abs=1e-4)
        assert report.rho == pytest.approx(-0.8721, abs=1e-4)

    def test_telugu_speech_sc(self, indic_tts_dir, mos):
        report = correlate(table(indic_tts_dir, "speech-sc"), mos, Anchor.FIX_TARGET, "tel")
        assert report.rho == -1.0

    def test_telugu_multimodal_and_ce(self, indic_tts_dir, mos):
        assert correlate(table(indic_tts_dir, "multimodal"), mos, "fix_target", "tel").rho == -1.0
        ce = correlate(table(indic_tts_dir, "speech-ce"), mos, "fix_target", "tel")
        assert ce.rho == pytest.approx(-9.5 / math.sqrt(95), abs=1e-9)

    def test_pairs_carry_ranks(self, indic_tts_dir, mos):
        report = correlate(table(indic_tts_dir, "speech-sc"), mos, Anchor.FIX_TARGET, "hin")
        by_language = {p.language: p for p in report.pairs}
        assert by_language["hin"].distance == 0.0
        assert by_language["hin"].score_rank == 5.0
        assert by_language["kan"].score_rank == by_language["mar"].score_rank == 3.5
        assert "higher MOS is better" in report.note

    def test_fix_source(self):
        scores = ScoreTable(
            Task.CER, {("hin", "kan"): 0.2, ("hin", "tel"): 0.5, ("hin", "mar"): 0.3}
        )
        distances = DistanceTable(
            "phonological", {("hin", "kan"): 0.1, ("hin", "tel"): 0.7, ("hin", "mar"): 0.4}
        )
        report = correlate(distances, scores, Anchor.FIX_SOURCE, "hin")
        assert report.rho == 1.0
        assert "lower CER is better" in report.note

    def test_insufficient_pairs(self, indic_tts_dir, mos):
        with pytest.raises(InsufficientDataError):
            correlate(table(indic_tts_dir, "speech-sc"), mos, Anchor.FIX_TARGET, "kan")

    def test_tied_typological_column(self, indic_tts_dir, mos):
        report = correlate(table(indic_tts_dir, "featural"), mos, Anchor.FIX_TARGET, "tel")
        assert -1.0 <= report.rho <= 1.0


class TestSummaries:
    @pytest.fixture
    def reports(self, indic_tts_dir, mos):
        return [
            correlate(table(indic_tts_dir, name), mos, Anchor.FIX_TARGET, lang)
            for name in ACOUSTIC + LINGUISTIC
            for lang in ("hin", "tel")
        ]

    def test_summarize(self, reports):
        means = summarize(reports)
        assert set(means) == set(ACOUSTIC + LINGUISTIC)
        assert means["speech-sc"] == pytest.approx((-8.5 / math.sqrt(95) - 1.0) / 2)

    def test_best_acoustic_for_mos(self, reports):
        best = best_measure(reports, ACOUSTIC, Polarity.HIGHER_IS_BETTER)
        assert best in ("speech-sc", "multimodal")

    def test_acoustic_beats_linguistic(self, reports):
        means = summarize(reports)
        assert max(means[m] for m in ACOUSTIC) < min(means[m] for m in LINGUISTIC)

    def test_report_files(self, reports, tmp_path):
        csv_path, json_path = emit_report(reports, tmp_path / "a")
        emit_report(list(reversed(reports)), tmp_path / "b")
        assert csv_path.read_bytes() == (tmp_path / "b" / "report.csv").read_bytes()
        assert json_path.read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "measure,anchor,anchor_lang,n,rho"
        assert len(lines) == 1 + len(reports)
        payload = json.loads(json_path.read_text())
        assert set(payload["summary"]) == set(ACOUSTIC + LINGUISTIC)

    def test_report_carries_rankings(self, reports, tmp_path):
        rankings = {"speech-sc/tel": [("tel", 0.0), ("kan", 0.42)]}
        _, json_path = emit_report(reports, tmp_path, rankings)
        payload = json.loads(json_path.read_text())
        assert payload["rankings"] == {
            "speech-sc/tel": [
                {"language": "tel", "distance": 0.0},
                {"language": "kan", "distance": 0.42},
            ]
        }
        _, bare = emit_report(reports, tmp_path / "bare")
        assert "rankings" not in json.loads(bare.read_text())

    def test_csv_row(self, indic_tts_dir, mos):
        report = correlate(table(indic_tts_dir, "speech-sc"), mos, Anchor.FIX_TARGET, "tel")
        assert render_report_csv([report]).splitlines()[1] == "speech-sc,fix_target,tel,5,-1.0"


class TestFamilyClassification:
    def _registry(self, families):
        entries = {iso: RegistryEntry(fam, 0.0, 0.0) for iso, fam in families.items()}
        return LanguageRegistry(entries)

    def test_held_out_language_shares_family(self, trained_ce, tone_features):
        params, _, _ = trained_ce
        # eee sounds like aaa and belongs to aaa's family
        manifest, features = tone_features({"eee": "aaa"}, {Split.TEST: 8}, seed=21)
        registry = self._registry(
            {"aaa": "Alpha", "bbb": "Alpha", "ccc": "Gamma", "ddd": "Delta", "eee": "Alpha"}
        )
        result = eval_family_classification(params, manifest, features, registry)
        assert result.accuracy == {"test": 1.0}
        assert result.evaluated == {"test": 8}
        assert result.confusion == {"Alpha": {"Alpha": 8}}

    def test_confusion_tally(self, small_encoder, tone_features):
        # six languages in three families, one of each family held out
        train_manifest, train_features = tone_features(["aaa", "ccc", "ddd"], {Split.TRAIN: 20})
        config = TrainConfig(loss=Loss.CE, lr=1e-2, batch_size=16, epochs=20, seed=0)
        params = train(train_manifest, train_features, config, small_encoder)
        # fff is Beta but sounds like the Gamma language ddd
        manifest, features = tone_features(
            {"eee": "aaa", "fff": "ddd", "ggg": "ddd"}, {Split.TEST: 4}, seed=31
        )
        registry = self._registry(
            {
                "aaa": "Alpha",
                "ccc": "Beta",
                "ddd": "Gamma",
                "eee": "Alpha",
                "fff": "Beta",
                "ggg": "Gamma",
            }
        )
        result = eval_family_classification(params, manifest, features, registry)

        tally: dict[str, dict[str, int]] = {}
        for utt in manifest.utterances(Split.TEST):
            index, _ = classify(params, features[utt.id])
            row = tally.setdefault(registry.family(utt.language), {})
            predicted = registry.family(params.languages[index])
            row[predicted] = row.get(predicted, 0) + 1
        correct = sum(row.get(family, 0) for family, row in tally.items())

        assert result.confusion == tally
        assert result.evaluated == {"test": 12}
        assert result.accuracy == {"test": correct / 12}
        assert result.n_families == 3
        assert tally == {"Alpha": {"Alpha": 4}, "Beta": {"Gamma": 4}, "Gamma": {"Gamma": 4}}
        assert result.accuracy["test"] == pytest.approx(2 / 3)

    def test_single_family_always_correct(self, small_encoder, tone_features):
        params = init_params(small_encoder, ("aaa", "bbb"), seed=0)
        manifest, features = tone_features(["ccc", "ddd"], {Split.VAL: 2, Split.TEST: 3})
        registry = self._registry({iso: "One" for iso in ("aaa", "bbb", "ccc", "ddd")})
        result = eval_family_classification(params, manifest, features, registry)
        assert result.accuracy == {"val": 1.0, "test": 1.0}
        assert result.n_families == 1

    def test_disjoint_families_never_correct(self, small_encoder, tone_features):
        params = init_params(small_encoder, ("aaa", "bbb"), seed=0)
        manifest, features = tone_features(["ccc"], {Split.TEST: 3})
        registry = self._registry({"aaa": "A", "bbb": "B", "ccc": "C"})
        result = eval_family_classification(params, manifest, features, registry)
        assert result.accuracy == {"test": 0.0}

    def test_leaked_language_rejected(self, small_encoder, tone_features):
        params = init_params(small_encoder, ("aaa", "bbb"), seed=0)
        manifest, features = tone_features(["aaa"], {Split.TEST: 2})
        registry = self._registry({"aaa": "A", "bbb": "B"})
        with pytest.raises(DataValidationError):
            eval_family_classification(params, manifest, features, registry)

    def test_train_language_mismatch(self, small_encoder, tone_features):
        params = init_params(small_encoder, ("aaa", "bbb"), seed=0)
        manifest, features = tone_features(["ccc"], {Split.TEST: 2})
        registry = self._registry({"aaa": "A", "bbb": "B", "ccc": "C"})
        with pytest.raises(DataValidationError):
            eval_family_classification(params, manifest, features, registry, ["aaa", "ddd"])


class TestCer:
    def test_identical(self):
        assert cer("namaste", "namaste") == 0.0

    def test_one_substitution(self):
        assert cer("namasta", "namaste") == pytest.approx(1 / 7)

    def test_empty_hypothesis(self):
        assert cer("", "abc") == 1.0

    def test_edit_counts_obey_triangle_inequality(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            a, b, r = ("".join(rng.choice(list("abcd"), int(rng.integers(1, 8)))) for _ in range(3))
            assert cer(a, r) * len(r) <= cer(a, b) * len(b) + cer(b, r) * len(r) + 1e-9

    def test_empty_reference(self):
        with pytest.raises(DataValidationError):
            cer("abc", "")
