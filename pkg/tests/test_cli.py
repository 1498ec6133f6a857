"""End-to-end subcommand runs through main()."""
import json

import pytest

from src.cli.commands.training import encoder_config
from src.cli.context import resolve_audio
from src.core.config import get_settings
from src.main import main
from src.services.corpus import Split, load_manifest
from src.services.model import checkpoint_bytes, init_params

SOURCES = "hin,kan,mar,tam,tel"


def run(capsys, *argv):
    """Returns (exit code, stdout, last stderr line); log records also go to stderr."""
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    lines = err.strip().splitlines()
    return code, out, lines[-1] if lines else ""


class TestTables:
    def test_rank_telugu(self, capsys, indic_tts_dir):
        code, out, _ = run(
            capsys, "rank", "--table", f"speech-sc={indic_tts_dir / 'speech-sc.csv'}",
            "--target", "tel", "--candidates", SOURCES,
        )
        assert code == 0
        assert out.splitlines() == ["tel,0.0", "kan,0.42", "hin,0.43", "mar,0.55", "tam,0.58"]

    def test_correlate_prints_report(self, capsys, indic_tts_dir, tmp_path):
        code, out, _ = run(
            capsys, "correlate",
            "--table", f"speech-sc={indic_tts_dir / 'speech-sc.csv'}",
            "--table", f"phonological={indic_tts_dir / 'phonological.csv'}",
            "--scores", indic_tts_dir / "mos.csv", "--task", "MOS", "--anchor", "target",
            "--out", tmp_path / "report",
        )
        assert code == 0
        lines = out.splitlines()
        assert lines[0] == "measure,anchor,anchor_lang,n,rho"
        assert "speech-sc,fix_target,tel,5,-1.0" in lines
        assert len(lines) == 5
        assert (tmp_path / "report" / "report.json").exists()
        rankings = json.loads((tmp_path / "report" / "report.json").read_text())["rankings"]
        assert sorted(rankings) == [
            "phonological/hin", "phonological/tel", "speech-sc/hin", "speech-sc/tel"
        ]
        assert [(r["language"], r["distance"]) for r in rankings["speech-sc/tel"]] == [
            ("tel", 0.0), ("kan", 0.42), ("hin", 0.43), ("mar", 0.55), ("tam", 0.58)
        ]

    def test_correlate_explicit_anchor_without_data(self, capsys, indic_tts_dir):
        code, _, err = run(
            capsys, "correlate", "--table", f"speech-sc={indic_tts_dir / 'speech-sc.csv'}",
            "--scores", indic_tts_dir / "mos.csv", "--task", "MOS", "--anchor", "target",
            "--anchor-lang", "kan",
        )
        assert code == 9
        assert err.startswith("error: insufficient_data:")

    def test_ensemble_best_of(self, capsys, indic_tts_dir, tmp_path):
        out_csv = tmp_path / "ens.csv"
        code, _, _ = run(
            capsys, "ensemble",
            *[
                arg
                for name in ("speech-sc", "speech-ce", "phonological", "featural")
                for arg in ("--table", f"{name}={indic_tts_dir / (name + '.csv')}")
            ],
            "--best-of", "--scores", indic_tts_dir / "mos.csv", "--task", "MOS",
            "--target", "hin", "--candidates", SOURCES, "--out", out_csv,
        )
        assert code == 0
        header = out_csv.read_text().splitlines()[0]
        assert header == "# constituents: phonological,speech-sc"

    def test_distance_passes_typological_table_through(self, capsys, indic_tts_dir, tmp_path):
        out_csv = tmp_path / "inv.csv"
        code, _, _ = run(
            capsys, "distance", "--kind", "inventory", "--table", indic_tts_dir / "inventory.csv",
            "--languages", "hin,kan", "--out", out_csv,
        )
        assert code == 0
        assert out_csv.read_text().splitlines() == [
            "lang_a,lang_b,distance",
            "hin,hin,0.0",
            "hin,kan,0.44",
            "kan,kan,0.0",
        ]


class TestErrors:
    def test_unknown_flag(self, capsys):
        code, _, err = run(capsys, "rank", "--bogus")
        assert code == 2
        assert err.startswith("error: usage:")

    def test_missing_table_file(self, capsys, tmp_path):
        code, _, err = run(
            capsys, "rank", "--table", f"speech-sc={tmp_path / 'none.csv'}", "--target", "tel"
        )
        assert code == 12
        assert err.startswith("error: io:")

    def test_bad_table_spec(self, capsys, tmp_path):
        code, _, _ = run(capsys, "rank", "--table", "nonsense", "--target", "tel")
        assert code == 2

    def test_train_requires_seed(self, capsys, tmp_path):
        code, _, err = run(
            capsys, "train", "--manifest", tmp_path / "m.jsonl", "--features", tmp_path,
            "--loss", "ce", "--out", tmp_path / "out",
        )
        assert code == 2
        assert "--seed" in err

    @pytest.mark.parametrize("loss", ["CE", "SupCon", "Multimodal"])
    def test_loss_takes_lowercase_names(self, capsys, tmp_path, loss):
        code, _, err = run(
            capsys, "train", "--manifest", tmp_path / "m.jsonl", "--features", tmp_path,
            "--loss", loss, "--seed", 0, "--out", tmp_path / "out",
        )
        assert code == 2
        assert "ce" in err and "supcon" in err

    def test_anchor_takes_source_or_target(self, capsys, indic_tts_dir):
        code, _, err = run(
            capsys, "correlate", "--table", f"speech-sc={indic_tts_dir / 'speech-sc.csv'}",
            "--scores", indic_tts_dir / "mos.csv", "--task", "MOS", "--anchor", "fix_target",
        )
        assert code == 2
        assert "source" in err and "target" in err

    def test_bad_config(self, capsys, tmp_path, indic_tts_dir):
        config = tmp_path / "bad.yaml"
        config.write_text("EPOCHS: [not, a, number]\n")
        code, _, err = run(
            capsys, "--config", config, "rank",
            "--table", f"speech-sc={indic_tts_dir / 'speech-sc.csv'}", "--target", "tel",
        )
        assert code == 3
        assert err.startswith("error: config:")


class TestPipeline:
    @pytest.fixture
    def featurized(self, capsys, tone_corpus, settings_file, tmp_path):
        manifest = tone_corpus(["aaa", "bbb", "ccc"], {Split.TRAIN: 3, Split.TEST: 2})
        features = tmp_path / "features"
        code, _, _ = run(
            capsys, "--config", settings_file, "featurize", "--manifest", manifest,
            "--out", features, "--workers", 1,
        )
        assert code == 0
        return manifest, features

    def _train(self, capsys, settings_file, manifest, features, out, *extra):
        code, _, _ = run(
            capsys, "--config", settings_file, "train", "--manifest", manifest,
            "--features", features, "--out", out, *extra,
        )
        assert code == 0
        return (out / "model.ckpt").read_bytes()

    def test_featurize_writes_one_file_per_utterance(self, featurized):
        manifest, features = featurized
        assert len(list(features.glob("*.mel"))) == len(load_manifest(manifest)) == 15

    def test_zero_epochs_is_initialization(self, capsys, featurized, settings_file, tmp_path):
        manifest, features = featurized
        data = self._train(
            capsys, settings_file, manifest, features, tmp_path / "m0",
            "--loss", "ce", "--epochs", 0, "--seed", 3,
        )
        encoder = encoder_config(get_settings(str(settings_file)))
        assert data == checkpoint_bytes(init_params(encoder, ["aaa", "bbb", "ccc"], seed=3))

    def test_train_embed_cluster_deterministic(self, capsys, featurized, settings_file, tmp_path):
        manifest, features = featurized
        first = self._train(
            capsys, settings_file, manifest, features, tmp_path / "a",
            "--loss", "ce", "--epochs", 2, "--seed", 1,
        )
        second = self._train(
            capsys, settings_file, manifest, features, tmp_path / "b",
            "--loss", "ce", "--epochs", 2, "--seed", 1,
        )
        assert first == second
        trace = (tmp_path / "a" / "loss_trace.csv").read_text().splitlines()
        assert trace[0] == "epoch,loss"
        assert len(trace) == 3

        stores = []
        for name in ("a", "b"):
            store = tmp_path / name / "store.json"
            code, _, _ = run(
                capsys, "--config", settings_file, "embed",
                "--checkpoint", tmp_path / name / "model.ckpt", "--manifest", manifest,
                "--features", features, "--split", "train", "--out", store,
            )
            assert code == 0
            stores.append(store.read_bytes())
        assert stores[0] == stores[1]
        assert sorted(json.loads(stores[0])["embeddings"]) == ["aaa", "bbb", "ccc"]

        clusters = []
        metrics = tmp_path / "metrics.prom"
        for name in ("a", "b"):
            code, _, _ = run(
                capsys, "--config", settings_file, "--metrics-file", metrics, "cluster",
                "--store", tmp_path / "a" / "store.json", "--k", 2, "--seed", 0,
                "--out", tmp_path / name / "clusters",
            )
            assert code == 0
            clusters.append((tmp_path / name / "clusters" / "clusters.csv").read_bytes())
        assert clusters[0] == clusters[1]
        assert "langsim_kmeans_inertia" in metrics.read_text()

        table = tmp_path / "speech-ce.csv"
        code, _, _ = run(
            capsys, "--config", settings_file, "distance", "--kind", "speech-ce",
            "--store", tmp_path / "a" / "store.json", "--checkpoint", tmp_path / "a" / "model.ckpt",
            "--out", table,
        )
        assert code == 0
        assert len(table.read_text().splitlines()) == 1 + 6

    def test_store_from_other_model_rejected(self, capsys, featurized, settings_file, tmp_path):
        manifest, features = featurized
        for name, seed in (("a", 1), ("b", 2)):
            self._train(
                capsys, settings_file, manifest, features, tmp_path / name,
                "--loss", "ce", "--epochs", 0, "--seed", seed,
            )
        store = tmp_path / "store.json"
        run(
            capsys, "--config", settings_file, "embed",
            "--checkpoint", tmp_path / "a" / "model.ckpt",
            "--manifest", manifest, "--features", features, "--out", store,
        )
        code, _, err = run(
            capsys, "--config", settings_file, "distance", "--kind", "speech-ce",
            "--store", store, "--checkpoint", tmp_path / "b" / "model.ckpt",
            "--out", tmp_path / "d.csv",
        )
        assert code == 5
        assert err.startswith("error: validation:")

    def test_zero_shot_family_eval(self, capsys, featurized, settings_file, tmp_path):
        manifest, features = featurized
        zero_shot = tmp_path / "zero_shot.jsonl"
        code, _, _ = run(
            capsys, "split", "--manifest", manifest, "--out", zero_shot,
            "--seed", 0, "--fractions", 0.34, 0.33, 0.33,
        )
        assert code == 0
        split = load_manifest(zero_shot, zero_shot=True)
        assert {u.sample_count for u in split.records} == {8000}
        assert all(resolve_audio(zero_shot, u.audio_path).exists() for u in split.records)
        self._train(
            capsys, settings_file, zero_shot, features, tmp_path / "zs",
            "--loss", "ce", "--epochs", 1, "--seed", 0,
        )
        registry = tmp_path / "registry.csv"
        registry.write_text(
            "lang,family,lat,lon\naaa,One,10.0,20.0\nbbb,One,11.0,21.0\nccc,One,12.0,22.0\n"
        )
        code, out, _ = run(
            capsys, "family-eval", "--checkpoint", tmp_path / "zs" / "model.ckpt",
            "--manifest", zero_shot, "--features", features, "--registry", registry,
            "--out", tmp_path / "zs",
        )
        assert code == 0
        assert out.splitlines() == ["val,1.0", "test,1.0"]
        assert json.loads((tmp_path / "zs" / "family_eval.json").read_text())["n_families"] == 1
