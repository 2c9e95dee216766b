import json

import numpy as np
import pytest

from specml import cli, data, net, pca
from specml.net import LayerDef, Network


def run(argv):
    return cli.main([str(a) for a in argv])


def synth_args(out, n=60, bands=5, hw=2, classes=4, rank=2, seed=3):
    return ["synth", "--out", out, "--n-samples", n, "--bands", bands,
            "--height", hw, "--width", hw, "--classes", classes,
            "--latent-rank", rank, "--noise-sigma", 0.02, "--seed", seed]


TRAIN_FAST = ["--encoder", "mlp-tiny", "--max-epochs", 3, "--batch-size", 16,
              "--initial-lr", 0.003, "--seed", 3]


class TestPipelineClosure:
    def test_full_chain(self, tmp_path, capsys):
        dataset = tmp_path / "set.msb1"
        assert run(synth_args(dataset)) == 0
        assert "empty labels" in capsys.readouterr().out

        pca_path = tmp_path / "model.pca1"
        assert run(["fit-pca", "--data", dataset, "--out", pca_path,
                    "--fraction", 0.4, "--k", 2, "--seed", 3]) == 0
        out = capsys.readouterr().out
        assert "cumulative explained ratio" in out

        projected = tmp_path / "projected.msb1"
        assert run(["transform", "--data", dataset, "--model", pca_path,
                    "--out", projected]) == 0
        loaded = data.load_sampleset(projected)
        assert loaded.bands == 2

        ckpt = tmp_path / "model.net1"
        assert run(["train", "--data", dataset, "--out", ckpt,
                    "--preprocessor", "pca", "--pca-model", pca_path,
                    *TRAIN_FAST]) == 0
        assert ckpt.exists()
        assert (tmp_path / "model.trainlog.json").exists()
        assert (tmp_path / "model.manifest").exists()

        report = tmp_path / "eval.txt"
        assert run(["eval", "--model", ckpt, "--data", dataset, "--pca",
                    pca_path, "--out", report, "--seed", 3]) == 0
        payload = json.loads((tmp_path / "eval.json").read_text())
        assert 0.0 <= payload["accuracy"] <= 1.0

        bench_out = tmp_path / "bench.txt"
        assert run(["bench", "--data", dataset, "--model", ckpt, "--pca",
                    pca_path, "--batch-size", 16, "--repeats", 2,
                    "--out", bench_out]) == 0
        bench_payload = json.loads((tmp_path / "bench.json").read_text())
        assert len(bench_payload["latencies"]) == 2   # pca-timed and forward-only
        sizes = bench_payload["sizes"]
        assert sizes["params_with_pca"] < sizes["params_without_pca"]

    def test_train_without_pca_and_bench_builds_counterpart(self, tmp_path):
        dataset = tmp_path / "set.msb1"
        assert run(synth_args(dataset)) == 0
        ckpt = tmp_path / "plain.net1"
        assert run(["train", "--data", dataset, "--out", ckpt, *TRAIN_FAST]) == 0
        bench_out = tmp_path / "bench.txt"
        assert run(["bench", "--data", dataset, "--model", ckpt, "--k", 2,
                    "--batch-size", 16, "--repeats", 1, "--out", bench_out]) == 0
        payload = json.loads((tmp_path / "bench.json").read_text())
        assert len(payload["latencies"]) == 1
        assert payload["sizes"]["params_with_pca"] < payload["sizes"]["params_without_pca"]


class TestExitCodes:
    def test_invalid_ratio_is_usage_error(self, tmp_path, capsys):
        code = run(["synth", "--out", tmp_path / "x.msb1", "--ratio", "5:0:1"])
        assert code == 1
        assert "usage error" in capsys.readouterr().err

    def test_zero_fraction_is_usage_error(self, tmp_path):
        dataset = tmp_path / "set.msb1"
        assert run(synth_args(dataset, n=20)) == 0
        assert run(["fit-pca", "--data", dataset, "--out", tmp_path / "p.pca1",
                    "--fraction", 0]) == 1

    def test_missing_file_is_data_error(self, tmp_path, capsys):
        code = run(["fit-pca", "--data", tmp_path / "absent.msb1",
                    "--out", tmp_path / "p.pca1"])
        assert code == 2
        assert "data error" in capsys.readouterr().err

    def test_band_mismatch_is_data_error(self, tmp_path):
        dataset = tmp_path / "set.msb1"
        other = tmp_path / "other.msb1"
        assert run(synth_args(dataset, bands=5)) == 0
        assert run(synth_args(other, bands=4)) == 0
        pca_path = tmp_path / "p.pca1"
        assert run(["fit-pca", "--data", dataset, "--out", pca_path, "--k", 2]) == 0
        assert run(["transform", "--data", other, "--model", pca_path,
                    "--out", tmp_path / "out.msb1"]) == 2

    def test_unknown_subcommand_is_usage_error(self):
        assert run(["florble"]) == 1

    def test_corrupt_dataset_is_data_error(self, tmp_path):
        bad = tmp_path / "bad.msb1"
        bad.write_bytes(b"JUNKJUNKJUNK")
        assert run(["fit-pca", "--data", bad, "--out", tmp_path / "p.pca1"]) == 2


class TestManifest:
    def test_rerun_from_manifest_reproduces_checkpoint(self, tmp_path):
        dataset = tmp_path / "set.msb1"
        assert run(synth_args(dataset)) == 0
        first = tmp_path / "a.net1"
        assert run(["train", "--data", dataset, "--out", first, *TRAIN_FAST]) == 0
        manifest = tmp_path / "a.manifest"
        second = tmp_path / "b.net1"
        assert run(["train", "--config", manifest, "--out", second]) == 0
        a = first.read_bytes()
        b = second.read_bytes()
        assert a == b

        for ckpt, report in ((first, tmp_path / "ra.txt"), (second, tmp_path / "rb.txt")):
            assert run(["eval", "--model", ckpt, "--data", dataset,
                        "--out", report, "--seed", 3]) == 0
        ja = json.loads((tmp_path / "ra.json").read_text())
        jb = json.loads((tmp_path / "rb.json").read_text())
        assert ja == jb

    def test_manifest_is_a_readable_config(self, tmp_path):
        dataset = tmp_path / "set.msb1"
        assert run(synth_args(dataset)) == 0
        ckpt = tmp_path / "m.net1"
        assert run(["train", "--data", dataset, "--out", ckpt, *TRAIN_FAST]) == 0
        resolved = cli.read_config(tmp_path / "m.manifest")
        assert resolved["encoder"] == "mlp-tiny"
        assert resolved["seed"] == "3"
        assert resolved["data"] == str(dataset)


class TestFrozenEncoder:
    def test_fresh_frozen_encoder_is_untouched(self, tmp_path):
        dataset = tmp_path / "set.msb1"
        assert run(synth_args(dataset)) == 0
        ckpt = tmp_path / "frozen.net1"
        assert run(["train", "--data", dataset, "--out", ckpt,
                    "--finetune", "frozen", *TRAIN_FAST]) == 0
        trained, _ = net.load_network(ckpt)
        reference = cli._build_from_preset("mlp-tiny", trained.input_dim, 4, 3)
        for i in range(reference.n_encoder_layers):
            np.testing.assert_array_equal(trained.weights[i], reference.weights[i])
            np.testing.assert_array_equal(trained.biases[i], reference.biases[i])
        # the head must actually have moved
        assert not np.array_equal(trained.weights[-1], reference.weights[-1])

    def test_pretrained_checkpoint_with_new_input_dim(self, tmp_path):
        dataset = tmp_path / "set.msb1"
        assert run(synth_args(dataset)) == 0
        pretrained = tmp_path / "pre.net1"
        assert run(["train", "--data", dataset, "--out", pretrained,
                    "--loss-mode", "softcon_pretrain", "--pretrain-epochs", 2,
                    *TRAIN_FAST]) == 0
        pca_path = tmp_path / "p.pca1"
        assert run(["fit-pca", "--data", dataset, "--out", pca_path,
                    "--k", 2, "--seed", 3]) == 0
        final = tmp_path / "final.net1"
        assert run(["train", "--data", dataset, "--out", final,
                    "--preprocessor", "pca", "--pca-model", pca_path,
                    "--weights", pretrained, "--finetune", "frozen",
                    *TRAIN_FAST]) == 0
        manifest = (tmp_path / "final.manifest").read_text()
        assert "# first_layer_replaced=True" in manifest
        # deeper encoder layers must match the pretrained checkpoint exactly
        source, _ = net.load_network(pretrained)
        trained, _ = net.load_network(final)
        for i in range(1, trained.n_encoder_layers):
            np.testing.assert_array_equal(trained.weights[i], source.weights[i])

    def test_frozen_plus_pretrain_rejected(self, tmp_path):
        dataset = tmp_path / "set.msb1"
        assert run(synth_args(dataset, n=20)) == 0
        code = run(["train", "--data", dataset, "--out", tmp_path / "x.net1",
                    "--finetune", "frozen", "--loss-mode", "softcon_pretrain",
                    *TRAIN_FAST])
        assert code == 1


class TestPerfectOracleEval:
    def test_label_leaking_network_scores_one(self, tmp_path):
        # Sanity harness: bands carry the labels themselves and a
        # hand-built identity network maps them to saturated logits.
        rng = np.random.default_rng(8)
        classes = 4
        labels = (rng.random((40, classes)) < 0.5).astype(np.uint8)
        rasters = labels.astype(np.float32).reshape(40, classes, 1, 1)
        sample_set = data.SampleSet(rasters, labels)
        dataset = tmp_path / "leak.msb1"
        data.save_sampleset(sample_set, dataset)

        network = Network([LayerDef(classes, classes, "identity", 0.0)],
                          n_encoder_layers=0, seed=0)
        network.weights[0][...] = 40.0 * np.eye(classes)
        network.biases[0][...] = -20.0
        ckpt = tmp_path / "oracle.net1"
        net.save_network(network, ckpt)

        report = tmp_path / "oracle.txt"
        assert run(["eval", "--model", ckpt, "--data", dataset,
                    "--out", report, "--bucket", "all"]) == 0
        payload = json.loads((tmp_path / "oracle.json").read_text())
        assert payload["accuracy"] == 1.0
        assert payload["macro"]["f1"] == 1.0


class TestConfigFile:
    def test_file_values_and_flag_overrides(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# comment\nencoder=mlp-tiny\nmax_epochs=2\nseed=9\n")
        resolved = cli.resolve_train_config(cfg, {"seed": 11})
        assert resolved["encoder"] == "mlp-tiny"
        assert resolved["max_epochs"] == 2
        assert resolved["seed"] == 11          # flag wins
        assert resolved["batch_size"] == 64    # schema default

    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("no_such_key=1\n")
        with pytest.raises(Exception):
            cli.resolve_train_config(cfg, {})

    def test_malformed_line_rejected(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("just a line\n")
        assert run(["train", "--config", cfg, "--data", "x", "--out", "y"]) == 1
