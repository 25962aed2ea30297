import json

import pytest

from scl_finetune.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, OUTPUT_ROOT_ENV, main

SMALL = {"encoder": {"vocab_hash_dim": 256, "hidden_dims": [16], "embed_dim": 8},
         "train": {"max_epochs": 6, "patience": 3},
         "protocol": {"n_samples": 3, "top_k": 2}}


@pytest.fixture
def setup(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    cfg = tmp_path / "small.json"
    cfg.write_text(json.dumps(SMALL))
    data = tmp_path / "d.jsonl"
    assert main(["synth", "--set", "synthetic.n=240", "--set", "synthetic.num_classes=2", "--output", str(data),
                 "--out", str(tmp_path / "synth")]) == EXIT_OK
    return tmp_path, str(cfg), str(data)


class TestExitCodes:
    def test_unknown_flag(self, capsys):
        assert main(["fewshot", "--bogus"]) == EXIT_USAGE
        assert "usage:" in capsys.readouterr().err

    def test_no_command(self):
        assert main([]) == EXIT_USAGE

    def test_missing_data_file(self, setup):
        tmp, cfg, _ = setup
        assert main(["fewshot", "--data", str(tmp / "missing.jsonl"), "--config", cfg]) == EXIT_DATA

    def test_malformed_data(self, setup):
        tmp, cfg, _ = setup
        bad = tmp / "bad.jsonl"
        bad.write_text('{"text_a": "x"}\n')
        assert main(["train", "--data", str(bad), "--config", cfg]) == EXIT_DATA

    def test_single_run_report_is_data_error(self, setup):
        tmp, cfg, data = setup
        assert main(["fewshot", "--data", data, "--config", cfg, "--top-k", "1", "--out", str(tmp / "k")]) == EXIT_DATA

    def test_unknown_config_key(self, setup):
        _, cfg, data = setup
        assert main(["train", "--data", data, "--set", "train.nope=1"]) == EXIT_USAGE

    def test_invalid_value(self, setup):
        _, cfg, data = setup
        assert main(["train", "--data", data, "--config", cfg, "--tau", "-1"]) == EXIT_USAGE

    def test_gradcheck_pass(self, tmp_path):
        assert main(["gradcheck", "--loss", "scl", "--trials", "10", "--out", str(tmp_path)]) == EXIT_OK
        assert json.loads((tmp_path / "summary.json").read_text())["passed"] is True

    def test_gradcheck_fail_is_numeric(self, tmp_path, monkeypatch):
        import scl_finetune.cli as cli
        monkeypatch.setattr(cli, "gradcheck_trials", lambda *a, **k: 1e-3)
        assert main(["gradcheck", "--trials", "1", "--out", str(tmp_path)]) == EXIT_NUMERIC


class TestCommands:
    def test_fewshot_writes_reports(self, setup):
        tmp, cfg, data = setup
        out = tmp / "fs"
        argv = ["fewshot", "--data", data, "--config", cfg, "--n", "20", "--loss", "combined",
                "--lambda", "0.9", "--tau", "0.3", "--out", str(out)]
        assert main(argv) == EXIT_OK
        for name in ("manifest.json", "report.tsv", "summary.json", "runs.jsonl"):
            assert (out / name).exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["train"]["loss"] == {"lambda": 0.9, "tau": 0.3, "variant": "combined"}
        assert manifest["seeds"] == [0, 1, 2] and "version" in manifest and "timestamp" in manifest
        assert len((out / "runs.jsonl").read_text().splitlines()) == 3

    def test_reports_byte_identical(self, setup):
        tmp, cfg, data = setup
        files = ("report.tsv", "runs.jsonl", "summary.json")
        blobs = []
        for name in ("a", "b"):
            assert main(["fewshot", "--data", data, "--config", cfg, "--out", str(tmp / name), "--jobs", "2"]) == 0
            blobs.append([(tmp / name / f).read_bytes() for f in files])
        assert blobs[0] == blobs[1]

    def test_precedence(self, setup):
        tmp, cfg, data = setup
        out = tmp / "p"
        assert main(["fewshot", "--data", data, "--config", cfg, "--set", "train.loss.tau=0.5",
                     "--set", "protocol.top_k=2", "--set", "protocol.n_samples=4", "--tau", "0.7", "--out", str(out)]) == EXIT_OK
        resolved = json.loads((out / "manifest.json").read_text())["config"]
        assert resolved["train"]["loss"]["tau"] == 0.7  # flag beats --set
        assert resolved["protocol"]["n_samples"] == 4  # --set beats file
        assert resolved["train"]["max_epochs"] == 6  # file beats default
        assert resolved["train"]["learning_rate"] == 1e-3  # default

    def test_default_output_root(self, setup):
        tmp, cfg, data = setup
        assert main(["train", "--data", data, "--config", cfg]) == EXIT_OK
        assert (tmp / "root" / "train" / "model.ckpt").exists()
        assert "updates_per_second" not in (tmp / "root" / "train" / "metrics.jsonl").read_text()

    def test_train_eval_embed_transfer(self, setup):
        tmp, cfg, data = setup
        assert main(["train", "--data", data, "--config", cfg, "--out", str(tmp / "t")]) == EXIT_OK
        ckpt = str(tmp / "t" / "model.ckpt")
        assert main(["eval", "--data", data, "--checkpoint", ckpt, "--out", str(tmp / "e")]) == EXIT_OK
        assert 0 <= json.loads((tmp / "e" / "summary.json").read_text())["accuracy"] <= 1
        assert main(["embed", "--data", data, "--checkpoint", ckpt, "--out", str(tmp / "m")]) == EXIT_OK
        assert len((tmp / "m" / "embeddings.tsv").read_text().splitlines()) == 241
        assert main(["transfer", "--data", data, "--source", ckpt, "--config", cfg, "--per-class", "5",
                     "--out", str(tmp / "x")]) == EXIT_OK
        # configured default encoder differs from the source
        assert main(["transfer", "--data", data, "--source", ckpt, "--check-config"]) == EXIT_DATA

    def test_corrupt_checkpoint(self, setup):
        tmp, _, data = setup
        bad = tmp / "bad.ckpt"
        bad.write_bytes(b"garbage")
        assert main(["eval", "--data", data, "--checkpoint", str(bad), "--out", str(tmp / "e")]) == EXIT_DATA

    def test_noise_sweep_ablation_augment(self, setup):
        tmp, cfg, data = setup
        assert main(["noise", "--data", data, "--config", cfg, "--n", "20", "--temperatures", "0.3,0.9",
                     "--out", str(tmp / "n")]) == EXIT_OK
        assert len((tmp / "n" / "report.tsv").read_text().splitlines()) == 2 + 2
        assert main(["sweep", "--data", data, "--config", cfg, "--lambdas", "0.5,0.9", "--taus", "0.3",
                     "--n", "20", "--out", str(tmp / "s")]) == EXIT_OK
        assert "best" in json.loads((tmp / "s" / "summary.json").read_text())
        assert main(["batch-ablation", "--data", data, "--config", cfg, "--batch-sizes", "8,16",
                     "--set", "protocol.throughput_steps=50", "--out", str(tmp / "b")]) == EXIT_OK
        assert len((tmp / "b" / "throughput.tsv").read_text().splitlines()) == 1 + 4
        assert "updates" not in (tmp / "b" / "report.tsv").read_text()
        assert main(["augment", "--data", data, "--temperature", "0", "--out", str(tmp / "a")]) == EXIT_OK
        assert len((tmp / "a" / "augmented.jsonl").read_text().splitlines()) == 4 * 240

    def test_noise_defaults_to_100_labeled(self, setup):
        tmp, cfg, data = setup
        assert main(["noise", "--data", data, "--config", cfg, "--temperatures", "0.5",
                     "--samples", "2", "--top-k", "2", "--out", str(tmp / "n")]) == EXIT_OK
        manifest = json.loads((tmp / "n" / "manifest.json").read_text())
        assert manifest["config"]["protocol"]["n_labeled"] == 100
