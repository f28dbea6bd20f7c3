import json

import pytest

from latent3d.checkpoint import read_manifest
from latent3d.cli import main
from latent3d.synthetic import balance_audit, read_dataset

TINY = """\
seed: 0
latent_size: 4
data: {n_train: 12, n_test: 8, grid: 5, max_objects: 3, z_levels: 2}
model: {d_model: 32, n_layers: 1, n_heads: 2, max_len: 160}
projector: {depth: 2, hidden: 16, attn_dim: 8}
sft: {lr: 1.0e-3, epochs: 0, steps: 3, batch_size: 4, ckpt_every: 3}
rl: {steps: 2, group_size: 2, questions_per_step: 2, ckpt_every: 2}
eval: {text_budget: 10, batch_size: 8}
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(TINY)
    assert main(["datagen", "--config", str(cfg), "--out", str(root / "train.jsonl")]) == 0
    assert main(["datagen", "--config", str(cfg), "--split", "test", "--out", str(root / "test.jsonl")]) == 0
    return root, str(cfg)


def test_datagen_is_reproducible_and_audited(work, tmp_path, capsys):
    root, cfg = work
    capsys.readouterr()
    assert main(["datagen", "--config", cfg, "--out", str(tmp_path / "again.jsonl")]) == 0
    out = capsys.readouterr().out
    assert (tmp_path / "again.jsonl").read_bytes() == (root / "train.jsonl").read_bytes()
    recount = balance_audit(read_dataset(root / "train.jsonl"))
    assert "answer labels: " + " ".join(f"{k}={v}" for k, v in recount.items()) in out
    assert "wrote 12 records" in out


def test_full_pipeline(work, capsys):
    root, cfg = work
    sft, rl, ev = root / "sft", root / "rl", root / "eval"
    assert main(["train-sft", "--config", cfg, "--data", str(root / "train.jsonl"), "--out", str(sft)]) == 0
    assert read_manifest(sft / "latest")["has_projector"]
    assert main(["train-rl", "--config", cfg, "--data", str(root / "train.jsonl"), "--init", str(sft / "latest"), "--out", str(rl)]) == 0
    assert read_manifest(rl / "latest")["projector_hash"] == read_manifest(sft / "latest")["projector_hash"]
    assert len((rl / "metrics.jsonl").read_text().splitlines()) == 2
    assert main(["eval", "--config", cfg, "--data", str(root / "test.jsonl"), "--checkpoint", str(rl / "latest"), "--out", str(ev)]) == 0
    rep = json.loads((ev / "report.json").read_text())
    assert rep["n"] == 8 and (ev / "report.txt").read_text().count("Avg.") == 1
    dump = root / "dumps.jsonl"
    assert main(["export-latents", "--config", cfg, "--data", str(root / "test.jsonl"), "--checkpoint", str(sft / "latest"),
                 "--limit", "3", "--out", str(dump)]) == 0
    assert len(dump.read_text().splitlines()) == 4
    # resuming with the same config is accepted, a changed config is not
    assert main(["train-sft", "--config", cfg, "--data", str(root / "train.jsonl"), "--out", str(sft), "--resume"]) == 0
    assert main(["train-sft", "--config", cfg, "--set", "sft.lr=0.5", "--data", str(root / "train.jsonl"),
                 "--out", str(sft), "--resume"]) == 2


def test_train_rl_needs_projector(work, tmp_path, capsys):
    from latent3d.checkpoint import save_checkpoint
    from latent3d.config import load_config
    from latent3d.pipeline import fresh_models

    root, cfg = work
    model, _ = fresh_models(load_config(cfg))
    save_checkpoint(tmp_path / "bare", model, None, {})
    code = main(["train-rl", "--config", cfg, "--data", str(root / "train.jsonl"), "--init", str(tmp_path / "bare"),
                 "--out", str(tmp_path / "o")])
    assert code == 2
    assert "no projector" in capsys.readouterr().err


def test_exit_codes(work, tmp_path, capsys):
    root, cfg = work
    assert main([]) == 1
    assert main(["train-sft", "--config", cfg]) == 1
    assert main(["ablate", "--config", cfg, "--axis", "width", "--out", str(tmp_path)]) == 2
    assert main(["eval", "--config", cfg, "--data", str(tmp_path / "none.jsonl"), "--checkpoint", str(tmp_path),
                 "--out", str(tmp_path / "e")]) == 2
    other = ["--set", "data.grid=6"]
    assert main(["train-sft", "--config", cfg, *other, "--data", str(root / "train.jsonl"), "--out", str(tmp_path / "x")]) == 2
    assert main(["datagen", "--config", cfg, "--set", "bogus=1", "--out", str(tmp_path / "d.jsonl")]) == 2
    assert "data error" in capsys.readouterr().err


def test_eval_formats(work, tmp_path):
    root, cfg = work
    from latent3d.checkpoint import save_checkpoint
    from latent3d.config import load_config
    from latent3d.pipeline import fresh_models

    model, proj = fresh_models(load_config(cfg))
    save_checkpoint(tmp_path / "c", model, proj, {})
    assert main(["eval", "--config", cfg, "--data", str(root / "test.jsonl"), "--checkpoint", str(tmp_path / "c"),
                 "--format", "json", "--out", str(tmp_path / "e")]) == 0
    assert (tmp_path / "e" / "report.json").exists() and not (tmp_path / "e" / "report.txt").exists()


def test_ablate_small_axis(work, tmp_path):
    root, cfg = work
    assert main(["ablate", "--config", cfg, "--axis", "token-position", "--seeds", "0", "--out", str(tmp_path)]) == 0
    rec = json.loads((tmp_path / "token-position.json").read_text())
    assert [r["setting"] for r in rec["rows"]] == ["beginning", "middle", "end"]
    assert all(len(r["scores"]) == 1 for r in rec["rows"])
