import json

import numpy as np
import pytest

from unitok.checkpoint import file_sha256
from unitok.cli import main, recon_table
from unitok.codec import layout_vocab, load_packed
from unitok.config import ConfigError, RunConfig, from_dict, load_config
from unitok.synthetic import two_pattern_clips, write_media_corpus
from unitok.training import save_triplets, synthetic_triplets
from unitok.vq import MediaClip, VisionGrid, save_grid

BASE = {
    "model": {"hidden": 32, "intermediate": 64, "max_context": 256},
    "tokenizer_train": {"steps": 4, "batch_size": 2},
    "train": {"total_steps": 6, "checkpoint_every": 1, "batch_rows": 2, "base_lr": 3e-3},
    "data": {"manifest": "manifest.jsonl", "tokenizer_checkpoint": "tok/checkpoints/tokenizer.ckpt",
             "dataset": "corpus/dataset.pkd"},
}


def run(capsys, *argv):
    try:
        code = main([str(a) for a in argv])
    except SystemExit as e:
        code = e.code
    out, err = capsys.readouterr()
    return code, out, err


def write_config(path, overrides=None):
    cfg = json.loads(json.dumps(BASE))
    for section, values in (overrides or {}).items():
        cfg.setdefault(section, {}).update(values)
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Four 16x16 stills, a tokenizer, a corpus and a short pretraining run."""
    root = tmp_path_factory.mktemp("ws")
    write_media_corpus(root, two_pattern_clips(4, size=16, frames=1))
    cfg = write_config(root / "run.json")
    for argv in (["train-tokenizer", "--out", root / "tok"], ["build-corpus", "--out", root / "corpus"],
                 ["pretrain", "--out", root / "pre"]):
        assert main([str(a) for a in [*argv, "--config", cfg]]) == 0
    return root


# -- config ------------------------------------------------------------------------------


def test_unknown_config_key_is_rejected(tmp_path, capsys):
    with pytest.raises(ConfigError, match="model.hiden"):
        from_dict({"model": {"hiden": 3}})
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"stepz": 1}}))
    code, _, err = run(capsys, "pretrain", "--config", bad, "--out", tmp_path / "o")
    payload = json.loads(err.strip().splitlines()[-1])
    assert code == 1 and payload["error"] == "ConfigError" and "train.stepz" in payload["message"]


def test_invalid_value_is_a_config_error():
    with pytest.raises(ConfigError, match="train"):
        from_dict({"train": {"stage": "warmup"}})


def test_echoed_config_reparses_to_the_same_hash(workspace):
    echoed = load_config(workspace / "pre" / "config.json")
    original = load_config(workspace / "run.json")
    assert echoed == original and echoed.hash() == original.hash()
    assert (workspace / "pre" / "config.hash").read_text().strip() == original.hash()


def test_relative_paths_resolve_against_config_dir(workspace):
    cfg = load_config(workspace / "run.json")
    assert cfg.data.manifest == str((workspace / "manifest.jsonl").resolve())


def test_seed_override_reaches_every_section():
    cfg = RunConfig().with_seed(7)
    assert {cfg.model.seed, cfg.tokenizer.seed, cfg.tokenizer_train.seed, cfg.train.seed, cfg.sample.seed} == {7}


def test_usage_error_is_single_json_line(capsys):
    code, _, err = run(capsys, "pretrain")
    assert code == 2 and len(err.strip().splitlines()) == 1
    assert json.loads(err)["error"] == "UsageError"


# -- tokenizer and corpus ----------------------------------------------------------------


def test_tokenizer_run_is_deterministic(workspace, capsys):
    code, _, _ = run(capsys, "train-tokenizer", "--config", workspace / "run.json", "--out", workspace / "tok2")
    assert code == 0
    a, b = (workspace / d / "checkpoints" / "tokenizer.ckpt" for d in ("tok", "tok2"))
    assert file_sha256(a) == file_sha256(b)
    report = json.loads((workspace / "tok" / "report.json").read_text())
    assert {"psnr", "ssim", "baseline_psnr", "sha256"} <= set(report)


def test_corpus_stats_match_hand_count(workspace):
    stats = json.loads((workspace / "corpus" / "stats.json").read_text())
    # each 16x16 still is a 4x4 grid: 4 rows of 4 codes plus an end-of-line marker
    assert stats["documents"] == 4 and stats["vision_tokens"] == 4 * 20
    assert stats["vision_fraction"] == pytest.approx(80 / stats["tokens"])
    batch, saved = load_packed(workspace / "corpus" / "dataset.pkd")
    assert saved["tokens"] == int(np.sum(batch.doc_ids >= 0)) == stats["tokens"]


def test_overlong_documents_are_listed(tmp_path, capsys, workspace):
    clips = two_pattern_clips(2, size=16, frames=1) + two_pattern_clips(1, size=32, frames=1)
    write_media_corpus(tmp_path, clips)
    # 32x32 gives an 8x8 grid, 72 stream tokens plus captions: too long for 100
    cfg = write_config(tmp_path / "run.json", {"train": {"context_pretrain1": 100}, "data": {
        "tokenizer_checkpoint": str(workspace / "tok" / "checkpoints" / "tokenizer.ckpt")}})
    code, _, err = run(capsys, "build-corpus", "--config", cfg, "--out", tmp_path / "c")
    stats = json.loads((tmp_path / "c" / "stats.json").read_text())
    assert code == 0 and stats["rejected"] == [2] and stats["rejected_lines"] == [3]
    assert "rejected" in err


def test_empty_manifest_gives_empty_dataset(tmp_path, capsys, workspace):
    (tmp_path / "manifest.jsonl").write_text("")
    cfg = write_config(tmp_path / "run.json", {"data": {
        "tokenizer_checkpoint": str(workspace / "tok" / "checkpoints" / "tokenizer.ckpt")}})
    code, _, err = run(capsys, "build-corpus", "--config", cfg, "--out", tmp_path / "c")
    batch, stats = load_packed(tmp_path / "c" / "dataset.pkd")
    assert code == 0 and batch.num_rows == 0 and stats["documents"] == 0
    assert "empty manifest" in err


def test_bad_media_header_names_path_and_offset(tmp_path, capsys, workspace):
    write_media_corpus(tmp_path, two_pattern_clips(1, size=16, frames=1))
    (tmp_path / "media" / "clip_0000.rtf").write_bytes(b"XXXX garbage")
    cfg = write_config(tmp_path / "run.json", {"data": {
        "tokenizer_checkpoint": str(workspace / "tok" / "checkpoints" / "tokenizer.ckpt")}})
    code, _, err = run(capsys, "build-corpus", "--config", cfg, "--out", tmp_path / "c")
    message = json.loads(err.strip().splitlines()[-1])["message"]
    assert code == 1 and "clip_0000.rtf" in message and "byte 0" in message


def test_bad_dataset_header(tmp_path, capsys):
    (tmp_path / "d.pkd").write_bytes(b"PKD1 {not json\n")
    cfg = write_config(tmp_path / "run.json", {"data": {"dataset": "d.pkd"}})
    code, _, err = run(capsys, "pretrain", "--config", cfg, "--out", tmp_path / "o")
    message = json.loads(err)["message"]
    assert code == 1 and "d.pkd: byte" in message and "bad header json" in message


# -- training commands -------------------------------------------------------------------------


def test_pretrain_keeps_last_three_checkpoints(workspace):
    names = sorted(p.name for p in (workspace / "pre" / "checkpoints").iterdir())
    assert names == ["final.ckpt", "step_000003.ckpt", "step_000004.ckpt", "step_000005.ckpt"]
    lines = (workspace / "pre" / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("step,stage,loss,lr") and len(lines) == 7


def test_resume_matches_uninterrupted_run(workspace, capsys):
    code, _, _ = run(capsys, "pretrain", "--config", workspace / "run.json", "--out", workspace / "resumed",
                     "--resume", workspace / "pre" / "checkpoints" / "step_000003.ckpt")
    assert code == 0
    full, resumed = (workspace / d / "checkpoints" / "final.ckpt" for d in ("pre", "resumed"))
    assert file_sha256(full) == file_sha256(resumed)
    tail = (workspace / "pre" / "metrics.csv").read_text().splitlines()[-3:]
    assert (workspace / "resumed" / "metrics.csv").read_text().splitlines()[1:] == tail


def test_stage_context_mismatch(workspace, tmp_path, capsys):
    # rows packed at 256 do not fit a stage-1 context of 128
    cfg = write_config(tmp_path / "run.json", {"train": {"context_pretrain1": 128},
                                               "data": {"dataset": str(workspace / "corpus" / "dataset.pkd")}})
    code, _, err = run(capsys, "pretrain", "--config", cfg, "--out", tmp_path / "o")
    assert code == 1 and "exceed the stage context" in err


def test_vocab_mismatch_names_both_totals(workspace, tmp_path, capsys):
    cfg = write_config(tmp_path / "run.json", {"model": {"vocab_size": 300},
                                               "data": {"dataset": str(workspace / "corpus" / "dataset.pkd")}})
    code, _, err = run(capsys, "pretrain", "--config", cfg, "--out", tmp_path / "o")
    message = json.loads(err)["message"]
    assert code == 1 and "300" in message and "328" in message


def test_qft_rejects_understanding_documents(workspace, tmp_path, capsys):
    write_media_corpus(tmp_path, two_pattern_clips(2, size=16, frames=1), modes=["generation", "understanding"])
    cfg = write_config(tmp_path / "run.json", {"data": {
        "tokenizer_checkpoint": str(workspace / "tok" / "checkpoints" / "tokenizer.ckpt")}})
    assert run(capsys, "build-corpus", "--config", cfg, "--out", tmp_path / "corpus")[0] == 0
    code, _, err = run(capsys, "qft", "--config", cfg, "--out", tmp_path / "q")
    assert code == 1 and "generation-mode" in err


def test_qft_runs_on_generation_data(workspace, capsys):
    code, out, _ = run(capsys, "qft", "--config", workspace / "run.json", "--out", workspace / "qft")
    assert code == 0 and json.loads(out)["result"]["steps"] == 6
    assert "qft" in (workspace / "qft" / "metrics.csv").read_text().splitlines()[1]


def test_dpo_requires_reference(workspace, capsys):
    code, _, err = run(capsys, "dpo", "--config", workspace / "run.json", "--out", workspace / "d0")
    assert code == 1 and "reference" in json.loads(err)["message"]


def test_dpo_run(workspace, tmp_path, capsys):
    save_triplets(tmp_path / "t.jsonl", synthetic_triplets(3, layout_vocab(), seed=0))
    ckpt = str(workspace / "pre" / "checkpoints" / "final.ckpt")
    cfg = write_config(tmp_path / "run.json", {"train": {"total_steps": 2}, "data": {
        "triplets": "t.jsonl", "reference_checkpoint": ckpt, "init_checkpoint": ckpt}})
    code, out, _ = run(capsys, "dpo", "--config", cfg, "--out", tmp_path / "d")
    result = json.loads(out)["result"]
    assert code == 0 and {"dpo", "ce", "total", "margin"} <= set(result["last"])
    assert file_sha256(ckpt) == file_sha256(workspace / "pre" / "checkpoints" / "final.ckpt")


# -- sampling commands ------------------------------------------------------------------------------


def test_generate_sidecar_records_defaults(workspace, capsys):
    ckpt = workspace / "pre" / "checkpoints" / "final.ckpt"
    code, _, _ = run(capsys, "generate", "--config", workspace / "run.json", "--out", workspace / "gen",
                     "--checkpoint", ckpt, "--caption", "stripes", "--dims", "1,3,3")
    side = json.loads((workspace / "gen" / "samples" / "sample.json").read_text())
    assert code == 0 and side["params"]["top_p"] == 1.0 and side["params"]["guidance"] == 5.0
    assert side["params"]["top_k"] == 64 and side["checkpoint_sha256"] == file_sha256(ckpt)
    assert side["config_hash"] == load_config(workspace / "run.json").hash()
    assert (workspace / "gen" / "samples" / "sample.vgf").exists() and (workspace / "gen" / "samples" / "sample.rtf").exists()


def test_generate_is_reproducible_across_runs(workspace, capsys):
    args = ["--config", workspace / "run.json", "--checkpoint", workspace / "pre" / "checkpoints" / "final.ckpt",
            "--dims", "1,3,3", "--seed", "11"]
    for out in ("g1", "g2"):
        assert run(capsys, "generate", "--out", workspace / out, *args)[0] == 0
    assert file_sha256(workspace / "g1" / "samples" / "sample.vgf") == file_sha256(workspace / "g2" / "samples" / "sample.vgf")


def test_bad_dims_argument(workspace, capsys):
    code, _, err = run(capsys, "generate", "--config", workspace / "run.json", "--out", workspace / "gx",
                       "--checkpoint", workspace / "pre" / "checkpoints" / "final.ckpt", "--dims", "3,3")
    assert code == 1 and "--dims" in err


def test_extend_and_caption(workspace, tmp_path, capsys):
    prefix = tmp_path / "prefix.vgf"
    save_grid(prefix, VisionGrid(np.random.default_rng(0).integers(0, 64, (2, 2, 2)), 64, 2, 4, 2))
    common = ["--config", workspace / "run.json", "--checkpoint", workspace / "pre" / "checkpoints" / "final.ckpt"]
    code, out, _ = run(capsys, "extend", *common, "--out", tmp_path / "e", "--grid", prefix, "--frames", "1")
    assert code == 0 and json.loads(out)["result"]["frames"] == 1
    code, out, _ = run(capsys, "caption", *common, "--out", tmp_path / "c", "--grid", prefix, "--max-tokens", "4")
    side = json.loads(out)["result"]
    assert code == 0 and isinstance(side["caption"], str) and side["params"]["top_k"] == 257


# -- reconstruction table -------------------------------------------------------------------------------


class IdentityTokenizer:
    def reconstruct(self, clip):
        return clip


def test_recon_table_with_perfect_stub():
    rng = np.random.default_rng(0)
    clips = [MediaClip.image(rng.random((3, s, s))) for s in (12, 16, 12, 32)]
    rows = recon_table(IdentityTokenizer(), clips)
    assert [r["resolution"] for r in rows] == ["12x12", "16x16", "32x32"]
    assert all(r["psnr"] == 99.0 and r["ssim"] == pytest.approx(1.0) for r in rows)
    assert rows[0]["clips"] == 2


def test_eval_recon_writes_one_row_per_resolution(workspace, tmp_path, capsys):
    clips = two_pattern_clips(2, size=16, frames=1) + two_pattern_clips(1, size=32, frames=1)
    write_media_corpus(tmp_path, clips)
    cfg = write_config(tmp_path / "run.json", {"data": {
        "tokenizer_checkpoint": str(workspace / "tok" / "checkpoints" / "tokenizer.ckpt")}})
    code, _, _ = run(capsys, "eval-recon", "--config", cfg, "--out", tmp_path / "ev")
    lines = (tmp_path / "ev" / "recon.csv").read_text().splitlines()
    assert code == 0 and lines[0] == "resolution,clips,psnr,ssim" and len(lines) == 3
