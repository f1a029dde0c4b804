import json

import pytest

from lace.cli import EXIT_CODES, main
from lace.corpus import ingest

TRAIN = [
    "--phase1-steps", "4", "--phase2-steps", "2", "--batch-size", "4", "--warmup-steps", "1",
    "--embed-dim", "8", "--heads", "2", "--ffn-dim", "16", "--layers", "1", "--log-every", "0",
]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def last_json(text):
    return json.loads(text.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--count", "12", "--seed", "3", "--out", str(d / "corpus.jsonl")]) == 0
    assert main(["train", "--corpus", str(d / "corpus.jsonl"), "--out-dir", str(d / "run"), *TRAIN]) == 0
    return d


def test_exit_code_table():
    assert EXIT_CODES["ok"] == 0 and EXIT_CODES["usage"] == 2
    assert len(set(EXIT_CODES.values())) == len(EXIT_CODES)


def test_synth_and_ingest(tmp_path, capsys):
    out = tmp_path / "s.jsonl"
    code, text, _ = run(capsys, "synth", "--cols", "2", "--rows", "3,3", "--count", "5", "--out", out)
    assert code == 0 and last_json(text)["written"] == 5
    lays, _ = ingest(out, 5)
    assert all(x.n_real == 6 for x in lays)
    clean = tmp_path / "c.jsonl"
    code, text, _ = run(capsys, "ingest", "--in", out, "--num-classes", "5", "--out", clean)
    assert code == 0 and last_json(text)["count"] == 5
    assert clean.read_bytes() == out.read_bytes()


def test_train_outputs(workspace):
    for name in ("final.ckpt", "phase1.ckpt", "metrics.csv"):
        assert (workspace / "run" / name).exists()


def test_sample_eval_post_render(workspace, tmp_path, capsys):
    ck = workspace / "run" / "final.ckpt"
    gen = tmp_path / "gen.jsonl"
    code, text, _ = run(capsys, "sample", "--ckpt", ck, "--count", "4", "--steps", "5", "--out", gen)
    assert code == 0 and len(gen.read_text().splitlines()) == 4
    post = tmp_path / "post.jsonl"
    assert run(capsys, "post", "--in", gen, "--out", post)[0] == 0
    code, text, _ = run(capsys, "eval", "--gen", post, "--ref", workspace / "corpus.jsonl")
    rep = last_json(text)
    assert code == 0 and {"alignment", "overlap", "dist_distance"} <= set(rep)
    code, text, _ = run(capsys, "render", "--in", post, "--out-dir", tmp_path / "svg", "--limit", "2")
    assert code == 0 and len(list((tmp_path / "svg").glob("*.svg"))) == 2


def test_sample_is_deterministic(workspace, tmp_path, capsys):
    ck = workspace / "run" / "final.ckpt"
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    run(capsys, "sample", "--ckpt", ck, "--count", "3", "--steps", "4", "--seed", "9", "--out", a)
    run(capsys, "sample", "--ckpt", ck, "--count", "3", "--steps", "4", "--seed", "9", "--out", b)
    assert a.read_bytes() == b.read_bytes()


def test_csz_sampling_keeps_labels_and_sizes(workspace, tmp_path, capsys):
    ck = workspace / "run" / "final.ckpt"
    cond = workspace / "corpus.jsonl"
    out = tmp_path / "csz.jsonl"
    code, _, _ = run(capsys, "sample", "--ckpt", ck, "--task", "csz", "--cond", cond, "--steps", "4", "--out", out)
    assert code == 0
    ref, _ = ingest(cond, 5)
    got, _ = ingest(out, 5, eps_geom=None)
    assert len(got) == len(ref)
    for g, r in zip(got, ref):
        assert [e.label for e in g.real] == [e.label for e in r.real]
        assert [e.box[2:] for e in g.real] == [e.box[2:] for e in r.real]


def test_refine(workspace, tmp_path, capsys):
    ck = workspace / "run" / "final.ckpt"
    out = tmp_path / "r.jsonl"
    code, text, _ = run(capsys, "refine", "--ckpt", ck, "--in", workspace / "corpus.jsonl", "--out", out, "--steps", "3")
    assert code == 0 and last_json(text)["tau"] > 0
    code, _, err = run(capsys, "refine", "--ckpt", ck, "--in", workspace / "corpus.jsonl", "--out", out, "--tau", "5", "--tau-from-omega", "0.1")
    assert code == EXIT_CODES["config"]


def test_error_codes(workspace, tmp_path, capsys):
    code, _, err = run(capsys, "bogus")
    assert code == EXIT_CODES["usage"]
    code, _, err = run(capsys, "sample", "--ckpt", tmp_path / "none.ckpt", "--out", tmp_path / "x")
    assert code == EXIT_CODES["missing_file"] and last_json(err)["error"] == "missing_file"
    garbage = tmp_path / "g.ckpt"
    garbage.write_bytes(b"not a checkpoint")
    code, _, err = run(capsys, "sample", "--ckpt", garbage, "--out", tmp_path / "x")
    assert code == EXIT_CODES["checkpoint"]
    code, _, _ = run(capsys, "sample", "--ckpt", workspace / "run" / "final.ckpt", "--task", "c", "--out", tmp_path / "x")
    assert code == EXIT_CODES["config"]
    empty = tmp_path / "e.jsonl"
    empty.write_text("")
    code, _, _ = run(capsys, "ingest", "--in", empty, "--num-classes", "5")
    assert code == EXIT_CODES["invalid_input"]
    code, _, _ = run(capsys, "synth", "--cols", "3", "--out", tmp_path / "s.jsonl")
    assert code == EXIT_CODES["config"]


def test_config_precedence(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"count": 7, "seed": 2}))
    out = tmp_path / "s.jsonl"
    code, text, _ = run(capsys, "synth", "--config", cfg, "--count", "3", "--out", out)
    assert code == 0 and len(out.read_text().splitlines()) == 3
    code, text, _ = run(capsys, "synth", "--config", cfg, "--out", out)
    assert len(out.read_text().splitlines()) == 7
    cfg.write_text(json.dumps({"nonsense": 1}))
    assert run(capsys, "synth", "--config", cfg, "--out", out)[0] == EXIT_CODES["config"]
    cfg.write_text("{")
    assert run(capsys, "synth", "--config", cfg, "--out", out)[0] == EXIT_CODES["config"]
