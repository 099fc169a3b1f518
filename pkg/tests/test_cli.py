import json
import subprocess
import sys

import pytest

from damamba import bench as B
from damamba.cli import main, read_eval_csv, session_seed

TINY = [
    "--override", "model.d=4", "--override", "k_a=4", "--override", "k_v=4",
    "--override", "model.layers=1", "--override", "ctx_layers=1", "--override", "model.d_state=3",
    "--override", "model.chunk_size=4", "--override", "model.dropout=0", "--override", "batch_windows=4",
    "--override", "epochs=1",
]


def gen(out, *extra):
    return main(["generate", "--out", str(out), "--frames", "40", "--sessions", "2", *extra])


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_generate_is_byte_deterministic(tmp_path, capsys):
    assert gen(tmp_path / "a", "--seed", "3") == 0
    assert gen(tmp_path / "b", "--seed", "3") == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    assert sorted(p.name for p in (tmp_path / "a").iterdir()) == ["session_000", "session_001"]
    out = capsys.readouterr().out
    assert "session_000: M=2 n=40" in out
    assert gen(tmp_path / "c", "--seed", "4") == 0
    assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "c")


def test_session_seeds_do_not_collide():
    seeds = {session_seed(s, i) for s in range(50) for i in range(50)}
    assert len(seeds) == 2500


def test_generate_refuses_non_empty_dir(tmp_path, capsys):
    (tmp_path / "x").mkdir()
    (tmp_path / "x" / "keep").write_text("")
    assert gen(tmp_path / "x") == 2
    assert "--force" in capsys.readouterr().err
    assert gen(tmp_path / "x", "--force") == 0


def test_monologue_is_a_config_error(tmp_path, capsys):
    assert gen(tmp_path / "m", "--participants", "1") == 4
    assert "partner" in capsys.readouterr().err


def test_bad_override_exit_code(tmp_path):
    assert gen(tmp_path / "o", "--override", "nonsense=1") == 4
    assert gen(tmp_path / "o", "--override", "noequals") == 4


def test_config_file(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"data": {"participants": 3}}))
    assert gen(tmp_path / "g", "--config", str(tmp_path / "c.json")) == 0
    assert "participants=p0,p1,p2" in (tmp_path / "g" / "session_000" / "meta").read_text()


def test_train_resume_and_eval(tmp_path, capsys):
    gen(tmp_path / "tr", "--seed", "1")
    gen(tmp_path / "va", "--seed", "2")
    run = ["train", "--train-dir", str(tmp_path / "tr"), "--val-dir", str(tmp_path / "va"), "--out", str(tmp_path / "run")]
    assert main(run + TINY + ["--override", "epochs=2", "--max-steps", "1"]) == 0
    assert "steps=1" in capsys.readouterr().out
    assert main(run + TINY + ["--override", "epochs=2", "--resume", str(tmp_path / "run" / "last")]) == 0
    assert "steps=4" in capsys.readouterr().out
    assert (tmp_path / "run" / "best" / "config.json").is_file()

    csv_path = tmp_path / "eval.csv"
    assert main(["eval", "--checkpoint", str(tmp_path / "run" / "best"), "--sessions", str(tmp_path / "va"), "--csv", str(csv_path)]) == 0
    rows = read_eval_csv(csv_path)
    assert [r[1] for r in rows] == ["session", "session", "group", "macro"]
    assert rows[-1][0] == "macro" and -1 <= rows[-1][2] <= 1
    # a single session directory works too, and the alias spelling is accepted
    assert main(["evaluate", "--checkpoint", str(tmp_path / "run" / "best"), "--sessions", str(tmp_path / "va" / "session_000")]) == 0


def test_train_needs_dirs(tmp_path):
    assert main(["train", "--out", str(tmp_path / "r")]) == 2


def test_eval_on_empty_dir(tmp_path):
    gen(tmp_path / "tr", "--seed", "1")
    (tmp_path / "empty").mkdir()
    run = ["train", "--train-dir", str(tmp_path / "tr"), "--val-dir", str(tmp_path / "tr"), "--out", str(tmp_path / "run")]
    assert main(run + TINY + ["--max-steps", "1"]) == 0
    assert main(["eval", "--checkpoint", str(tmp_path / "run" / "last"), "--sessions", str(tmp_path / "empty")]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "run" / "last"), "--sessions", str(tmp_path / "missing")]) == 3
    assert main(["eval", "--checkpoint", str(tmp_path / "nockpt"), "--sessions", str(tmp_path / "tr")]) == 3


def test_bench_with_cap(tmp_path, capsys):
    out = tmp_path / "b.csv"
    code = main([
        "bench", "--out", str(out), "--lengths", "64,1024", "--cap-bytes", str(3 << 20),
        "--override", "bench.d=8", "--override", "bench.chunk_size=16", "--override", "repeats=1", "--override", "warmups=0",
    ])
    assert code == 0
    rows = B.read_csv(out)
    status = {(r.variant, r.n): r.status for r in rows}
    assert status[(B.FULL, 1024)] == B.OOM and status[(B.HYBRID, 1024)] == B.OK
    assert "OOM" in capsys.readouterr().out


def test_bench_rejects_unknown_variant(tmp_path):
    assert main(["bench", "--variants", "rnn", "--lengths", "8"]) == 4
    assert main(["bench", "--lengths", "8,x"]) == 4


def test_help_lists_config_keys(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--help"])
    assert e.value.code == 0
    text = capsys.readouterr().out
    for key in ("model.chunk_size", "train.lambda_align", "data.noise", "bench.cap_bytes"):
        assert key in text
    assert "[published: 5e-5]" in text


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "damamba.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("damamba ")
