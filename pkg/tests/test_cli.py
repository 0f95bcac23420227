import csv
import json

import numpy as np
import pytest

from humanline_lab import cli, verification
from humanline_lab.cli import main
from humanline_lab.config import ConfigError, config_from_dict, load_config
from humanline_lab.data import SortTask
from humanline_lab.experiments import evaluate, reward_source
from humanline_lab.policy import Policy

QUICK = {"objective": "dpo", "reward": "scored", "variant": "offline",
         "train": {"steps": 10, "batch_size": 4}, "eval": {"n_contexts": 64}}


def write_cfg(tmp_path, d, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(d))
    return str(p)


def test_invalid_variant_rejected(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {**QUICK, "variant": "semi-online"})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "variant" in capsys.readouterr().err


@pytest.mark.parametrize("bad", [
    {"objective": "ppo"},
    {"train": {"steps": 0}},
    {"loss": {"beta": -1}},
    {"mystery": 1},
    {"train": {"unknown_knob": 3}},
    {"variant": "offline", "train": {"sample_period": 4}},
])
def test_config_errors_exit_2(tmp_path, bad):
    cfg = write_cfg(tmp_path, {**QUICK, **bad})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_missing_and_malformed_config(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == 2
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    assert main(["train", "--config", str(p)]) == 2
    assert main(["train", "--out", str(tmp_path)]) == 2


def test_seed_must_be_u64(tmp_path):
    cfg = write_cfg(tmp_path, QUICK)
    with pytest.raises(SystemExit):
        main(["train", "--config", cfg, "--seed", "-1"])
    with pytest.raises(SystemExit):
        main(["train", "--config", cfg, "--seed", str(2**64)])


def test_presets_overlay_variant():
    d = {**QUICK, "presets": {"online": {"optimizer": {"lr": 0.3}}}}
    assert config_from_dict(d).optimizer.lr != 0.3
    assert config_from_dict(d).with_variant("online").optimizer.lr == 0.3


def test_set_overrides(tmp_path):
    cfg = load_config(write_cfg(tmp_path, QUICK), {"train": {"steps": 3}})
    assert cfg.train.steps == 3 and cfg.train.batch_size == 4
    with pytest.raises(ConfigError):
        load_config(write_cfg(tmp_path, QUICK), {"train": {"steps": "many"}})


def test_generate_data_is_deterministic(tmp_path):
    cfg = write_cfg(tmp_path, QUICK)
    for d in ("a", "b"):
        assert main(["generate-data", "--config", cfg, "--seed", "3", "--out",
                     str(tmp_path / d)]) == 0
    a = (tmp_path / "a" / "corpus_worse_seed3.jsonl").read_bytes()
    b = (tmp_path / "b" / "corpus_worse_seed3.jsonl").read_bytes()
    assert a == b and len(a.splitlines()) == 40
    man = json.loads((tmp_path / "a" / "corpus_worse_seed3.manifest.json").read_text())
    assert man["seed"] == 3 and man["record_count"] == 40


def test_train_outputs_and_determinism(tmp_path):
    cfg = write_cfg(tmp_path, QUICK)
    for d in ("a", "b"):
        assert main(["train", "--config", cfg, "--seed", "1", "--out", str(tmp_path / d)]) == 0
    for name in ("metrics_offline_seed1.jsonl", "policy_offline_seed1.json",
                 "corpus_worse_seed1.jsonl", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = [json.loads(l) for l in (tmp_path / "a" / "metrics_offline_seed1.jsonl").open()]
    assert len(rows) == 10 and rows[0]["variant"] == "offline" and rows[0]["seed"] == 1


def test_k_sweep_emits_five_histories(tmp_path):
    d = {**QUICK, "variant": "offline+humanline", "sweep": {"k": [1, 2, 4, 8, 16]}}
    assert main(["train", "--config", write_cfg(tmp_path, d), "--seed", "0",
                 "--out", str(tmp_path)]) == 0
    files = sorted(p.name for p in tmp_path.glob("metrics_*.jsonl"))
    assert files == sorted(f"metrics_offline+humanline_k{k}_seed0.jsonl" for k in (1, 2, 4, 8, 16))
    synced = {}
    for k in (1, 2, 4, 8, 16):
        rows = [json.loads(l) for l in (tmp_path / f"metrics_offline+humanline_k{k}_seed0.jsonl").open()]
        synced[k] = sum(r["synced"] for r in rows)
    assert synced == {1: 10, 2: 5, 4: 2, 8: 1, 16: 0}


def test_unknown_sweep_key(tmp_path):
    d = {**QUICK, "sweep": {"lr": [0.1]}}
    assert main(["train", "--config", write_cfg(tmp_path, d), "--out", str(tmp_path)]) == 2


def test_collapse_exit_3(tmp_path):
    d = {**QUICK, "train": {"steps": 10, "batch_size": 4, "eval_every": 1,
                            "collapse_patience": 1},
         "optimizer": {"lr": 5.0}, "loss": {"beta": 0.01},
         "data": {"sampler": "worse", "sampler_noise": 3.0}}
    assert main(["train", "--config", write_cfg(tmp_path, d), "--seed", "0",
                 "--out", str(tmp_path)]) == 3


def _fake_metrics(path, variant, seed, steps=4):
    with open(path, "w") as f:
        for s in range(1, steps + 1):
            f.write(json.dumps({"step": s, "variant": variant, "seed": seed, "loss": 1.0 / s,
                                "mean_reward": 0.1 * s, "synced": True, "kl": None}) + "\n")


def test_plot_data_fifteen_series(tmp_path):
    for v in ("offline", "offline+humanline", "online"):
        for s in range(5):
            _fake_metrics(tmp_path / f"metrics_{v}_seed{s}.jsonl", v, s)
    assert main(["plot-data", "--out", str(tmp_path)]) == 0
    with open(tmp_path / "series.csv") as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == cli.CSV_COLUMNS
    series = {(r[0], r[1]) for r in rows[1:] if r[3] == "mean_reward"}
    assert len(series) == 15
    assert {r[3] for r in rows[1:]} == {"loss", "mean_reward"}


def test_plot_data_empty_input(tmp_path):
    empty = tmp_path / "metrics_none_seed0.jsonl"
    empty.write_text("")
    assert main(["plot-data", str(empty), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "series.csv").read_text().strip() == ",".join(cli.CSV_COLUMNS)


def test_plot_data_malformed_line(tmp_path, capsys):
    p = tmp_path / "metrics_x_seed0.jsonl"
    _fake_metrics(p, "x", 0, 2)
    with open(p, "a") as f:
        f.write("{oops\n")
    assert main(["plot-data", str(p), "--out", str(tmp_path)]) == 2
    assert "metrics_x_seed0.jsonl:3" in capsys.readouterr().err


def test_eval_self_winrate_near_half(tmp_path):
    cfg = config_from_dict({**QUICK, "seeds": [0, 1, 2, 3]})
    p = Policy.load(_trained(tmp_path)[0])
    rep = evaluate(p, p, reward_source(cfg), cfg.task.contexts(), 2000, cfg.seeds)
    assert abs(rep.mean - 0.5) < 4 * 0.5 / np.sqrt(2000 * 4)


def test_winrate_symmetry(tmp_path):
    cfg = config_from_dict(QUICK)
    final, initial = map(Policy.load, _trained(tmp_path))
    rs = reward_source(cfg)
    ab = evaluate(final, initial, rs, cfg.task.contexts(), 500, [0, 1])
    ba = evaluate(initial, final, rs, cfg.task.contexts(), 500, [0, 1])
    # swapped roles share the prompts but not the samples, so symmetry holds in expectation
    assert ab.mean + ba.mean == pytest.approx(1.0, abs=0.06)


def _trained(tmp_path, steps=150):
    d = {**QUICK, "variant": "online", "objective": "grpo", "optimizer": {"lr": 0.1},
         "loss": {"beta": 0.01, "epsilon": 0.2}, "train": {"steps": steps, "batch_size": 8}}
    out = tmp_path / "run"
    assert main(["train", "--config", write_cfg(tmp_path, d), "--seed", "0",
                 "--out", str(out)]) == 0
    return out / "policy_online_seed0.json", out / "policy_initial_seed0.json"


def test_eval_cli_optimized_beats_initial(tmp_path):
    final, initial = _trained(tmp_path)
    cfg = write_cfg(tmp_path, {**QUICK, "seeds": [0, 1], "eval": {"n_contexts": 400}})
    assert main(["eval", "--config", cfg, "--checkpoint", str(final), "--baseline-checkpoint",
                 str(initial), "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "eval.json").read_text())
    assert rep["metric"] == "winrate" and rep["mean"] > 0.5
    assert len(rep["per_seed"]) == 2 and rep["stderr"] >= 0


def test_eval_missing_checkpoint(tmp_path):
    cfg = write_cfg(tmp_path, QUICK)
    assert main(["eval", "--config", cfg, "--checkpoint", str(tmp_path / "gone.json"),
                 "--baseline-checkpoint", str(tmp_path / "gone.json")]) == 2
    assert main(["eval", "--config", cfg]) == 2


def oracle_sorter(task: SortTask) -> Policy:
    """Bigram table that can only emit the sorted prompt (prompt-conditioned)."""
    p = Policy(task.vocab, task.contexts(), n=2, max_len=task.length + 1)
    p.logits[:] = -60.0
    for x in task.contexts():
        prev = task.vocab.bos
        for tok in task.target(x):
            s = p.context_index(x) * (task.vocab.size + 1) + prev
            p.logits[s, tok] = 60.0
            prev = tok
    return p


def test_oracle_sorter_pass_rate_one(tmp_path):
    task = SortTask()
    path = tmp_path / "oracle.json"
    oracle_sorter(task).save(path)
    cfg = write_cfg(tmp_path, {"reward": "verifiable", "seeds": [0, 1],
                               "eval": {"n_contexts": 200}})
    assert main(["eval", "--config", cfg, "--checkpoint", str(path), "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "eval.json").read_text())
    assert rep["metric"] == "pass_rate" and rep["per_seed"] == [1.0, 1.0]


@pytest.mark.slow
def test_verify_theory_exit_codes(tmp_path, monkeypatch, capsys):
    assert main(["verify-theory", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "theory.json").read_text())
    assert report and all(r["passed"] for r in report)

    good = verification.clip_agreement

    def corrupted(k=1e5, epsilon=0.2, n_tokens=100_000, seed=0, clamp=None):
        return good(k, epsilon, n_tokens, seed, clamp=(1 - epsilon, 1 + 2 * epsilon))

    monkeypatch.setattr(verification, "clip_agreement", corrupted)
    assert main(["verify-theory", "--out", str(tmp_path)]) == 4
    assert "[FAIL] large-k sampling equals clipping" in capsys.readouterr().out
