import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from mgflow import data as D
from mgflow.cli import RunConfig, main
from mgflow.flow import FlowModel, load_checkpoint, save_checkpoint
from mgflow.scoring import PldaModel, TrialList, read_scores

EXPERIMENTS = Path(__file__).resolve().parent.parent / "experiments"


def write_config(path, **overrides):
    cfg = {
        "output": str(path.parent / "runs"),
        "data": {"synth": {"kind": "warped-speakers", "dim": 3, "n_classes": 4, "samples_per_class": 6, "seed": 0}},
        "model": {"blocks": 2},
        "variants": ["DNF-N-L"],
        "train": {"batch_size": 8, "samples_per_class": 2, "max_steps": 5, "log_interval": 5},
    }
    cfg.update(overrides)
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_synth_gmm(tmp_path):
    out = tmp_path / "g.txt"
    assert main(["synth", "--kind", "gmm", "--classes", "3", "--dim", "2", "--n", "5000", "--seed", "7",
                 "--out", str(out)]) == 0
    assert len(D.load(out)) == 15000


def test_synth_warped_writes_sidecar(tmp_path):
    out = tmp_path / "w.bin"
    assert main(["synth", "--kind", "warped-speakers", "--classes", "50", "--dim", "32", "--n", "4",
                 "--seed", "0", "--out", str(out), "--binary"]) == 0
    s = D.load(out)
    assert len(s) == 200 and s.dim == 32
    warp = D.Warp.from_arrays(dict(np.load(str(out) + ".warp.npz")))
    assert len(warp.layers) == 2


def test_synth_without_seed_is_usage_error(tmp_path):
    assert main(["synth", "--kind", "gmm", "--classes", "3", "--dim", "2", "--n", "5", "--out",
                 str(tmp_path / "x")]) == 2


def test_train_writes_checkpoint_with_spec(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", variants=["DNF-N-L", "DNF-G-G"])
    assert main(["train", str(cfg)]) == 0
    nl = load_checkpoint(tmp_path / "runs" / "DNF-N-L" / "checkpoint.npz").objective
    assert nl["within"] == "ML" and nl["between"] is None
    gg = load_checkpoint(tmp_path / "runs" / "DNF-G-G" / "checkpoint.npz").objective
    assert gg["within"] == "MG" and gg["between"] == "MG" and gg["include_entropy"] is True
    header = (tmp_path / "runs" / "DNF-G-G" / "trainlog.csv").read_text().splitlines()[0]
    assert header == "step,objective,prior_term,entropy_term,R_len,R_ang,diverged"


def test_train_divergence_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", variants=["NF-ML"],
                       train={"batch_size": 8, "max_steps": 5, "divergence_threshold": 1.0})
    assert main(["train", str(cfg)]) == 3
    assert "DIVERGED" in capsys.readouterr().err


@pytest.mark.parametrize("bad", [{"bogus": 1}, {"variants": ["DNF-Q-Q"]}, {"train": {"nope": 1}},
                                 {"data": {"synth": {"kind": "gmm", "dim": 2, "n_classes": 2,
                                                     "samples_per_class": 3, "seed": 0}, "extra": 1}}])
def test_bad_configs_are_usage_errors(tmp_path, bad):
    assert main(["train", str(write_config(tmp_path / "c.yaml", **bad))]) == 2


def test_transform_identity_and_round_trip(tmp_path):
    store = D.synth_gmm(D.SynthSpec("gmm", 3, 2, 10, seed=0))
    D.save(store, tmp_path / "x.txt")
    save_checkpoint(tmp_path / "id.npz", FlowModel(3, 2), None)
    assert main(["transform", "--checkpoint", str(tmp_path / "id.npz"), "--input", str(tmp_path / "x.txt"),
                 "--output", str(tmp_path / "z.txt")]) == 0
    z = D.load(tmp_path / "z.txt")
    np.testing.assert_array_equal(z.vectors, store.vectors[:, ::-1])
    assert list(z.labels) == list(store.labels)

    flow = FlowModel(3, 3)
    rng = np.random.default_rng(0)
    for blk in flow.blocks:
        for k in blk.params:
            blk.params[k] = blk.params[k] + 0.1 * rng.standard_normal(blk.params[k].shape)
    save_checkpoint(tmp_path / "f.npz", flow, None)
    args = ["--checkpoint", str(tmp_path / "f.npz")]
    assert main(["transform", *args, "--input", str(tmp_path / "x.txt"), "--output", str(tmp_path / "z2.txt")]) == 0
    assert main(["transform", *args, "--input", str(tmp_path / "z2.txt"), "--output", str(tmp_path / "x2.txt"),
                 "--generate"]) == 0
    assert np.max(np.abs(D.load(tmp_path / "x2.txt").vectors - store.vectors)) < 1e-4


def test_transform_dimension_mismatch(tmp_path):
    D.save(D.synth_gmm(D.SynthSpec("gmm", 2, 2, 3, seed=0)), tmp_path / "x.txt")
    save_checkpoint(tmp_path / "id.npz", FlowModel(3, 1), None)
    assert main(["transform", "--checkpoint", str(tmp_path / "id.npz"), "--input", str(tmp_path / "x.txt"),
                 "--output", str(tmp_path / "z.txt")]) == 4


def test_diagnose_outputs(tmp_path):
    D.save(D.synth_gmm(D.SynthSpec("gmm", 4, 3, 20, seed=0)), tmp_path / "x.txt")
    assert main(["diagnose", str(tmp_path / "x.txt"), "--out-dir", str(tmp_path / "d")]) == 0
    for name in ("gauss_report.csv", "between_variation.csv", "within_variation.csv", "summary.json"):
        assert (tmp_path / "d" / name).exists()
    assert json.loads((tmp_path / "d" / "summary.json").read_text())["GaussReport"]["n_classes"] == 3


def test_score_and_eval(tmp_path, capsys):
    store = D.VectorStore(np.array([[1.0, 2.0], [1.0, 2.0], [-2.0, 1.0]]), ["a", "a", "b"], ["u", "v", "w"])
    D.save(store, tmp_path / "s.txt")
    trials = TrialList.all_pairs(store.ids, store.labels)
    trials.write(tmp_path / "t.txt")
    assert main(["score", "--backend", "cosine", "--trials", str(tmp_path / "t.txt"), "--store",
                 str(tmp_path / "s.txt"), "--out", str(tmp_path / "cos.txt")]) == 0
    scores = read_scores(tmp_path / "cos.txt")
    assert len(scores) == len(trials) and scores[("u", "v")] == pytest.approx(1.0)

    PldaModel(np.zeros(2), np.zeros((2, 2)), np.eye(2)).save(tmp_path / "p.npz")
    assert main(["score", "--backend", "plda", "--trials", str(tmp_path / "t.txt"), "--store",
                 str(tmp_path / "s.txt"), "--plda-model", str(tmp_path / "p.npz"), "--out", str(tmp_path / "p.txt")]) == 0
    assert all(v == 0.0 for v in read_scores(tmp_path / "p.txt").values())

    capsys.readouterr()
    assert main(["eval", "--scores", str(tmp_path / "cos.txt"), "--trials", str(tmp_path / "t.txt")]) == 0
    assert json.loads(capsys.readouterr().out)["eer_percent"] == 0.0
    assert main(["eval", "--scores", str(tmp_path / "p.txt"), "--trials", str(tmp_path / "t.txt")]) == 0
    assert json.loads(capsys.readouterr().out)["eer_percent"] == 50.0


def test_score_unknown_id_is_data_error(tmp_path):
    D.save(D.VectorStore(np.eye(2), ["a", "b"], ["u", "v"]), tmp_path / "s.txt")
    (tmp_path / "t.txt").write_text("u ghost target\n")
    assert main(["score", "--backend", "cosine", "--trials", str(tmp_path / "t.txt"), "--store",
                 str(tmp_path / "s.txt"), "--out", str(tmp_path / "o.txt")]) == 4


def test_missing_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 2


@pytest.mark.parametrize("name", ["fig8_simulation", "fig8_small_sample", "table2_gaussianality",
                                  "table3_verification", "variant_sweep"])
def test_experiment_configs_parse(name):
    cfg = RunConfig.load(EXPERIMENTS / f"{name}.yaml")
    assert cfg.variants
