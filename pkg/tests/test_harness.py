import json

import numpy as np
import pandas as pd
import pytest

from densify import harness as H
from densify import ndtensor as nd
from densify.bilevel import BilevelConfig
from densify.cli import main
from densify.data import make_synthetic_shift
from densify.errors import ConfigError, DivergenceError
from densify.ndtensor import Tensor
from densify.nets import build_model

TINY_DATA = H.DatasetSpec(synthetic=dict(n_train=48, n_unlabeled=80, n_test=30, n_ood=12, D=6))
TINY_TRAIN = BilevelConfig(inner_steps=2, outer_steps=2)


def tiny(variant="ours", **kw):
    base = dict(train=TINY_TRAIN, dataset=TINY_DATA, seeds=[0, 1], B=8, hidden=8, heads=2)
    return H.make_config(variant, **(base | kw))


# ---------------------------------------------------------------- configs


@pytest.mark.parametrize("variant", sorted(H.PRESETS))
def test_presets_are_valid_and_run(variant):
    res = H.run_experiment(tiny(variant, seeds=[0]))
    assert len(res.mse) == 1 and np.isfinite(res.mse[0]) and not res.incomplete


def test_unknown_variant():
    with pytest.raises(ConfigError):
        H.make_config("dropout_ensemble")


@pytest.mark.parametrize(
    "variant,kw,msg",
    [
        ("mixup", dict(bilevel=True), "cannot be bilevel"),
        ("manifold_mixup", dict(bilevel=True), "mixer with parameters"),
        ("mlp", dict(use_context=True), "context needs a mixer"),
        ("ours", dict(K=0), "K >= 1"),
        ("mixup", dict(mvalid_mode="oracle"), "oracle"),
        ("ours", dict(seeds=[]), "seeds"),
        ("ours", dict(seeds=[1, 1]), "seeds"),
        ("ours", dict(l_mix=3), "l_mix"),
        ("ours", dict(mixer="gru"), "mixer"),
    ],
)
def test_inconsistent_flags_rejected(variant, kw, msg):
    with pytest.raises(ConfigError, match=msg):
        H.make_config(variant, **kw)


def test_json_roundtrip(tmp_path):
    cfg = tiny("manifold_mixup_bilevel", M=4, K=6)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    back = H.load_config(path)
    assert back == cfg and back.config_hash() == cfg.config_hash()


@pytest.mark.parametrize("where", ["top", "train", "dataset"])
def test_unknown_json_keys_rejected(where):
    d = tiny().to_dict()
    {"top": d, "train": d["train"], "dataset": d["dataset"]}[where]["surprise"] = 1
    with pytest.raises(ConfigError, match="surprise"):
        H.ExperimentConfig.from_dict(d)


CHANGES = [
    dict(M=4), dict(K=6), dict(B=16), dict(mixer="settransformer"), dict(mvalid_mode="oracle"),
    dict(l_mix=1), dict(dropout=0.25), dict(seeds=[0, 2]), dict(eval_every=5), dict(hidden=16),
    dict(train=BilevelConfig(inner_steps=3, outer_steps=2)), dict(dataset=H.DatasetSpec(synthetic=dict(shift=1.0))),
]  # fmt: skip


@pytest.mark.parametrize("change", CHANGES, ids=lambda c: next(iter(c)))
def test_hash_tracks_semantic_fields(change):
    cfg = tiny()
    assert cfg.replace(**change).config_hash() != cfg.config_hash()


def test_hash_ignores_label_and_is_stable():
    cfg = tiny()
    assert cfg.replace(variant="renamed").config_hash() == cfg.config_hash()
    assert tiny().config_hash() == cfg.config_hash()


# ---------------------------------------------------------------- runs


def test_rerun_is_bit_identical():
    a, b = H.run_experiment(tiny()), H.run_experiment(tiny())
    assert json.dumps(a.to_json(), sort_keys=True) == json.dumps(b.to_json(), sort_keys=True)


def test_parallel_matches_serial():
    a, b = H.run_experiment(tiny(), workers=1), H.run_experiment(tiny(), workers=2)
    assert a.to_json() == b.to_json()


def test_aggregates_recompute_from_seeds():
    res = H.run_experiment(tiny(seeds=[0, 1, 2]))
    assert res.mean == np.mean(res.mse)
    assert res.stderr == pytest.approx(np.std(res.mse, ddof=1) / np.sqrt(3), rel=1e-12)
    back = H.RunResult.from_json(json.loads(json.dumps(res.to_json())))
    assert back.mean == res.mean and back.stderr == res.stderr


def test_stderr_of_constant_and_single_values():
    assert H.RunResult("v", "d", "e", "h", [0, 1, 2], [1.0, 1.0, 1.0]).stderr == 0.0
    assert H.RunResult("v", "d", "e", "h", [0], [0.7]).stderr == 0.0


def test_failed_seeds_are_reported(monkeypatch):
    real = H.fit_seed

    def flaky(config, seed, holdout_fraction=0.0):
        if seed == 1:
            raise DivergenceError("inner", 3)
        return real(config, seed, holdout_fraction)

    monkeypatch.setattr(H, "fit_seed", flaky)
    res = H.run_experiment(tiny(seeds=[0, 1, 2]))
    assert res.seeds == [0, 2] and res.incomplete
    assert res.failures[0]["seed"] == 1 and "inner" in res.failures[0]["reason"]
    assert res.to_json()["incomplete"] is True


def test_exploding_learning_rate_fails_cleanly():
    with np.errstate(all="ignore"):
        res = H.run_experiment(tiny("mlp", seeds=[0], train=BilevelConfig(inner_steps=5, outer_steps=5, lr_theta=1e200)))
    assert res.mse == [] and len(res.failures) == 1 and np.isnan(res.mean)


def test_save_run(tmp_path):
    cfg = tiny()
    res = H.run_experiment(cfg)
    out = H.save_run(res, cfg, tmp_path / "run")
    assert json.loads((out / "result.json").read_text()) == json.loads(json.dumps(res.to_json()))
    assert H.load_config(out / "config.json") == cfg
    assert (out / "history_seed0.csv").exists()
    assert list(pd.read_csv(out / "per_seed.csv")["test_mse"]) == res.mse


# ---------------------------------------------------------------- ablations


def test_ablation_cells():
    cells = H.ablation_configs(tiny())
    assert len(cells) == 7
    flags = [(m, c, b, mode) for m, c, b, mode, _ in cells]
    assert flags.count(("mlp", False, False, "pseudo")) == 1
    for mx in ("deepsets", "settransformer"):
        assert (mx, True, False, "pseudo") in flags
        assert (mx, True, True, "oracle") in flags
        assert (mx, True, True, "pseudo") in flags


def test_ablation_two_is_mlp_with_outlier_exposure():
    base = tiny()
    (abl2,) = [cfg for m, *_, cfg in H.ablation_configs(base) if m == "mlp"]
    fields = {k: v for k, v in base.to_dict().items() if k not in H.PRESETS["mlp_oe"] and k != "variant"}
    reference = H.make_config("mlp_oe", **fields)
    assert abl2.config_hash() == reference.config_hash()


def test_ablation_grid_runs_and_renders():
    rows = H.run_ablation_grid(tiny(seeds=[0]))
    text = H.render_ablation(rows)
    assert len(rows) == 7 and len(text.splitlines()) == 9
    assert [r.mvalid for r in rows].count("real") == 2


# ---------------------------------------------------------------- search


def test_search_grid_enumeration_and_order():
    res = H.hyperparam_search(tiny(seeds=[0]))
    board = res.leaderboard
    assert len(board) == 9
    assert {(r["M"], r["K"]) for r in board} == {(m, k) for m in (1, 4, 8) for k in (1, 6, 8)}
    keys = [(r["val_mse"], r["M"], r["K"]) for r in board]
    assert keys == sorted(keys)
    assert all(r["val_mse"] == r["result"].val_mean for r in board)
    assert (res.best.M, res.best.K) == (board[0]["M"], board[0]["K"])


def test_search_without_mvalid_covers_M_only():
    res = H.hyperparam_search(tiny("mixup", seeds=[0]))
    assert [(r["M"], r["K"]) for r in sorted(res.leaderboard, key=lambda r: r["M"])] == [(1, 0), (4, 0), (8, 0)]


def test_search_tie_break(monkeypatch):
    def const(cfg, workers=1, holdout_fraction=0.0):
        return H.RunResult(cfg.variant, "d", "e", "h", [0], [1.0], val_mse=[0.5])

    monkeypatch.setattr(H, "run_experiment", const)
    res = H.hyperparam_search(tiny())
    assert (res.best.M, res.best.K) == (1, 1)
    assert [(r["M"], r["K"]) for r in res.leaderboard][:3] == [(1, 1), (1, 6), (1, 8)]


def test_search_uses_train_holdout_only():
    res = H.run_experiment(tiny(seeds=[0]), holdout_fraction=0.1)
    assert len(res.val_mse) == 1
    _, bundle, *_ = H.fit_seed(tiny(seeds=[0]), 0, 0.1)
    assert len(bundle.X_train) == 48 - 5


# ---------------------------------------------------------------- embeddings


@pytest.fixture(scope="module")
def trained():
    model, bundle, *_ = H.fit_seed(tiny(seeds=[0]), 0)
    return model, bundle


def test_embedding_blocks(tmp_path, trained):
    model, bundle = trained
    H.export_embeddings(model, bundle, tmp_path / "e.csv", np.random.default_rng(0), n_context=10)
    df = H.read_embeddings(tmp_path / "e.csv")
    assert list(df.columns) == ["block", "row_id"] + [f"z{j}" for j in range(8)]
    assert set(df.block) == set(H.BLOCKS)
    sizes = df.groupby("block").size()
    assert sizes["Z_joint"] == sizes["Z_input"] == 48 and sizes["Z_ood"] == 12
    z_in = df[df.block == "Z_input"].iloc[:, 2:].to_numpy()
    with nd.no_grad():
        _, z = model.forward_test(Tensor(bundle.X_train[:, None, :]))
    assert np.array_equal(z_in, z.data[:, 0])


def test_embedding_context_block_is_singleton_pass(tmp_path, trained):
    model, bundle = trained
    df = H.export_embeddings(model, bundle, tmp_path / "e.csv", np.random.default_rng(0), n_context=10)
    ctx = df[df.block == "Z_context"]
    np.testing.assert_array_equal(ctx.iloc[:, 2:].to_numpy(), model.embed(bundle.X_unlabeled[ctx.row_id]))


def test_joint_with_empty_context_equals_input(tmp_path, trained):
    model, bundle = trained
    df = H.export_embeddings(model, bundle, tmp_path / "e.csv", np.random.default_rng(0), n_context=0)
    a = df[df.block == "Z_joint"].iloc[:, 2:].to_numpy()
    b = df[df.block == "Z_input"].iloc[:, 2:].to_numpy()
    assert np.array_equal(a, b)


def test_input_block_ignores_pool(tmp_path, trained):
    import dataclasses

    model, bundle = trained
    other = dataclasses.replace(bundle, X_unlabeled=bundle.X_unlabeled[:5] + 1.0, oracle=None)
    a = H.export_embeddings(model, bundle, tmp_path / "a.csv", np.random.default_rng(0), n_context=4)
    b = H.export_embeddings(model, other, tmp_path / "b.csv", np.random.default_rng(9), n_context=4)
    assert np.array_equal(a[a.block == "Z_input"].iloc[:, 2:], b[b.block == "Z_input"].iloc[:, 2:])


def test_missing_ood_warns(tmp_path, trained):
    import dataclasses

    model, bundle = trained
    with pytest.warns(UserWarning, match="OOD"):
        df = H.export_embeddings(model, dataclasses.replace(bundle, X_ood=None), tmp_path / "e.csv", n_context=3)
    assert set(df.block) == {"Z_joint", "Z_input", "Z_context"}


def test_default_width_is_64(tmp_path):
    bundle = make_synthetic_shift(0, n_train=10, n_unlabeled=20, n_test=5, n_ood=4, D=5)
    df = H.export_embeddings(build_model(5), bundle, tmp_path / "e.csv", n_context=3)
    assert df.shape[1] == 2 + 64


# ---------------------------------------------------------------- reporting


def test_single_result_single_row():
    res = H.RunResult("ours", "synthetic", "count", "h", [0, 1], [0.5, 0.7])
    lines = H.report([res], references=False).splitlines()
    assert len(lines) == 3 and "0.600 ± 0.100" in lines[2]


def test_report_twins_recompute(tmp_path):
    results = [H.run_experiment(tiny(v, seeds=[0, 1, 2])) for v in ("ours", "mlp")]
    H.report(results, out_dir=tmp_path)
    table = pd.read_csv(tmp_path / "results.csv")
    raw = json.loads((tmp_path / "results.json").read_text())
    for row, rec in zip(table.itertuples(), raw):
        assert abs(row.mean - np.mean(rec["mse"])) < 1e-12
        assert abs(row.stderr - np.std(rec["mse"], ddof=1) / np.sqrt(3)) < 1e-12
    assert (tmp_path / "results.txt").read_text().startswith("method")


def test_report_cites_published_baselines():
    res = H.RunResult("ours", "DPP4", "count", "h", [0], [1.0])
    text = H.report([res])
    assert "Random Forest" in text and "1.473 ± 0.008*" in text
    assert H.PUBLISHED_MSE[("ours", "DPP4", "count")] == (0.984, 0.018)
    assert H.PUBLISHED_MSE[("mlp", "DPP4", "count")] == (1.393, 0.024)


def test_report_flags_incomplete():
    res = H.RunResult("ours", "x", "count", "h", [0], [1.0], failures=[{"seed": 1, "reason": "r"}])
    assert "!" in H.report([res])


# ---------------------------------------------------------------- file datasets


def _write_set(root, name, rng, n, labeled=True):
    cols = {"MOLECULE": [f"{name}{i}" for i in range(n)]}
    if labeled:
        cols["Act"] = rng.normal(5, 1, size=n)
    for j in range(4):
        cols[f"D_{j}"] = rng.integers(0, 3, size=n)
    pd.DataFrame(cols).to_csv(root / f"{name}_training_disguised.csv", index=False)
    return cols


def test_merck_directory_layout(tmp_path):
    rng = np.random.default_rng(0)
    for name in ("DPP4", "NK1", "HIVPROT", "CB1"):
        _write_set(tmp_path, name, rng, 40)
    pd.read_csv(tmp_path / "DPP4_training_disguised.csv").head(10).to_csv(tmp_path / "DPP4_test_disguised.csv", index=False)
    spec = H.merck_dataset(tmp_path, "DPP4", "bit", ood="NK1")
    assert spec.train.endswith("DPP4_training_disguised.csv") and spec.test.endswith("DPP4_test_disguised.csv")
    assert sorted(p.split("/")[-1][:3] for p in spec.unlabeled) == ["CB1", "HIV"]
    bundle = H.build_bundle(spec, seed=0)
    assert set(np.unique(bundle.X_train)) <= {0.0, 1.0}
    assert bundle.X_unlabeled.shape == (80, 4) and bundle.X_ood.shape == (40, 4)
    with pytest.raises(ConfigError):
        H.merck_dataset(tmp_path, "PGP")


def test_file_dataset_with_split(tmp_path):
    rng = np.random.default_rng(1)
    _write_set(tmp_path, "A", rng, 50)
    _write_set(tmp_path, "B", rng, 30, labeled=False)
    spec = H.DatasetSpec(source="files", name="A", train=str(tmp_path / "A_training_disguised.csv"),
                         unlabeled=[str(tmp_path / "B_training_disguised.csv")], test_fraction=0.2)  # fmt: skip
    a, b = H.build_bundle(spec, 0), H.build_bundle(spec, 7)
    assert len(a.X_test) == 10 and np.array_equal(a.X_test, b.X_test)
    res = H.run_experiment(tiny(dataset=spec, seeds=[0]))
    assert np.isfinite(res.mse[0])


# ---------------------------------------------------------------- CLI


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(tiny(seeds=[0]).to_dict()))
    return path


def test_cli_run_and_report(tmp_path, cfg_file, capsys):
    assert main(["run", "--config", str(cfg_file), "--out-dir", str(tmp_path / "r")]) == 0
    assert main(["run", "--config", str(cfg_file), "--variant", "mixup", "--M", "4", "--out-dir", str(tmp_path / "m")]) == 0
    cfg = H.load_config(tmp_path / "m" / "config.json")
    assert cfg.mixer == "linear" and cfg.l_mix == 1 and cfg.M == 4 and cfg.hidden == 8
    assert main(["report", str(tmp_path / "r" / "result.json"), str(tmp_path / "m" / "result.json")]) == 0
    out = capsys.readouterr().out
    assert "ours" in out and "mixup" in out


def test_cli_embed_and_search(tmp_path, cfg_file):
    assert main(["embed", "--config", str(cfg_file), "--out-dir", str(tmp_path / "e")]) == 0
    assert (tmp_path / "e" / "embeddings.csv").exists() and (tmp_path / "e" / "model.ckpt").exists()
    assert main(["search", "--config", str(cfg_file), "--out-dir", str(tmp_path / "s")]) == 0
    assert len(pd.read_csv(tmp_path / "s" / "leaderboard.csv")) == 9


def test_cli_ablate(tmp_path, cfg_file):
    assert main(["ablate", "--config", str(cfg_file), "--out-dir", str(tmp_path / "a")]) == 0
    assert len(json.loads((tmp_path / "a" / "results.json").read_text())) == 7


def test_cli_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"bogus": 1}')
    assert main(["run", "--config", str(bad)]) == 2
    assert main(["run", "--variant", "mixup", "--mixer", "none", "--out-dir", str(tmp_path)]) == 2
    assert "config error" in capsys.readouterr().err
