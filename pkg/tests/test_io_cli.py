import json

import numpy as np
import pytest
import yaml

from ocresnet import cli
from ocresnet.data import load_source
from ocresnet.errors import FormatError
from ocresnet.io import (
    EVAL_COLUMNS,
    Checkpoint,
    bounds_csv,
    checkpoint_bytes,
    load_checkpoint,
    parse_checkpoint,
    read_bounds_csv,
    read_trajectory_csv,
    save_checkpoint,
    trajectory_csv,
)
from ocresnet.resnet import NetworkConfig, forward_full, loss_fn, random_weights
from ocresnet.subresnet import child_config, lift
from ocresnet.training import TrainConfig, evaluate_trajectory

BLOBS = "blobs://3/20/6/0.4/7"


def _ckpt(rng, cfg=None, **kw):
    cfg = cfg or NetworkConfig(widths=(4, 4, 5), input_dim=6, num_outputs=3, exit_mode="extra_params")
    tc = TrainConfig(gamma=0.02, lam=1e-4, epochs=3, seed=5)
    return Checkpoint(random_weights(cfg, rng), tc, {"scheme": "none"}, 5, 3, kw)


class TestCheckpoint:
    def test_byte_identity(self, rng, tmp_path):
        save_checkpoint(tmp_path / "a.ckpt", _ckpt(rng, note="x"))
        raw = (tmp_path / "a.ckpt").read_bytes()
        again = load_checkpoint(tmp_path / "a.ckpt")
        assert checkpoint_bytes(again) == raw
        assert again.meta == {"note": "x"} and again.epoch == 3
        assert again.train_config == TrainConfig(gamma=0.02, lam=1e-4, epochs=3, seed=5)

    def test_payload_order(self, rng):
        ck = _ckpt(rng)
        raw = checkpoint_bytes(ck)
        payload = np.frombuffer(raw[-8 * ck.config.num_params():], dtype="<f8")
        assert np.array_equal(payload[:24], ck.weights["V.W"].ravel())
        names = list(ck.config.param_shapes())
        assert names.index("F1.b2") < names.index("S1.W") < names.index("H.W") < names.index("E0.S1.W")

    def test_bad_magic(self):
        with pytest.raises(FormatError, match="magic"):
            parse_checkpoint(b"NOPE" + bytes(20))

    def test_truncated(self, rng):
        raw = checkpoint_bytes(_ckpt(rng))
        with pytest.raises(FormatError):
            parse_checkpoint(raw[:-8])

    def test_count_inconsistent(self, rng):
        raw = bytearray(checkpoint_bytes(_ckpt(rng)))
        raw[raw.index(b'"param_count":') + 14] = ord("9")
        with pytest.raises(FormatError):
            parse_checkpoint(bytes(raw))


class TestCsv:
    def test_trajectory_self_parse(self, rng):
        w = random_weights(NetworkConfig(widths=(4, 4, 5), input_dim=6, num_outputs=3), rng)
        ds = load_source(BLOBS, "train")
        recs = [evaluate_trajectory(w, ds, epoch=e) for e in (0, 1)]
        for with_epoch in (False, True):
            text = trajectory_csv(recs, with_epoch)
            back = read_trajectory_csv(text)
            assert [r.losses for r in back] == [r.losses for r in recs]
            assert [r.output_residual_norm for r in back] == [r.output_residual_norm for r in recs]
            assert trajectory_csv(back, with_epoch) == text
        lines = trajectory_csv(recs[:1]).splitlines()
        assert lines[0] == ",".join(EVAL_COLUMNS)
        assert lines[-1].endswith(",,") and len(lines) == 1 + 3

    def test_bad_header(self):
        with pytest.raises(FormatError):
            read_trajectory_csv("a,b\n1,2\n")

    def test_bounds_self_parse(self, rng):
        from ocresnet.bounds import audit_bounds
        parent = NetworkConfig.homogeneous(3, 4, 6, 3)
        ds = load_source(BLOBS, "train")
        reports = audit_bounds(random_weights(parent, rng), [random_weights(child_config(parent, 1), rng)],
                               ds, 0.02, 1e-4)
        rows = read_bounds_csv(bounds_csv(reports))
        assert rows == [r.to_dict() for r in reports]


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def write_config(tmp_path, **overrides):
    cfg = {
        "dataset": BLOBS,
        "network": {"depth": 3, "width": 8},
        "train": {"gamma": 0.02, "lambda": 1e-4, "seed": 1, "epochs": 4, "batch_size": 16, "lr": 0.02},
        "out_dir": str(tmp_path / "run"),
        "eval_every": 2,
    }
    for key, value in overrides.items():
        section, _, field = key.partition(".")
        if field:
            cfg[section][field] = value
        else:
            cfg[section] = value
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


class TestTrainCommand:
    def test_outputs(self, tmp_path, capsys):
        code, out, _ = run(["train", "--config", str(write_config(tmp_path))], capsys)
        assert code == 0 and "stage cost" in out
        d = tmp_path / "run"
        assert {p.name for p in d.iterdir()} >= {"final.ckpt", "best.ckpt", "trajectory.csv", "run.json"}
        recs = read_trajectory_csv((d / "trajectory.csv").read_text())
        assert [(r.epoch, r.split) for r in recs] == [(1, "train"), (1, "test"), (3, "train"), (3, "test")]
        assert all(len(r.losses) == 4 for r in recs)
        assert load_checkpoint(d / "final.ckpt").meta["training"] == "stage cost"

    def test_standard_label(self, tmp_path, capsys):
        code, out, _ = run(["train", "--config", str(write_config(tmp_path, **{"train.gamma": 0.0}))], capsys)
        assert code == 0 and "standard training" in out
        assert json.loads((tmp_path / "run" / "run.json").read_text())["label"] == "standard training"

    def test_reproducible(self, tmp_path, capsys):
        path = write_config(tmp_path)
        run(["train", "--config", str(path), "--out-dir", str(tmp_path / "a")], capsys)
        run(["train", "--config", str(path), "--out-dir", str(tmp_path / "b")], capsys)
        assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()

    def test_missing_dataset(self, tmp_path, capsys):
        path = write_config(tmp_path, dataset=f"idx://{tmp_path / 'absent'}")
        code, _, err = run(["train", "--config", str(path)], capsys)
        assert code == 2 and "not found" in err
        assert not (tmp_path / "run").exists()

    @pytest.mark.parametrize("override,needle", [
        ({"train": {"gamma": 0.02, "seed": 1, "epochs": 1}}, "train.lambda"),
        ({"network.depht": 3}, "network.depht"),
        ({"train.gamma": -1}, "train.gamma"),
        ({"network": {"depth": 2}}, "depth and width"),
    ])
    def test_field_level_errors(self, tmp_path, capsys, override, needle):
        code, _, err = run(["train", "--config", str(write_config(tmp_path, **override))], capsys)
        assert code == 2 and needle in err

    def test_invalid_yaml(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text("dataset: [unclosed\n")
        assert run(["train", "--config", str(path)], capsys)[0] == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self, tmp_path, capsys):
        path = write_config(tmp_path, **{"train.lr": 1e8})
        code, _, err = run(["train", "--config", str(path)], capsys)
        assert code == 3 and "epoch" in err and "batch" in err

    def test_missing_config_file(self, tmp_path, capsys):
        assert run(["train", "--config", str(tmp_path / "nope.yaml")], capsys)[0] == 4


@pytest.fixture
def trained(tmp_path, capsys):
    run(["train", "--config", str(write_config(tmp_path))], capsys)
    return tmp_path / "run" / "final.ckpt"


class TestEvalCommand:
    def test_deterministic_and_direct(self, trained, tmp_path, capsys):
        code, a, err = run(["eval", "--checkpoint", str(trained), "--dataset", BLOBS], capsys)
        _, b, _ = run(["eval", "--checkpoint", str(trained), "--dataset", BLOBS], capsys)
        assert code == 0 and a == b and "accuracy" in err
        rec = read_trajectory_csv(a)[0]
        ck = load_checkpoint(trained)
        ds = load_source(BLOBS, "test")
        direct = loss_fn(forward_full(ds.features, ck.weights, ck.config).output, ds.labels, ck.config).item()
        assert rec.losses[-1] == direct

    def test_out_dir(self, trained, tmp_path, capsys):
        code, _, _ = run(["eval", "--checkpoint", str(trained), "--dataset", BLOBS, "--split", "train",
                          "--out-dir", str(tmp_path / "ev")], capsys)
        assert code == 0 and (tmp_path / "ev" / "eval_train.csv").exists()

    def test_lifted_child_residuals(self, tmp_path, capsys):
        parent = NetworkConfig.homogeneous(5, 4, 6, 3)
        child = random_weights(child_config(parent, 2), np.random.default_rng(0))
        save_checkpoint(tmp_path / "l.ckpt", Checkpoint(lift(child, parent)))
        code, out, _ = run(["eval", "--checkpoint", str(tmp_path / "l.ckpt"), "--dataset", BLOBS], capsys)
        assert code == 0
        assert read_trajectory_csv(out)[0].output_residual_norm[2:] == [0.0, 0.0, 0.0]

    def test_dimension_mismatch(self, trained, capsys):
        code, _, err = run(["eval", "--checkpoint", str(trained), "--dataset", "blobs://3/5/9/0.4/7"], capsys)
        assert code == 2 and "9" in err and "6" in err

    def test_corrupt_checkpoint(self, tmp_path, capsys):
        (tmp_path / "x.ckpt").write_bytes(b"garbage")
        assert run(["eval", "--checkpoint", str(tmp_path / "x.ckpt"), "--dataset", BLOBS], capsys)[0] == 4


class TestFineTune:
    def _child(self, trained, tmp_path, capsys):
        run(["prune", "--checkpoint", str(trained), "--depth", "1", "--out-dir", str(tmp_path / "p")], capsys)
        return tmp_path / "p" / "subresnet_1.ckpt"

    def test_zero_epochs_keeps_weights(self, trained, tmp_path, capsys):
        child = self._child(trained, tmp_path, capsys)
        path = write_config(tmp_path, network=None, **{"train.epochs": 0})
        code, _, _ = run(["train", "--config", str(path), "--init", str(child),
                          "--out-dir", str(tmp_path / "ft")], capsys)
        assert code == 0
        got, want = load_checkpoint(tmp_path / "ft" / "final.ckpt"), load_checkpoint(child)
        assert got.config == want.config
        assert got.weights.flat().tobytes() == want.weights.flat().tobytes()

    def test_short_fine_tune(self, trained, tmp_path, capsys):
        child = self._child(trained, tmp_path, capsys)
        path = write_config(tmp_path, network=None, **{"train.epochs": 2})
        code, out, _ = run(["train", "--config", str(path), "--init", str(child),
                            "--out-dir", str(tmp_path / "ft")], capsys)
        assert code == 0
        ft = load_checkpoint(tmp_path / "ft" / "final.ckpt")
        assert ft.config == load_checkpoint(child).config and ft.meta["init"] == str(child)

    def test_network_section_conflicts(self, trained, tmp_path, capsys):
        code, _, err = run(["train", "--config", str(write_config(tmp_path)), "--init", str(trained)], capsys)
        assert code == 2 and "--init" in err

    def test_network_required_without_init(self, tmp_path, capsys):
        code, _, err = run(["train", "--config", str(write_config(tmp_path, network=None))], capsys)
        assert code == 2 and "network" in err


class TestPruneCommand:
    def test_depth_and_counts(self, trained, tmp_path, capsys):
        code, out, _ = run(["prune", "--checkpoint", str(trained), "--depth", "1", "--dataset", BLOBS,
                            "--out-dir", str(tmp_path / "p")], capsys)
        assert code == 0 and "SubResNet-1" in out
        report = json.loads((tmp_path / "p" / "prune_1.json").read_text())
        # stem 6*8+8, one block 2*(8*8+8), head 8*3+3
        assert report["child_params"] == 56 + 144 + 27
        assert load_checkpoint(tmp_path / "p" / "subresnet_1.ckpt").config.num_params() == 227

    def test_full_depth_same_accuracy(self, trained, tmp_path, capsys):
        run(["prune", "--checkpoint", str(trained), "--depth", "3", "--dataset", BLOBS], capsys)
        report = json.loads((trained.parent / "prune_3.json").read_text())
        assert report["child_test_accuracy"] == report["parent_test_accuracy"]

    def test_auto_flat(self, tmp_path, capsys):
        cfg = NetworkConfig.homogeneous(4, 4, 6, 3)
        w = random_weights(cfg, np.random.default_rng(1)).zero_residuals(0)
        save_checkpoint(tmp_path / "flat.ckpt", Checkpoint(w))
        code, out, _ = run(["prune", "--checkpoint", str(tmp_path / "flat.ckpt"), "--auto",
                            "--dataset", BLOBS], capsys)
        assert code == 0 and "SubResNet-0" in out

    def test_depth_too_large(self, trained, capsys):
        code, _, err = run(["prune", "--checkpoint", str(trained), "--depth", "7"], capsys)
        assert code == 2 and "outside" in err

    def test_staged_warning(self, tmp_path, capsys):
        cfg = NetworkConfig(widths=(4, 4, 6), input_dim=6, num_outputs=3)
        save_checkpoint(tmp_path / "s.ckpt", Checkpoint(random_weights(cfg, np.random.default_rng(2))))
        _, out, _ = run(["prune", "--checkpoint", str(tmp_path / "s.ckpt"), "--depth", "1"], capsys)
        assert "warning" in out


class TestBoundsCommand:
    def test_lifted_parent(self, tmp_path, capsys):
        parent = NetworkConfig.homogeneous(4, 4, 6, 3)
        rng = np.random.default_rng(3)
        children = {m: random_weights(child_config(parent, m), rng, -0.5, 0.5) for m in (2, 0)}
        for m, c in children.items():
            save_checkpoint(tmp_path / f"c{m}.ckpt", Checkpoint(c))
        save_checkpoint(tmp_path / "p.ckpt", Checkpoint(lift(children[2], parent)))
        code, out, _ = run(["bounds", "--checkpoint", str(tmp_path / "p.ckpt"),
                            "--child", str(tmp_path / "c2.ckpt"), "--child", str(tmp_path / "c0.ckpt"),
                            "--dataset", BLOBS, "--gamma", "0.02", "--lambda", "1e-4"], capsys)
        assert code == 0
        rows = read_bounds_csv((tmp_path / "bounds.csv").read_text())
        assert [r["M"] for r in rows] == [0, 2]
        assert all(r["feasible_ok"] for r in rows)
        assert abs(rows[1]["gap_true"]) < 1e-12
        assert (tmp_path / "bounds.txt").read_text().strip() == out.strip()

    def test_needs_gamma(self, tmp_path, capsys):
        parent = NetworkConfig.homogeneous(2, 4, 6, 3)
        rng = np.random.default_rng(3)
        save_checkpoint(tmp_path / "p.ckpt", Checkpoint(random_weights(parent, rng)))
        save_checkpoint(tmp_path / "c.ckpt", Checkpoint(random_weights(child_config(parent, 1), rng)))
        code, _, err = run(["bounds", "--checkpoint", str(tmp_path / "p.ckpt"), "--child",
                            str(tmp_path / "c.ckpt"), "--dataset", BLOBS], capsys)
        assert code == 2 and "--gamma" in err

    def test_non_subresnet_child(self, trained, tmp_path, capsys):
        stranger = NetworkConfig(widths=(5, 5), input_dim=6, num_outputs=3)
        save_checkpoint(tmp_path / "s.ckpt", Checkpoint(random_weights(stranger, np.random.default_rng(0))))
        code, _, err = run(["bounds", "--checkpoint", str(trained), "--child", str(tmp_path / "s.ckpt"),
                            "--dataset", BLOBS], capsys)
        assert code == 2 and "SubResNet" in err
