"""INI config parsing and the batch CLI, end to end on a tiny run."""

import json
import os
import pickle

import numpy as np
import pytest

from trajdistill import toydata
from trajdistill.cli import main
from trajdistill.config import parse_config
from trajdistill.data import (
    init_synthetic,
    load_dataset,
    save_raw_tensor,
    save_synthetic,
)
from trajdistill.engine import Distiller
from trajdistill.exceptions import ConfigError
from trajdistill.models import ModelSpec, param_count
from trajdistill.trajectories import TrainHyper, TrajectoryBuffer, load_buffer, save_buffer

# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

MINIMAL = """\
[dataset]
format = raw_tensor
train_path = train.rtd
"""


def _write(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_minimal_config_defaults(tmp_path):
    cfg = parse_config(_write(tmp_path, MINIMAL))
    assert cfg["dataset"]["format"] == "raw_tensor"
    assert cfg["model"]["arch"] == "mlp"
    assert cfg["distill"]["iterations"] == 2000
    assert cfg["run"]["threads"] == 1
    assert cfg.image_shape is None


def test_typed_values(tmp_path):
    text = MINIMAL + """
[distill]
learn_student_lr = no
beta2 = 0.5
max_step = 7

[buffer]
epochs = 9

[run]
seed = 11
"""
    cfg = parse_config(_write(tmp_path, text))
    assert cfg["distill"]["learn_student_lr"] is False
    assert cfg["distill"]["beta2"] == 0.5
    assert isinstance(cfg["distill"]["max_step"], int)
    assert cfg["run"]["seed"] == 11


def test_hash_is_stable_and_sensitive(tmp_path):
    path = _write(tmp_path, MINIMAL)
    h1 = parse_config(path).config_hash
    h2 = parse_config(path).config_hash
    assert h1 == h2
    assert len(h1) == 12
    int(h1, 16)  # hex digest prefix
    h3 = parse_config(path, {"run.seed": "1"}).config_hash
    assert h3 != h1


def test_unknown_section(tmp_path):
    with pytest.raises(ConfigError, match=r"\[mystery\]"):
        parse_config(_write(tmp_path, MINIMAL + "\n[mystery]\nx = 1\n"))


def test_unknown_key(tmp_path):
    with pytest.raises(ConfigError, match="model.wat"):
        parse_config(_write(tmp_path, MINIMAL + "\n[model]\nwat = 3\n"))


def test_missing_required(tmp_path):
    with pytest.raises(ConfigError, match="dataset.train_path"):
        parse_config(_write(tmp_path, "[dataset]\nformat = raw_tensor\n"))


def test_bad_int(tmp_path):
    with pytest.raises(ConfigError, match="buffer.epochs"):
        parse_config(_write(tmp_path, MINIMAL + "\n[buffer]\nepochs = ten\n"))


def test_bad_bool(tmp_path):
    with pytest.raises(ConfigError, match="not a boolean"):
        parse_config(
            _write(tmp_path, MINIMAL + "\n[distill]\nlearn_student_lr = maybe\n"))


def test_image_shape_parsing(tmp_path):
    text = MINIMAL.replace("raw_tensor", "csv") + "image_shape = 1x8x8\n"
    cfg = parse_config(_write(tmp_path, text))
    assert cfg.image_shape == (1, 8, 8)


def test_csv_needs_shape(tmp_path):
    with pytest.raises(ConfigError, match="image_shape"):
        parse_config(_write(tmp_path, MINIMAL.replace("raw_tensor", "csv")))


def test_bad_image_shape(tmp_path):
    text = MINIMAL.replace("raw_tensor", "csv") + "image_shape = 1x8\n"
    with pytest.raises(ConfigError, match="CxHxW"):
        parse_config(_write(tmp_path, text))


def test_max_step_cross_check(tmp_path):
    text = MINIMAL + "\n[buffer]\nepochs = 5\n\n[distill]\nmax_step = 6\n"
    with pytest.raises(ConfigError, match="max_step"):
        parse_config(_write(tmp_path, text))
    # an explicit stride decouples snapshot count from epochs
    with_stride = MINIMAL + "\n[buffer]\nepochs = 5\nsnapshot_stride = 1\n\n[distill]\nmax_step = 6\n"
    parse_config(_write(tmp_path, with_stride, "b.ini"))


def test_constructor_checks_surface_as_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="learning rates"):
        parse_config(_write(tmp_path, MINIMAL + "\n[distill]\nimage_lr = -1\n"))
    with pytest.raises(ConfigError, match="ipc"):
        parse_config(_write(tmp_path, MINIMAL + "\n[distill]\nipc = 3\n", "d.ini"))


def test_unknown_eval_arch(tmp_path):
    with pytest.raises(ConfigError, match="resnet"):
        parse_config(_write(tmp_path, MINIMAL + "\n[eval]\narchs = mlp, resnet\n"))


def test_eval_archs_defaults_to_model(tmp_path):
    cfg = parse_config(_write(tmp_path, MINIMAL + "\n[model]\narch = lenet_like\n"))
    assert cfg.eval_archs() == ["lenet_like"]
    cfg2 = parse_config(
        _write(tmp_path, MINIMAL + "\n[eval]\narchs = mlp, convnet_d\n", "e.ini"))
    assert cfg2.eval_archs() == ["mlp", "convnet_d"]


def test_helper_objects(tmp_path):
    text = MINIMAL + """
[buffer]
lr = 0.05
epochs = 12

[augment]
transforms = flip, brightness

[run]
seed = 9
"""
    cfg = parse_config(_write(tmp_path, text))
    hyper = cfg.train_hyper()
    assert hyper.lr == 0.05 and hyper.epochs == 12
    dcfg = cfg.distill_config()
    assert dcfg.iterations == 2000 and dcfg.max_step == 10
    pol = cfg.augment_policy()
    assert pol.transforms == ("flip", "brightness")
    assert pol.seed == 9


def test_unknown_override(tmp_path):
    path = _write(tmp_path, MINIMAL)
    with pytest.raises(ConfigError, match="unknown override"):
        parse_config(path, {"run.nope": "1"})


def test_overrides_apply(tmp_path):
    cfg = parse_config(_write(tmp_path, MINIMAL),
                       {"run.seed": "7", "run.out_dir": "elsewhere"})
    assert cfg["run"]["seed"] == 7
    assert cfg["run"]["out_dir"] == "elsewhere"


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        parse_config(str(tmp_path / "absent.ini"))


# ---------------------------------------------------------------------------
# CLI pipeline
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Toy data on disk plus a trained buffer, shared across CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    train, test = toydata.make_splits(n_train=120, n_test=60, classes=3,
                                      size=8, seed=0)
    save_raw_tensor(train, str(root / "train.rtd"))
    save_raw_tensor(test, str(root / "test.rtd"))
    cfg_path = str(root / "base.ini")
    with open(cfg_path, "w") as f:
        f.write(_pipeline_ini(root, root / "out"))
    rc = main(["buffer", "--config", cfg_path])
    assert rc == 0
    return root


def _pipeline_ini(root, out_dir) -> str:
    return f"""\
[dataset]
format = raw_tensor
train_path = {root / 'train.rtd'}
test_path = {root / 'test.rtd'}

[model]
arch = mlp
depth = 1
width = 16

[buffer]
experts = 2
epochs = 6
lr = 0.05
momentum = 0.5
batch_size = 64

[distill]
iterations = 12
max_step = 4
student_lr = 0.05
image_lr = 0.5
image_momentum = 0.5
beta2 = 0.05
retrain_points = 1
ipc = 2
checkpoint_every = 4

[eval]
runs = 2
epochs = 30
lr = 0.05
momentum = 0.5

[run]
out_dir = {out_dir}
seed = 0
threads = 1
"""


def _config_for(workdir, name) -> str:
    """Pipeline config writing into its own output directory."""
    path = str(workdir / f"{name}.ini")
    with open(path, "w") as f:
        f.write(_pipeline_ini(workdir, workdir / name))
    return path


def test_pipeline_end_to_end(workdir):
    out = workdir / "out"
    tjb = str(out / "trajectories.tjb")
    assert os.path.exists(tjb)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["experts"] == 2 and manifest["steps"] == 6
    assert manifest["config_hash"] == parse_config(str(workdir / "base.ini")).config_hash

    cfg = _config_for(workdir, "e2e")
    assert main(["distill", tjb, "--config", cfg]) == 0
    out2 = workdir / "e2e"
    for name in ("metrics.csv", "checkpoint.pkl", "synthetic.synd"):
        assert (out2 / name).stat().st_size > 0

    assert main(["eval", str(out2 / "synthetic.synd"), "--config", cfg]) == 0
    report = (out2 / "report.csv").read_text()
    assert report.splitlines()[1] == "arch,run,seed,accuracy"
    assert len(report.splitlines()) == 2 + 2  # comment, header, 2 runs
    summary = (out2 / "summary.csv").read_text()
    assert "mlp,2," in summary

    rep = workdir / "e2e_report"
    assert main(["report", str(out2 / "metrics.csv"), "--out", str(rep)]) == 0
    for name in ("aggregate.csv", "match_loss.png", "mmd.png"):
        assert (rep / name).stat().st_size > 0


def test_distill_rerun_is_byte_identical(workdir):
    tjb = str(workdir / "out" / "trajectories.tjb")
    cfg = _config_for(workdir, "rerun")
    out = workdir / "rerun"
    assert main(["distill", tjb, "--config", cfg]) == 0
    first_metrics = (out / "metrics.csv").read_bytes()
    first_synd = (out / "synthetic.synd").read_bytes()
    for name in ("metrics.csv", "checkpoint.pkl", "synthetic.synd"):
        os.remove(out / name)
    assert main(["distill", tjb, "--config", cfg]) == 0
    assert (out / "metrics.csv").read_bytes() == first_metrics
    assert (out / "synthetic.synd").read_bytes() == first_synd


def test_resume_reproduces_uninterrupted_run(workdir):
    tjb = str(workdir / "out" / "trajectories.tjb")
    cfg_path = _config_for(workdir, "resume")
    out = workdir / "resume"
    assert main(["distill", tjb, "--config", cfg_path]) == 0
    reference = (out / "metrics.csv").read_bytes()
    ref_synd = (out / "synthetic.synd").read_bytes()

    # rebuild the run up to iteration 7 and plant its checkpoint, as if the
    # original process had died between a checkpoint and the next row
    cfg = parse_config(cfg_path)
    dcfg = cfg.distill_config()
    buf = load_buffer(tjb)
    train = load_dataset(cfg["dataset"]["train_path"], cfg["dataset"]["format"],
                         image_shape=cfg.image_shape)
    syn0 = init_synthetic(train, dcfg.ipc, dcfg.init, seed=cfg["run"]["seed"],
                          config_hash=cfg.config_hash)
    d = Distiller(buf, syn0, dcfg, policy=cfg.augment_policy(),
                  seed=cfg["run"]["seed"])
    d.run(7)
    with open(out / "checkpoint.pkl", "wb") as f:
        pickle.dump({"config_hash": cfg.config_hash, "rows": 7,
                     "state": d.state()}, f)
    with open(out / "metrics.csv", "a") as f:
        f.write("torn,partial,row")  # no trailing newline on purpose

    assert main(["distill", tjb, "--config", cfg_path, "--resume"]) == 0
    assert (out / "metrics.csv").read_bytes() == reference
    assert (out / "synthetic.synd").read_bytes() == ref_synd


def test_exit_code_usage_errors(workdir, tmp_path):
    bad_cfg = _write(tmp_path, MINIMAL + "\n[model]\nwat = 1\n")
    assert main(["buffer", "--config", bad_cfg]) == 2

    cfg = _config_for(workdir, "codes")
    assert main(["distill", str(workdir / "nope.tjb"), "--config", cfg]) == 2

    junk = tmp_path / "junk.synd"
    junk.write_bytes(b"JUNKJUNKJUNKJUNK")
    assert main(["eval", str(junk), "--config", cfg]) == 2

    # eval demands a held-out split
    no_test = _pipeline_ini(workdir, tmp_path / "nt").replace(
        f"test_path = {workdir / 'test.rtd'}\n", "")
    nt_cfg = _write(tmp_path, no_test, "nt.ini")
    train = load_dataset(str(workdir / "train.rtd"), "raw_tensor")
    syn = init_synthetic(train, 2, "from_real", seed=0)
    save_synthetic(syn, str(tmp_path / "ok.synd"))
    assert main(["eval", str(tmp_path / "ok.synd"), "--config", nt_cfg]) == 2


def test_exit_code_resume_errors(workdir, tmp_path):
    tjb = str(workdir / "out" / "trajectories.tjb")
    cfg = _config_for(workdir, "res_err")
    out = workdir / "res_err"
    assert main(["distill", tjb, "--config", cfg, "--resume"]) == 2  # nothing saved yet

    os.makedirs(out, exist_ok=True)
    with open(out / "checkpoint.pkl", "wb") as f:
        pickle.dump({"config_hash": "000000000000", "rows": 0, "state": {}}, f)
    assert main(["distill", tjb, "--config", cfg, "--resume"]) == 2


def test_exit_code_runtime_error(workdir, tmp_path):
    # a buffer whose experts never move makes the matching loss undefined
    spec = ModelSpec(arch="mlp", depth=1, width=16, input_shape=(1, 8, 8), classes=3)
    frozen = np.tile(np.linspace(-0.1, 0.1, param_count(spec), dtype=np.float32),
                     (1, 5, 1))
    buf = TrajectoryBuffer(spec, frozen, TrainHyper(epochs=4), stride_steps=1,
                           final_accs=[0.3])
    degen = str(tmp_path / "degen.tjb")
    save_buffer(buf, degen)
    cfg = _config_for(workdir, "degen_out")
    assert main(["distill", degen, "--config", cfg]) == 3


def test_missing_required_cli_arg():
    with pytest.raises(SystemExit):
        main(["buffer"])  # argparse enforces --config
