import csv

import numpy as np
import pytest
from filelock import FileLock

from strandrecon import io
from strandrecon.cli import EXIT_CONFIG, EXIT_CONTRACT, EXIT_OK, main
from strandrecon.optimize import LossWeights, view_loss
from strandrecon.pipeline import (ConfigError, ContractError, PipelineConfig, load_targets,
                                  make_targets, parse_config, save_targets, synthetic_rig, toy_aa,
                                  validate_config)
from strandrecon.strands import StrandSet, generate_synthetic_scene

TINY = """\
# small enough for a few seconds per stage
n_guides = 12
n_children = 60
views = 6
resolution = 96
width_mm = 1.0
guide_width_mm = 1.0
I_g = 20
I_c0 = 10
I_c1 = 10
mst_restarts = 10
"""


def test_config_defaults_and_round_trip():
    cfg = PipelineConfig()
    validate_config(cfg)
    back = parse_config(cfg.dumps(), env={})
    assert back == cfg
    odd = cfg.replace(thresholds=((0.5, 5.0), (3.0, 30.0)), lr=2.5e-4, style="curly")
    assert parse_config(odd.dumps(), env={}) == odd


def test_config_parsing():
    cfg = parse_config("lam = 10  # weaker\n\nviews=20\nthresholds = 1,10; 3,30\n", env={})
    assert cfg.lam == 10.0 and cfg.views == 20
    assert cfg.thresholds == ((1.0, 10.0), (3.0, 30.0))
    assert isinstance(cfg.views, int) and isinstance(cfg.lam, float)


@pytest.mark.parametrize("text", ["bogus = 1", "views 20", "views = twenty", "views = 0",
                                  "style = afro", "sor_omega = 2.0", "lr = -1",
                                  "thresholds = 1,2,3", "n_guides = 2"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text, env={})


def test_env_overrides():
    cfg = parse_config("seed = 3\nviews = 8", env={"STRANDRECON_SEED": "11",
                                                   "STRANDRECON_LAM": "7.5"})
    assert (cfg.seed, cfg.views, cfg.lam) == (11, 8, 7.5)
    with pytest.raises(ConfigError):
        parse_config("", env={"STRANDRECON_VIEWS": "x"})


@pytest.fixture(scope="module")
def scene():
    sc = generate_synthetic_scene("wavy", 8, 40, 0)
    cams = synthetic_rig(3, 64, sc.shell_radius)
    return sc, cams


def test_zero_strands_give_empty_masks(scene):
    sc, cams = scene
    empty = StrandSet(np.zeros((0, 3)), np.zeros(0, np.int64))
    for t in make_targets(empty, cams, sc.head):
        assert np.all(t.mask == 0.0) and not t.valid.any()
        assert np.all(np.isinf(t.depth))


def test_ground_truth_has_zero_image_losses(scene):
    sc, cams = scene
    targets = make_targets(sc.children, cams, sc.head, 1.0)
    w = LossWeights(w_stick=0.0)
    for t in targets:
        assert t.mask.max() > 0.5
        for kind in ("guide", "child"):
            total, terms, _ = view_loss(sc.children, t, w, kind, 1.0, with_grad=False)
            assert terms["mask"] == 0.0 and terms["depth"] == 0.0
            assert abs(terms.get("tangent", terms.get("orient"))) < 1e-12
            assert abs(total) < 1e-12


def test_noisy_mask_loss_bounded(scene):
    sc, cams = scene
    targets = make_targets(sc.children, cams, sc.head, 1.0, noise_sigma=0.05, seed=4)
    for t in targets:
        _, terms, _ = view_loss(sc.children, t, LossWeights(), "child", 1.0, with_grad=False)
        # mean |N(0, 0.05)| is about 0.04
        assert 0.0 < terms["mask"] < 0.1
        assert terms["mask"] == pytest.approx(0.05 * np.sqrt(2 / np.pi), rel=0.05)


def test_targets_round_trip(scene, tmp_path):
    sc, cams = scene
    targets = make_targets(sc.children, cams, sc.head, 1.0)
    save_targets(tmp_path / "t.npz", targets)
    back = load_targets(tmp_path / "t.npz", cams)
    for a, b in zip(targets, back):
        for name in ("mask", "depth", "tangent", "orient2d", "valid", "scalp_front", "image"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    with pytest.raises(ContractError):
        load_targets(tmp_path / "t.npz", cams[:2])


def test_toy_with_zero_lr_leaves_strand_unchanged():
    for width in (1.0, 0.6):
        res = toy_aa(width, iterations=5, lr=0.0)
        assert np.all(res.tips == res.tips[0])
        assert np.all(res.losses == res.losses[0])


def test_toy_descends_at_start():
    res = toy_aa(1.0, iterations=200)
    assert res.losses[-1] < res.losses[0]
    assert np.linalg.norm(res.tips[-1] - res.target_tip) < np.linalg.norm(
        res.tips[0] - res.target_tip)


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "tiny.cfg"
    cfg.write_text(TINY)
    out = d / "out"
    code = main(["all", "--config", str(cfg), "--out", str(out)])
    return code, cfg, out


def test_cli_all_produces_artifacts(cli_run):
    code, _, out = cli_run
    assert code == EXIT_OK
    for name in ("gt.hair", "init.hair", "guides.hair", "children.hair", "metrics.csv",
                 "cloud.ply", "volume.ovol", "guides_log.csv", "children_log.csv",
                 "config_used.txt", "orient_00.pfm"):
        assert (out / name).is_file(), name
    # every artifact reloads with its reader
    assert io.read_hair(out / "children.hair").strands.n_strands == 60
    assert io.read_hair(out / "guides.hair").strands.n_strands == 12
    assert len(io.read_ply(out / "cloud.ply")) > 0
    assert io.read_ovol(out / "volume.ovol").h == 2.0
    assert io.read_pfm(out / "orient_00.pfm").shape == (96, 96, 3)
    used = parse_config((out / "config_used.txt").read_text(), env={})
    assert used.n_guides == 12 and used.out == str(out)
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert len(rows) == 6 and {r["mode"] for r in rows} == {"deg360", "deg180"}


def test_cli_eval_identical_gives_ones(cli_run, tmp_path, capsys):
    code, cfg, out = cli_run
    gt = str(out / "gt.hair")
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path), "--src", gt,
                 "--dst", gt]) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert all(float(r[k]) == 1.0 for r in rows for k in ("precision", "recall", "f1"))
    assert "100.0" in capsys.readouterr().out


def test_cli_render(cli_run):
    code, cfg, out = cli_run
    assert main(["render", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    img = io.read_pfm(out / "render_00.pfm")
    assert img.shape[:2] == (96, 96) and img.max() > 0


def test_cli_is_deterministic(cli_run, tmp_path):
    code, cfg, out = cli_run
    again = tmp_path / "again"
    assert main(["all", "--config", str(cfg), "--out", str(again)]) == EXIT_OK
    for name in ("gt.hair", "init.hair", "guides.hair", "children.hair", "metrics.csv"):
        assert (again / name).read_bytes() == (out / name).read_bytes(), name


def test_cli_resume_from_stage(cli_run):
    code, cfg, out = cli_run
    before = (out / "children.hair").read_bytes()
    assert main(["all", "--config", str(cfg), "--out", str(out), "--stage",
                 "fit-children"]) == EXIT_OK
    assert (out / "children.hair").read_bytes() == before


def test_cli_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("wobble = 3\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "wobble" in capsys.readouterr().err
    assert main(["synth", "--config", str(tmp_path / "missing.cfg")]) == EXIT_CONFIG
    # stage input missing
    assert main(["init", "--out", str(tmp_path / "empty")]) == EXIT_CONFIG
    assert "cloud.ply" in capsys.readouterr().err


def test_cli_contract_violation(cli_run, tmp_path, capsys):
    code, cfg, out = cli_run
    bad = tmp_path / "bad.hair"
    bad.write_bytes(b"HAIX" + (out / "gt.hair").read_bytes()[4:])
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "o"), "--src", str(bad),
                 "--dst", str(out / "gt.hair")]) == EXIT_CONTRACT
    assert "BadMagicError" in capsys.readouterr().err


def test_cli_lock(tmp_path, capsys):
    out = tmp_path / "locked"
    out.mkdir()
    with FileLock(str(out / ".strandrecon.lock")):
        assert main(["toy-aa", "--out", str(out)]) == EXIT_CONTRACT
    assert "locked" in capsys.readouterr().err


def test_cli_rejects_unknown_subcommand():
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2
