import json

import numpy as np
import pytest

from texmorph.condition import ConditionInput
from texmorph.errors import MorphError
from texmorph.fileio import ply_bytes
from texmorph.metrics import FeatureExtractor
from texmorph.pipeline import (
    ABLATION_VARIANTS,
    generate_standalone,
    occupancy_grid,
    resolve_variants,
    run_ablation,
    run_morph,
    trajectory_metrics,
    write_trajectory,
)

EX = FeatureExtractor(dim=8)


def same_asset(a, b):
    return ply_bytes(a) == ply_bytes(b) and a.rgb.tobytes() == b.rgb.tobytes()


def test_endpoints_equal_standalone(desk_config):
    traj = run_morph(desk_config)
    assert traj.alphas[0] == 0.0 and traj.alphas[-1] == 1.0
    assert list(traj.alphas) == sorted(traj.alphas)
    assert same_asset(traj.assets[0], generate_standalone(desk_config, desk_config.source).asset)
    assert same_asset(traj.assets[-1], generate_standalone(desk_config, desk_config.target).asset)


def test_two_frames_is_source_and_target(desk_config):
    cfg = desk_config.replace(frames=2)
    traj = run_morph(cfg)
    assert len(traj.assets) == 2
    assert same_asset(traj.assets[0], generate_standalone(cfg, cfg.source).asset)


def test_identical_descriptors_keep_occupancy(desk_config):
    cfg = desk_config.replace(target=desk_config.source)
    traj = run_morph(cfg)
    occ = occupancy_grid(traj.assets[0])
    assert all(np.array_equal(occupancy_grid(a), occ) for a in traj.assets)


def test_interior_frames_differ_from_endpoints(desk_config):
    traj = run_morph(desk_config)
    mid = traj.assets[2]
    assert not same_asset(mid, traj.assets[0]) and not same_asset(mid, traj.assets[-1])


@pytest.mark.parametrize("stage1,stage2", [("none", "none"), ("interp_kv", "interp_kv"),
                                           ("aid_inner", "aid_inner"), ("aid_outer", "aid_outer"),
                                           ("fused_structure", "texture_fusion")])
def test_every_method_runs(desk_config, stage1, stage2):
    traj = run_morph(desk_config.replace(stage1_method=stage1, stage2_method=stage2, frames=3))
    assert len(traj.assets) == 3 and all(a.count > 0 for a in traj.assets)


def test_workers_do_not_change_output(desk_config):
    a = run_morph(desk_config, workers=1)
    b = run_morph(desk_config, workers=3)
    assert all(same_asset(x, y) for x, y in zip(a.assets, b.assets))
    ma, mb = dict(a.manifest), dict(b.manifest)
    ma.pop("timings"), mb.pop("timings")
    assert ma == mb


def test_manifest_contents(desk_config, tmp_path):
    traj = run_morph(desk_config)
    out = write_trajectory(traj, tmp_path / "run", trajectory_metrics(traj, 4, EX))
    files = sorted(p.name for p in (out / "frames").iterdir())
    assert files == sorted(traj.frame_name(i) for i in range(5))
    assert files[0] == "frame_0_alpha_0.000000.ply"
    man = json.loads((out / "manifest.json").read_text())
    assert man["config"]["frames"] == 5 and "workers" not in man["config"]
    assert man["schedule"]["alphas"] == list(traj.alphas)
    assert set(man["timings"]) >= {"endpoints", "frames", "total"}
    assert len(man["patch_sides"]) == desk_config.steps
    assert (out / "metrics.csv").read_text().count("\n") == 6


def test_cache_spill_matches_in_memory(desk_config, tmp_path):
    a = run_morph(desk_config.replace(frames=3))
    b = run_morph(desk_config.replace(frames=3, cache_spill_bytes=0, output_dir=str(tmp_path)))
    assert same_asset(a.assets[1], b.assets[1])
    assert any((tmp_path / "kv_cache").rglob("*.i3dt"))


def test_ablation_structure(desk_config):
    rows = run_ablation(desk_config.replace(frames=3), ["all"], views=4, extractor=EX)
    labels = [r["run_id"] for r in rows]
    assert list(dict.fromkeys(labels)) == [v[0] for v in ABLATION_VARIANTS.values()]
    assert len(rows) == 20 and all(np.isfinite(r["value"]) for r in rows)


def test_single_variant_equals_direct_run(desk_config):
    cfg = desk_config.replace(frames=3)
    rows = run_ablation(cfg, ["texture"], views=4, extractor=EX)
    direct = trajectory_metrics(run_morph(cfg), 4, EX, run_id="+ Texture Fusion")
    assert rows == direct


def test_ablation_endpoints_shared(desk_config):
    cfg = desk_config.replace(frames=3)
    trajs = [run_morph(cfg.replace(**ABLATION_VARIANTS[k][1])) for k in ABLATION_VARIANTS]
    assert all(same_asset(t.assets[0], trajs[0].assets[0]) and same_asset(t.assets[-1], trajs[0].assets[-1])
               for t in trajs)


def test_resolve_variants():
    assert resolve_variants(["all"]) == list(ABLATION_VARIANTS)
    with pytest.raises(MorphError, match="valid: all, initial"):
        resolve_variants(["none"])
    with pytest.raises(MorphError):
        resolve_variants([])


def test_single_token_condition_end_to_end(desk_config):
    traj = run_morph(desk_config.replace(tokens=1, frames=3))
    assert len(traj.assets) == 3


def test_stage_error_has_frame_context(desk_config, monkeypatch):
    import texmorph.pipeline as pl

    def boom(*args, **kwargs):
        raise MorphError("bad tokens")

    real = pl.stage2_denoise
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] > 2:
            return boom()
        return real(*args, **kwargs)

    monkeypatch.setattr(pl, "stage2_denoise", flaky)
    with pytest.raises(MorphError, match=r"\[frame=1"):
        run_morph(desk_config.replace(frames=3))


def test_descriptor_changes_trajectory(desk_config):
    a = run_morph(desk_config.replace(frames=3))
    b = run_morph(desk_config.replace(frames=3, target=ConditionInput(99, "lamp")))
    assert not same_asset(a.assets[-1], b.assets[-1])
