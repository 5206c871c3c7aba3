"""Corpus runners: discovery, crop/eval/ratio/partition, failure isolation."""

import json
from pathlib import Path

import numpy as np
import pytest

from attncrop import (
    AttentionBundle,
    BBox,
    EvalRecord,
    build_manifest,
    read_records,
    write_bundle,
    write_records,
)
from attncrop.errors import ConfigError
from attncrop.pipeline import (
    JobConfig,
    crop_pair,
    discover_pairs,
    importance_for_pair,
    run_crop,
    run_eval,
    run_partition,
    run_ratio,
)

import oracles
from helpers import GENERIC_QUESTION, build_corpus, build_highres_pair, make_bundle


# --- configuration -----------------------------------------------------------------


def test_config_coerces_paths_and_multipliers():
    config = JobConfig(bundles_dir="a/b", records_out="out.jsonl", multipliers=[1.0, 2.0])
    assert config.bundles_dir == Path("a/b")
    assert config.records_out == Path("out.jsonl")
    assert config.multipliers == (1.0, 2.0)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(method="nope"),
        dict(metric="f1"),
        dict(workers=0),
        dict(eps=0.0),
        dict(high_res_limit=0),
        dict(multipliers=()),
        dict(multipliers=(1.0, -2.0)),
        dict(input_res=0),
        dict(llm_layer=-1),
        dict(connector_layer=-3),
    ],
)
def test_config_validate_rejects(kwargs):
    with pytest.raises(ConfigError):
        JobConfig(**kwargs).validate()


def test_config_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown config keys"):
        JobConfig.from_dict({"method": "rel_att", "typo_key": 1})


def test_config_from_dict_round_trip():
    config = JobConfig.from_dict({"method": "grad_att", "workers": 3, "llm_layer": 5})
    assert (config.method, config.workers, config.llm_layer) == ("grad_att", 3, 5)


# --- discovery --------------------------------------------------------------------


def test_discover_pairs(corpus):
    bundles_dir, _ = corpus
    pairs = discover_pairs(bundles_dir)
    assert len(pairs) == 20
    assert [p.pair_id for p in pairs] == sorted(p.pair_id for p in pairs)
    assert pairs[0].meta["question_id"] == "q000"


def test_discover_missing_dir():
    with pytest.raises(ConfigError):
        discover_pairs(Path("/nonexistent/bundles"))


def test_discover_requires_meta_keys(tmp_path):
    pair = tmp_path / "pair_x"
    pair.mkdir()
    (pair / "pair.json").write_text(json.dumps({"question_id": "q"}), encoding="utf-8")
    with pytest.raises(ConfigError, match="image_id"):
        discover_pairs(tmp_path)


def test_discover_empty(tmp_path):
    with pytest.raises(ConfigError, match="no pairs"):
        discover_pairs(tmp_path)


# --- crop runner ---------------------------------------------------------------------


def _point_mass_pair(root: Path) -> Path:
    """Single pair whose relative map is a point mass at cell (1, 1)."""
    N, T, L, H = 4, 16, 2, 2
    common = dict(
        L=L, H=H, Lc=0, Hc=0, T=T, N=N, input_resolution=16,
        image_width=64, image_height=48,
    )
    man_q = build_manifest(
        "synthetic-vlm", question="what?", is_generic_instruction=False,
        roles=("ans_attn",), **common,
    )
    attn = np.zeros((L, H, T), dtype=np.float32)
    attn[:, :, 5] = 0.9  # token 5 = row 1, col 1
    man_g = build_manifest(
        "synthetic-vlm", question=GENERIC_QUESTION, is_generic_instruction=True,
        roles=("ans_attn",), **common,
    )
    uniform = np.full((L, H, T), 1 / 16, dtype=np.float32)
    pair_dir = root / "pair_pm"
    write_bundle(AttentionBundle(manifest=man_q, ans_attn=attn), pair_dir / "question")
    write_bundle(AttentionBundle(manifest=man_g, ans_attn=uniform), pair_dir / "generic")
    (pair_dir / "pair.json").write_text(
        json.dumps(
            {
                "question_id": "pm", "image_id": "pm", "question": "what?",
                "gt_bbox": [18, 14, 6, 6], "image_width": 64, "image_height": 48,
            }
        ),
        encoding="utf-8",
    )
    return pair_dir


def test_crop_point_mass_window(tmp_path):
    _point_mass_pair(tmp_path / "bundles")
    config = JobConfig(
        bundles_dir=tmp_path / "bundles", records_out=tmp_path / "r.jsonl",
        method="rel_att", average=True,
    )
    pair = discover_pairs(tmp_path / "bundles")[0]
    importance, _, _ = importance_for_pair(pair, config)
    assert importance.values[1, 1] == pytest.approx(14.4, abs=1e-6)
    assert importance.values.sum() == pytest.approx(importance.values[1, 1], abs=1e-9)

    record = crop_pair(pair, config)
    # peak cell spans x [16, 32), y [12, 24); square expansion recenters to y=10
    assert record.crop.window == BBox(16, 10, 16, 16)
    assert record.crop.resize_to == 16
    assert record.partition == "medium"
    assert record.crop.method == "rel_att"
    assert record.crop.layer.mode == "averaged"


def test_run_crop_corpus(corpus, tmp_path):
    bundles_dir, images_dir = corpus
    out = tmp_path / "records.jsonl"
    config = JobConfig(
        bundles_dir=bundles_dir, images_dir=images_dir, records_out=out,
        method="rel_att", average=True,
    )
    result = run_crop(config)
    assert result.exit_code == 0
    assert len(result.records) == 20 and not result.failures

    records = list(read_records(out))
    assert len(records) == 20
    for record in records:
        assert record.crop is not None
        window = record.crop.window
        assert window.w == window.h or window.w in (64, 80, 96, 56) or window.h in (48, 60, 72, 56)
        assert record.partition in ("small", "medium", "large")

    errors = json.loads(out.with_name(out.name + ".errors.json").read_text(encoding="utf-8"))
    assert errors == []


def test_run_crop_human_crop_uses_gt_box(corpus, tmp_path):
    bundles_dir, images_dir = corpus
    out = tmp_path / "records.jsonl"
    config = JobConfig(
        bundles_dir=bundles_dir, images_dir=images_dir, records_out=out, method="human_crop"
    )
    result = run_crop(config)
    assert result.exit_code == 0
    from attncrop import expand_to_square

    for pair, record in zip(discover_pairs(bundles_dir), result.records):
        width = pair.meta["image_width"]
        height = pair.meta["image_height"]
        want = expand_to_square(BBox.from_list(pair.meta["gt_bbox"]), width, height)
        assert record.crop.window == want
        assert record.crop.layer is None


def test_run_crop_writes_crop_images(corpus, tmp_path):
    bundles_dir, images_dir = corpus
    crops_dir = tmp_path / "crops"
    config = JobConfig(
        bundles_dir=bundles_dir, images_dir=images_dir,
        records_out=tmp_path / "r.jsonl", crops_dir=crops_dir,
        method="pure_grad",
    )
    result = run_crop(config)
    assert result.exit_code == 0
    from PIL import Image

    files = sorted(crops_dir.glob("*.png"))
    assert len(files) == 20
    with Image.open(files[0]) as img:
        assert img.size == (16, 16)


def test_run_crop_isolates_corrupt_pairs(corpus, tmp_path):
    bundles_dir, images_dir = corpus
    import shutil

    work = tmp_path / "bundles"
    shutil.copytree(bundles_dir, work)
    # truncate one tensor file: byte length no longer matches the manifest
    victim = work / "pair_003" / "question" / "ans_attn.bin"
    victim.write_bytes(victim.read_bytes()[:-8])

    out = tmp_path / "records.jsonl"
    config = JobConfig(
        bundles_dir=work, images_dir=images_dir, records_out=out,
        method="rel_att", average=True,
    )
    result = run_crop(config)
    assert result.exit_code == 1
    assert len(result.records) == 19
    assert len(result.failures) == 1
    assert result.failures[0].pair_id == "pair_003"
    errors = json.loads(out.with_name(out.name + ".errors.json").read_text(encoding="utf-8"))
    assert errors[0]["pair_id"] == "pair_003" and errors[0]["error"] == "ShapeMismatch"


def test_run_crop_deterministic_across_workers(corpus, tmp_path):
    bundles_dir, images_dir = corpus
    outputs = []
    for workers, name in ((1, "a.jsonl"), (4, "b.jsonl")):
        out = tmp_path / name
        config = JobConfig(
            bundles_dir=bundles_dir, images_dir=images_dir, records_out=out,
            method="rel_att", average=True, workers=workers,
        )
        assert run_crop(config).exit_code == 0
        outputs.append(out.read_bytes())
    assert outputs[0] == outputs[1]


# --- high resolution ----------------------------------------------------------------


def test_tiled_importance_has_block_structure(tmp_path):
    build_highres_pair(tmp_path, block_levels=[1.0, 2.0, 4.0, 8.0])
    config = JobConfig(
        bundles_dir=tmp_path / "bundles", records_out=tmp_path / "r.jsonl",
        method="rel_att", average=True, high_res=True,
    )
    pair = discover_pairs(tmp_path / "bundles")[0]
    importance, _, _ = importance_for_pair(pair, config)
    assert importance.values.shape == (8, 8)
    assert (importance.patch_width, importance.patch_height) == (256.0, 192.0)
    want = np.block(
        [
            [np.full((4, 4), 1.0), np.full((4, 4), 2.0)],
            [np.full((4, 4), 4.0), np.full((4, 4), 8.0)],
        ]
    )
    np.testing.assert_array_equal(importance.values, want)

    record = crop_pair(pair, config)
    # hottest quadrant is bottom-right; its corner cell wins the contrast score
    assert record.crop.window == BBox(1024, 736, 256, 256)


def test_tiled_block_count_mismatch(tmp_path):
    build_highres_pair(tmp_path, block_levels=[1.0, 2.0, 4.0, 8.0])
    config = JobConfig(
        bundles_dir=tmp_path / "bundles", records_out=tmp_path / "r.jsonl",
        method="rel_att", average=True, high_res=True, high_res_limit=512,
    )
    result = run_crop(config)
    assert result.exit_code == 1
    assert result.failures[0].error == "BlockMapMismatch"


def test_high_res_flag_skips_small_images(corpus, tmp_path):
    # corpus images are far below the limit, so tiling must not kick in
    bundles_dir, images_dir = corpus
    config = JobConfig(
        bundles_dir=bundles_dir, images_dir=images_dir,
        records_out=tmp_path / "r.jsonl", method="rel_att", average=True, high_res=True,
    )
    result = run_crop(config)
    assert result.exit_code == 0 and len(result.records) == 20


# --- eval runner -------------------------------------------------------------------


def _eval_records(tmp_path: Path) -> Path:
    records = [
        EvalRecord(
            question_id="q1", image_id="i1", question="?",
            gt_answers=["cat"] * 10, prediction="cat",
        ),
        EvalRecord(
            question_id="q2", image_id="i2", question="?",
            gt_answers=["cat"] * 10, prediction="cat", prediction_cropped="dog",
            partition="small",
        ),
        EvalRecord(
            question_id="q3", image_id="i3", question="?",
            gt_answers=["yes"] + ["no"] * 9, prediction="yes", partition="large",
        ),
        EvalRecord(question_id="q4", image_id="i4", question="?", gt_answers=["x"]),
    ]
    path = tmp_path / "in.jsonl"
    write_records(records, path)
    return path


def test_run_eval_scores_and_summarizes(tmp_path):
    records_in = _eval_records(tmp_path)
    out = tmp_path / "scored.jsonl"
    config = JobConfig(records_in=records_in, records_out=out, metric="vqa")
    result = run_eval(config)

    # q4 has no prediction at all -> isolated failure
    assert result.exit_code == 1
    assert [f.pair_id for f in result.failures] == ["q4"]
    scores = {r.question_id: r.score for r in result.records}
    assert scores["q1"] == 1.0
    assert scores["q2"] == 0.0  # cropped prediction wins over the raw one
    assert scores["q3"] == pytest.approx(1 / 3)

    summary = json.loads(
        out.with_name(out.name + ".summary.json").read_text(encoding="utf-8")
    )
    assert summary["metric"] == "vqa"
    assert summary["overall"]["n"] == 3
    assert summary["overall"]["mean"] == pytest.approx((1.0 + 0.0 + 1 / 3) / 3)
    assert summary["by_method"]["uncropped"]["n"] == 3
    assert summary["by_partition"]["small"]["mean"] == 0.0
    assert summary["by_partition"]["large"]["mean"] == pytest.approx(1 / 3)

    csv_lines = out.with_name(out.name + ".summary.csv").read_text(encoding="utf-8").splitlines()
    assert csv_lines[0] == "scope,group,mean,ci95_half_width,n"
    assert any(line.startswith("partition,small,") for line in csv_lines)


def test_run_eval_exact_metric(tmp_path):
    records_in = _eval_records(tmp_path)
    out = tmp_path / "scored.jsonl"
    result = run_eval(JobConfig(records_in=records_in, records_out=out, metric="exact"))
    scores = {r.question_id: r.score for r in result.records}
    assert scores["q1"] == 1.0 and scores["q2"] == 0.0 and scores["q3"] == 1.0


def test_run_eval_missing_input(tmp_path):
    with pytest.raises(ConfigError):
        run_eval(JobConfig(records_in=tmp_path / "absent.jsonl", records_out=tmp_path / "o"))


# --- ratio runner -------------------------------------------------------------------


def _uniform_ratio_corpus(root: Path, n_pairs: int = 3) -> Path:
    """Pairs whose question and generic attention are identical: ratio 1."""
    rng = np.random.default_rng(11)
    bundles_dir = root / "bundles"
    for i in range(n_pairs):
        question = make_bundle(rng, N=2, T=4, L=2, H=2, roles=("ans_attn",))
        generic = AttentionBundle(
            manifest=build_manifest(
                "synthetic-vlm", L=2, H=2, Lc=0, Hc=0, T=4, N=2,
                input_resolution=16, image_width=64, image_height=48,
                question=GENERIC_QUESTION, is_generic_instruction=True,
                roles=("ans_attn",),
            ),
            ans_attn=question.ans_attn.copy(),
        )
        pair_dir = bundles_dir / f"pair_{i}"
        write_bundle(question, pair_dir / "question")
        write_bundle(generic, pair_dir / "generic")
        (pair_dir / "pair.json").write_text(
            json.dumps(
                {
                    "question_id": f"q{i}", "image_id": f"i{i}", "question": "?",
                    "gt_bbox": [10 + i, 5, 12, 9],
                }
            ),
            encoding="utf-8",
        )
    return bundles_dir


def test_run_ratio_identical_bundles_give_unit_mean(tmp_path):
    bundles_dir = _uniform_ratio_corpus(tmp_path)
    out = tmp_path / "ratio.json"
    result = run_ratio(JobConfig(bundles_dir=bundles_dir, records_out=out))
    assert result.exit_code == 0
    rows = json.loads(out.read_text(encoding="utf-8"))
    # L=2, identity connector -> layer pairs (0,0) and (1,0), split "all"
    assert [(r["m"], r["k"], r["layer_index"]) for r in rows] == [(0, 0, 0), (1, 0, 1)]
    for row in rows:
        assert row["mean"] == pytest.approx(1.0, abs=1e-9)
        assert row["ci95_half_width"] == pytest.approx(0.0, abs=1e-9)
        assert row["n"] == 3 and row["split"] == "all"
    assert out.with_suffix(".csv").is_file()


def test_run_ratio_matches_loop_oracle(corpus, tmp_path):
    bundles_dir, _ = corpus
    out = tmp_path / "ratio.json"
    result = run_ratio(JobConfig(bundles_dir=bundles_dir, records_out=out))
    assert result.exit_code == 0
    rows = json.loads(out.read_text(encoding="utf-8"))

    from attncrop import load_bundle

    expect: dict[tuple[int, int], list[float]] = {}
    for pair in discover_pairs(bundles_dir):
        question = load_bundle(pair.root / "question")
        generic = load_bundle(pair.root / "generic")
        width = pair.meta["image_width"]
        height = pair.meta["image_height"]
        bbox = BBox.from_list(pair.meta["gt_bbox"])
        man = question.manifest
        for m, k in oracles.layer_pairs(man):
            rel = oracles.relative_map(question, generic, m, k, 1e-8)
            value = oracles.attention_ratio(
                rel, width / man.N, height / man.N, bbox, width, height
            )
            expect.setdefault((m, k), []).append(value)

    for row in rows:
        if row["split"] != "all":
            continue
        values = expect[(row["m"], row["k"])]
        assert row["n"] == len(values) == 20
        assert row["mean"] == pytest.approx(float(np.mean(values)), abs=1e-9)


def test_run_ratio_correctness_splits(tmp_path):
    bundles_dir = _uniform_ratio_corpus(tmp_path)
    records = [
        EvalRecord(question_id="q0", image_id="i0", question="?", score=1.0),
        EvalRecord(question_id="q1", image_id="i1", question="?", score=0.0),
        EvalRecord(question_id="q2", image_id="i2", question="?", score=1 / 3),
    ]
    records_in = tmp_path / "scored.jsonl"
    write_records(records, records_in)
    out = tmp_path / "ratio.json"
    run_ratio(JobConfig(bundles_dir=bundles_dir, records_in=records_in, records_out=out))
    rows = json.loads(out.read_text(encoding="utf-8"))
    splits = {(r["m"], r["k"], r["split"]): r for r in rows}
    assert splits[(0, 0, "correct")]["n"] == 2
    assert splits[(0, 0, "incorrect")]["n"] == 1
    assert splits[(0, 0, "all")]["n"] == 3


def test_run_ratio_requires_gt_bbox(tmp_path):
    bundles_dir = _uniform_ratio_corpus(tmp_path, n_pairs=1)
    meta_path = bundles_dir / "pair_0" / "pair.json"
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    del meta["gt_bbox"]
    meta_path.write_text(json.dumps(meta), encoding="utf-8")
    out = tmp_path / "ratio.json"
    result = run_ratio(JobConfig(bundles_dir=bundles_dir, records_out=out))
    assert result.exit_code == 1
    assert json.loads(out.read_text(encoding="utf-8")) == []


# --- partition runner --------------------------------------------------------------


def test_run_partition_counts(corpus, tmp_path):
    bundles_dir, images_dir = corpus
    crop_out = tmp_path / "records.jsonl"
    run_crop(
        JobConfig(
            bundles_dir=bundles_dir, images_dir=images_dir, records_out=crop_out,
            method="rel_att", average=True,
        )
    )
    out = tmp_path / "partitioned.jsonl"
    result = run_partition(
        JobConfig(bundles_dir=bundles_dir, records_in=crop_out, records_out=out)
    )
    assert result.exit_code == 0
    summary = json.loads(
        out.with_name(out.name + ".summary.json").read_text(encoding="utf-8")
    )
    counts = summary["counts"]
    assert sum(counts.values()) == 20
    assert set(counts) == {"small", "medium", "large"}
    assert all(v > 0 for v in counts.values())


def test_run_partition_scores_grouped(tmp_path, corpus):
    bundles_dir, _ = corpus
    pairs = discover_pairs(bundles_dir)
    records = []
    for i, pair in enumerate(pairs[:6]):
        records.append(
            EvalRecord(
                question_id=str(pair.meta["question_id"]),
                image_id=str(pair.meta["image_id"]),
                question="?",
                gt_bbox=BBox.from_list(pair.meta["gt_bbox"]),
                score=float(i % 2),
            )
        )
    records_in = tmp_path / "scored.jsonl"
    write_records(records, records_in)
    out = tmp_path / "partitioned.jsonl"
    result = run_partition(
        JobConfig(bundles_dir=bundles_dir, records_in=records_in, records_out=out)
    )
    assert result.exit_code == 0
    summary = json.loads(
        out.with_name(out.name + ".summary.json").read_text(encoding="utf-8")
    )
    assert "groups" in summary and summary["overall"]["n"] == 6


def test_run_partition_unknown_pair_fails_record(tmp_path, corpus):
    bundles_dir, _ = corpus
    records = [
        EvalRecord(
            question_id="ghost", image_id="g", question="?", gt_bbox=BBox(0, 0, 2, 2)
        )
    ]
    records_in = tmp_path / "in.jsonl"
    write_records(records, records_in)
    out = tmp_path / "out.jsonl"
    result = run_partition(
        JobConfig(bundles_dir=bundles_dir, records_in=records_in, records_out=out)
    )
    assert result.exit_code == 1
    assert result.failures[0].pair_id == "ghost"
