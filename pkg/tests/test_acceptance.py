"""End-to-end acceptance checks.

Nine numbered checks cover the training objective's gradient wiring, the loss
algebra, the role of stop-gradient in preventing collapse, representation
quality versus a random baseline, catalog-overlap arithmetic, the split and
few-shot protocol, the backbone freeze contract, report rendering, and CLI
determinism. Each check prints one verdict line; run with `pytest -s` to see
them all.
"""

import hashlib
import json
import math
from pathlib import Path

import torch
import yaml

from rssl.augment import EvalRecipe, SslRecipe
from rssl.checkpoint import load_checkpoint
from rssl.cli import main
from rssl.data import (
    bundled_alias_map,
    bundled_catalog_path,
    few_shot_sample,
    load_manifest,
    class_similarity,
    split_from_labels,
    stratified_split,
)
from rssl.models import (
    BACKBONE_TOY,
    BackboneSpec,
    EncoderSpec,
    PredictorSpec,
    SimSiamModel,
    build_encoder,
    build_predictor,
    negative_cosine,
    batched_negative_cosine,
    symmetric_loss,
)
from rssl.pretrain import PretrainConfig, init_model, pretrain
from rssl.reporting import MetricsStore, reference_records, render_table
from rssl.rng import generator
from rssl.transfer import LinearEvalConfig, build_classifier, linear_eval

from gradcheck_util import fd_gradient_check
from synthdata import color_wheel_dataset, two_cluster_dataset, write_image_folder

NORM = ((0.5, 0.5, 0.5), (0.25, 0.25, 0.25))

# shared settings for the self-supervised runs on the grating fixture
GAP_ENCODER = EncoderSpec(
    backbone=BackboneSpec(kind=BACKBONE_TOY, input_size=16, feature_dim=32,
                          conv_channels=(8, 16)),
    proj_hidden=(32, 32),
    proj_out_dim=16,
)
GAP_PREDICTOR = PredictorSpec(in_dim=16, hidden=16, out_dim=16)
GRATING_RECIPE = SslRecipe(
    crop_size=16,
    crop_scale_range=(0.5, 1.0),
    blur_prob=0.0,
    color_jitter_strength=2.0,
    color_jitter_prob=0.9,
    grayscale_prob=0.5,
    normalization=NORM,
)
EVAL_16 = EvalRecipe(resize_to=16, center_crop=16, train_flip=True, normalization=NORM)


def _verdict(num, label, ok):
    print(f"[acceptance {num}/9] {label}: {'PASS' if ok else 'FAIL'}")
    assert ok, f"acceptance check {num} failed: {label}"


def test_1_gradient_check_against_finite_differences():
    torch.manual_seed(7)
    enc = EncoderSpec(
        backbone=BackboneSpec(kind=BACKBONE_TOY, input_size=16, feature_dim=16,
                              conv_channels=(4,)),
        proj_hidden=(16, 16),
        proj_out_dim=8,
    )
    pred = PredictorSpec(in_dim=8, hidden=8, out_dim=8)
    model = SimSiamModel(build_encoder(enc), build_predictor(pred))
    g = generator("fd-views", 7)
    view1 = torch.rand(4, 3, 16, 16, generator=g)
    view2 = torch.rand(4, 3, 16, 16, generator=g)

    checked, failures = fd_gradient_check(model, view1, view2)
    total = sum(p.numel() for p in model.parameters())
    ok = checked == total and not failures
    _verdict(1, f"backprop matches finite differences ({checked} entries, "
                f"{len(failures)} mismatches)", ok)


def test_2_loss_algebra():
    g = generator("loss-algebra")
    p = torch.randn(64, 32, generator=g)
    z = torch.randn(64, 32, generator=g)

    base = negative_cosine(p, z)
    scale_ok = all(
        abs(negative_cosine(alpha * p, beta * z) - base) <= 1e-6
        for alpha in (0.5, 2.0, 10.0)
        for beta in (0.5, 2.0, 10.0)
    )

    pb = torch.randn(1000, 16, generator=g)
    zb = torch.randn(1000, 16, generator=g)
    vals = batched_negative_cosine(pb, zb)
    bounds_ok = bool((vals >= -1 - 1e-6).all() and (vals <= 1 + 1e-6).all())

    enc = EncoderSpec(
        backbone=BackboneSpec(kind=BACKBONE_TOY, input_size=16, feature_dim=16,
                              conv_channels=(4,)),
        proj_hidden=(16, 16),
        proj_out_dim=8,
    )
    torch.manual_seed(3)
    model = SimSiamModel(build_encoder(enc),
                         build_predictor(PredictorSpec(in_dim=8, hidden=8, out_dim=8)))
    model.train()
    v1 = torch.rand(8, 3, 16, 16, generator=g)
    v2 = torch.rand(8, 3, 16, 16, generator=g)
    with torch.no_grad():
        forward_loss = symmetric_loss(model(v1, v2)).item()
        swapped_loss = symmetric_loss(model(v2, v1)).item()
    swap_ok = abs(forward_loss - swapped_loss) <= 1e-7

    ident = SimSiamModel(build_encoder(enc), torch.nn.Identity())
    ident.eval()
    with torch.no_grad():
        minimum = symmetric_loss(ident(v1, v1)).item()
    min_ok = abs(minimum - (-1.0)) <= 1e-6

    ok = scale_ok and bounds_ok and swap_ok and min_ok
    _verdict(2, "scale invariance, [-1,1] bounds, view-swap symmetry, "
                f"identity minimum {minimum:+.7f}", ok)


def test_3_stop_gradient_prevents_collapse():
    enc = EncoderSpec(
        backbone=BackboneSpec(kind=BACKBONE_TOY, input_size=16, feature_dim=16,
                              conv_channels=(8,)),
        proj_hidden=(16, 16),
        proj_out_dim=8,
    )
    pred = PredictorSpec(in_dim=8, hidden=8, out_dim=8)
    dataset = two_cluster_dataset(n_per_class=64, seed=11)
    threshold = 0.1 / math.sqrt(enc.proj_out_dim)

    collapsed, stayed_up = 0, 0
    for seed in (0, 1, 2):
        for sg in (False, True):
            config = PretrainConfig(batch_size=32, base_lr=0.1, weight_decay=1e-5,
                                    total_iterations=500, seed=seed,
                                    use_stop_gradient=sg)
            model = init_model(config, enc, pred)
            result = pretrain(model, dataset, config, GRATING_RECIPE, enc, pred)
            stats = [row["collapse_stat"] for row in result.trace]
            if sg:
                stayed_up += min(stats) >= threshold
            else:
                collapsed += min(stats) < threshold

    ok = collapsed == 3 and stayed_up == 3
    _verdict(3, f"without stop-gradient embeddings collapse ({collapsed}/3), "
                f"with it they do not ({stayed_up}/3)", ok)


def test_4_pretrained_backbone_beats_random_probe(tmp_path):
    dataset = two_cluster_dataset(n_per_class=64, seed=11)
    split = split_from_labels(dataset.labels, (0.5, 0.25, 0.25), seed=3)

    gaps = []
    for seed in (0, 1, 2):
        config = PretrainConfig(batch_size=64, base_lr=0.1, weight_decay=1e-5,
                                total_iterations=1000, seed=seed)
        model = init_model(config, GAP_ENCODER, GAP_PREDICTOR)
        result = pretrain(model, dataset, config, GRATING_RECIPE,
                          GAP_ENCODER, GAP_PREDICTOR, out_dir=tmp_path / f"s{seed}")

        probe_cfg = LinearEvalConfig(epochs=150, batch_size=10, lr=3e-2, seed=seed)
        pretrained = build_classifier(2, checkpoint=result.final_checkpoint,
                                      freeze_backbone=True, seed=seed)
        ssl_acc = linear_eval(pretrained, dataset, split, probe_cfg, EVAL_16,
                              shots=10).test_accuracy
        random_init = build_classifier(2, backbone_spec=GAP_ENCODER.backbone,
                                       freeze_backbone=True, seed=seed)
        rand_acc = linear_eval(random_init, dataset, split, probe_cfg, EVAL_16,
                               shots=10).test_accuracy
        gaps.append(100 * (ssl_acc - rand_acc))

    mean_gap = sum(gaps) / len(gaps)
    ok = mean_gap >= 10.0
    _verdict(4, f"pretrained probe beats random init by {mean_gap:+.1f} points "
                f"(per seed: {', '.join(f'{v:+.1f}' for v in gaps)})", ok)


def test_5_catalog_overlap_arithmetic():
    catalogs = {
        name: load_manifest(bundled_catalog_path(name), check_files=False).classes
        for name in ("mlrsnet", "patternnet", "resisc45", "aid", "eurosat", "ucm")
    }
    aliases = bundled_alias_map()
    # published overlap: matched classes and percentage per pair
    expected = {
        ("mlrsnet", "aid"): (20, 66.6),
        ("mlrsnet", "eurosat"): (4, 40.0),
        ("mlrsnet", "ucm"): (16, 76.1),
        ("patternnet", "aid"): (9, 30.0),
        ("patternnet", "eurosat"): (3, 30.0),
        ("patternnet", "ucm"): (18, 85.71),
        ("resisc45", "aid"): (18, 60.0),
        ("resisc45", "eurosat"): (4, 40.0),
        ("resisc45", "ucm"): (19, 90.47),
    }
    bad = []
    for (pre, down), (count, percent) in expected.items():
        sim = class_similarity(catalogs[pre], catalogs[down], aliases)
        matched = round(sim * len(catalogs[down]))
        if matched != count or abs(100 * sim - percent) > 0.1:
            bad.append(f"{pre}->{down}: {matched} ({100 * sim:.2f}%)")
    _verdict(5, f"all 9 catalog overlap cells match published values "
                f"(mismatches: {bad or 'none'})", not bad)


def test_6_split_and_few_shot_protocol():
    ucm = load_manifest(bundled_catalog_path("ucm"), check_files=False)
    split = stratified_split(ucm, (0.6, 0.2, 0.2), seed=0)
    sizes_ok = (len(split.train), len(split.val), len(split.test)) == (1260, 420, 420)

    labels = [s.class_index for s in ucm.samples]
    shots_ok = True
    for n in (5, 10, 20, 50):
        fs = few_shot_sample(split, n, seed=1)
        per_class = {}
        for idx in fs.indices:
            per_class[labels[idx]] = per_class.get(labels[idx], 0) + 1
        if set(per_class.values()) != {n} or len(per_class) != 21:
            shots_ok = False
        if set(fs.indices) & (set(split.val) | set(split.test)):
            shots_ok = False
        if not set(fs.indices) <= set(split.train):
            shots_ok = False

    wheel = color_wheel_dataset()
    wheel_split = split_from_labels(wheel.labels, (0.5, 0.25, 0.25), seed=5)
    spec = BackboneSpec(kind=BACKBONE_TOY, input_size=16, feature_dim=32,
                        conv_channels=(8, 16))
    curve = []
    for n in (5, 10, 20, 50):
        accs = []
        for seed in range(5):
            model = build_classifier(8, backbone_spec=spec, freeze_backbone=True,
                                     seed=seed)
            cfg = LinearEvalConfig(epochs=100, batch_size=10, lr=1e-2, seed=seed)
            run = linear_eval(model, wheel, wheel_split, cfg, EVAL_16, shots=n)
            accs.append(run.test_accuracy)
        curve.append(100 * sum(accs) / len(accs))
    monotone = all(a <= b for a, b in zip(curve, curve[1:]))

    ok = sizes_ok and shots_ok and monotone
    _verdict(6, "1260/420/420 split, exact disjoint shots, monotone accuracy "
                f"({' -> '.join(f'{v:.1f}' for v in curve)})", ok)


def test_7_backbone_frozen_through_linear_eval():
    dataset = color_wheel_dataset(n_per_class=30)
    split = split_from_labels(dataset.labels, (0.5, 0.25, 0.25), seed=2)
    spec = BackboneSpec(kind=BACKBONE_TOY, input_size=16, feature_dim=32,
                        conv_channels=(8, 16))
    model = build_classifier(8, backbone_spec=spec, freeze_backbone=True, seed=0)
    before = model.backbone_checksum()
    run = linear_eval(model, dataset, split,
                      LinearEvalConfig(epochs=5, batch_size=10, lr=1e-2, seed=0),
                      EVAL_16)
    after = model.backbone_checksum()
    ok = before == after == run.backbone_checksum
    _verdict(7, "backbone parameters and BN statistics bit-identical "
                "after linear evaluation", ok)


def test_8_reference_rows_render_exactly(tmp_path):
    store = MetricsStore(tmp_path / "metrics.jsonl")
    for record in reference_records():
        store.append(record)

    def patternnet_cells(table):
        rows = [line for line in table.splitlines() if line.startswith("PatternNet")]
        assert len(rows) == 1, table
        return rows[0].replace("[ref]", "").split()[1:]

    linear = render_table(store.records(), "linear")
    fewshot = render_table(store.records(), "fewshot", dataset="UCM")
    linear_ok = patternnet_cells(linear) == ["97.83", "99.26", "99.90"]
    fewshot_ok = patternnet_cells(fewshot) == ["81.65", "85.87", "91.70", "94.66"]

    reloaded = MetricsStore(tmp_path / "metrics.jsonl")
    stable = (render_table(reloaded.records(), "linear") == linear
              and render_table(reloaded.records(), "fewshot", dataset="UCM") == fewshot)

    ok = linear_ok and fewshot_ok and stable
    _verdict(8, "published reference rows render byte-identically "
                f"(linear {'/'.join(patternnet_cells(linear))}, "
                f"few-shot {'/'.join(patternnet_cells(fewshot))})", ok)


def test_9_cli_pretrain_is_deterministic(tmp_path):
    manifest = write_image_folder(tmp_path / "data", {"a": 6, "b": 6}, size=16)
    config = {
        "experiment_id": "determinism-check",
        "output_dir": str(tmp_path / "runs"),
        "datasets": {"Synth": str(manifest)},
        "encoder": {
            "backbone": {"kind": "toy-cnn", "input_size": 16, "feature_dim": 16,
                         "conv_channels": [4]},
            "proj_hidden": [16, 16],
            "proj_out_dim": 8,
        },
        "predictor": {"in_dim": 8, "hidden": 8, "out_dim": 8},
        "ssl_recipe": {"crop_size": 16, "crop_scale_range": [0.5, 1.0],
                       "blur_prob": 0.0,
                       "normalization": [[0.5, 0.5, 0.5], [0.25, 0.25, 0.25]]},
        "pretrain": {"batch_size": 8, "base_lr": 0.05, "total_iterations": 12,
                     "seed": 3},
    }
    config_path = tmp_path / "config.yaml"
    with open(config_path, "w") as f:
        yaml.safe_dump(config, f, sort_keys=False)

    def run(out):
        rc = main(["pretrain", "--config", str(config_path),
                   "--dataset", "Synth", "--out", str(out)])
        assert rc == 0
        with open(out / "trace.jsonl") as f:
            trace = [json.loads(line) for line in f]
        for row in trace:
            row.pop("wall_ms")
        ckpt = out / "checkpoint_final.rssl"
        digest = hashlib.sha256(ckpt.read_bytes()).hexdigest()
        return trace, digest, load_checkpoint(ckpt).content_hash

    trace1, file1, hash1 = run(tmp_path / "run1")
    trace2, file2, hash2 = run(tmp_path / "run2")
    ok = trace1 == trace2 and file1 == file2 and hash1 == hash2
    _verdict(9, f"two CLI runs agree on {len(trace1)} trace rows and "
                f"checkpoint hash {hash1[:12]}", ok)
