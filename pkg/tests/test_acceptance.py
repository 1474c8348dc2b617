"""Acceptance suite: one verdict line per criterion, printed in the pytest
terminal summary under "acceptance criteria"."""
import hashlib
import json
import time
import zlib

import numpy as np
import pytest

import gradsuite
import oracles
from soundtag import cli
from soundtag import functional as F
from soundtag import metrics as M
from soundtag import tensor as T
from soundtag.data.cache import FeatureCache
from soundtag.data.crossval import fold_partitions
from soundtag.data.manifest import load_manifest
from soundtag.data.synthetic import generate_synthetic_dataset
from soundtag.dsp import SpectrogramConfig, Waveform, log_mel
from soundtag.model import DualBackboneConfig, DualBackboneModel
from soundtag.optim import AdamWGC, OptimizerConfig, centralize_gradient
from soundtag.relabel import load_annotations
from soundtag.tensor import Tensor
from soundtag.training import TargetLayout, TrainConfig, pad_frames, train_model


def _write_config(path, manifest, *sections):
    lines = ["[data]", f"manifest = {manifest}", "cache_dir = cache"]
    for s in sections:
        lines += s
    path.write_text("\n".join(lines) + "\n")
    return str(path)


# -- 1 ------------------------------------------------------------------------------------

def test_frame_count_reproduction(criterion):
    rng = np.random.default_rng(0)
    cfg = SpectrogramConfig()
    start = time.perf_counter()
    shapes = {secs: log_mel(Waveform(rng.normal(scale=0.1, size=int(secs * 44100)), 44100), cfg).data.shape
              for secs in (10.0, 5.0)}
    elapsed = time.perf_counter() - start
    ok = shapes == {10.0: (400, 64), 5.0: (200, 64)} and elapsed < 1.0
    assert criterion("frame counts", ok, f"10 s -> {shapes[10.0]}, 5 s -> {shapes[5.0]}, {elapsed:.3f} s")


# -- 2 ------------------------------------------------------------------------------------

def test_gradient_suite(criterion):
    start = time.perf_counter()
    layer = {name: gradsuite.layer_worst_error(name, 100, seed=zlib.crc32(name.encode()))
             for name in gradsuite.LAYER_NAMES}
    model = gradsuite.model_worst_error(100)
    elapsed = time.perf_counter() - start
    worst_name = max(layer, key=layer.get)
    ok = max(layer.values()) < gradsuite.LAYER_TOL and model < gradsuite.MODEL_TOL and elapsed < 120
    assert criterion("gradient suite", ok,
                     f"{len(layer)} ops x 100 trials, worst layer {worst_name} {layer[worst_name]:.2e} "
                     f"(< 1e-4), model {model:.2e} (< 1e-3), {elapsed:.1f} s")


# -- 3 ------------------------------------------------------------------------------------

def test_metric_oracle_equivalence(criterion):
    rng = np.random.default_rng(2020)
    worst = 0.0
    for _ in range(200):
        n, c = int(rng.integers(2, 17)), int(rng.integers(1, 5))
        s = np.round(rng.uniform(size=(n, c)), int(rng.integers(1, 4)))
        y = rng.integers(0, 2, (n, c))
        y[rng.integers(n), :] = 1
        p = M.PredictionSet(s, y)
        pairs = [(M.auprc_macro(p), oracles.macro_oracle(s, y)),
                 (M.mean_average_precision(p), oracles.macro_oracle(s, y)),
                 (M.map_11point(p), oracles.macro_oracle(s, y, oracles.ap11_oracle)),
                 (M.auprc_micro(p), oracles.micro_oracle(s, y)),
                 (M.f1_micro(p), oracles.f1_oracle(s, y))]
        single = np.eye(c, dtype=int)[rng.integers(0, c, n)]
        pairs.append((M.accuracy(M.PredictionSet(s, single, M.SINGLE_LABEL)), oracles.accuracy_oracle(s, single)))
        worst = max(worst, max(abs(a - b) for a, b in pairs))
    gap = M.map_auprc_discrepancy(M.PredictionSet(np.array([[0.9], [0.8], [0.7], [0.6]]),
                                                  np.array([[1], [0], [0], [1]])))
    diff = abs(gap["map_11point"] - gap["auprc_macro"])
    ok = worst < 1e-12 and diff > 0.01
    assert criterion("metric oracle", ok,
                     f"200 instances x 6 metrics, max |diff| {worst:.1e}; crafted case "
                     f"11-point {gap['map_11point']:.4f} vs step-sum {gap['auprc_macro']:.4f}")


# -- 4 ------------------------------------------------------------------------------------

def test_gradient_centralization(criterion):
    rng = np.random.default_rng(4)
    non_idempotent, worst_mean = 0, 0.0
    for _ in range(1000):
        shape = (int(rng.integers(1, 9)), int(rng.integers(1, 9)), 3, 3)
        g = rng.normal(scale=10.0 ** rng.uniform(-4, 4), size=shape) + rng.normal(size=(shape[0], 1, 1, 1))
        once = centralize_gradient(g)
        non_idempotent += not np.array_equal(centralize_gradient(once), once)
        scale = np.abs(g).max()
        worst_mean = max(worst_mean, float(np.abs(once.mean(axis=(1, 2, 3))).max() / scale))

    model_on = DualBackboneModel(DualBackboneConfig.toy(3, (2, 2, 4, 4, 4), gru_hidden=4), seed=5)
    model_off = DualBackboneModel(DualBackboneConfig.toy(3, (2, 2, 4, 4, 4), gru_hidden=4), seed=5)
    x, y = rng.normal(size=(2, 8, 64)), rng.integers(0, 2, (2, 3)).astype(float)
    opts = [AdamWGC(m.named_parameters(), OptimizerConfig(lr=1e-2, gc_enabled=gc))
            for m, gc in ((model_on, True), (model_off, False))]
    for _ in range(3):
        # both optimizers receive the same gradients so only the GC scope differs
        T.backward(F.bce_loss(model_on(x)[1], y), model_on.parameters())
        for (_, p_on), (_, p_off) in zip(model_on.named_parameters(), model_off.named_parameters()):
            p_off.grad = p_on.grad.copy()
        for opt in opts:
            opt.step()
    on, off = dict(model_on.named_parameters()), dict(model_off.named_parameters())
    conv = {n for n, p in on.items() if p.role == "conv_weight"}
    others_equal = all(np.array_equal(on[n].data, off[n].data) for n in on if n not in conv)
    conv_differ = any(not np.array_equal(on[n].data, off[n].data) for n in conv)
    ok = non_idempotent == 0 and worst_mean < 1e-12 and others_equal and conv_differ
    assert criterion("gradient centralization", ok,
                     f"1000 gradients, {non_idempotent} non-idempotent, max |slice mean|/scale {worst_mean:.1e}; "
                     f"{len(on) - len(conv)} non-conv tensors bit-identical on/off: {others_equal}")


# -- 5 ------------------------------------------------------------------------------------

def _overfit(X, Y, seed):
    model = DualBackboneModel(DualBackboneConfig.toy(8, (4, 8, 16, 32, 64), n_heads=4), seed=seed)
    seen = {}

    def fitted(row):
        p = model.predict(X).clip_probs
        seen["bce"] = F.bce_loss(Tensor(p), Y).item()
        seen["f1"] = M.f1_micro(M.PredictionSet(p, Y))
        return seen["f1"] >= 0.95 and seen["bce"] < 0.05

    result = train_model(model, X, Y, OptimizerConfig(lr=3e-3, gc_enabled=True),
                         TrainConfig(epochs=500, batch_size=8, seed=seed, max_steps=500), TargetLayout(8),
                         stop_when=fitted)
    return result, seen


def test_toy_overfit(criterion, tmp_path):
    ds = generate_synthetic_dataset(tmp_path / "ds", 32, 8, 10.0, seed=11)
    cache = FeatureCache(tmp_path / "cache")
    X = pad_frames(np.stack([cache.get_or_compute(ds.manifest.resolve(e)).data for e in ds.manifest.entries]))
    Y = ds.truth.astype(np.float64)
    start = time.perf_counter()
    first, fit = _overfit(X, Y, seed=0)
    elapsed = time.perf_counter() - start
    second, _ = _overfit(X, Y, seed=0)
    same = all(np.array_equal(first.last_state[k], second.last_state[k]) for k in first.last_state)
    ok = (fit["f1"] >= 0.95 and fit["bce"] < 0.05 and first.steps <= 500 and elapsed < 300 and same)
    assert criterion("toy overfit", ok,
                     f"32 clips x {X.shape[1]} frames, 8 classes: F1 {fit['f1']:.3f}, BCE {fit['bce']:.4f} "
                     f"after {first.steps} steps in {elapsed:.1f} s (GC on); rerun bit-identical: {same}")


# -- 6 ------------------------------------------------------------------------------------

def _label_accuracy(manifest_path, truth_by_id):
    m = load_manifest(manifest_path)
    labels = m.label_matrix()
    truth = np.stack([truth_by_id[e.sample_id] for e in m.entries])
    return float((labels == truth).mean())


def test_relabel_pipeline(criterion, tmp_path):
    fast = ["--model.gru_hidden", "8", "--train.batch_size", "16"]
    pre = generate_synthetic_dataset(tmp_path / "pre", 32, 8, 1.0, seed=21, n_coarse=3)
    pre_cfg = _write_config(tmp_path / "pre.ini", "pre/manifest.csv", ["[train]", "epochs = 8", "seed = 1"])
    assert cli.main(["train", "--config", pre_cfg, "--out", str(tmp_path / "pretrain"), *fast]) == cli.EXIT_OK

    ds = generate_synthetic_dataset(tmp_path / "ds", 64, 8, 1.0, seed=22, n_coarse=3, n_validate=16,
                                    n_expert=6, flip_prob=0.3)
    truth = {e.sample_id: ds.truth[i] for i, e in enumerate(ds.manifest.entries)}
    cfg = tmp_path / "exp.ini"
    cfg.write_text("\n".join(["[data]", "manifest = ds/manifest.csv", "cache_dir = cache",
                              "annotations = ds/annotations.csv",
                              "[model]", "pretrained_global = pretrain/checkpoints/last", "freeze_global = true",
                              "[train]", "epochs = 12", "seed = 2"]) + "\n")
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "base"), *fast]) == cli.EXIT_OK
    base = json.loads((tmp_path / "base" / "metrics.json").read_text())
    assert base["ranking_metric"] == "coarse/auprc_macro"

    rc = cli.main(["relabel", "--config", str(cfg), "--checkpoint", str(tmp_path / "base"),
                   "--out", str(tmp_path / "r1"), *fast])
    stats = json.loads((tmp_path / "r1" / "relabel_stats.json").read_text())

    original = {line.split(",")[0]: line for line in (ds.root / "manifest.csv").read_text().splitlines()}
    relabeled = {line.split(",")[0]: line for line in (tmp_path / "r1" / "manifest.csv").read_text().splitlines()}
    experts = {e.sample_id for e in ds.manifest.select(split="validate")}
    experts |= load_annotations(ds.root / "annotations.csv", 8).expert_ids()
    experts_identical = all(original[s] == relabeled[s] for s in experts)

    cfg_r1 = tmp_path / "exp_r1.ini"
    cfg_r1.write_text(cfg.read_text().replace("ds/manifest.csv", "r1/manifest.csv"))
    cli.main(["relabel", "--config", str(cfg_r1), "--checkpoint", str(tmp_path / "base"),
              "--out", str(tmp_path / "r2"), *fast])
    again = json.loads((tmp_path / "r2" / "relabel_stats.json").read_text())
    idempotent = again["total_flips"] == 0 and (
        load_manifest(tmp_path / "r2" / "manifest.csv").label_matrix()
        == load_manifest(tmp_path / "r1" / "manifest.csv").label_matrix()).all()

    assert cli.main(["train", "--config", str(cfg_r1), "--out", str(tmp_path / "retrain"), *fast]) == cli.EXIT_OK
    after = json.loads((tmp_path / "retrain" / "metrics.json").read_text())
    before_auprc = base["metrics"]["coarse/auprc_macro"]["mean"]
    after_auprc = after["metrics"]["coarse/auprc_macro"]["mean"]
    acc_before = _label_accuracy(ds.root / "manifest.csv", truth)
    acc_after = _label_accuracy(tmp_path / "r1" / "manifest.csv", truth)
    ok = rc == cli.EXIT_OK and len(experts) == stats["protected"] and experts_identical and idempotent
    assert criterion("relabel pipeline", ok,
                     f"{stats['total_flips']} flips, {len(experts)} expert rows byte-identical: {experts_identical}, "
                     f"second pass flips {again['total_flips']}; label accuracy {acc_before:.3f} -> {acc_after:.3f}, "
                     f"coarse macro-AUPRC {before_auprc:.3f} -> {after_auprc:.3f} (reported, not gated)")


# -- 7 ------------------------------------------------------------------------------------

def test_harness_exactness(criterion, tmp_path):
    ds = generate_synthetic_dataset(tmp_path / "ds", 12, 3, 0.25, seed=31, task_mode="single_label", n_folds=2)
    before = [(k, [e.sample_id for e in rest], [e.sample_id for e in held])
              for k, rest, held in fold_partitions(ds.manifest)]
    cfg = _write_config(tmp_path / "cv.ini", "ds/manifest.csv", ["[train]", "epochs = 3", "seed = 4"])
    rc = cli.main(["train", "--config", cfg, "--out", str(tmp_path / "cv"),
                   "--model.widths", "2,2,4,4,4", "--model.gru_hidden", "4"])
    report = json.loads((tmp_path / "cv" / "metrics.json").read_text())
    worst = 0.0
    for name, cell in report["metrics"].items():
        values = [fold["best"][name] for fold in report["folds"]]
        mean, std = oracles.mean_std_population(values)
        ulp = np.finfo(np.float64).eps * max(1.0, abs(mean))
        worst = max(worst, abs(cell["mean"] - mean) / ulp, abs(cell["std"] - std) / ulp)

    manifest = load_manifest(ds.root / "manifest.csv")
    after = [(k, [e.sample_id for e in rest], [e.sample_id for e in held])
             for k, rest, held in fold_partitions(manifest)]
    in_order = all(held == [e.sample_id for e in manifest.entries if e.fold == k] for k, _, held in after)
    disjoint = all(not set(rest) & set(held) and len(rest) + len(held) == len(manifest.entries)
                   for _, rest, held in after)
    ok = rc == cli.EXIT_OK and worst <= 2 and before == after and in_order and disjoint
    assert criterion("harness exactness", ok,
                     f"{len(report['metrics'])} metrics over 2 folds, max deviation from hand mean/std "
                     f"{worst:.0f} ulp; partitions fixed and disjoint: {before == after and in_order and disjoint}")


# -- 8 ------------------------------------------------------------------------------------

def _digests(cache_dir):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(cache_dir.glob("*.lmsp"))}


def test_cache_integrity(criterion, tmp_path, capsys, caplog):
    generate_synthetic_dataset(tmp_path / "ds", 10, 3, 1.0, seed=41)
    cfg = _write_config(tmp_path / "c.ini", "ds/manifest.csv")
    cli.main(["featurize", "--config", cfg])
    first = _digests(tmp_path / "cache")
    capsys.readouterr()
    cli.main(["featurize", "--config", cfg])
    second_out = capsys.readouterr().out
    second = _digests(tmp_path / "cache")

    victim = tmp_path / "cache" / sorted(first)[3]
    raw = bytearray(victim.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    victim.write_bytes(bytes(raw))
    with caplog.at_level("WARNING"):
        rc = cli.main(["featurize", "--config", cfg])
    third_out = capsys.readouterr().out
    repaired = _digests(tmp_path / "cache")
    warned = any("recomputing" in r.getMessage() for r in caplog.records)
    ok = (len(first) == 10 and "0 computed, 10 cached" in second_out and first == second
          and rc == cli.EXIT_OK and "1 computed, 9 cached, 1 repaired" in third_out and warned
          and repaired == first)
    assert criterion("cache integrity", ok,
                     f"rerun: {second_out.split('(')[1].split(')')[0]}, payloads identical: {first == second}; "
                     f"after corruption: {third_out.split('(')[1].split(')')[0]}, restored bit-exact: "
                     f"{repaired == first}")
