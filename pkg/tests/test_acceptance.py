"""Acceptance criteria, each checked at its stated tolerance.

Every test records one pass/fail line, printed again in the terminal summary.
Criteria 7-9 share two pre-trained models built once per session.
"""
import importlib.util
import time
from pathlib import Path

import numpy as np
import pytest

from byolab.audio_io import read_wav
from byolab.augment import AugmentConfig
from byolab.features import FeatureConfig, erb_band_edges, extract_features, feature_names, rms_level, \
    spectral_centroid, yin_pitch
from byolab.frontend import FrontendConfig
from byolab.network import EncoderConfig, finite_difference_check
from byolab.probe import ProbeConfig, probe_table, train_probe
from byolab.rsa import RsaConfig, RsaDataset, bh_fdr, feature_dsm, inter_model_similarity, model_dsm, rsa_report, \
    spearman
from byolab.synth import band_noise_spec, mixed_all_spec, mixed_noise_spec, synth_dataset, tone_chirp_spec
from byolab.trainer import ByolModel, Checkpoint, PretrainConfig, embed, load_checkpoint, pretrain

from conftest import sawtooth, sine
from gradcheck import composed_case, layer_cases
from oracles import ap_sweep, bh_enumerate, spearman_loop

pytestmark = pytest.mark.slow
ROOT = Path(__file__).resolve().parents[1]


# --------------------------------------------------------------------------
# 1-6: oracles


def test_c1_gradients(verdict):
    t0 = time.perf_counter()
    model, fn = composed_case(width=8, frames=8, batch=2)
    params = {k: v.copy() for k, v in model.params.items()}
    n_params = sum(v.size for v in params.values())
    # sampled evenly across every parameter tensor
    composed = finite_difference_check(fn, params, eps=1e-5, n_coords=2000)
    layers = {}
    for name, (p, f) in layer_cases().items():
        p = {k: v.copy() for k, v in p.items()}
        layers[name] = finite_difference_check(f, p, eps=1e-5, n_coords=10 ** 6)
    elapsed = time.perf_counter() - t0
    worst = max(layers, key=layers.get)
    ok = composed < 1e-4 and layers[worst] < 1e-5 and elapsed < 60
    verdict(1, ok, f"composed max rel err {composed:.2e} on 2000 of {n_params} params (< 1e-4); "
                   f"worst layer {worst} {layers[worst]:.2e} (< 1e-5); {elapsed:.1f} s (< 60 s)")
    assert ok


def test_c2_statistics_oracles(verdict):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(3, 21))
        while True:
            x = rng.integers(0, int(rng.integers(2, 8)), n).astype(float)
            y = rng.integers(0, int(rng.integers(2, 8)), n).astype(float) + rng.choice([0, 0.5], n)
            if len(set(x)) > 1 and len(set(y)) > 1:
                break
        worst = max(worst, abs(spearman(x, y)[0] - spearman_loop(list(x), list(y))))
    mismatches = 0
    for _ in range(1000):
        m = int(rng.integers(1, 51))
        p = rng.uniform(0, 0.2, m) if rng.random() < 0.5 else rng.uniform(0, 1, m)
        p = np.round(p, int(rng.integers(2, 5)))       # ties
        q = float(rng.choice([0.01, 0.05, 0.1, 0.2]))
        mismatches += bh_fdr(p, q).tolist() != bh_enumerate(list(p), q)
    ok = worst <= 1e-12 and mismatches == 0
    verdict(2, ok, f"spearman max |diff| {worst:.1e} on 1000 tied vectors (<= 1e-12); "
                   f"bh_fdr mismatches {mismatches}/1000 (exact)")
    assert ok


def test_c3_dsm_properties(verdict):
    rng = np.random.default_rng(3)
    failures = {"symmetry": 0, "duplicates": 0, "rescaling": 0, "translation": 0}
    worst = 0.0
    for _ in range(500):
        n, d = int(rng.integers(2, 40)), int(rng.integers(1, 64))
        e = rng.standard_normal((n, d)) * 10 ** rng.uniform(-3, 3)
        sq = model_dsm(e).square()
        failures["symmetry"] += not (np.array_equal(sq, sq.T) and np.all(np.diag(sq) == 0))
        i = int(rng.integers(n))
        dup = model_dsm(np.vstack([e, e[i]])).square()
        failures["duplicates"] += int(dup[i, n] != 0.0)
        scaled = model_dsm(e * rng.uniform(1e-3, 1e3, (n, 1))).values
        err = float(np.max(np.abs(scaled - model_dsm(e).values)))
        worst = max(worst, err)
        failures["rescaling"] += err > 1e-12
        v = rng.standard_normal(n) * 10
        c = float(rng.uniform(-100, 100))
        failures["translation"] += not np.allclose(feature_dsm(v + c).values, feature_dsm(v).values,
                                                   rtol=0, atol=1e-12 * (abs(c) + 10))
    ok = not any(failures.values())
    verdict(3, ok, f"500 instances; failures {failures}; worst rescaling roundoff {worst:.1e}")
    assert ok


def test_c4_descriptor_oracles(verdict):
    t0 = time.perf_counter()
    freqs = np.geomspace(110, 880, 25)
    pitch_err = 0.0
    for f in freqs:
        for w in (sine(f, amp=0.5), sawtooth(f)):
            pitch_err = max(pitch_err, abs(yin_pitch(w) / f - 1))
    bin_hz = 16000 / 1024
    centroid_err = max(abs(spectral_centroid(sine(f, amp=0.5)) - f) / bin_hz for f in np.geomspace(100, 7000, 25))
    rms_err = abs(rms_level(sine(1000.0)) - 20 * np.log10(np.sqrt(0.5)))
    rms_err = max(rms_err, abs(rms_level(sine(1000.0)) + 3.01))
    elapsed = time.perf_counter() - t0
    ok = pitch_err <= 0.01 and centroid_err <= 1 and rms_err <= 0.01 and elapsed < 60
    verdict(4, ok, f"yin worst rel err {pitch_err:.2e} (<= 1%); centroid worst {centroid_err:.3f} bins (<= 1); "
                   f"rms off -3.01 dBFS by {rms_err:.4f} dB (<= 0.01); {elapsed:.1f} s")
    assert ok


def test_c5_average_precision(verdict):
    from byolab.probe import average_precision
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 101))
        labels = rng.random(n) < rng.uniform(0.05, 0.95)
        labels[rng.integers(n)] = True
        scores = np.round(rng.standard_normal(n), int(rng.integers(0, 4)))
        worst = max(worst, abs(average_precision(scores, labels) - ap_sweep(list(scores), list(labels))))
    ok = worst <= 1e-12
    verdict(5, ok, f"max |AP - sweep| {worst:.1e} on 1000 vectors with ties (<= 1e-12)")
    assert ok


def test_c6_probe_sanity(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    direction = rng.standard_normal(16)
    direction /= np.linalg.norm(direction)

    def clusters(n):
        y = rng.integers(0, 2, n)
        # class means 5 sigma either side of the separating hyperplane
        return rng.standard_normal((n, 16)) + np.outer(np.where(y == 1, 5.0, -5.0), direction), [f"c{v}" for v in y]

    xtr, ytr = clusters(500)
    xva, yva = clusters(100)
    xte, yte = clusters(200)
    sep = train_probe(xtr, ytr, xva, yva, xte, yte, ProbeConfig()).metric
    x = rng.standard_normal((1200, 16))
    y = [f"c{v}" for v in rng.integers(0, 4, 1200)]
    chance = train_probe(x[:500], y[:500], x[500:700], y[500:700], x[700:], y[700:], ProbeConfig()).metric
    elapsed = time.perf_counter() - t0
    ok = sep == 1.0 and abs(chance - 0.25) <= 0.05 and elapsed < 120
    verdict(6, ok, f"separable test accuracy {sep:.3f} (= 1.0); shuffled 4-class accuracy {chance:.3f} "
                   f"(0.25 +- 0.05); {elapsed:.1f} s (< 120 s)")
    assert ok


# --------------------------------------------------------------------------
# 7-9: desk-scale pre-training


def _train(spec, out, seed=0):
    manifest = synth_dataset(spec, out / "corpus")
    cfg = PretrainConfig(epochs=20, batch_size=32, encoder=EncoderConfig(width=64), seed=seed)
    t0 = time.perf_counter()
    res = pretrain(manifest, FrontendConfig(), AugmentConfig(), cfg, out / "model")
    return manifest, res, time.perf_counter() - t0


@pytest.fixture(scope="session")
def model_a(tmp_path_factory):
    """Pre-trained on low-band vs high-band noise (200 clips)."""
    return _train(band_noise_spec(100, seed=1), tmp_path_factory.mktemp("model_a"))


@pytest.fixture(scope="session")
def model_b(tmp_path_factory):
    """Same recipe, pre-trained on tones vs chirps."""
    return _train(tone_chirp_spec(100, seed=11), tmp_path_factory.mktemp("model_b"))


def test_c7_transfer(model_a, tmp_path, verdict):
    manifest, res, elapsed = model_a
    table = embed(manifest, res.checkpoint)
    held_out, _ = table.select("test")
    spread = float(held_out.std(axis=0).mean())
    own = probe_table(table, ProbeConfig()).metric
    other = synth_dataset(tone_chirp_spec(100, seed=2), tmp_path / "tonechirp")
    transfer = probe_table(embed(other, res.checkpoint), ProbeConfig()).metric
    ok = elapsed < 600 and spread > 0.01 and own >= 0.9 and transfer >= 0.8
    verdict(7, ok, f"pretrain {elapsed:.0f} s (< 600 s), loss {res.epoch_losses[0]:.3f} -> {res.epoch_losses[-1]:.3f}; "
                   f"embedding std {spread:.3f} (> 0.01); band-noise probe {own:.3f} (>= 0.9); "
                   f"unseen tone-vs-chirp probe {transfer:.3f} (>= 0.8)")
    assert ok


def _feature_matrix(manifest):
    cfg = FeatureConfig()
    names = feature_names(cfg)
    rows = [extract_features(read_wav(manifest.resolve(e)), cfg) for e in manifest.entries]
    return {n: np.array([np.nan if r[n] is None else r[n] for r in rows], dtype=float) for n in names}


def _separating_bands(feats, labels):
    """ERB bands whose low-noise and high-noise class means differ by at least 20 dB."""
    labels = np.asarray(labels)
    bands = sorted(n for n in feats if n.startswith("erb_energy_"))
    gap = {b: abs(feats[b][labels == "low_noise"].mean() - feats[b][labels == "high_noise"].mean()) for b in bands}
    return [b for b in bands if gap[b] >= 20.0]


def test_c8_feature_alignment(model_a, tmp_path, verdict):
    _, res, _ = model_a
    corpus = synth_dataset(mixed_noise_spec(seed=3), tmp_path / "mixednoise")
    emb = embed(corpus, res.checkpoint).embeddings
    feats = _feature_matrix(corpus)
    bands = _separating_bands(feats, [e.label for e in corpus.entries])
    cfg = RsaConfig(p_method="permutation")
    rep = rsa_report([RsaDataset("mixednoise", {"byola": emb}, feats)], cfg)
    rows = {b: rep.row("mixednoise", "byola", b) for b in bands}
    weak = [b for b, r in rows.items() if not (r.r_s > 0.3 and r.retained)]

    retained_noise = 0
    for seed in range(100):
        noisy = dict(feats, noise=np.random.default_rng(10_000 + seed).standard_normal(len(emb)))
        run = rsa_report([RsaDataset("mixednoise", {"byola": emb}, noisy)], RsaConfig(p_method="permutation", seed=seed))
        retained_noise += run.row("mixednoise", "byola", "noise").retained

    edges = erb_band_edges(20, 50.0, 8000.0)
    table = ", ".join(f"{b[-2:]}:{rows[b].r_s:.2f}{'' if b in weak else '*'}" for b in bands)
    print("separating bands (r_s, * = retained and > 0.3):", table)
    for b in weak:
        k = int(b[-2:]) - 1
        print(f"  {b} spans {edges[k]:.0f}-{edges[k + 1]:.0f} Hz, r_s {rows[b].r_s:.3f}, p {rows[b].p:.4f}")

    diag = synth_dataset(mixed_all_spec(seed=3), tmp_path / "mixedall")
    diag_feats = _feature_matrix(diag)
    diag_bands = _separating_bands(diag_feats, [e.label for e in diag.entries])
    diag_rep = rsa_report([RsaDataset("mixedall", {"byola": embed(diag, res.checkpoint).embeddings}, diag_feats)], cfg)
    print("diagnostic, corpus with tonal classes:",
          ", ".join(f"{b[-2:]}:{diag_rep.row('mixedall', 'byola', b).r_s:.2f}" for b in diag_bands))

    ok = bool(bands) and not weak and retained_noise <= 5
    verdict(8, ok, f"{len(bands) - len(weak)}/{len(bands)} separating ERB bands retained with r_s > 0.3"
                   f"{' (below: ' + ', '.join(weak) + ')' if weak else ''}; "
                   f"noise pseudo-feature retained {retained_noise}/100 (<= 5)")
    assert ok


def test_c9_inter_model_similarity(model_a, model_b, tmp_path, verdict):
    _, res_a, _ = model_a
    _, res_b, _ = model_b
    shared = synth_dataset(mixed_all_spec(seed=7), tmp_path / "shared")
    ea = embed(shared, res_a.checkpoint).embeddings
    eb = embed(shared, res_b.checkpoint).embeddings
    _, sim = inter_model_similarity([{"a": ea, "b": eb}])

    # reference point: model A against an untrained network with the same front end
    ck = load_checkpoint(res_a.checkpoint)
    fresh = ByolModel.create(ck.model.cfg, np.random.default_rng(99))
    er = embed(shared, Checkpoint(fresh, ck.stats, ck.frontend, {})).embeddings
    _, base = inter_model_similarity([{"a": ea, "r": er}])
    ok = sim[0, 1] > 0.5
    verdict(9, ok, f"inter-model r_s {sim[0, 1]:.3f} on a shared 5-class corpus (> 0.5); "
                   f"untrained-network reference {base[0, 1]:.3f}")
    assert ok


# --------------------------------------------------------------------------
# 10: reproducibility


def _load_pipeline():
    spec = importlib.util.spec_from_file_location("run_pipeline", ROOT / "scripts" / "run_pipeline.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def test_c10_reproducible(tmp_path, verdict):
    pipeline = _load_pipeline()
    args = ["--seed", "4", "--epochs", "2", "--width", "8", "--batch-size", "8", "--clips-per-class", "20"]
    for run in ("a", "b"):
        pipeline.main(["--out", str(tmp_path / run), *args])
    compared = sorted(str(p.relative_to(tmp_path / "a")) for p in (tmp_path / "a").rglob("*")
                      if p.suffix in (".bin", ".csv") and "corpora" not in p.parts)
    differ = [rel for rel in compared if (tmp_path / "a" / rel).read_bytes() != (tmp_path / "b" / rel).read_bytes()]
    kinds = {"checkpoint.bin", "embeddings.bin"} <= {Path(r).name for r in compared} and \
        any(r.startswith("report") for r in compared)
    ok = kinds and not differ
    verdict(10, ok, f"{len(compared) - len(differ)}/{len(compared)} checkpoint, embedding and CSV artifacts "
                    f"byte-identical across two seeded runs")
    assert ok
