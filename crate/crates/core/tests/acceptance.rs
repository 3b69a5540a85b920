//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with the measured value. Budgets are asserted in-test.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::collections::BTreeSet;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::Distribution;

use ivx_core::backend::{plda_score, PldaModel};
use ivx_core::corpus::{
    generate_corpus, load_model, save_model, validate_manifest, ArtistEntry, ArtistRole,
    CorpusManifest, CorpusMode, Model, SynthSpec, TrackEntry, TrackSplit,
};
use ivx_core::deepnet::{build_network, gradient_check, NetConfig};
use ivx_core::dsp::{FeatureSequence, MelSpectrogram};
use ivx_core::error::Error;
use ivx_core::evalkit::{
    compute_eer, read_matrix_csv, run_sweep, EvalReport, ScoreMatrix, SweepConfig, SystemKind,
};
use ivx_core::tvspace::{extract_ivector, train_tv, TotalVariabilityModel};
use ivx_core::ubm::{train_ubm, BaumWelchStats, DiagGmm, UbmTrainConfig};

fn normal(rng: &mut ChaCha20Rng) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}

fn pass(name: &str, detail: impl std::fmt::Display) {
    println!("ACCEPTANCE {name}: PASS ({detail})");
}

// --- EM monotonicity -------------------------------------------------------

#[test]
fn acceptance_em_monotonicity() {
    let start = Instant::now();
    let mut worst_ubm: f64 = 0.0;
    let mut worst_tv: f64 = 0.0;
    for seed in 0..20u64 {
        // Background-model EM over three drifting clusters.
        let mut rng = ChaCha20Rng::seed_from_u64(1000 + seed);
        let centers = [[0.0, 0.0], [3.5, -1.0], [-2.0, 4.0]];
        let mut frames = DMatrix::zeros(600, 2);
        for i in 0..600 {
            let c = centers[i % 3];
            frames[(i, 0)] = c[0] + normal(&mut rng);
            frames[(i, 1)] = c[1] + normal(&mut rng);
        }
        let seq = FeatureSequence {
            frames,
            clip_id: format!("mono{seed}"),
        };
        let cfg = UbmTrainConfig {
            n_components: 4,
            n_iters: 8,
            init: 3,
            seed,
            ..UbmTrainConfig::default()
        };
        let trained = train_ubm(&[seq], &cfg).unwrap();
        for w in trained.log_likelihood.windows(2) {
            let drop = (w[0] - w[1]) / w[0].abs().max(1e-30);
            worst_ubm = worst_ubm.max(drop);
            assert!(
                w[1] >= w[0] - 1e-9 * w[0].abs(),
                "seed {seed}: ubm log-likelihood fell {} -> {}",
                w[0],
                w[1]
            );
        }

        // Subspace EM over synthetic statistics.
        let (c, d, r) = (3, 2, 3);
        let ubm = DiagGmm {
            weights: DVector::from_element(c, 1.0 / c as f64),
            means: DMatrix::zeros(c, d),
            vars: DMatrix::from_element(c, d, 1.0),
        };
        let truth = DMatrix::from_fn(c * d, r, |_, _| normal(&mut rng));
        let stats: Vec<BaumWelchStats> = (0..120)
            .map(|_| {
                let w = DVector::from_fn(r, |_, _| normal(&mut rng));
                let mean = &truth * &w;
                let mut zeroth = DVector::zeros(c);
                let mut first = DMatrix::zeros(c, d);
                for k in 0..c {
                    let n = rng.gen_range(10.0..30.0);
                    zeroth[k] = n;
                    for j in 0..d {
                        first[(k, j)] = n * mean[k * d + j] + 0.05 * normal(&mut rng);
                    }
                }
                BaumWelchStats {
                    zeroth,
                    first,
                    n_frames: 60,
                }
            })
            .collect();
        let trained = train_tv(&ubm, &stats, r, 8, seed).unwrap();
        for w in trained.objective.windows(2) {
            let drop = (w[0] - w[1]) / w[0].abs().max(1e-30);
            worst_tv = worst_tv.max(drop);
            assert!(
                w[1] >= w[0] - 1e-9 * w[0].abs(),
                "seed {seed}: subspace objective fell {} -> {}",
                w[0],
                w[1]
            );
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}, budget 1 min");
    pass(
        "em-monotonicity",
        format!(
            "20 seeds, worst relative drop ubm {worst_ubm:.2e} / subspace {worst_tv:.2e}, {elapsed:?}"
        ),
    );
}

// --- i-vector closed form --------------------------------------------------

#[test]
fn acceptance_ivector_closed_form() {
    // Scalar case: one component, one dim, unit variance, loading 1,
    // single frame at x -> posterior mean x/2, exactly.
    let ubm1 = DiagGmm {
        weights: DVector::from_element(1, 1.0),
        means: DMatrix::zeros(1, 1),
        vars: DMatrix::from_element(1, 1, 1.0),
    };
    let tv1 = TotalVariabilityModel {
        loading: DMatrix::from_element(1, 1, 1.0),
        rank: 1,
        ubm_components: 1,
        ubm_dim: 1,
        ubm_ref: ubm1.fingerprint(),
    };
    let mut worst_scalar: f64 = 0.0;
    for x in [-3.0, -0.5, 0.0, 0.25, 1.0, 7.5] {
        let stats = BaumWelchStats {
            zeroth: DVector::from_element(1, 1.0),
            first: DMatrix::from_element(1, 1, x),
            n_frames: 1,
        };
        let w = extract_ivector(&tv1, &ubm1, &stats).unwrap();
        let err = (w.values[0] - x / 2.0).abs();
        worst_scalar = worst_scalar.max(err);
        assert!(err <= 1e-12, "x = {x}: |w - x/2| = {err}");
    }

    // Random small instances against a dense matrix-inversion oracle.
    let mut rng = ChaCha20Rng::seed_from_u64(2024);
    let mut worst_oracle: f64 = 0.0;
    for _ in 0..30 {
        let (c, d, r) = (
            rng.gen_range(1..4usize),
            rng.gen_range(1..4usize),
            rng.gen_range(1..4usize),
        );
        let r = r.min(c * d);
        let ubm = DiagGmm {
            weights: DVector::from_element(c, 1.0 / c as f64),
            means: DMatrix::from_fn(c, d, |_, _| normal(&mut rng)),
            vars: DMatrix::from_fn(c, d, |_, _| rng.gen_range(0.2..2.5)),
        };
        let tv = TotalVariabilityModel {
            loading: DMatrix::from_fn(c * d, r, |_, _| normal(&mut rng)),
            rank: r,
            ubm_components: c,
            ubm_dim: d,
            ubm_ref: ubm.fingerprint(),
        };
        let stats = BaumWelchStats {
            zeroth: DVector::from_fn(c, |_, _| rng.gen_range(0.1..25.0)),
            first: DMatrix::from_fn(c, d, |_, _| 2.0 * normal(&mut rng)),
            n_frames: 50,
        };
        let got = extract_ivector(&tv, &ubm, &stats).unwrap();

        let mut n_exp = DMatrix::zeros(c * d, c * d);
        let mut inv_var = DMatrix::zeros(c * d, c * d);
        let mut f_flat = DVector::zeros(c * d);
        for k in 0..c {
            for j in 0..d {
                n_exp[(k * d + j, k * d + j)] = stats.zeroth[k];
                inv_var[(k * d + j, k * d + j)] = 1.0 / ubm.vars[(k, j)];
                f_flat[k * d + j] = stats.first[(k, j)];
            }
        }
        let precision =
            DMatrix::identity(r, r) + tv.loading.transpose() * &inv_var * &n_exp * &tv.loading;
        let want = precision.try_inverse().unwrap() * tv.loading.transpose() * &inv_var * f_flat;
        let err = (got.values - want).amax();
        worst_oracle = worst_oracle.max(err);
        assert!(err <= 1e-10, "dense-oracle mismatch {err}");
    }
    pass(
        "ivector-closed-form",
        format!("scalar err {worst_scalar:.2e}, oracle err {worst_oracle:.2e}"),
    );
}

// --- convnet gradients ------------------------------------------------------

#[test]
fn acceptance_convnet_gradients() {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    // Two reduced architectures to exercise conv, pool routing, the dense
    // layers and the softmax head with different shapes.
    let configs = [
        NetConfig {
            input_h: 32,
            input_w: 32,
            channels: [2, 2, 2, 2, 2],
            ..NetConfig::default()
        },
        NetConfig {
            input_h: 64,
            input_w: 32,
            channels: [2, 3, 4, 5, 6],
            ..NetConfig::default()
        },
    ];
    for (ci, cfg) in configs.iter().enumerate() {
        let net = build_network(3, cfg, 40 + ci as u64).unwrap();
        let mel = MelSpectrogram {
            values: DMatrix::from_fn(cfg.input_h, cfg.input_w, |_, _| normal(&mut rng)),
            clip_id: format!("gc{ci}"),
        };
        let max_rel = gradient_check(&net, &mel, ci % 3, 1e-5, 250, 7 + ci as u64).unwrap();
        worst = worst.max(max_rel);
        assert!(
            max_rel <= 1e-4,
            "config {ci}: max relative gradient error {max_rel}"
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 120, "took {elapsed:?}, budget 2 min");
    pass(
        "convnet-gradients",
        format!("max relative error {worst:.2e}, {elapsed:?}"),
    );
}

// --- plda oracle -------------------------------------------------------------

#[test]
fn acceptance_plda_oracle() {
    // 1-D model, identity preprocessing; oracle evaluates the three
    // Gaussian log-densities with scalar arithmetic.
    let model = |b: f64, w: f64| {
        PldaModel::new(
            DVector::zeros(1),
            DMatrix::identity(1, 1),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, w),
        )
        .unwrap()
    };
    let oracle = |b: f64, w: f64, e: f64, t: f64| -> f64 {
        let a = b + w;
        let ln_marginal =
            |x: f64| -0.5 * (x * x / a + a.ln() + (2.0 * std::f64::consts::PI).ln());
        let det = a * a - b * b;
        let quad = (a * e * e - 2.0 * b * e * t + a * t * t) / det;
        let joint = -0.5 * (quad + det.ln() + 2.0 * (2.0 * std::f64::consts::PI).ln());
        joint - ln_marginal(e) - ln_marginal(t)
    };

    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let mut worst_oracle: f64 = 0.0;
    let mut worst_symmetry: f64 = 0.0;
    for _ in 0..50 {
        let b = rng.gen_range(0.2..3.0);
        let w = rng.gen_range(0.2..3.0);
        let plda = model(b, w);
        let e = rng.gen_range(-3.0..3.0f64);
        let t = rng.gen_range(-3.0..3.0f64);
        if e == 0.0 || t == 0.0 {
            continue;
        }
        let ev = DVector::from_element(1, e);
        let tv = DVector::from_element(1, t);
        let got = plda_score(&plda, &ev, &tv).unwrap();
        // Preprocessing length-normalizes scalars to their sign.
        let want = oracle(b, w, e.signum(), t.signum());
        let err = (got - want).abs();
        worst_oracle = worst_oracle.max(err);
        assert!(err <= 1e-10, "b={b} w={w}: {got} vs oracle {want}");
        let sym = (got - plda_score(&plda, &tv, &ev).unwrap()).abs();
        worst_symmetry = worst_symmetry.max(sym);
        assert!(sym <= 1e-10, "asymmetry {sym}");
    }

    // Degenerate between-class covariance: the two hypotheses coincide.
    let degenerate = model(0.0, 1.3);
    let mut worst_zero: f64 = 0.0;
    for (e, t) in [(1.0, 1.0), (1.0, -1.0), (0.4, 2.0), (-2.0, 0.1)] {
        let s = plda_score(
            &degenerate,
            &DVector::from_element(1, e),
            &DVector::from_element(1, t),
        )
        .unwrap();
        worst_zero = worst_zero.max(s.abs());
        assert!(s.abs() <= 1e-8, "score {s} with zero between-class");
    }
    pass(
        "plda-oracle",
        format!(
            "oracle err {worst_oracle:.2e}, symmetry {worst_symmetry:.2e}, degenerate {worst_zero:.2e}"
        ),
    );
}

// --- EER oracle ---------------------------------------------------------------

/// Exhaustive threshold-enumeration oracle with direct counting; same
/// operating-point definition, independent arithmetic path.
fn eer_oracle(targets: &[f64], nontargets: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    let far = |t: f64| nontargets.iter().filter(|&&s| s >= t).count() as f64 / nontargets.len() as f64;
    let frr = |t: f64| targets.iter().filter(|&&s| s < t).count() as f64 / targets.len() as f64;
    let mut prev = (1.0f64, 0.0f64);
    let cross = |a: (f64, f64), b: (f64, f64)| -> f64 {
        let d1 = a.0 - a.1;
        let d2 = b.0 - b.1;
        if d2 == 0.0 {
            return b.0;
        }
        if d1 == d2 {
            return a.0;
        }
        a.0 + d1 / (d1 - d2) * (b.0 - a.0)
    };
    for &t in &thresholds {
        let point = (far(t), frr(t));
        if point.0 - point.1 <= 0.0 {
            return cross(prev, point);
        }
        prev = point;
    }
    cross(prev, (0.0, 1.0))
}

#[test]
fn acceptance_eer_oracle() {
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for set in 0..200 {
        let nt = rng.gen_range(1..500usize);
        let nn = rng.gen_range(1..501usize);
        let shift = rng.gen_range(-1.0..2.0);
        let targets: Vec<f64> = (0..nt).map(|_| normal(&mut rng) + shift).collect();
        let nons: Vec<f64> = (0..nn).map(|_| normal(&mut rng)).collect();
        let got = compute_eer(&targets, &nons).unwrap();
        let want = eer_oracle(&targets, &nons);
        let err = (got - want).abs();
        worst = worst.max(err);
        assert!(err <= 1e-9, "set {set}: {got} vs oracle {want}");
        assert!((0.0..=1.0).contains(&got), "eer {got} outside [0,1]");

        // Strictly increasing transforms leave the EER unchanged.
        let affine: Vec<f64> = targets.iter().map(|&v| 2.5 * v - 7.0).collect();
        let affine_n: Vec<f64> = nons.iter().map(|&v| 2.5 * v - 7.0).collect();
        let cubic: Vec<f64> = targets.iter().map(|&v| v.powi(3) + 2.0 * v).collect();
        let cubic_n: Vec<f64> = nons.iter().map(|&v| v.powi(3) + 2.0 * v).collect();
        let ea = compute_eer(&affine, &affine_n).unwrap();
        let ec = compute_eer(&cubic, &cubic_n).unwrap();
        assert!(
            (ea - got).abs() <= 1e-12 && (ec - got).abs() <= 1e-12,
            "set {set}: transform moved the EER: {got} vs affine {ea} / cubic {ec}"
        );
    }
    pass("eer-oracle", format!("200 trial sets, worst gap {worst:.2e}"));
}

// --- end-to-end recognition (shared with the score-matrix criterion) ---------

struct EndToEnd {
    reports: Vec<EvalReport>,
    matrices: Vec<(SystemKind, ScoreMatrix)>,
    elapsed: std::time::Duration,
}

static END_TO_END: OnceLock<EndToEnd> = OnceLock::new();

fn end_to_end() -> &'static EndToEnd {
    END_TO_END.get_or_init(|| {
        let start = Instant::now();
        let dir = tempfile::tempdir().expect("tempdir");
        let spec = SynthSpec {
            n_train_artists: 100,
            n_eval_artists: 20,
            tracks_per_artist: 20,
            track_seconds: 12.0,
            within_artist_spread: 0.1,
            between_artist_spread: 1.0, // separability ratio 10
            vocal_fraction: 0.3,
            mode: CorpusMode::Feature,
            feature_fps: 10,
            mel_segments_per_track: 2,
            feature_dim: 20,
        };
        let manifest = generate_corpus(&spec, 99, dir.path()).expect("corpus");
        let cfg = SweepConfig {
            ubm: UbmTrainConfig {
                n_components: 64,
                n_iters: 8,
                init: 6,
                ..UbmTrainConfig::default()
            },
            tv_rank: 48,
            tv_iters: 5,
            net: NetConfig {
                channels: [4, 8, 16, 16, 32],
                learning_rate: 0.005,
                batch_size: 16,
                epochs: 5,
                ..NetConfig::default()
            },
            ..SweepConfig::default()
        };
        let systems: BTreeSet<SystemKind> = SystemKind::ALL.into_iter().collect();
        let out = dir.path().join("out");
        let reports =
            run_sweep(dir.path(), &manifest, &cfg, &[100], &systems, 99, &out).expect("sweep");
        let matrices = SystemKind::ALL
            .into_iter()
            .map(|s| {
                let m = read_matrix_csv(&out.join(format!("matrix-{s}-n100.csv")))
                    .expect("matrix file");
                (s, m)
            })
            .collect();
        EndToEnd {
            reports,
            matrices,
            elapsed: start.elapsed(),
        }
    })
}

fn report_for(reports: &[EvalReport], system: SystemKind) -> &EvalReport {
    reports
        .iter()
        .find(|r| r.system == system)
        .expect("system report")
}

#[test]
fn acceptance_end_to_end_recognition() {
    let run = end_to_end();
    let ivec = report_for(&run.reports, SystemKind::Ivec);
    let dcnn = report_for(&run.reports, SystemKind::Dcnn);
    let late = report_for(&run.reports, SystemKind::Late);

    assert!(
        ivec.eer <= 0.10,
        "i-vector EER {} above 0.10",
        ivec.eer
    );
    assert!(
        ivec.accuracy >= 0.80,
        "i-vector accuracy {} below 0.80",
        ivec.accuracy
    );
    assert!(dcnn.eer <= 0.15, "convnet EER {} above 0.15", dcnn.eer);
    let floor = ivec.eer.min(dcnn.eer);
    assert!(
        late.eer <= floor + 0.01,
        "late fusion EER {} degrades past min branch {floor} + 0.01",
        late.eer
    );
    assert!(
        run.elapsed.as_secs() < 600,
        "end-to-end run took {:?}, budget 10 min",
        run.elapsed
    );
    pass(
        "end-to-end-recognition",
        format!(
            "ivec eer {:.4}/acc {:.3}, dcnn eer {:.4}, late eer {:.4}, {:?}",
            ivec.eer, ivec.accuracy, dcnn.eer, late.eer, run.elapsed
        ),
    );
}

#[test]
fn acceptance_score_matrix_structure() {
    let run = end_to_end();
    let mut summary = String::new();
    for (system, matrix) in &run.matrices {
        let diag = matrix.mean_diagonal();
        let off = matrix.mean_off_diagonal();
        assert!(
            diag > off,
            "{system}: mean diagonal {diag} not above mean off-diagonal {off}"
        );
        summary.push_str(&format!("{system} {:.1}>{:.1} ", diag, off));
    }
    pass("score-matrix-structure", summary.trim());
}

// --- protocol invariants --------------------------------------------------------

#[test]
fn acceptance_protocol_invariants() {
    use ivx_core::corpus::split_corpus;

    let track = |artist: &str, i: usize, split: TrackSplit| TrackEntry {
        track_id: format!("{artist}-tr{i:02}"),
        path: format!("tracks/{artist}-tr{i:02}.ivxm"),
        split,
    };
    let eval_artist = |id: &str, n: usize| ArtistEntry {
        artist_id: id.into(),
        is_vocal: false,
        role: ArtistRole::Eval,
        tracks: (0..n).map(|i| track(id, i, TrackSplit::Enroll)).collect(),
    };

    // 19 tracks: protocol error naming the artist.
    let short = CorpusManifest {
        seed: 1,
        mode: CorpusMode::Feature,
        artists: vec![eval_artist("e-short", 19)],
    };
    match split_corpus(&short) {
        Err(Error::Protocol(msg)) => assert!(msg.contains("e-short"), "{msg}"),
        other => panic!("expected protocol error for 19 tracks, got {other:?}"),
    }

    // Proper split: exactly 15 enroll + 5 test out of 20.
    let ok = CorpusManifest {
        seed: 1,
        mode: CorpusMode::Feature,
        artists: vec![eval_artist("e-ok", 20)],
    };
    let split = split_corpus(&ok).unwrap();
    let enroll = split.artists[0]
        .tracks
        .iter()
        .filter(|t| t.split == TrackSplit::Enroll)
        .count();
    let test = split.artists[0]
        .tracks
        .iter()
        .filter(|t| t.split == TrackSplit::Test)
        .count();
    assert_eq!((enroll, test), (15, 5));

    // Wrong enroll/test balance is rejected on validation.
    let mut unbalanced = split.clone();
    unbalanced.artists[0].tracks[0].split = TrackSplit::Test;
    assert!(matches!(
        validate_manifest(&unbalanced),
        Err(Error::Protocol(_))
    ));

    // Train/eval artist sets may not overlap (duplicate id across roles).
    let mut overlap = split.clone();
    overlap.artists.push(ArtistEntry {
        artist_id: "e-ok".into(),
        is_vocal: false,
        role: ArtistRole::Train,
        tracks: vec![track("e-okx", 0, TrackSplit::Train)],
    });
    match validate_manifest(&overlap) {
        Err(Error::Protocol(msg)) => assert!(msg.contains("duplicate artist"), "{msg}"),
        other => panic!("expected protocol error for overlap, got {other:?}"),
    }

    // A training artist may not carry enroll/test splits.
    let mut leaky = split;
    leaky.artists.push(ArtistEntry {
        artist_id: "t-leak".into(),
        is_vocal: false,
        role: ArtistRole::Train,
        tracks: vec![track("t-leak", 0, TrackSplit::Enroll)],
    });
    assert!(matches!(validate_manifest(&leaky), Err(Error::Protocol(_))));

    pass(
        "protocol-invariants",
        "20/15/5 enforced; overlap, shortage and split leaks all rejected",
    );
}

// --- determinism -----------------------------------------------------------------

#[test]
fn acceptance_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_train_artists: 16,
        n_eval_artists: 6,
        tracks_per_artist: 20,
        track_seconds: 12.0,
        within_artist_spread: 0.1,
        between_artist_spread: 1.0,
        mode: CorpusMode::Feature,
        mel_segments_per_track: 1,
        ..SynthSpec::default()
    };
    let manifest = generate_corpus(&spec, 4242, dir.path()).unwrap();
    let cfg = SweepConfig {
        ubm: UbmTrainConfig {
            n_components: 16,
            n_iters: 5,
            init: 4,
            ..UbmTrainConfig::default()
        },
        tv_rank: 16,
        tv_iters: 4,
        net: NetConfig {
            channels: [2, 4, 8, 8, 16],
            learning_rate: 0.005,
            batch_size: 16,
            epochs: 2,
            ..NetConfig::default()
        },
        ..SweepConfig::default()
    };
    let systems: BTreeSet<SystemKind> = SystemKind::ALL.into_iter().collect();
    let out_a = dir.path().join("run-a");
    let out_b = dir.path().join("run-b");
    run_sweep(dir.path(), &manifest, &cfg, &[16], &systems, 11, &out_a).unwrap();
    run_sweep(dir.path(), &manifest, &cfg, &[16], &systems, 11, &out_b).unwrap();

    let a = std::fs::read(out_a.join("report.csv")).unwrap();
    let b = std::fs::read(out_b.join("report.csv")).unwrap();
    assert_eq!(a, b, "report.csv differs between identical runs");
    for system in SystemKind::ALL {
        let fa = std::fs::read(out_a.join(format!("scores-{system}-n16.csv"))).unwrap();
        let fb = std::fs::read(out_b.join(format!("scores-{system}-n16.csv"))).unwrap();
        assert_eq!(fa, fb, "scores-{system} differ between identical runs");
    }
    pass(
        "determinism",
        format!("report.csv identical across runs ({} bytes)", a.len()),
    );
}

// --- persistence -------------------------------------------------------------------

#[test]
fn acceptance_persistence() {
    use ivx_core::backend::{enroll_artist, train_plda};
    use ivx_core::tvspace::{EmbeddingKind, EmbeddingVector};

    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(3000);

    // Build one genuine instance of every model kind.
    let frames = DMatrix::from_fn(400, 3, |_, j| j as f64 + normal(&mut rng));
    let seq = FeatureSequence {
        frames,
        clip_id: "persist".into(),
    };
    let gmm = train_ubm(
        &[seq],
        &UbmTrainConfig {
            n_components: 3,
            n_iters: 3,
            init: 3,
            seed: 9,
            ..UbmTrainConfig::default()
        },
    )
    .unwrap()
    .model;
    let stats: Vec<BaumWelchStats> = (0..30)
        .map(|i| {
            ivx_core::ubm::accumulate_stats(
                &gmm,
                &FeatureSequence {
                    frames: DMatrix::from_fn(40, 3, |_, _| normal(&mut rng)),
                    clip_id: format!("s{i}"),
                },
            )
            .unwrap()
        })
        .collect();
    let tv = train_tv(&gmm, &stats, 4, 3, 5).unwrap().model;
    let net = build_network(
        4,
        &NetConfig {
            input_h: 32,
            input_w: 32,
            channels: [2, 2, 2, 2, 2],
            ..NetConfig::default()
        },
        13,
    )
    .unwrap();
    let embed = |seed: u64, id: &str| {
        let mut r = ChaCha20Rng::seed_from_u64(seed);
        EmbeddingVector {
            values: DVector::from_fn(6, |_, _| normal(&mut r)),
            kind: EmbeddingKind::Ivector,
            track_id: id.into(),
        }
    };
    let vectors: Vec<EmbeddingVector> = (0..12).map(|i| embed(i, &format!("v{i}"))).collect();
    let labels: Vec<String> = (0..12).map(|i| format!("c{}", i % 3)).collect();
    let plda = train_plda(&vectors, &labels).unwrap();
    let artists = vec![
        enroll_artist("e0001", &vectors[0..3]).unwrap(),
        enroll_artist("e0002", &vectors[3..6]).unwrap(),
    ];

    let kinds: Vec<(&str, Model)> = vec![
        ("gmm", Model::Gmm(gmm)),
        ("tv", Model::TotalVariability(tv)),
        ("net", Model::Net(net)),
        ("plda", Model::Plda(plda)),
        ("artists", Model::ArtistSet(artists)),
    ];
    for (name, model) in &kinds {
        let path = dir.path().join(format!("{name}.ivxm"));
        save_model(&path, model).unwrap();
        let reloaded = load_model(&path).unwrap();
        // Bit-exactness: saving the reload reproduces the file exactly.
        let path2 = dir.path().join(format!("{name}-again.ivxm"));
        save_model(&path2, &reloaded).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap(),
            "{name}: round trip not bit-exact"
        );

        // Corruption: truncation must fail without returning a model.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        let tpath = dir.path().join(format!("{name}-trunc.ivxm"));
        std::fs::write(&tpath, &bytes).unwrap();
        assert!(
            matches!(load_model(&tpath), Err(Error::Corruption(_))),
            "{name}: truncation not rejected"
        );

        // Version bump: explicit unsupported-version error.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = bytes[4].wrapping_add(1);
        let vpath = dir.path().join(format!("{name}-vers.ivxm"));
        std::fs::write(&vpath, &bytes).unwrap();
        assert!(
            matches!(load_model(&vpath), Err(Error::UnsupportedVersion(_))),
            "{name}: version bump not rejected"
        );
    }
    pass(
        "persistence",
        "5 model kinds bit-exact; truncation and version bump rejected",
    );
}
