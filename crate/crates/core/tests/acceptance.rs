//! Acceptance suite. Every test prints one `criterion N ... PASS|FAIL` line
//! before asserting. The heavier studies are computed once and shared.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use soke::amg::{triples_from_tokens, DecodeMode, DecodeOutput};
use soke::deto::{
    quantize, straight_through_gradcheck, train_tokenizer, Codebook, DecoupledTokenizer, DetoConfig, DetoTrainConfig,
    PartTokenizer, TokenizerArch,
};
use soke::metrics::{dtw, evaluate_split, pa_mpjpe, procrustes_align, residual, EvalSample};
use soke::motion::{
    rodrigues, synthesize_dataset, KinematicChain, MotionSequence, Part, PartLayout, PartMotion, SynthConfig, Vec3,
};
use soke::pipeline::{derive_seed, synthesize_splits, RunConfig, TextToSign};
use soke::posefit::{
    fit_sequence, observe, pack_refined, refined_joints, CameraWeakPerspective, FitConfig, FitLog, Objective,
};
use soke::retrieval::{build_dictionary, RetrievalConfig, SignDictionary, SuffixLemmatizer};

type Pairs = Vec<(String, MotionSequence)>;

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("criterion {n:>2} {name}: {tag} ({detail})");
}

fn under(n: u32, name: &str, elapsed: Duration, limit: Duration) -> bool {
    let ok = elapsed < limit;
    if !ok {
        println!("criterion {n:>2} {name}: runtime {elapsed:?} exceeds {limit:?}");
    }
    ok
}

/// Exhaustive nearest neighbour written without the library's search loop:
/// every distance is materialised, then the first minimum wins.
fn nearest_oracle(codes: &[f64], dim: usize, v: &[f64]) -> usize {
    let dists: Vec<f64> = codes
        .chunks(dim)
        .map(|c| c.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum())
        .collect();
    let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    dists.iter().position(|&d| d == min).unwrap()
}

#[test]
fn criterion_01_quantizer_matches_exhaustive_search() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    let mut checked = 0;
    for size in [96usize, 192] {
        for i in 0..1000 {
            let dim = rng.gen_range(2..=16);
            let mut codes: Vec<f64> = (0..size * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // Some codebooks carry duplicate rows so ties are exercised.
            if i % 10 == 0 {
                let (a, b) = (rng.gen_range(0..size), rng.gen_range(0..size));
                let row: Vec<f64> = codes[a * dim..(a + 1) * dim].to_vec();
                codes[b * dim..(b + 1) * dim].copy_from_slice(&row);
            }
            let rows = rng.gen_range(1..=8);
            let mut latent: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-1.2..1.2)).collect();
            if i % 7 == 0 {
                let c = rng.gen_range(0..size);
                latent[..dim].copy_from_slice(&codes[c * dim..(c + 1) * dim]);
            }
            let book = Codebook::new(Part::Body, dim, codes.clone()).unwrap();
            let got = quantize(&latent, &book).unwrap();
            let want: Vec<usize> = latent.chunks(dim).map(|v| nearest_oracle(&codes, dim, v)).collect();
            mismatches += got.ids.iter().zip(&want).filter(|(a, b)| a != b).count();
            checked += 1;
        }
    }
    let fast = under(1, "quantizer", start.elapsed(), Duration::from_secs(5));
    let pass = mismatches == 0 && checked == 2000 && fast;
    verdict(
        1,
        "quantizer equals exhaustive search",
        pass,
        &format!("{checked} pairs, {mismatches} mismatches, {:.2?}", start.elapsed()),
    );
    assert!(pass);
}

fn posefit_gradient_error(objective: &Objective, theta: &[f64], cam: &CameraWeakPerspective) -> f64 {
    let eps = 1e-6;
    let (_, mut analytic, gcam) = objective.gradient(theta, cam).unwrap();
    analytic.extend_from_slice(&gcam);
    let total = |th: &[f64], c: &CameraWeakPerspective| objective.terms(th, c).unwrap().total;
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..theta.len() {
        let (mut p, mut q) = (theta.to_vec(), theta.to_vec());
        p[i] += eps;
        q[i] -= eps;
        numeric.push((total(&p, cam) - total(&q, cam)) / (2.0 * eps));
    }
    for k in 0..3 {
        let shift = |d: f64| {
            let mut c = *cam;
            match k {
                0 => c.s += d,
                1 => c.tx += d,
                _ => c.ty += d,
            }
            c
        };
        numeric.push((total(theta, &shift(eps)) - total(theta, &shift(-eps))) / (2.0 * eps));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-12)
}

fn random_pose_motion(rng: &mut ChaCha8Rng, frames: usize, amp: f32) -> MotionSequence {
    let mut m = MotionSequence::zeros(frames, PartLayout::default()).unwrap();
    for f in 0..frames {
        for v in m.frame_mut(f) {
            *v = rng.gen_range(-amp..=amp);
        }
    }
    m
}

#[test]
fn criterion_02_gradients_match_finite_differences() {
    let start = Instant::now();
    let arch = TokenizerArch {
        code_dim: 4,
        width: 6,
        downsample: 4,
        w_emb: 1.0,
        w_com: 0.25,
    };
    let mut worst_tok = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let part = Part::ALL[seed as usize % 3];
        let width = rng.gen_range(2..=5);
        let frames = rng.gen_range(5..=12);
        let mut tok = PartTokenizer::new(part, width, rng.gen_range(3..=8), arch, &mut rng);
        // Zero-initialised biases can leave a ReLU input at exactly 0 where
        // the loss has no derivative; random biases move off that set.
        let biases: Vec<String> = tok
            .params
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| n.ends_with(".b"))
            .collect();
        for name in biases {
            let id = tok.params.id(&name).unwrap();
            for v in tok.params.get_mut(id).data.iter_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
        let data = (0..frames * width).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = PartMotion::new(part, width, data).unwrap();
        worst_tok = worst_tok.max(straight_through_gradcheck(&tok, &m, 1e-5).unwrap());
    }

    let chain = KinematicChain::toy(PartLayout::default()).unwrap();
    let config = FitConfig::default();
    let mut worst_fit = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let frames = rng.gen_range(1..=3);
        let init = random_pose_motion(&mut rng, frames, 0.7);
        let cam = CameraWeakPerspective {
            s: rng.gen_range(0.5..1.5),
            tx: rng.gen_range(-50.0..50.0),
            ty: rng.gen_range(-50.0..50.0),
        };
        let mut obs = observe(&chain, &random_pose_motion(&mut rng, frames, 0.7), &cam).unwrap();
        for o in &mut obs {
            for j in &mut o.joints {
                j[2] = rng.gen_range(0.1..=1.0);
            }
        }
        let objective = Objective::new(&chain, &init, &obs, &config).unwrap();
        worst_fit = worst_fit.max(posefit_gradient_error(&objective, &pack_refined(&init, &chain), &cam));
    }
    let fast = under(2, "gradients", start.elapsed(), Duration::from_secs(60));
    let pass = worst_tok < 1e-3 && worst_fit < 1e-3 && fast;
    verdict(
        2,
        "gradient fidelity",
        pass,
        &format!(
            "tokenizer worst {worst_tok:.2e}, posefit worst {worst_fit:.2e} over 20 instances each, {:.1?}",
            start.elapsed()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_03_tokenizer_overfits_eight_sequences() {
    let start = Instant::now();
    let synth = SynthConfig {
        n_sentences: 8,
        noise_amplitude: 0.0,
        ..Default::default()
    };
    let corpus: Vec<MotionSequence> = synthesize_dataset(&synth, 1)
        .unwrap()
        .into_iter()
        .map(|(_, m)| m)
        .collect();
    let config = DetoConfig {
        code_dim: 32,
        width: 48,
        train: DetoTrainConfig {
            epochs: 2000,
            batch_size: 8,
            lr: 2e-3,
            log_every: 100,
            ..Default::default()
        },
        ..Default::default()
    };
    let (tok, log) = train_tokenizer(&corpus, &config, 0).unwrap();
    let steps = log.parts[0].steps.last().unwrap().step + 1;
    let drops: Vec<f64> = log.parts.iter().map(|p| p.first_rec() / p.last_rec()).collect();
    let chain = KinematicChain::toy(synth.layout).unwrap();
    let err = corpus
        .iter()
        .map(|m| pa_mpjpe(&chain, &tok.round_trip(m).unwrap(), m).unwrap())
        .sum::<f64>()
        / corpus.len() as f64;
    let bound = 0.05 * chain.mean_bone_length();
    let fast = under(3, "tokenizer overfit", start.elapsed(), Duration::from_secs(600));
    let pass = steps <= 2000 && drops.iter().all(|&d| d >= 10.0) && err < bound && fast;
    verdict(
        3,
        "tokenizer overfit",
        pass,
        &format!(
            "{steps} steps, reconstruction drop B/LH/RH {:.0}x/{:.0}x/{:.0}x, PA-MPJPE {err:.2} mm < {bound:.1} mm, {:.0?}",
            drops[0],
            drops[1],
            drops[2],
            start.elapsed()
        ),
    );
    assert!(pass);
}

/// Desk-scale configuration of the decoding-mode study.
fn mode_study_config(seed: u64) -> RunConfig {
    let overrides: Vec<String> = [
        "deto.code_dim=32",
        "deto.width=48",
        "deto.train.epochs=150",
        "amg.train.steps=400",
        "retrieval.enabled=false",
    ]
    .map(String::from)
    .to_vec();
    let mut c = RunConfig::from_toml("", &overrides).unwrap();
    c.seed = seed;
    c
}

const MODE_SEEDS: u64 = 5;

struct ModeRun {
    mode: DecodeMode,
    train_secs: f64,
    heldout_dtw: f64,
    train_exact: usize,
    train_outputs: Vec<DecodeOutput>,
    train_wall_ms: Vec<f64>,
}

struct SeedStudy {
    n_train: usize,
    runs: Vec<ModeRun>,
}

fn eval_samples(data: &Pairs) -> Vec<EvalSample> {
    data.iter()
        .enumerate()
        .map(|(i, (t, m))| EvalSample {
            id: i.to_string(),
            text: t.clone(),
            reference: m.clone(),
        })
        .collect()
}

fn heldout_score(system: &TextToSign, heldout: &Pairs, config: &RunConfig) -> f64 {
    let chain = KinematicChain::toy(config.synth.layout).unwrap();
    evaluate_split("heldout", system, &eval_samples(heldout), &chain, &config.metrics, 1)
        .unwrap()
        .aggregates
        .mean_dtw_pa_jpe
}

fn tokenizer_for(train: &Pairs, extra: &Pairs, config: &RunConfig) -> DecoupledTokenizer {
    let motions: Vec<MotionSequence> = train.iter().chain(extra).map(|(_, m)| m.clone()).collect();
    train_tokenizer(&motions, &config.deto, derive_seed(config.seed, "deto"))
        .unwrap()
        .0
}

fn mode_study() -> &'static Vec<SeedStudy> {
    static STUDY: OnceLock<Vec<SeedStudy>> = OnceLock::new();
    STUDY.get_or_init(|| {
        (0..MODE_SEEDS)
            .map(|seed| {
                let config = mode_study_config(seed);
                let [train, heldout, _] = synthesize_splits(&config.synth, &config.data, seed).unwrap();
                let deto = tokenizer_for(&train, &Vec::new(), &config);
                let runs = [DecodeMode::Sequential, DecodeMode::Parallel, DecodeMode::Multihead]
                    .into_iter()
                    .map(|mode| {
                        let mut amg = config.amg.clone();
                        amg.mode = mode;
                        let start = Instant::now();
                        let (system, _) = TextToSign::train(
                            &train,
                            deto.clone(),
                            SignDictionary::default(),
                            amg,
                            RetrievalConfig::default(),
                            derive_seed(seed, "amg"),
                        )
                        .unwrap();
                        let train_secs = start.elapsed().as_secs_f64();
                        let (mut outputs, mut wall, mut exact) = (Vec::new(), Vec::new(), 0);
                        for (text, seq) in &train {
                            let want = triples_from_tokens(&system.model.vocab, &deto.encode(seq).unwrap()).unwrap();
                            let prompt = system.prompt(text, &seq.language).unwrap();
                            let t = Instant::now();
                            let out = system.model.generate_tokens(&prompt, &seq.language).unwrap();
                            wall.push(t.elapsed().as_secs_f64() * 1e3);
                            exact += (out.triples == want) as usize;
                            outputs.push(out);
                        }
                        let heldout_dtw = heldout_score(&system, &heldout, &config);
                        println!(
                            "  seed {seed} {:<10} trained in {train_secs:.0}s, exact {exact}/{}, held-out DTW-PA-JPE {heldout_dtw:.2}",
                            mode.as_str(),
                            train.len()
                        );
                        ModeRun {
                            mode,
                            train_secs,
                            heldout_dtw,
                            train_exact: exact,
                            train_outputs: outputs,
                            train_wall_ms: wall,
                        }
                    })
                    .collect();
                SeedStudy {
                    n_train: train.len(),
                    runs,
                }
            })
            .collect()
    })
}

fn run_of(study: &SeedStudy, mode: DecodeMode) -> &ModeRun {
    study.runs.iter().find(|r| r.mode == mode).unwrap()
}

#[test]
fn criterion_04_sequential_takes_three_times_the_multihead_steps() {
    let study = mode_study();
    let (mut compared, mut violations) = (0, 0);
    let (mut seq_ms, mut mh_ms) = (0.0, 0.0);
    for s in study {
        let seq = run_of(s, DecodeMode::Sequential);
        let mh = run_of(s, DecodeMode::Multihead);
        for (a, b) in seq.train_outputs.iter().zip(&mh.train_outputs) {
            // Each mode's own count law holds for every sample.
            if a.step_count != 3 * a.triples.len() || b.step_count != b.triples.len() {
                violations += 1;
            }
            if a.triples.len() == b.triples.len() {
                compared += 1;
                if a.step_count != 3 * b.step_count {
                    violations += 1;
                }
            }
        }
        seq_ms += seq.train_wall_ms.iter().sum::<f64>();
        mh_ms += mh.train_wall_ms.iter().sum::<f64>();
    }
    let ratio = mh_ms / seq_ms;
    let pass = violations == 0 && compared > 0;
    verdict(
        4,
        "step-count law",
        pass,
        &format!(
            "{compared} equal-length sample pairs, {violations} violations; informational wall ratio {ratio:.2} ({})",
            if ratio < 0.6 { "< 0.6" } else { "not < 0.6" }
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_05_multihead_is_not_worse_than_other_modes() {
    let study = mode_study();
    let (mut le_seq, mut lt_par) = (0, 0);
    let mut rows = Vec::new();
    for s in study {
        let seq = run_of(s, DecodeMode::Sequential).heldout_dtw;
        let par = run_of(s, DecodeMode::Parallel).heldout_dtw;
        let mh = run_of(s, DecodeMode::Multihead).heldout_dtw;
        le_seq += (mh <= seq) as usize;
        lt_par += (mh < par) as usize;
        rows.push(format!("seq {seq:.1} par {par:.1} mh {mh:.1}"));
    }
    let need = 4;
    let pass = le_seq >= need && lt_par >= need;
    verdict(
        5,
        "decoding-quality ordering",
        pass,
        &format!(
            "held-out DTW-PA-JPE; mh <= seq on {le_seq}/{MODE_SEEDS} seeds, mh < par on {lt_par}/{MODE_SEEDS}; {}",
            rows.join("; ")
        ),
    );
    assert!(pass);
}

/// Desk-scale configuration of the retrieval study: training word frequencies
/// follow a Zipf law while held-out sentences draw words uniformly, so rare
/// words matter at test time. The tokenizer also sees the isolated signs.
fn retrieval_study_config(seed: u64) -> RunConfig {
    let overrides: Vec<String> = [
        "synth.n_sentences=200",
        "synth.word_zipf=1.5",
        "data.heldout_sentences=40",
        "data.heldout_uniform_words=true",
        "deto.code_dim=32",
        "deto.width=48",
        "deto.train.epochs=60",
        "amg.train.steps=1500",
    ]
    .map(String::from)
    .to_vec();
    let mut c = RunConfig::from_toml("", &overrides).unwrap();
    c.seed = seed;
    c
}

#[test]
fn criterion_06_retrieval_lowers_heldout_error() {
    let seeds = 5u64;
    let mut rel = Vec::new();
    let mut rows = Vec::new();
    for seed in 0..seeds {
        let config = retrieval_study_config(seed);
        let [train, heldout, instances] = synthesize_splits(&config.synth, &config.data, seed).unwrap();
        let deto = tokenizer_for(&train, &instances, &config);
        let dict = build_dictionary(&instances, &deto, &SuffixLemmatizer)
            .unwrap()
            .dictionary;
        let lang = &train[0].1.language;
        let complete = config.synth.lexicon_size == dict.len()
            && train.iter().chain(&heldout).all(|(t, _)| {
                t.split(' ').all(|w| {
                    dict.get(lang, &soke::retrieval::Lemmatizer::lemma(&SuffixLemmatizer, w))
                        .is_some()
                })
            });
        assert!(complete, "dictionary must cover every lexicon word");
        let score = |retrieval: RetrievalConfig| {
            let (system, _) = TextToSign::train(
                &train,
                deto.clone(),
                dict.clone(),
                config.amg.clone(),
                retrieval,
                derive_seed(seed, "amg"),
            )
            .unwrap();
            heldout_score(&system, &heldout, &config)
        };
        let off = score(RetrievalConfig::default());
        let on = score(RetrievalConfig::on());
        println!("  seed {seed}: held-out DTW-PA-JPE without retrieval {off:.2}, with {on:.2}");
        rel.push((off - on) / off);
        rows.push(format!("{off:.1}->{on:.1}"));
    }
    let mean = rel.iter().sum::<f64>() / rel.len() as f64;
    let pass = mean >= 0.10;
    verdict(
        6,
        "retrieval benefit",
        pass,
        &format!(
            "mean relative reduction {:.1}% over {seeds} seeds (need >= 10%); {}",
            100.0 * mean,
            rows.join(", ")
        ),
    );
    assert!(pass);
}

/// Minimum over every monotone path from (0, 0) to (n-1, m-1).
fn brute_force_dtw(cost: &[Vec<f64>]) -> f64 {
    fn walk(cost: &[Vec<f64>], i: usize, j: usize) -> f64 {
        let (n, m) = (cost.len(), cost[0].len());
        let here = cost[i][j];
        if i == n - 1 && j == m - 1 {
            return here;
        }
        let mut best = f64::INFINITY;
        if i + 1 < n {
            best = best.min(walk(cost, i + 1, j));
        }
        if j + 1 < m {
            best = best.min(walk(cost, i, j + 1));
        }
        if i + 1 < n && j + 1 < m {
            best = best.min(walk(cost, i + 1, j + 1));
        }
        here + best
    }
    walk(cost, 0, 0)
}

#[test]
fn criterion_07_dtw_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut pairs = 0;
    let mut mismatches = 0;
    for n in 1..=6 {
        for m in 1..=6 {
            for _ in 0..15 {
                let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-20..=20) as f64).collect();
                let b: Vec<f64> = (0..m).map(|_| rng.gen_range(-20..=20) as f64).collect();
                let cost: Vec<Vec<f64>> = a.iter().map(|x| b.iter().map(|y| (x - y).abs()).collect()).collect();
                let dp = dtw(n, m, |i, j| cost[i][j]).unwrap().total;
                mismatches += (dp != brute_force_dtw(&cost)) as usize;
                pairs += 1;
            }
        }
    }
    let pass = mismatches == 0 && pairs >= 500;
    verdict(
        7,
        "DTW equals brute force",
        pass,
        &format!("{pairs} pairs, {mismatches} mismatches"),
    );
    assert!(pass);
}

#[test]
fn criterion_08_procrustes_undoes_similarities() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut worst, mut bad_det) = (0.0f64, 0);
    for _ in 0..100 {
        let n = rng.gen_range(4..=40);
        let a: Vec<Vec3> = (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let axis_angle = [rng.gen_range(-PI..PI), rng.gen_range(-PI..PI), rng.gen_range(-PI..PI)];
        let r = rodrigues(axis_angle);
        let s = rng.gen_range(0.2..5.0);
        let t = [
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
        ];
        let b: Vec<Vec3> = a
            .iter()
            .map(|p| std::array::from_fn(|i| s * (0..3).map(|k| r[i][k] * p[k]).sum::<f64>() + t[i]))
            .collect();
        let (aligned, sim) = procrustes_align(&a, &b).unwrap();
        worst = worst.max(residual(&aligned, &b));
        bad_det += ((sim.rotation_det() - 1.0).abs() > 1e-9) as usize;
    }
    let pass = worst < 1e-8 && bad_det == 0;
    verdict(
        8,
        "Procrustes invariance",
        pass,
        &format!("100 transforms, worst residual {worst:.2e}, {bad_det} improper rotations"),
    );
    assert!(pass);
}

#[test]
fn criterion_09_posefit_recovers_grid_search_optimum() {
    let chain = KinematicChain::toy(PartLayout::default()).unwrap();
    let cam = CameraWeakPerspective {
        s: 0.8,
        tx: 320.0,
        ty: 240.0,
    };
    let config = FitConfig::default();
    let layout = PartLayout::default();
    let mut logs: Vec<FitLog> = Vec::new();
    let mut worst = 0.0f64;
    let mut cases = Vec::new();
    for name in ["l_elbow", "r_elbow", "l_shoulder"] {
        let joint = chain.names.iter().position(|n| n == name).unwrap();
        assert!(refined_joints(&chain).contains(&joint));
        let pose = |angle: f64| {
            let mut m = MotionSequence::zeros(1, layout).unwrap();
            let o = layout.joint_param_offset(joint);
            m.frame_mut(0)[o + 2] = angle as f32;
            m
        };
        let obs = observe(&chain, &pose(0.5), &cam).unwrap();
        let loss_at = |angle: f64| {
            let m = pose(angle);
            Objective::new(&chain, &m, &obs, &config)
                .unwrap()
                .terms(&pack_refined(&m, &chain), &cam)
                .unwrap()
                .total
        };
        let steps = (2.0 * PI / 1e-3).round() as i64;
        let (mut best_loss, mut best_angle) = (f64::INFINITY, 0.0);
        for i in 0..=steps {
            let a = -PI + i as f64 * 1e-3;
            let l = loss_at(a);
            if l < best_loss {
                (best_loss, best_angle) = (l, a);
            }
        }
        let (out, log) = fit_sequence(&chain, &pose(0.0), &obs, cam, &config).unwrap();
        let fitted = chain.joint_rotation(out.frame(0), joint)[2];
        worst = worst.max((fitted - best_angle).abs());
        cases.push(format!("{name} {fitted:.4} vs grid {best_angle:.3}"));
        logs.push(log);
    }
    let monotone = logs.iter().filter(|l| l.is_monotone()).count();
    let pass = worst < 1e-2 && monotone == logs.len();
    verdict(
        9,
        "pose-fit recovery",
        pass,
        &format!("{}; monotone in {monotone}/{} runs", cases.join(", "), logs.len()),
    );
    assert!(pass);
}

#[test]
fn criterion_10_multihead_reproduces_training_targets() {
    let study = mode_study();
    let first = &study[0];
    let mh = run_of(first, DecodeMode::Multihead);
    let need = (0.9 * first.n_train as f64).ceil() as usize;
    let fast = mh.train_secs < 15.0 * 60.0;
    let pass = mh.train_exact >= need && fast;
    verdict(
        10,
        "overfit generation exactness",
        pass,
        &format!(
            "{}/{} exact (need {need}), trained in {:.0}s",
            mh.train_exact, first.n_train, mh.train_secs
        ),
    );
    assert!(pass);
}

fn pipeline_aggregates(dir: &Path) -> String {
    let overrides = [
        "synth.n_sentences=8",
        "synth.lexicon_size=5",
        "data.heldout_sentences=4",
        "deto.code_dim=8",
        "deto.width=8",
        "deto.train.epochs=5",
        "amg.dim=16",
        "amg.heads=2",
        "amg.ff_dim=16",
        "amg.train.steps=20",
    ];
    let mut cmd = std::process::Command::new(env!("CARGO_BIN_EXE_soke"));
    cmd.args(["pipeline", "--quiet", "--seed", "3", "--run-dir"]).arg(dir);
    for o in overrides {
        cmd.args(["--set", o]);
    }
    let status = cmd.stdout(std::process::Stdio::null()).status().unwrap();
    assert!(status.success());
    let report: soke::metrics::EvalReport =
        serde_json::from_str(&std::fs::read_to_string(dir.join(soke::pipeline::REPORT_FILE)).unwrap()).unwrap();
    report.aggregates_json().unwrap()
}

#[test]
fn criterion_11_pipeline_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline_aggregates(a.path());
    let second = pipeline_aggregates(b.path());
    let pass = first == second && !first.is_empty();
    verdict(
        11,
        "pipeline determinism",
        pass,
        &format!(
            "report aggregates {} bytes, identical: {}",
            first.len(),
            first == second
        ),
    );
    assert!(pass);
}
