//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line with
//! the measured quantities, then asserts the criterion.

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ldm_core::dlm::layers::Mode;
use ldm_core::dlm::model::{kl_to_standard_normal, reparameterize};
use ldm_core::dlm::substrate::{quantile_keep, top_k_mask};
use ldm_core::dlm::{
    load_checkpoint, reconstruct_binary, save_checkpoint, train, Batch, Dlm, DlmConfig, ElboTerms,
    LabelKind, LatentMode,
};
use ldm_core::grids::{read_volume, write_volume, VolumeGrid};
use ldm_core::harness::{
    read_rows, run_experiment, run_fig1_replication, write_rows, Complexity, ExperimentSpec,
    Method, ResultRow, VlsmOptions,
};
use ldm_core::massuni::{
    brunner_munzel, fisher_exact_two_sided, percentile_of_sorted, ContingencyTable, TestKind,
    VoxelwiseTester,
};
use ldm_core::metrics::{dice, surface_distances};
use ldm_core::simulate::{
    generate_lesions, load_dataset, save_dataset, Blob, Dataset, DeficitModel, LabelType,
    LesionDistributionSpec, Noise, OrientationMode, StructuredOrientation, SubstrateSpec,
};

fn report(n: u32, pass: bool, detail: String) {
    println!("criterion {n}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
}

// ---------------------------------------------------------------- 1

fn choose(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Two-sided p by enumerating every table with the observed margins, in
/// exact integer arithmetic.
fn fisher_oracle(a: u64, b: u64, c: u64, d: u64) -> f64 {
    let (r1, r2, c1) = (a + b, c + d, a + c);
    let n = r1 + r2;
    let weight = |x: u64| choose(r1, x) * choose(r2, c1 - x);
    let lo = c1.saturating_sub(r2);
    let hi = r1.min(c1);
    let observed = weight(a);
    let total: u128 = (lo..=hi).map(weight).sum();
    assert_eq!(total, choose(n, c1));
    let tail: u128 = (lo..=hi).map(weight).filter(|&w| w <= observed).sum();
    tail as f64 / total as f64
}

#[test]
fn criterion_1_fisher_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let total = rng.gen_range(0..=30u64);
        let mut cells = [0u64; 4];
        for _ in 0..total {
            cells[rng.gen_range(0..4)] += 1;
        }
        let [a, b, c, d] = cells;
        let p = fisher_exact_two_sided(ContingencyTable { a, b, c, d });
        let want = if total == 0 { 1.0 } else { fisher_oracle(a, b, c, d) };
        worst = worst.max((p - want).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-10 && secs < 10.0;
    report(1, pass, format!("max |p - oracle| = {worst:.2e}, {secs:.2}s"));
    assert!(pass);
}

// ---------------------------------------------------------------- 2

/// Midrank of `v` within `pool`.
fn midrank(v: f64, pool: &[f64]) -> f64 {
    let less = pool.iter().filter(|&&u| u < v).count() as f64;
    let equal = pool.iter().filter(|&&u| u == v).count() as f64;
    less + (equal + 1.0) / 2.0
}

/// Brunner-Munzel statistic from pooled and within-group midranks; `None`
/// when both placement variances vanish.
fn bm_oracle(x: &[f64], y: &[f64]) -> Option<f64> {
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let (n1, n2) = (x.len() as f64, y.len() as f64);
    let placement = |g: &[f64]| -> (f64, f64) {
        let r: Vec<f64> = g.iter().map(|&v| midrank(v, &pooled)).collect();
        let ri: Vec<f64> = g.iter().map(|&v| midrank(v, g)).collect();
        let n = g.len() as f64;
        let mean = r.iter().sum::<f64>() / n;
        let s2 = r
            .iter()
            .zip(&ri)
            .map(|(a, b)| (a - b - mean + (n + 1.0) / 2.0).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        (mean, s2)
    };
    let (m1, s1) = placement(x);
    let (m2, s2) = placement(y);
    let denom = n1 * s1 + n2 * s2;
    if denom <= 1e-12 * (n1 + n2) {
        return None;
    }
    Some(n1 * n2 * (m2 - m1) / ((n1 + n2) * denom.sqrt()))
}

#[test]
fn criterion_2_brunner_munzel_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut compared = 0;
    let mut agree_untestable = true;
    for _ in 0..200 {
        let n1 = rng.gen_range(5..=20);
        let n2 = rng.gen_range(5..=20);
        let spread = rng.gen_range(3..=40);
        let shift = rng.gen_range(0..=5) as f64;
        let x: Vec<f64> = (0..n1).map(|_| rng.gen_range(0..spread) as f64).collect();
        let y: Vec<f64> = (0..n2).map(|_| rng.gen_range(0..spread) as f64 + shift).collect();
        let got = brunner_munzel(&x, &y);
        match bm_oracle(&x, &y) {
            Some(want) => {
                compared += 1;
                worst = worst.max((got.statistic - want).abs() / want.abs().max(1.0));
            }
            None => agree_untestable &= !got.testable,
        }
    }
    let mut identical_worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.gen_range(5..=20);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64).collect();
        identical_worst = identical_worst.max((brunner_munzel(&x, &x).p_value - 1.0).abs());
    }
    let pass = worst <= 1e-10 && identical_worst <= 1e-9 && agree_untestable && compared > 150;
    report(
        2,
        pass,
        format!("{compared} testable pairs, max rel err {worst:.2e}; identical groups |p - 1| <= {identical_worst:.1e}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 3

fn gradient_check(kind: LabelKind, terms: ElboTerms, latent: LatentMode) -> Vec<(String, f64)> {
    let cfg = DlmConfig {
        dims: vec![8, 8],
        latent_dim: 3,
        base_channels: 2,
        levels: 3,
        label_kind: kind,
        elbo_terms: terms,
        latent_mode: latent,
        rng_seed: 31,
        ..DlmConfig::default()
    };
    let mut m = Dlm::new(cfg).unwrap();
    let mut g = ChaCha8Rng::seed_from_u64(32);
    let lesions: Vec<f64> = (0..4 * 64).map(|_| f64::from(u8::from(g.gen::<f64>() < 0.3))).collect();
    let labels = match kind {
        LabelKind::Bernoulli => vec![0.0, 1.0, 1.0, 0.0],
        LabelKind::Gaussian => vec![0.7, -0.2, 0.4, 1.1],
    };
    let batch = Batch { lesions, labels };
    let eps: Vec<f64> = (0..12).map(|_| g.sample(StandardNormal)).collect();
    m.zero_grad();
    m.loss(&batch, &eps, Mode::Train, true).unwrap();
    let mut blocks = Vec::new();
    m.visit_params(&mut |p| blocks.push((p.name.clone(), p.grad.clone())));
    let h = 1e-5;
    let mut out = Vec::new();
    for (k, (name, analytic)) in blocks.iter().enumerate() {
        let mut fd = vec![0.0; analytic.len()];
        for (i, f) in fd.iter_mut().enumerate() {
            let mut at = |delta: f64| {
                let mut j = 0;
                m.visit_params(&mut |p| {
                    if j == k {
                        p.value[i] += delta;
                    }
                    j += 1;
                });
                m.loss(&batch, &eps, Mode::Train, false).unwrap().loss
            };
            let up = at(h);
            let down = at(-2.0 * h);
            at(h);
            *f = (up - down) / (2.0 * h);
        }
        let diff: f64 = analytic.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(fd.iter().map(|a| a * a).sum::<f64>().sqrt());
        out.push((name.clone(), if scale == 0.0 { 0.0 } else { diff / scale }));
    }
    out
}

#[test]
fn criterion_3_gradient_check() {
    let start = Instant::now();
    let mut worst = (String::new(), 0.0f64);
    let mut blocks = 0;
    for (kind, terms, latent) in [
        (LabelKind::Bernoulli, ElboTerms::Full, LatentMode::Variational),
        (LabelKind::Gaussian, ElboTerms::Full, LatentMode::Variational),
        (LabelKind::Bernoulli, ElboTerms::LabelsOnly, LatentMode::Deterministic),
    ] {
        for (name, err) in gradient_check(kind, terms, latent) {
            blocks += 1;
            if err > worst.1 {
                worst = (format!("{kind:?}/{terms:?}/{latent:?} {name}"), err);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.1 <= 1e-4 && secs < 120.0;
    report(3, pass, format!("{blocks} blocks, worst {} at {:.2e}, {secs:.1}s", worst.0, worst.1));
    assert!(pass);
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_4_fwer_control() {
    let start = Instant::now();
    let sims = 200;
    let mut false_positives = 0;
    for i in 0..sims {
        let lesions = generate_lesions(
            &LesionDistributionSpec {
                count: 100,
                radius_range: [1.5, 4.0],
                aspect_range: [0.3, 1.0],
                orientation_mode: OrientationMode::Uniform,
                structured_orientation: StructuredOrientation::Radial,
                rng_seed: 4000 + i,
            },
            &[16, 16],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + i);
        let labels: Vec<f64> = (0..100).map(|_| f64::from(u8::from(rng.gen::<bool>()))).collect();
        let data = Dataset::new(lesions, labels, LabelType::Binary, vec![0; 100], i).unwrap();
        let tester = VoxelwiseTester::new(&data, TestKind::Fisher, 4).unwrap();
        let threshold = percentile_of_sorted(&tester.permutation_maxima(2000, 6000 + i), 95.0);
        if tester.statistics(None).iter().any(|&s| s > threshold) {
            false_positives += 1;
        }
    }
    let fwer = false_positives as f64 / sims as f64;
    let secs = start.elapsed().as_secs_f64();
    let pass = fwer <= 0.08 && secs < 900.0;
    report(4, pass, format!("empirical FWER {fwer:.3} over {sims} null simulations, {secs:.1}s"));
    assert!(pass);
}

// ---------------------------------------------------------------- 5

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn criterion_5_fig1_interaction() {
    let start = Instant::now();
    let mut medians = Vec::new();
    let mut detail = Vec::new();
    for (l, s) in [
        (Complexity::Simple, Complexity::Simple),
        (Complexity::Simple, Complexity::Complex),
        (Complexity::Complex, Complexity::Simple),
        (Complexity::Complex, Complexity::Complex),
    ] {
        let mut d = Vec::new();
        let mut empty = 0;
        for seed in 0..10 {
            match run_fig1_replication(l, s, seed).unwrap().displacement_magnitude {
                Some(m) => d.push(m),
                None => empty += 1,
            }
        }
        let m = if d.is_empty() { f64::NAN } else { median(&mut d) };
        detail.push(format!("{l:?}x{s:?} median {m:.2} ({empty} empty)"));
        medians.push(m);
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = medians[3] > medians[0] && secs < 600.0;
    report(5, pass, format!("{}; {secs:.1}s", detail.join(", ")));
    assert!(pass);
}

// ---------------------------------------------------------------- 6, 7, 10

fn comparison_spec(flip: f64, methods: Vec<Method>, seeds: Vec<u64>) -> ExperimentSpec {
    let blob = |name: &str, c: [f64; 2]| Blob {
        name: name.into(),
        center: c.to_vec(),
        scale: vec![2.0, 2.0],
        amplitude: 1.0,
    };
    ExperimentSpec {
        scenario: format!("three_blob_flip_{flip}"),
        dims: vec![32, 32],
        lesions: LesionDistributionSpec {
            count: 2000,
            radius_range: [2.0, 5.0],
            aspect_range: [0.3, 1.0],
            orientation_mode: OrientationMode::Uniform,
            structured_orientation: StructuredOrientation::Radial,
            rng_seed: 0,
        },
        substrate: SubstrateSpec {
            blobs: vec![blob("A", [9.0, 9.0]), blob("B", [9.0, 23.0]), blob("C", [22.0, 16.0])],
            blob_threshold: 0.5,
            formula: "A|B|C".into(),
        },
        deficit: DeficitModel {
            noise: if flip > 0.0 { Noise::Flip { p: flip } } else { Noise::None },
            ..DeficitModel::binary(0.01)
        },
        methods,
        sample_sizes: vec![400],
        seeds,
        master_seed: 2024,
        dlm: DlmConfig {
            latent_dim: 16,
            base_channels: 2,
            levels: 5,
            batch_size: 16,
            max_epochs: 150,
            ..DlmConfig::default()
        },
        vlsm: VlsmOptions::default(),
    }
}

/// Rows of the noiseless comparison over seeds 0..10 for every method;
/// shared by criteria 6, 7 and 10.
fn clean_rows() -> &'static [ResultRow] {
    static ROWS: OnceLock<Vec<ResultRow>> = OnceLock::new();
    ROWS.get_or_init(|| {
        let mut rows = run_experiment(&comparison_spec(
            0.0,
            vec![Method::VlsmFisher, Method::Dlm],
            (0..10).collect(),
        ))
        .unwrap();
        rows.extend(
            run_experiment(&comparison_spec(
                0.0,
                vec![Method::DlmLabelsOnly, Method::DlmDeterministic],
                (0..5).collect(),
            ))
            .unwrap(),
        );
        rows
    })
}

fn dice_of(rows: &[ResultRow], method: Method, seed: u64) -> f64 {
    rows.iter()
        .find(|r| r.method == method.key() && r.seed == seed)
        .and_then(|r| r.dice)
        .unwrap_or_else(|| panic!("no dice for {} seed {seed}", method.key()))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_6_dlm_beats_vlsm() {
    let start = Instant::now();
    let rows = clean_rows();
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..10 {
        let (d, v) = (dice_of(rows, Method::Dlm, seed), dice_of(rows, Method::VlsmFisher, seed));
        wins += usize::from(d > v);
        pairs.push(format!("{d:.2}/{v:.2}"));
    }
    let pass = wins >= 8;
    report(
        6,
        pass,
        format!("DLM > VLSM in {wins}/10 seeds [dlm/vlsm: {}], {:.0}s", pairs.join(" "), start.elapsed().as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn criterion_7_noise_robustness() {
    let start = Instant::now();
    let clean = clean_rows();
    let noisy = run_experiment(&comparison_spec(0.2, vec![Method::VlsmFisher, Method::Dlm], (0..5).collect())).unwrap();
    let drop = |m: Method| {
        let a: Vec<f64> = (0..5).map(|s| dice_of(clean, m, s)).collect();
        let b: Vec<f64> = (0..5).map(|s| dice_of(&noisy, m, s)).collect();
        (mean(&a), mean(&b))
    };
    let (dc, dn) = drop(Method::Dlm);
    let (vc, vn) = drop(Method::VlsmFisher);
    let pass = dc - dn < vc - vn;
    report(
        7,
        pass,
        format!(
            "DLM {dc:.3} -> {dn:.3} (drop {:.3}); VLSM {vc:.3} -> {vn:.3} (drop {:.3}); {:.0}s",
            dc - dn,
            vc - vn,
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_ablation_ordering() {
    let start = Instant::now();
    let rows = clean_rows();
    let avg = |m: Method| mean(&(0..5).map(|s| dice_of(rows, m, s)).collect::<Vec<_>>());
    let (full, labels, det) = (avg(Method::Dlm), avg(Method::DlmLabelsOnly), avg(Method::DlmDeterministic));
    let pass = full >= labels - 0.02 && labels >= det - 0.02;
    report(
        10,
        pass,
        format!("mean Dice full {full:.3}, labels-only {labels:.3}, deterministic {det:.3}; {:.0}s", start.elapsed().as_secs_f64()),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_8_reconstruction_trend() {
    let start = Instant::now();
    let spec = comparison_spec(0.0, vec![Method::Dlm], vec![]);
    let held_out = generate_lesions(
        &LesionDistributionSpec {
            count: 100,
            rng_seed: 8080,
            ..spec.lesions.clone()
        },
        &spec.dims,
    )
    .unwrap();
    let mut inversions = 0;
    let mut table = Vec::new();
    for seed in 0..5u64 {
        let (pool, truth) = spec.cohort(seed).unwrap();
        let test_labels: Vec<f64> = held_out
            .iter()
            .map(|x| f64::from(u8::from(x.mask().iter().zip(truth.mask()).any(|(a, b)| *a && b))))
            .collect();
        let test = Dataset::new(held_out.clone(), test_labels, LabelType::Binary, vec![0; 100], 0).unwrap();
        let all: Vec<usize> = (0..test.len()).collect();
        let mut row = Vec::new();
        for n in [100usize, 400, 1600] {
            let data = spec.sample(&pool, n, seed).unwrap();
            let cfg = DlmConfig {
                rng_seed: seed,
                max_epochs: 40,
                ..spec.dlm.clone()
            };
            let mut trained = train(&cfg, &data).unwrap();
            let recon = reconstruct_binary(&mut trained.model, &test, &all).unwrap();
            let d: Vec<f64> = recon.iter().zip(&held_out).map(|(r, x)| dice(r, x).unwrap()).collect();
            row.push(mean(&d));
        }
        inversions += row.windows(2).filter(|w| w[1] < w[0]).count();
        table.push(format!("[{:.3} {:.3} {:.3}]", row[0], row[1], row[2]));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = inversions <= 1 && secs < 3600.0;
    report(
        8,
        pass,
        format!("held-out Dice at N=100/400/1600 per seed {}; {inversions} inversions; {secs:.0}s", table.join(" ")),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 9

fn brute_surface(mask: &[bool], dims: [usize; 2]) -> Vec<(f64, f64)> {
    let [h, w] = dims;
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask[r * w + c] {
                continue;
            }
            let outside = |dr: isize, dc: isize| {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize || !mask[rr as usize * w + cc as usize]
            };
            if outside(-1, 0) || outside(1, 0) || outside(0, -1) || outside(0, 1) {
                out.push((r as f64, c as f64));
            }
        }
    }
    out
}

fn brute_distances(a: &[bool], b: &[bool], dims: [usize; 2]) -> (f64, f64) {
    let (sa, sb) = (brute_surface(a, dims), brute_surface(b, dims));
    let nearest = |p: &(f64, f64), set: &[(f64, f64)]| {
        set.iter().map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min)
    };
    let d: Vec<f64> = sa.iter().map(|p| nearest(p, &sb)).chain(sb.iter().map(|p| nearest(p, &sa))).collect();
    (d.iter().cloned().fold(0.0, f64::max), mean(&d))
}

fn tiny_spec(methods: Vec<Method>) -> ExperimentSpec {
    ExperimentSpec {
        scenario: "determinism".into(),
        dims: vec![16, 16],
        lesions: LesionDistributionSpec {
            count: 300,
            radius_range: [2.0, 5.0],
            aspect_range: [0.3, 1.0],
            orientation_mode: OrientationMode::Uniform,
            structured_orientation: StructuredOrientation::Radial,
            rng_seed: 0,
        },
        substrate: SubstrateSpec {
            blobs: vec![Blob {
                name: "A".into(),
                center: vec![8.0, 8.0],
                scale: vec![2.0, 2.0],
                amplitude: 1.0,
            }],
            blob_threshold: 0.5,
            formula: "A".into(),
        },
        deficit: DeficitModel::binary(0.01),
        methods,
        sample_sizes: vec![80],
        seeds: vec![0, 1],
        master_seed: 9,
        dlm: DlmConfig {
            latent_dim: 4,
            base_channels: 2,
            levels: 4,
            max_epochs: 3,
            batch_size: 8,
            ..DlmConfig::default()
        },
        vlsm: VlsmOptions {
            n_perm: 200,
            ..VlsmOptions::default()
        },
    }
}

fn csv_without_wall_time(rows: &[ResultRow]) -> Vec<u8> {
    let rows: Vec<ResultRow> = rows.iter().map(|r| ResultRow { wall_secs: 0.0, ..r.clone() }).collect();
    let mut buf = Vec::new();
    write_rows(&rows, &mut buf).unwrap();
    buf
}

#[test]
fn criterion_9_invariant_suites() {
    let start = Instant::now();
    let mut failures: Vec<String> = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);

    // KL is non-negative and vanishes at the prior
    let mut kl_ok = true;
    for _ in 0..1000 {
        let mu: Vec<f64> = (0..6).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let sigma: Vec<f64> = (0..6).map(|_| rng.gen_range(-4.0f64..2.0).exp()).collect();
        kl_ok &= kl_to_standard_normal(&mu, &sigma) >= 0.0;
    }
    check("kl non-negative", kl_ok && kl_to_standard_normal(&[0.0; 4], &[1.0; 4]).abs() < 1e-12);

    // eps = 0 gives z = mu
    let mu: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
    let sigma: Vec<f64> = (0..8).map(|_| rng.gen_range(0.1..2.0)).collect();
    check("reparameterize eps=0", reparameterize(&mu, &sigma, &[0.0; 8]) == mu);

    // quantile thresholds keep ceil((1 - t) V) voxels
    let mut q_ok = true;
    for v in [7usize, 64, 1024, 1000] {
        let map: Vec<f64> = (0..v).map(|_| rng.gen()).collect();
        for step in 1..=99 {
            let keep = ((100 - step) * v).div_ceil(100);
            q_ok &= quantile_keep(step, v) == keep;
            q_ok &= top_k_mask(&map, keep).iter().filter(|&&b| b).count() == keep;
        }
    }
    check("quantile counts", q_ok);

    // metric oracles on grids up to 12x12
    let mut metric_ok = true;
    for _ in 0..300 {
        let dims = [rng.gen_range(1..=12), rng.gen_range(1..=12)];
        let n = dims[0] * dims[1];
        let pa = rng.gen_range(0.05..0.9);
        let pb = rng.gen_range(0.05..0.9);
        let a: Vec<bool> = (0..n).map(|_| rng.gen_bool(pa)).collect();
        let b: Vec<bool> = (0..n).map(|_| rng.gen_bool(pb)).collect();
        let (ga, gb) = (VolumeGrid::from_mask(&dims, &a).unwrap(), VolumeGrid::from_mask(&dims, &b).unwrap());
        let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count() as f64;
        let (ca, cb) = (a.iter().filter(|&&x| x).count() as f64, b.iter().filter(|&&x| x).count() as f64);
        let want_dice = if ca + cb == 0.0 { 1.0 } else { 2.0 * inter / (ca + cb) };
        metric_ok &= (dice(&ga, &gb).unwrap() - want_dice).abs() < 1e-12;
        if ca > 0.0 && cb > 0.0 {
            let (hd, asd) = surface_distances(&ga, &gb).unwrap();
            let (whd, wasd) = brute_distances(&a, &b, dims);
            metric_ok &= (hd - whd).abs() < 1e-9 && (asd - wasd).abs() < 1e-9;
        }
    }
    check("dice/hausdorff/asd oracle", metric_ok);

    // serialization roundtrips
    let tmp = tempfile::tempdir().unwrap();
    let real = VolumeGrid::real_from_f64(&[3, 4, 5], &(0..60).map(|i| i as f64 * 0.25).collect::<Vec<_>>()).unwrap();
    let mut buf = Vec::new();
    write_volume(&real, &mut buf).unwrap();
    check("volume roundtrip", read_volume(buf.as_slice()).unwrap() == real);

    let spec = tiny_spec(vec![Method::VlsmFisher, Method::Dlm]);
    let json = serde_json::to_string(&spec).unwrap();
    check("experiment spec roundtrip", serde_json::from_str::<ExperimentSpec>(&json).unwrap() == spec);

    let (pool, _) = spec.cohort(0).unwrap();
    let data = spec.sample(&pool, 80, 0).unwrap();
    save_dataset(&data, tmp.path()).unwrap();
    let back = load_dataset(tmp.path()).unwrap();
    check(
        "dataset roundtrip",
        back.lesions == data.lesions && back.labels == data.labels && back.splits == data.splits,
    );

    let mut trained = train(&DlmConfig { dims: vec![16, 16], ..spec.dlm.clone() }, &data).unwrap();
    let path = tmp.path().join("model.json");
    save_checkpoint(&mut trained.model, &path).unwrap();
    let mut loaded = load_checkpoint(&path).unwrap();
    let batch = ldm_core::dlm::batch_of(&data, &[0, 1, 2]);
    let same = trained.model.encode(&batch).unwrap() == loaded.encode(&batch).unwrap()
        && trained.model.decode_substrate(&[0.3; 4]) == loaded.decode_substrate(&[0.3; 4]);
    check("checkpoint roundtrip", same);

    // deterministic re-runs give identical CSV bytes apart from wall time
    let a = run_experiment(&spec).unwrap();
    let b = run_experiment(&spec).unwrap();
    let (ca, cb) = (csv_without_wall_time(&a), csv_without_wall_time(&b));
    check("deterministic csv", ca == cb && !a.is_empty());
    check("csv roundtrip", read_rows(std::str::from_utf8(&ca).unwrap()).unwrap().len() == a.len());

    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 300.0;
    report(9, pass, format!("failed: {failures:?}; {secs:.1}s"));
    assert!(pass);
}
