//! One check per acceptance criterion. Each returns its measured numbers so
//! the acceptance report and the ordinary tests share the exact same logic.

use std::time::Instant;

use rand::Rng;
use reprime::archive::{decode, encode, ArchiveError};
use reprime::contrastive::{byol_regression, ema_update, nt_xent_loss, sinkhorn_assign};
use reprime::datasets::{generate_synthetic, Dataset, SyntheticSpec};
use reprime::model::Model;
use reprime::optim::OptimizerConfig;
use reprime::pretrain::{
    run_pretrain, run_pretrain_from, Method, PretrainConfig, RunMetrics, SurgeryConfig, SurgeryMode, METRICS_CSV,
    METRICS_JSON,
};
use reprime::probe::{evaluate, ProbeConfig};
use reprime::surgery::{layer_frobenius_norm, repair_dead_filters, scale_layer, EpsMode, LayerGroup, RepairStrategy};
use reprime::{Tape, Tensor, TensorMap};

use super::{consistent_layer, gradients, nt_xent_oracle, preservation_gap, randn, rng, uniform};

#[derive(Debug, Clone)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

pub fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let cases = gradients::suite();
    let secs = start.elapsed().as_secs_f64();
    let worst = cases.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).expect("cases");
    let bad: Vec<&str> = cases.iter().filter(|c| !(c.max_rel_err < 1e-3)).map(|c| c.name).collect();
    Outcome::new(
        bad.is_empty() && secs < 30.0,
        format!(
            "{} cases, worst {} at {:.2e}, {secs:.2}s{}",
            cases.len(),
            worst.name,
            worst.max_rel_err,
            if bad.is_empty() { String::new() } else { format!(", failing {bad:?}") }
        ),
    )
}

pub const PRESERVATION_NORMS: [f32; 3] = [2.0, 10.0, 100.0];
pub const PRESERVATION_MIN_VARS: [f32; 3] = [0.1, 1.0, 4.0];
const PRESERVATION_INPUTS: usize = 100;

/// Worst eval-mode output gap over the norm / variance grid for one eps mode.
pub fn preservation_grid(mode: EpsMode) -> Vec<(f32, f32, f64)> {
    let mut out = Vec::new();
    for (i, &s) in PRESERVATION_NORMS.iter().enumerate() {
        for (j, &v) in PRESERVATION_MIN_VARS.iter().enumerate() {
            let layer = consistent_layer(8, 3, s, v, (10 * i + j) as u64);
            let (after, measured) = scale_layer(&layer, mode);
            assert!((measured - s).abs() < 1e-3 * s, "fixture norm {measured} vs {s}");
            out.push((s, v, preservation_gap(&layer, &after, PRESERVATION_INPUTS, 7 + i as u64)));
        }
    }
    out
}

pub fn surgery_preservation() -> Outcome {
    let exact = preservation_grid(EpsMode::Exact);
    let paper = preservation_grid(EpsMode::Paper);
    let exact_worst = exact.iter().map(|r| r.2).fold(0.0, f64::max);
    let paper_fail: Vec<String> =
        paper.iter().filter(|r| !(r.2 < 1e-3)).map(|(s, v, g)| format!("s={s} var={v}: {g:.2e}")).collect();
    let paper_worst = paper.iter().map(|r| r.2).fold(0.0, f64::max);
    Outcome::new(
        exact_worst < 1e-6 && paper_fail.is_empty(),
        format!(
            "exact-eps worst {exact_worst:.2e} (< 1e-6); paper mode worst {paper_worst:.2e} (< 1e-3){}",
            if paper_fail.is_empty() { String::new() } else { format!(", over bound at {}", paper_fail.join("; ")) }
        ),
    )
}

fn random_layer(r: &mut impl Rng, k: usize, c: usize, scale: f32) -> LayerGroup {
    LayerGroup {
        name: "block0".into(),
        conv_weight: randn(&[k, c, 3, 3], r).scale(scale),
        gamma: uniform(&[k], 0.5, 1.5, r),
        beta: uniform(&[k], -0.5, 0.5, r),
        running_mean: uniform(&[k], -0.5, 0.5, r),
        running_var: uniform(&[k], 0.1, 2.0, r),
        eps: 1e-5,
    }
}

fn layers_bit_eq(a: &LayerGroup, b: &LayerGroup) -> bool {
    a.conv_weight.bit_eq(&b.conv_weight)
        && a.gamma.bit_eq(&b.gamma)
        && a.beta.bit_eq(&b.beta)
        && a.running_mean.bit_eq(&b.running_mean)
        && a.running_var.bit_eq(&b.running_var)
        && a.eps.to_bits() == b.eps.to_bits()
}

pub fn norm_postconditions() -> Outcome {
    let mut r = rng(3);
    let (mut worst_rel, mut scaled, mut guarded, mut guard_ok) = (0.0f64, 0, 0, true);
    for _ in 0..300 {
        let k = r.random_range(2..12);
        let c = r.random_range(1..6);
        let factor = 10f32.powf(r.random_range(-2.5..3.0));
        let layer = random_layer(&mut r, k, c, factor);
        for mode in [EpsMode::Paper, EpsMode::Exact] {
            let (after, s) = scale_layer(&layer, mode);
            if s > 1.0 {
                scaled += 1;
                let want = (s as f64).sqrt();
                worst_rel = worst_rel.max((layer_frobenius_norm(&after) as f64 - want).abs() / want);
            } else {
                guarded += 1;
                guard_ok &= layers_bit_eq(&layer, &after);
            }
        }
    }
    Outcome::new(
        worst_rel < 1e-5 && guard_ok && scaled > 0 && guarded > 0,
        format!("{scaled} scaled layers, worst rel norm error {worst_rel:.2e} (< 1e-5); {guarded} guarded layers bit-identical: {guard_ok}"),
    )
}

/// Layer with `dead` filters shrunk below the threshold.
pub fn layer_with_dead(r: &mut impl Rng, k: usize, c: usize, dead: &[usize]) -> LayerGroup {
    let mut layer = random_layer(r, k, c, 0.5);
    let len = c * 9;
    for &f in dead {
        let residual = r.random_range(0.0..0.01);
        for v in &mut layer.conv_weight.data_mut()[f * len..(f + 1) * len] {
            *v *= residual;
        }
    }
    layer
}

/// Checks copy repair on one layer; returns a description of the first violation.
pub fn check_copy_repair(layer: &LayerGroup, seed: u64) -> Result<usize, String> {
    let threshold = reprime::surgery::DEAD_FILTER_THRESHOLD;
    let len = layer.conv_weight.numel() / layer.filters();
    let before = layer.filter_norms();
    let live: Vec<usize> = (0..before.len()).filter(|&i| before[i] >= threshold).collect();
    let (repaired, records) =
        repair_dead_filters(layer, threshold, RepairStrategy::Copy, &mut rng(seed)).map_err(|e| e.to_string())?;
    if let Some(f) = repaired.filter_norms().iter().position(|&n| n < threshold) {
        return Err(format!("filter {f} still below threshold"));
    }
    for rec in &records {
        let got = &repaired.conv_weight.data()[rec.index * len..(rec.index + 1) * len];
        let src = rec.source.ok_or("copy repair without a source")?;
        if !live.contains(&src) {
            return Err(format!("filter {} copied from non-live {src}", rec.index));
        }
        let want = &layer.conv_weight.data()[src * len..(src + 1) * len];
        if got.iter().zip(want).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(format!("filter {} is not a bitwise copy of {src}", rec.index));
        }
    }
    let (again, more) = repair_dead_filters(&repaired, threshold, RepairStrategy::Copy, &mut rng(seed + 1))
        .map_err(|e| e.to_string())?;
    if !more.is_empty() || !layers_bit_eq(&again, &repaired) {
        return Err("second repair changed the layer".into());
    }
    Ok(records.len())
}

pub fn dead_filter_suite() -> Outcome {
    let mut r = rng(4);
    let (mut layers, mut replaced) = (0, 0);
    for case in 0..200u64 {
        let k = r.random_range(2..16);
        let n_dead = r.random_range(1..k);
        let mut idx: Vec<usize> = (0..k).collect();
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut r);
        let c = r.random_range(1..5);
        let layer = layer_with_dead(&mut r, k, c, &idx[..n_dead]);
        match check_copy_repair(&layer, case) {
            Ok(n) => {
                layers += 1;
                replaced += n;
            }
            Err(e) => return Outcome::new(false, format!("case {case}: {e}")),
        }
    }
    Outcome::new(true, format!("{layers} layers, {replaced} filters replaced; none below threshold, all bitwise live copies, repair idempotent"))
}

fn nt_xent_value(z: &Tensor, tau: f32) -> f64 {
    let rows = z.shape()[0];
    let partners: Vec<usize> = (0..rows).map(|i| (i + rows / 2) % rows).collect();
    let mut tape = Tape::no_grad();
    let v = tape.constant(z.clone());
    let l = nt_xent_loss(&mut tape, v, &partners, tau).unwrap();
    tape.value(l).item().unwrap() as f64
}

pub fn nt_xent_suite() -> Outcome {
    let mut r = rng(5);
    let (mut worst_rel, mut worst_const) = (0.0f64, 0.0f64);
    for n in 2..=8usize {
        for tau in [0.1f32, 0.5, 1.0] {
            for _ in 0..5 {
                let z = randn(&[2 * n, 16], &mut r);
                let partners: Vec<usize> = (0..2 * n).map(|i| (i + n) % (2 * n)).collect();
                let want = nt_xent_oracle(&z, &partners, tau as f64);
                worst_rel = worst_rel.max((nt_xent_value(&z, tau) - want).abs() / want.abs());
            }
            let row = randn(&[16], &mut r);
            let same = Tensor::new(vec![2 * n, 16], row.data().repeat(2 * n)).unwrap();
            let want = ((2 * n - 1) as f64).ln();
            worst_const = worst_const.max((nt_xent_value(&same, tau) - want).abs());
        }
    }
    Outcome::new(
        worst_rel < 1e-6 && worst_const < 1e-6,
        format!("worst rel diff vs oracle {worst_rel:.2e} (< 1e-6); identical rows off log(2N-1) by {worst_const:.2e} (< 1e-6)"),
    )
}

fn column_sums(q: &Tensor) -> Vec<f64> {
    let k = q.shape()[1];
    let mut out = vec![0.0; k];
    for row in q.data().chunks(k) {
        row.iter().zip(&mut out).for_each(|(&v, o)| *o += v as f64);
    }
    out
}

pub fn sinkhorn_suite() -> Outcome {
    let mut r = rng(6);
    let mut row_err = 0.0f64;
    for iters in [1, 3, 10, 50] {
        for _ in 0..10 {
            let b = r.random_range(2..32);
            let k = r.random_range(2..16);
            let q = sinkhorn_assign(&uniform(&[b, k], -1.0, 1.0, &mut r), iters, 0.05).unwrap();
            for row in q.data().chunks(k) {
                row_err = row_err.max((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
            }
        }
    }
    let mut fixed_err = 0.0f64;
    for (b, k) in [(4, 4), (16, 8), (7, 3)] {
        let q = sinkhorn_assign(&Tensor::full(vec![b, k], 0.3), 3, 0.05).unwrap();
        fixed_err = q.data().iter().fold(fixed_err, |m, &v| m.max((v as f64 - 1.0 / k as f64).abs()));
    }
    let mut marginal_err = 0.0f64;
    for _ in 0..10 {
        let (b, k) = (32, 8);
        let mut z = randn(&[b, 16], &mut r);
        let mut c = randn(&[k, 16], &mut r);
        reprime::contrastive::normalize_rows(&mut z).unwrap();
        reprime::contrastive::normalize_rows(&mut c).unwrap();
        let mut tape = Tape::no_grad();
        let (zv, cv) = (tape.constant(z), tape.constant(c));
        let scores = tape.matmul(zv, cv, true).unwrap();
        let q = sinkhorn_assign(tape.value(scores), 50, 0.05).unwrap();
        for s in column_sums(&q) {
            marginal_err = marginal_err.max((s / b as f64 - 1.0 / k as f64).abs());
        }
    }
    Outcome::new(
        row_err < 1e-6 && fixed_err < 1e-6 && marginal_err < 1e-3,
        format!("row sums off 1 by {row_err:.2e} (< 1e-6); uniform fixed point off by {fixed_err:.2e} (< 1e-6); column marginals off 1/K by {marginal_err:.2e} at 50 iters (< 1e-3)"),
    )
}

fn random_map(r: &mut impl Rng, shapes: &[&[usize]]) -> TensorMap {
    shapes.iter().enumerate().map(|(i, s)| (format!("t{i}"), randn(s, r))).collect()
}

pub fn byol_suite() -> Outcome {
    let mut r = rng(7);
    let shapes: [&[usize]; 3] = [&[4, 3], &[7], &[2, 2, 3]];
    let online = random_map(&mut r, &shapes);
    let start = random_map(&mut r, &shapes);
    let maps_eq = |a: &TensorMap, b: &TensorMap| a.iter().zip(b).all(|((_, x), (_, y))| x.bit_eq(y));
    let mut t = start.clone();
    ema_update(&mut t, &online, 0.0).unwrap();
    let m0 = maps_eq(&t, &online);
    let mut t = start.clone();
    ema_update(&mut t, &online, 1.0).unwrap();
    let m1 = maps_eq(&t, &start);

    let m = 0.99f64;
    let mut t = start.clone();
    let mut geo_err = 0.0f64;
    for step in 1..=200 {
        ema_update(&mut t, &online, m as f32).unwrap();
        let decay = (m as f32 as f64).powi(step);
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for (name, tv) in &t {
            for ((&x, &o), &s) in tv.data().iter().zip(online[name].data()).zip(start[name].data()) {
                let want = o as f64 + decay * (s as f64 - o as f64);
                num += (x as f64 - want).powi(2);
                den += want * want;
            }
        }
        geo_err = geo_err.max((num / den).sqrt());
    }

    let mut loss_err = 0.0f64;
    for _ in 0..50 {
        let d = r.random_range(2..32);
        let (p, q) = (randn(&[1, d], &mut r), randn(&[1, d], &mut r));
        let dot: f64 = p.data().iter().zip(q.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
        let cos = dot / (p.norm() as f64 * q.norm() as f64);
        let mut tape = Tape::no_grad();
        let (pv, qv) = (tape.param(p), tape.constant(q));
        let l = byol_regression(&mut tape, pv, qv).unwrap();
        loss_err = loss_err.max((tape.value(l).item().unwrap() as f64 - (2.0 - 2.0 * cos)).abs());
    }
    Outcome::new(
        m0 && m1 && geo_err < 1e-5 && loss_err < 1e-6,
        format!("m=0 copies online: {m0}; m=1 keeps target: {m1}; 200-step geometric decay rel err {geo_err:.2e} (< 1e-5); loss vs 2-2cos {loss_err:.2e} (< 1e-6)"),
    )
}

fn raw_archive(header: &str, data: &[u8]) -> Vec<u8> {
    let mut v = (header.len() as u64).to_le_bytes().to_vec();
    v.extend_from_slice(header.as_bytes());
    v.extend_from_slice(data);
    v
}

pub fn random_tensor_map(r: &mut impl Rng) -> TensorMap {
    let n = r.random_range(1..8);
    let mut map = TensorMap::new();
    while map.len() < n {
        let rank = r.random_range(1..5);
        let shape: Vec<usize> = (0..rank).map(|_| r.random_range(1..6)).collect();
        let numel = shape.iter().product();
        let data =
            (0..numel).map(|_| f32::from_bits(r.random::<u32>())).map(|v| if v.is_nan() { 0.5 } else { v }).collect();
        let name: String = (0..r.random_range(1..12)).map(|_| r.random_range(b'a'..=b'z') as char).collect();
        map.insert(name, Tensor::new(shape, data).unwrap());
    }
    map
}

fn maps_bit_eq(a: &TensorMap, b: &TensorMap) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape() && ta.bit_eq(tb))
}

/// Every malformed-file class paired with whether it produced its designated error.
pub fn malformed_classes() -> Vec<(&'static str, bool)> {
    let mut huge = u64::MAX.to_le_bytes().to_vec();
    huge.extend_from_slice(b"{}");
    let e = |h: &str, d: &[u8]| decode(&raw_archive(h, d));
    vec![
        ("truncated length prefix", matches!(decode(&[1, 2, 3]), Err(ArchiveError::Truncated(_)))),
        ("header length overflow", matches!(decode(&huge), Err(ArchiveError::HeaderLengthOverflow { .. }))),
        ("malformed json", matches!(e("{not json", &[]), Err(ArchiveError::MalformedHeader(_)))),
        ("non-utf8 header", matches!(decode(&[1, 0, 0, 0, 0, 0, 0, 0, 0xff]), Err(ArchiveError::MalformedHeader(_)))),
        (
            "unknown entry field",
            matches!(
                e(r#"{"a":{"dtype":"f32","shape":[1],"offsets":[0,4],"x":1}}"#, &[0; 4]),
                Err(ArchiveError::MalformedHeader(_))
            ),
        ),
        (
            "unsupported dtype",
            matches!(
                e(r#"{"a":{"dtype":"f64","shape":[1],"offsets":[0,8]}}"#, &[0; 8]),
                Err(ArchiveError::UnsupportedDtype { .. })
            ),
        ),
        (
            "shape/offset mismatch",
            matches!(
                e(r#"{"a":{"dtype":"f32","shape":[3],"offsets":[0,8]}}"#, &[0; 8]),
                Err(ArchiveError::ShapeMismatch { .. })
            ),
        ),
        (
            "overlapping ranges",
            matches!(
                e(
                    r#"{"a":{"dtype":"f32","shape":[2],"offsets":[0,8]},"b":{"dtype":"f32","shape":[1],"offsets":[4,8]}}"#,
                    &[0; 8]
                ),
                Err(ArchiveError::Overlap { .. })
            ),
        ),
        (
            "gap in data",
            matches!(e(r#"{"a":{"dtype":"f32","shape":[1],"offsets":[4,8]}}"#, &[0; 8]), Err(ArchiveError::Gap(_))),
        ),
        (
            "truncated data",
            matches!(
                e(r#"{"a":{"dtype":"f32","shape":[2],"offsets":[0,8]}}"#, &[0; 4]),
                Err(ArchiveError::Truncated(_))
            ),
        ),
        (
            "trailing data",
            matches!(
                e(r#"{"a":{"dtype":"f32","shape":[1],"offsets":[0,4]}}"#, &[0; 8]),
                Err(ArchiveError::TrailingData(4))
            ),
        ),
        (
            "duplicate name",
            matches!(
                e(
                    r#"{"a":{"dtype":"f32","shape":[1],"offsets":[0,4]},"a":{"dtype":"f32","shape":[1],"offsets":[4,8]}}"#,
                    &[0; 8]
                ),
                Err(ArchiveError::DuplicateName(_))
            ),
        ),
        (
            "empty name",
            matches!(
                e(r#"{"":{"dtype":"f32","shape":[1],"offsets":[0,4]}}"#, &[0; 4]),
                Err(ArchiveError::InvalidName(_))
            ),
        ),
        ("no tensors", matches!(e("{}", &[]), Err(ArchiveError::Empty))),
    ]
}

pub const GOLDEN_HEADER: &[u8] = br#"{"a":{"dtype":"f32","shape":[2],"offsets":[0,8]}}"#;

pub fn golden_bytes() -> Vec<u8> {
    let mut v = (GOLDEN_HEADER.len() as u64).to_le_bytes().to_vec();
    v.extend_from_slice(GOLDEN_HEADER);
    v.extend_from_slice(&[0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0x40]);
    v
}

pub fn archive_suite() -> Outcome {
    let mut r = rng(8);
    let mut round_trips = 0;
    for i in 0..200 {
        let map = random_tensor_map(&mut r);
        let bytes = encode(map.iter().map(|(k, v)| (k.as_str(), v))).unwrap();
        match decode(&bytes) {
            Ok(back) if maps_bit_eq(&map, &back) => round_trips += 1,
            other => return Outcome::new(false, format!("map {i} did not round-trip: {other:?}")),
        }
    }
    let t = Tensor::from_slice(&[1.0, 2.0]);
    let golden = encode([("a", &t)]).unwrap() == golden_bytes();
    let classes = malformed_classes();
    let wrong: Vec<&str> = classes.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Outcome::new(
        round_trips == 200 && golden && wrong.is_empty(),
        format!(
            "{round_trips}/200 bit-exact round trips; golden bytes match: {golden}; {}/{} malformed classes give their error{}",
            classes.len() - wrong.len(),
            classes.len(),
            if wrong.is_empty() { String::new() } else { format!(" (wrong: {wrong:?})") }
        ),
    )
}

/// Shared settings for the scaled-down transfer experiments.
pub fn trend_config(seed: u64, epochs: usize) -> PretrainConfig {
    PretrainConfig {
        method: Method::Simclr,
        epochs,
        iters_per_epoch: 10,
        batch_size: 32,
        crop_size: 16,
        optimizer: OptimizerConfig::adam(1e-3, 1e-5),
        seed,
        ..PretrainConfig::default()
    }
}

pub const TREND_EPOCHS: usize = 30;
pub const TREND_SEEDS: [u64; 3] = [0, 1, 2];

pub fn trend_probe(seed: u64) -> ProbeConfig {
    ProbeConfig { fraction: 0.1, seed, ..ProbeConfig::default() }
}

/// Fine-tune accuracies of one seed's arms plus the per-checkpoint curves.
#[derive(Debug, Clone)]
pub struct TrendSeed {
    pub seed: u64,
    pub random: f64,
    pub p1x: f64,
    /// Source init, surgery, target pretraining.
    pub p2x_surgery: f64,
    pub p2x_plain: f64,
    pub curve_surgery: Vec<(usize, f64)>,
    pub curve_plain: Vec<(usize, f64)>,
    pub seconds: f64,
}

fn curve(m: &RunMetrics) -> Vec<(usize, f64)> {
    m.epochs.iter().filter_map(|e| e.probe_accuracy.map(|a| (e.epoch, a))).collect()
}

pub fn run_trend_seed(seed: u64) -> reprime::Result<TrendSeed> {
    let start = Instant::now();
    let source = generate_synthetic(&SyntheticSpec::source(seed))?;
    let target = generate_synthetic(&SyntheticSpec::target(1000 + seed))?;
    let cfg = trend_config(seed, TREND_EPOCHS);
    let probe = trend_probe(seed);
    let accuracy = |m: &TensorMap| evaluate(m, &target, &probe).map(|r| r.mean_accuracy);

    let src = run_pretrain(&cfg, &source)?;
    let p1x = run_pretrain(&cfg, &target)?;
    let observe = |_: usize, m: &Model| evaluate(m.params(), &target, &probe).map(|r| Some(r.mean_accuracy));
    let surgery = SurgeryConfig { mode: SurgeryMode::Paper, ..SurgeryConfig::default() };
    let with =
        run_pretrain_from(&PretrainConfig { surgery, ..cfg.clone() }, &target, src.encoder.params().clone(), observe)?;
    let plain = run_pretrain_from(&cfg, &target, src.encoder.params().clone(), observe)?;
    let random = Model::build(cfg.model.clone(), seed)?;

    let (curve_surgery, curve_plain) = (curve(&with.metrics), curve(&plain.metrics));
    Ok(TrendSeed {
        seed,
        random: accuracy(random.params())?,
        p1x: accuracy(p1x.encoder.params())?,
        p2x_surgery: curve_surgery.last().map(|c| c.1).expect("final checkpoint observed"),
        p2x_plain: curve_plain.last().map(|c| c.1).expect("final checkpoint observed"),
        curve_surgery,
        curve_plain,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn trend_a(seeds: &[TrendSeed], total_seconds: f64) -> Outcome {
    let wins = seeds.iter().filter(|s| s.p2x_surgery >= s.p1x && s.p2x_surgery >= s.random).count();
    let rows: Vec<String> = seeds
        .iter()
        .map(|s| {
            format!(
                "seed {}: P2X {:.3} P1X {:.3} random {:.3} (P2X without surgery {:.3})",
                s.seed, s.p2x_surgery, s.p1x, s.random, s.p2x_plain
            )
        })
        .collect();
    Outcome::new(
        wins >= 2 && total_seconds < 20.0 * 60.0,
        format!("P2X >= P1X and >= random in {wins}/3 seeds, {total_seconds:.0}s total; {}", rows.join("; ")),
    )
}

pub fn trend_b(seeds: &[TrendSeed]) -> Outcome {
    let early_wins = seeds.iter().filter(|s| s.curve_surgery[0].1 >= s.curve_plain[0].1).count();
    let final_ok =
        seeds.iter().filter(|s| s.curve_surgery.last().unwrap().1 >= s.curve_plain.last().unwrap().1 - 0.03).count();
    let fmt = |c: &[(usize, f64)]| c.iter().map(|(e, a)| format!("{e}:{a:.2}")).collect::<Vec<_>>().join(" ");
    let rows: Vec<String> = seeds
        .iter()
        .map(|s| format!("seed {}: surgery [{}] plain [{}]", s.seed, fmt(&s.curve_surgery), fmt(&s.curve_plain)))
        .collect();
    Outcome::new(
        early_wins >= 2 && final_ok >= 2,
        format!(
            "early checkpoint surgery >= plain in {early_wins}/3, final within 3 points in {final_ok}/3; {}",
            rows.join("; ")
        ),
    )
}

/// Short runs over batch size, crop size and method; metrics written and re-read.
pub fn axis_smoke(dataset: &Dataset, dir: &std::path::Path) -> Outcome {
    let mut problems = Vec::new();
    let mut runs = 0;
    for method in Method::ALL {
        for batch_size in [8, 64] {
            for crop_size in [16, 32] {
                let cfg = PretrainConfig {
                    method,
                    epochs: 2,
                    iters_per_epoch: 3,
                    batch_size,
                    crop_size,
                    local_crops: if method == Method::Swav { 2 } else { 0 },
                    seed: 11,
                    ..PretrainConfig::default()
                };
                let tag = format!("{}-b{batch_size}-c{crop_size}", method.name());
                let out_dir = dir.join(&tag);
                let result = run_pretrain(&cfg, dataset).and_then(|mut out| {
                    out.save(&out_dir)?;
                    Ok(out)
                });
                runs += 1;
                match result {
                    Err(e) => problems.push(format!("{tag}: {e}")),
                    Ok(_) => {
                        if let Err(e) = metrics_well_formed(&out_dir, cfg.epochs) {
                            problems.push(format!("{tag}: {e}"));
                        }
                    }
                }
            }
        }
    }
    Outcome::new(
        problems.is_empty(),
        if problems.is_empty() {
            format!("{runs} runs finished with finite losses and valid metrics files")
        } else {
            problems.join("; ")
        },
    )
}

pub fn metrics_well_formed(dir: &std::path::Path, epochs: usize) -> Result<(), String> {
    let csv = std::fs::read_to_string(dir.join(METRICS_CSV)).map_err(|e| e.to_string())?;
    let mut lines = csv.lines();
    if lines.next() != Some("epoch,loss,seconds") {
        return Err("bad csv header".into());
    }
    let mut count = 0;
    for (i, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 || cols[0].parse::<usize>() != Ok(i + 1) {
            return Err(format!("bad csv row {line:?}"));
        }
        let loss: f64 = cols[1].parse().map_err(|_| format!("bad loss {:?}", cols[1]))?;
        let secs: f64 = cols[2].parse().map_err(|_| format!("bad seconds {:?}", cols[2]))?;
        if !loss.is_finite() || !(secs >= 0.0) {
            return Err(format!("non-finite metrics in {line:?}"));
        }
        count += 1;
    }
    if count != epochs {
        return Err(format!("{count} csv rows for {epochs} epochs"));
    }
    let json = std::fs::read_to_string(dir.join(METRICS_JSON)).map_err(|e| e.to_string())?;
    let parsed: RunMetrics = serde_json::from_str(&json).map_err(|e| e.to_string())?;
    if parsed.epochs.len() != epochs || parsed.final_checkpoint.is_none() {
        return Err("metrics.json incomplete".into());
    }
    Ok(())
}
