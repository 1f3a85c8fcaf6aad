//! Acceptance suite. Prints one PASS/FAIL line per criterion and a summary.
//! With `FSCE_ACCEPTANCE_STRICT` set, any failure makes the exit status nonzero.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use fsce_core::ablation::{consistency_grid, median, run_ablation, temperature_width_grid, CellMetrics};
use fsce_core::contrastive_head::{ContrastiveEmbedding, CosineClassifier, RoiFeature};
use fsce_core::cpe::{cpe_loss, cpe_loss_with_grad, per_anchor_loss, CpeConfig, ProposalRecord, Reweight};
use fsce_core::data::{build_kshot_split, generate_synthetic, Annotation, DetectionDataset, KShotSplit, ShapeKind};
use fsce_core::detector::{
    collect_stats, encode_checkpoint, fine_tune, train_base, Component, Detection, DetectorConfig, DetectorState,
};
use fsce_core::eval::{
    average_precision, cluster_statistics, coco_thresholds, evaluate, export_embeddings, Interpolation,
};
use fsce_core::geometry::{iou, BBox};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORACLE_TOL: f64 = 1e-10;
const ORACLE_BUDGET: Duration = Duration::from_secs(10);
const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
/// Gradient magnitudes below this are compared absolutely.
const FD_FLOOR: f64 = 1e-6;
const FD_BUDGET: Duration = Duration::from_secs(30);
const PERMUTATION_TOL: f64 = 1e-9;
const ROTATION_TOL: f64 = 1e-8;
const SCALING_TOL: f64 = 1e-8;
const LOGIT_SCALE_TOL: f64 = 1e-6;
const INVARIANCE_BUDGET: Duration = Duration::from_secs(10);
const AP_TOL: f64 = 1e-12;
const AP_BUDGET: Duration = Duration::from_secs(10);
const PROPOSAL_GAIN: f64 = 0.10;
const PROPOSAL_BUDGET: Duration = Duration::from_secs(5 * 60);
const BENCHMARK_BUDGET: Duration = Duration::from_secs(30 * 60);

const SEEDS: [u64; 3] = [0, 1, 2];
const SHOTS: [usize; 2] = [5, 10];
const NOVEL: [u32; 2] = [3, 4];
const POOL_IMAGES: usize = 200;
const TEST_IMAGES: usize = 200;
const BASE_STEPS: usize = 2000;
const FINETUNE_STEPS: usize = 500;
const EMBEDDING_IMAGES: usize = 200;
/// Shot count whose runs feed the embedding comparison.
const EMBEDDING_SHOT: usize = 10;

const STRICT_ENV: &str = "FSCE_ACCEPTANCE_STRICT";

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- CPE loss

fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, labels: u32) -> Vec<ProposalRecord> {
    (0..n)
        .map(|_| {
            let z = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            ProposalRecord::new(z, rng.random_range(0.0..=1.0), rng.random_range(0..labels)).unwrap()
        })
        .collect()
}

/// Literal transcription of the loss: no max shift, no shared terms.
fn reference_loss(batch: &[ProposalRecord], cfg: &CpeConfig) -> f64 {
    let n = batch.len();
    let unit = |r: &ProposalRecord| {
        let norm = r.z.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.z.values.iter().map(|v| v / norm).collect::<Vec<f64>>()
    };
    let cos = |a: &ProposalRecord, b: &ProposalRecord| unit(a).iter().zip(unit(b)).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for i in 0..n {
        let w = if batch[i].u >= cfg.phi {
            match cfg.reweight {
                Reweight::One => 1.0,
                Reweight::Linear => batch[i].u,
                Reweight::Expm1 => batch[i].u.exp() - 1.0,
            }
        } else {
            0.0
        };
        let positives: Vec<usize> = (0..n).filter(|&j| j != i && batch[j].y == batch[i].y).collect();
        if positives.is_empty() {
            continue;
        }
        let mut li = 0.0;
        for &j in &positives {
            let num = (cos(&batch[i], &batch[j]) / cfg.temperature).exp();
            let mut den = 0.0;
            for k in 0..n {
                if k != i {
                    den += (cos(&batch[i], &batch[k]) / cfg.temperature).exp();
                }
            }
            li -= (num / den).ln();
        }
        total += w * li / positives.len() as f64;
    }
    total / n as f64
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let taus = [0.07, 0.2, 0.5];
    let phis = [0.0, 0.5, 0.7];
    let mut worst: f64 = 0.0;
    for b in 0..100 {
        let n = rng.random_range(2..=16);
        let cfg = CpeConfig {
            temperature: taus[b % 3],
            phi: phis[(b / 3) % 3],
            reweight: Reweight::ALL[(b / 9) % 3],
            lambda: 0.5,
        };
        let labels = rng.random_range(1..=4);
        let batch = random_batch(&mut rng, n, 8, labels);
        let got = cpe_loss(&batch, &cfg).map_err(|e| e.to_string())?;
        worst = worst.max((got - reference_loss(&batch, &cfg)).abs());
    }
    let elapsed = start.elapsed();
    check(
        worst <= ORACLE_TOL && elapsed < ORACLE_BUDGET,
        format!("100 batches, max |diff| {worst:.2e} (tol {ORACLE_TOL:.0e}), {:.2}s", elapsed.as_secs_f64()),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for b in 0..20 {
        let n = rng.random_range(2..=12);
        let cfg = CpeConfig {
            temperature: [0.07, 0.2, 0.5][b % 3],
            phi: [0.0, 0.5][b % 2],
            reweight: Reweight::ALL[b % 3],
            lambda: 0.5,
        };
        let batch = random_batch(&mut rng, n, 6, 3);
        let (_, grad) = cpe_loss_with_grad(&batch, &cfg).map_err(|e| e.to_string())?;
        for i in 0..n {
            for d in 0..batch[i].z.dim() {
                let at = |delta: f64| {
                    let mut probe = batch.clone();
                    probe[i].z.values[d] += delta;
                    cpe_loss(&probe, &cfg).unwrap()
                };
                let numeric = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
                let analytic = grad[i][d];
                let scale = analytic.abs().max(numeric.abs()).max(FD_FLOOR);
                worst = worst.max((analytic - numeric).abs() / scale);
                coords += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        worst < FD_REL_TOL && elapsed < FD_BUDGET,
        format!(
            "20 batches, {coords} coordinates, max rel err {worst:.2e} (tol {FD_REL_TOL:.0e}), {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_3() -> Outcome {
    let rec = |z: Vec<f64>, u, y| ProposalRecord::new(z, u, y).unwrap();
    let cfg = CpeConfig::default();
    let pair = vec![rec(vec![1.0, 0.3], 0.9, 1), rec(vec![-0.2, 0.8], 0.95, 1)];
    let pair_loss = cpe_loss(&pair, &cfg).map_err(|e| e.to_string())?;

    let mixed = vec![
        rec(vec![1.0, 0.0], 0.9, 0),
        rec(vec![0.6, 0.8], 0.9, 0),
        rec(vec![0.0, 1.0], 0.9, 7),
    ];
    let singleton = per_anchor_loss(&mixed, 2, cfg.temperature).map_err(|e| e.to_string())?;
    let distinct = vec![rec(vec![1.0, 0.0], 0.9, 0), rec(vec![0.0, 1.0], 0.9, 1), rec(vec![1.0, 1.0], 0.9, 2)];
    let all_singletons = cpe_loss(&distinct, &cfg).map_err(|e| e.to_string())?;

    let filtered: Vec<ProposalRecord> = mixed.iter().map(|r| rec(r.z.values.clone(), 0.3, r.y)).collect();
    let filtered_loss = cpe_loss(&filtered, &cfg).map_err(|e| e.to_string())?;

    check(
        pair_loss == 0.0 && singleton == 0.0 && all_singletons == 0.0 && filtered_loss == 0.0,
        format!(
            "same-label pair {pair_loss}, singleton anchor {singleton}, all-singleton batch {all_singletons}, all filtered {filtered_loss}"
        ),
    )
}

/// Random orthogonal matrix via Gram-Schmidt.
fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for b in &q {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.push(v.iter().map(|x| x / n).collect());
        }
    }
    q
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut perm, mut rot, mut scale) = (0.0f64, 0.0f64, 0.0f64);
    for b in 0..50 {
        let cfg = CpeConfig {
            temperature: [0.07, 0.2, 0.5][b % 3],
            phi: [0.0, 0.5, 0.7][b % 3],
            reweight: Reweight::ALL[b % 3],
            lambda: 0.5,
        };
        let n = rng.random_range(2..=16);
        let batch = random_batch(&mut rng, n, 8, 3);
        let base = cpe_loss(&batch, &cfg).unwrap();

        let mut shuffled = batch.clone();
        shuffled.shuffle(&mut rng);
        perm = perm.max((cpe_loss(&shuffled, &cfg).unwrap() - base).abs());

        let q = random_rotation(&mut rng, 8);
        let rotated: Vec<ProposalRecord> = batch
            .iter()
            .map(|r| {
                let z = q.iter().map(|row| row.iter().zip(&r.z.values).map(|(a, b)| a * b).sum()).collect();
                ProposalRecord { z: ContrastiveEmbedding::new(z), ..r.clone() }
            })
            .collect();
        rot = rot.max((cpe_loss(&rotated, &cfg).unwrap() - base).abs());

        let scaled: Vec<ProposalRecord> = batch
            .iter()
            .map(|r| {
                let c = rng.random_range(0.01..100.0);
                ProposalRecord {
                    z: ContrastiveEmbedding::new(r.z.values.iter().map(|v| v * c).collect()),
                    ..r.clone()
                }
            })
            .collect();
        scale = scale.max((cpe_loss(&scaled, &cfg).unwrap() - base).abs());
    }

    let (mut logit_scale, mut bound_ok) = (0.0f64, true);
    let alpha = 20.0;
    let clf = CosineClassifier::random(7, 16, alpha, &mut rng);
    for _ in 0..200 {
        let x: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..2.0)).collect();
        let c = rng.random_range(0.001..1000.0);
        let a = clf.cosine_logits(&RoiFeature::new(x.clone()).unwrap()).unwrap();
        let b = clf
            .cosine_logits(&RoiFeature::new(x.iter().map(|v| v * c).collect()).unwrap())
            .unwrap();
        for (p, q) in a.iter().zip(&b) {
            logit_scale = logit_scale.max((p - q).abs());
            bound_ok &= p.abs() <= alpha;
        }
    }
    let elapsed = start.elapsed();
    check(
        perm <= PERMUTATION_TOL
            && rot <= ROTATION_TOL
            && scale <= SCALING_TOL
            && logit_scale <= LOGIT_SCALE_TOL
            && bound_ok
            && elapsed < INVARIANCE_BUDGET,
        format!(
            "permutation {perm:.1e}, rotation {rot:.1e}, record scaling {scale:.1e}, logit scaling {logit_scale:.1e}, |logit|<=alpha {bound_ok}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

// --------------------------------------------------------------------- AP

/// Enumerates every score cut, recounts TP from scratch, integrates the
/// precision envelope over recall.
fn reference_ap(dets: &[Vec<Detection>], gts: &[Vec<Annotation>], class: u32, thr: f64) -> Option<f64> {
    let npos: usize = gts.iter().map(|g| g.iter().filter(|a| a.class_id == class).count()).sum();
    if npos == 0 {
        return None;
    }
    let mut flat: Vec<(usize, Detection)> = Vec::new();
    for (img, ds) in dets.iter().enumerate() {
        for d in ds.iter().filter(|d| d.class_id == class) {
            flat.push((img, *d));
        }
    }
    flat.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut points = Vec::new();
    for cut in 1..=flat.len() {
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0;
        for (img, d) in &flat[..cut] {
            let mut best: Option<(usize, f64)> = None;
            for (g, a) in gts[*img].iter().enumerate() {
                if a.class_id != class || used[*img][g] {
                    continue;
                }
                let v = iou(&d.bbox, &a.bbox);
                if v >= thr && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                used[*img][g] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / npos as f64, tp as f64 / cut as f64));
    }
    let mut levels: Vec<f64> = points.iter().map(|p| p.0).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut prev = 0.0;
    let mut ap = 0.0;
    for r in levels {
        if r <= 0.0 {
            continue;
        }
        let p = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    Some(ap)
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.random_range(0.0..40.0);
    let y = rng.random_range(0.0..40.0);
    BBox::new(x, y, x + rng.random_range(4.0..24.0), y + rng.random_range(4.0..24.0)).unwrap()
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let images = rng.random_range(1..=3);
        let mut gts: Vec<Vec<Annotation>> = vec![Vec::new(); images];
        for _ in 0..rng.random_range(0..=5) {
            let img = rng.random_range(0..images);
            gts[img].push(Annotation {
                bbox: random_box(&mut rng),
                class_id: rng.random_range(0..2),
            });
        }
        let mut dets: Vec<Vec<Detection>> = vec![Vec::new(); images];
        for _ in 0..rng.random_range(0..=10) {
            let img = rng.random_range(0..images);
            // half the detections are jittered copies of a ground truth
            let bbox = match gts[img].choose(&mut rng) {
                Some(g) if rng.random_bool(0.5) => g.bbox.translate(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)),
                _ => random_box(&mut rng),
            };
            dets[img].push(Detection {
                bbox,
                class_id: rng.random_range(0..2),
                score: rng.random_range(0.0..1.0),
            });
        }
        for thr in [0.5, 0.75] {
            let got = average_precision(&dets, &gts, &[0, 1], thr, Interpolation::AllPoint).map_err(|e| e.to_string())?;
            for c in [0, 1] {
                match (got[&c], reference_ap(&dets, &gts, c, thr)) {
                    (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                    (None, None) => {}
                    (a, b) => return Err(format!("presence mismatch: engine {a:?}, reference {b:?}")),
                }
            }
        }
    }

    let d = |b: [f64; 4], s| Detection {
        bbox: BBox::try_from(b).unwrap(),
        class_id: 0,
        score: s,
    };
    let g = |b: [f64; 4]| Annotation {
        bbox: BBox::try_from(b).unwrap(),
        class_id: 0,
    };
    let ap = |dets: Vec<Detection>, gts: Vec<Annotation>| {
        average_precision(&[dets], &[gts], &[0], 0.5, Interpolation::AllPoint).unwrap()[&0].unwrap()
    };
    // IoU 0.9 with the single ground truth
    let perfect = ap(vec![d([0.0, 0.0, 10.0, 10.0], 0.9)], vec![g([0.0, 0.0, 10.0, 9.0])]);
    let disjoint = ap(vec![d([20.0, 20.0, 30.0, 30.0], 0.9)], vec![g([0.0, 0.0, 10.0, 10.0])]);
    let gt2 = vec![g([0.0, 0.0, 10.0, 10.0]), g([30.0, 30.0, 40.0, 40.0])];
    let dets3 = vec![
        d([0.0, 0.0, 10.0, 10.0], 0.9),
        d([50.0, 0.0, 60.0, 10.0], 0.8),
        d([30.0, 30.0, 40.0, 40.0], 0.7),
    ];
    let tp_fp_tp = ap(dets3.clone(), gt2.clone());
    let tp_fp_tp_ref = reference_ap(&[dets3], &[gt2], 0, 0.5).unwrap();
    let hand_ok = perfect == 1.0 && disjoint == 0.0 && tp_fp_tp == tp_fp_tp_ref;

    let elapsed = start.elapsed();
    check(
        worst <= AP_TOL && hand_ok && elapsed < AP_BUDGET,
        format!(
            "50 scenes x 2 thresholds, max |diff| {worst:.1e}; hand cases {perfect}, {disjoint}, {tp_fp_tp:.6} (reference {tp_fp_tp_ref:.6}); {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ------------------------------------------------------- trained benchmark

fn with_novel(ds: DetectionDataset) -> DetectionDataset {
    let reg = ds.registry.clone().with_novel(&NOVEL).unwrap();
    ds.with_registry(reg).unwrap()
}

struct SeedSetup {
    seed: u64,
    base: DetectorState,
    test: DetectionDataset,
    splits: BTreeMap<usize, KShotSplit>,
}

struct BaseStage {
    seeds: Vec<SeedSetup>,
    elapsed: Duration,
}

fn base_stage() -> &'static BaseStage {
    static CELL: OnceLock<BaseStage> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let seeds = SEEDS
            .iter()
            .map(|&seed| {
                let pool = with_novel(generate_synthetic(POOL_IMAGES, &ShapeKind::ALL, 64, 1000 + seed).unwrap());
                let test = with_novel(generate_synthetic(TEST_IMAGES, &ShapeKind::ALL, 64, 2000 + seed).unwrap());
                let cfg = DetectorConfig {
                    steps: BASE_STEPS,
                    ..DetectorConfig::default()
                };
                let base = train_base(&pool.base_only(), &cfg, seed).unwrap().state;
                let splits = SHOTS
                    .iter()
                    .map(|&k| (k, build_kshot_split(&pool, &NOVEL, k, seed).unwrap()))
                    .collect();
                SeedSetup { seed, base, test, splits }
            })
            .collect();
        BaseStage {
            seeds,
            elapsed: start.elapsed(),
        }
    })
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
enum Variant {
    Frozen,
    Strong,
    Contrastive,
}

struct RunResult {
    nap50: f64,
    within_novel: Option<f64>,
    cross: f64,
}

struct Benchmark {
    runs: BTreeMap<(u64, usize, Variant), RunResult>,
    elapsed: Duration,
}

fn finetune_config(base: &DetectorState, variant: Variant) -> (DetectorConfig, CpeConfig) {
    let off = CpeConfig {
        lambda: 0.0,
        ..CpeConfig::default()
    };
    match variant {
        Variant::Frozen => (base.config.frozen_finetune(FINETUNE_STEPS), off),
        Variant::Strong => (base.config.strong_baseline_finetune(FINETUNE_STEPS), off),
        Variant::Contrastive => (base.config.strong_baseline_finetune(FINETUNE_STEPS), CpeConfig::default()),
    }
}

fn benchmark() -> &'static Benchmark {
    static CELL: OnceLock<Benchmark> = OnceLock::new();
    CELL.get_or_init(|| {
        let stage = base_stage();
        let start = Instant::now();
        let mut runs = BTreeMap::new();
        for s in &stage.seeds {
            for (&k, split) in &s.splits {
                for variant in [Variant::Frozen, Variant::Strong, Variant::Contrastive] {
                    let (cfg, cpe) = finetune_config(&s.base, variant);
                    let state = fine_tune(&s.base, &split.dataset, &cfg, &cpe, s.seed).unwrap().state;
                    let report = evaluate(&state, &s.test, &[0.5], Interpolation::AllPoint).unwrap();
                    let rows = export_embeddings(&state, &s.test, EMBEDDING_IMAGES, s.seed).unwrap();
                    let stats = cluster_statistics(&rows).unwrap();
                    runs.insert(
                        (s.seed, k, variant),
                        RunResult {
                            nap50: report.nap50.unwrap(),
                            within_novel: stats.mean_within(&NOVEL),
                            cross: stats.cross,
                        },
                    );
                }
            }
        }
        Benchmark {
            runs,
            elapsed: stage.elapsed + start.elapsed(),
        }
    })
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let stage = base_stage();
    let mut gains = Vec::new();
    let mut detail = Vec::new();
    for s in &stage.seeds {
        let set = &s.splits[&10].dataset;
        let single = collect_stats(&s.base, set, &s.base.config);
        let doubled_cfg = DetectorConfig {
            rpn_post_nms_cap: 2 * s.base.config.rpn_post_nms_cap,
            ..s.base.config.clone()
        };
        let doubled = collect_stats(&s.base, set, &doubled_cfg);
        let gain = doubled.mean_foreground_proposals / single.mean_foreground_proposals - 1.0;
        detail.push(format!(
            "seed {}: {:.2} -> {:.2}",
            s.seed, single.mean_foreground_proposals, doubled.mean_foreground_proposals
        ));
        gains.push(gain);
    }
    let med = median(&mut gains).unwrap();
    let elapsed = start.elapsed();
    check(
        med >= PROPOSAL_GAIN && elapsed < PROPOSAL_BUDGET,
        format!(
            "median gain {:+.1}% (need >= {:.0}%); {}; {:.1}s including base training",
            100.0 * med,
            100.0 * PROPOSAL_GAIN,
            detail.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_7() -> Outcome {
    let bench = benchmark();
    let mut ok = bench.elapsed < BENCHMARK_BUDGET;
    let mut detail = Vec::new();
    for k in SHOTS {
        let med = |v: Variant| {
            let mut xs: Vec<f64> = SEEDS.iter().map(|&s| bench.runs[&(s, k, v)].nap50).collect();
            median(&mut xs).unwrap()
        };
        let (frozen, strong, cpe) = (med(Variant::Frozen), med(Variant::Strong), med(Variant::Contrastive));
        ok &= cpe >= strong && strong >= frozen;
        detail.push(format!(
            "K={k}: contrastive {:.2} / strong {:.2} / frozen {:.2}",
            100.0 * cpe,
            100.0 * strong,
            100.0 * frozen
        ));
    }
    check(
        ok,
        format!("median nAP50 {}; {:.0}s total", detail.join("; "), bench.elapsed.as_secs_f64()),
    )
}

fn criterion_8() -> Outcome {
    let bench = benchmark();
    let mut wins = 0;
    let mut detail = Vec::new();
    for s in SEEDS {
        let on = &bench.runs[&(s, EMBEDDING_SHOT, Variant::Contrastive)];
        let off = &bench.runs[&(s, EMBEDDING_SHOT, Variant::Strong)];
        let within_up = matches!((on.within_novel, off.within_novel), (Some(a), Some(b)) if a > b);
        let cross_down = on.cross < off.cross;
        wins += (within_up && cross_down) as usize;
        detail.push(format!(
            "seed {s}: within {:.3} vs {:.3}, cross {:.3} vs {:.3}",
            on.within_novel.unwrap_or(f64::NAN),
            off.within_novel.unwrap_or(f64::NAN),
            on.cross,
            off.cross
        ));
    }
    check(wins >= 2, format!("{wins}/3 seeds (need 2); {}", detail.join("; ")))
}

fn bits(values: &[f32]) -> Vec<u32> {
    values.iter().map(|v| v.to_bits()).collect()
}

fn criterion_9() -> Outcome {
    let pool = with_novel(generate_synthetic(60, &ShapeKind::ALL, 64, 909).unwrap());
    let cfg = DetectorConfig {
        steps: 10,
        ..DetectorConfig::default()
    };
    let a = train_base(&pool.base_only(), &cfg, 9).unwrap().state;
    let b = train_base(&pool.base_only(), &cfg, 9).unwrap().state;
    let base_same = encode_checkpoint(&a).unwrap() == encode_checkpoint(&b).unwrap();
    let c = train_base(&pool.base_only(), &cfg, 10).unwrap().state;
    let other_seed_differs = encode_checkpoint(&a).unwrap() != encode_checkpoint(&c).unwrap();

    let split = build_kshot_split(&pool, &NOVEL, 2, 9).unwrap();
    let ft_cfg = a.config.strong_baseline_finetune(10);
    let fa = fine_tune(&a, &split.dataset, &ft_cfg, &CpeConfig::default(), 9).unwrap().state;
    let fb = fine_tune(&a, &split.dataset, &ft_cfg, &CpeConfig::default(), 9).unwrap().state;
    let ft_same = encode_checkpoint(&fa).unwrap() == encode_checkpoint(&fb).unwrap();
    let frozen_same = bits(&fa.component_values(Component::Backbone)) == bits(&a.component_values(Component::Backbone));
    let rpn_moved = fa.component_values(Component::Rpn) != a.component_values(Component::Rpn);
    check(
        base_same && other_seed_differs && ft_same && frozen_same && rpn_moved,
        format!(
            "base checkpoints identical {base_same}, other seed differs {other_seed_differs}, fine-tune checkpoints identical {ft_same}, backbone bit-identical {frozen_same}, rpn updated {rpn_moved}"
        ),
    )
}

fn criterion_10() -> Outcome {
    let start = Instant::now();
    let pool = with_novel(generate_synthetic(80, &ShapeKind::ALL, 64, 1010).unwrap());
    let test = with_novel(generate_synthetic(40, &ShapeKind::ALL, 64, 1011).unwrap());
    let cfg = DetectorConfig {
        steps: 100,
        ..DetectorConfig::default()
    };
    let base = train_base(&pool.base_only(), &cfg, 0).unwrap().state;
    let split = build_kshot_split(&pool, &NOVEL, 5, 0).unwrap();
    let run = |cell: &fsce_core::ablation::AblationCell, seed: u64| {
        let ft = DetectorConfig {
            contrast_dim: cell.contrast_dim,
            ..base.config.strong_baseline_finetune(20)
        };
        let state = fine_tune(&base, &split.dataset, &ft, &cell.cpe_config(0.5), seed)?.state;
        let r = evaluate(&state, &test, &coco_thresholds(), Interpolation::AllPoint)?;
        Ok(CellMetrics {
            nap50: r.nap50.unwrap_or(0.0),
            nap75: r.nap75.unwrap_or(0.0),
            nap: r.nap.unwrap_or(0.0),
        })
    };
    let mut detail = Vec::new();
    let mut ok = true;
    for (name, grid) in [("temperature x width", temperature_width_grid()), ("consistency", consistency_grid())] {
        let table = run_ablation(&grid, &[0], run);
        let text = table.to_text();
        let json = table.to_json().map_err(|e| e.to_string())?;
        let back: fsce_core::ablation::AblationTable = serde_json::from_str(&json).map_err(|e| e.to_string())?;
        let rows_ok = table.rows.len() == grid.len()
            && text.lines().count() == grid.len() + 1
            && back == table
            && table.rows.iter().all(|r| {
                r.seeds.iter().all(|s| s.error.is_none())
                    && r.median.is_some_and(|m| [m.nap50, m.nap75, m.nap].iter().all(|v| (0.0..=1.0).contains(v)))
            });
        ok &= rows_ok;
        detail.push(format!("{name}: {} rows, well-formed {rows_ok}", table.rows.len()));
    }
    check(
        ok,
        format!("{}; {:.1}s", detail.join("; "), start.elapsed().as_secs_f64()),
    )
}

fn main() {
    // `cargo test -- --list` and filters are not meaningful for this suite.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("contrastive loss matches reference", criterion_1),
        ("contrastive loss gradient check", criterion_2),
        ("degenerate batches give zero loss", criterion_3),
        ("loss and logit invariances", criterion_4),
        ("AP engine matches PR enumeration", criterion_5),
        ("doubled proposal cap adds foreground proposals", criterion_6),
        ("contrastive >= strong >= frozen novel AP50", criterion_7),
        ("contrastive tightens novel clusters", criterion_8),
        ("determinism and frozen backbone", criterion_9),
        ("ablation tables", criterion_10),
    ];
    let order = [0, 1, 2, 3, 4, 8, 9, 5, 6, 7];
    let mut failed = 0;
    for i in order {
        let (name, f) = criteria[i];
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(d) => println!("criterion {:>2} PASS  {name}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {d}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 && std::env::var_os(STRICT_ENV).is_some() {
        std::process::exit(1);
    }
}
