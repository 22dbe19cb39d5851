//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! The benchmark criteria (A5-A9) share one lazily built benchmark so the
//! expensive training and detection passes run once per test binary.

use std::collections::BTreeSet;
use std::sync::OnceLock;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use xdet::adapt::{batch_grad, init_model, mean_loss, pair_loss};
use xdet::calib::{self, apply_calibration, compute_stats, fit_calibration, fold};
use xdet::detect::{collect_candidates, iou, nms, proposals_for};
use xdet::evalkit::{
    average_precision, circ_diff, match_detections, pose_error_at_recall, retrieval_accuracy, ApMode, Benchmark,
    BenchmarkConfig, GroundTruth, GtObject, ImageDetection,
};
use xdet::harness::{self, RunConfig};
use xdet::simkit::{score_folded, score_gallery};
use xdet::*;

fn report(id: &str, ok: bool, detail: String) {
    println!("{id} {}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{id} failed: {detail}");
}

fn fv(v: Vec<f64>) -> FeatureVector {
    FeatureVector::new(v).unwrap()
}

fn rand_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn meta(i: usize, ar: f64) -> ExemplarMeta {
    ExemplarMeta::new(i as u32, (i % 7) as u32, (i % 36) as f64 * 10.0, 10.0, 1, ar).unwrap()
}

fn random_gallery(rng: &mut impl Rng, n: usize, dim: usize) -> Gallery {
    let mut g = Gallery::new(dim);
    for i in 0..n {
        g.push(meta(i, rng.gen_range(0.4..2.5)), fv(rand_vec(rng, dim, -1.0, 1.0))).unwrap();
    }
    g
}

// ---------------------------------------------------------------- A1

fn finite_diff(m: &AdaptationModel, batch: &[TrainingPair], eps: f64) -> Vec<Vec<f64>> {
    let mut probe = m.clone();
    let mut out = Vec::new();
    for t in 0..m.params().len() {
        let mut g = vec![0.0; m.params()[t].len()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = m.params()[t][j];
            probe.params_mut()[t][j] = orig + eps;
            let up = mean_loss(&probe, batch).unwrap();
            probe.params_mut()[t][j] = orig - eps;
            let down = mean_loss(&probe, batch).unwrap();
            probe.params_mut()[t][j] = orig;
            *gj = (up - down) / (2.0 * eps);
        }
        out.push(g);
    }
    out
}

const KINK_MARGIN: f64 = 0.02;

#[test]
fn a1_gradient_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let shape = Shape3::new(4, 4, 4);
    let dim = shape.dim();
    let mut worst: f64 = 0.0;
    for fam in TransformFamily::ALL {
        let mut m = init_model(fam, shape, dim, 16, 5).unwrap();
        for t in m.params_mut() {
            for v in t.iter_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
        // Central differences straddling a ReLU kink measure the kink, not
        // the gradient, so inputs are redrawn until every pre-activation is
        // clear of zero by far more than the probe step.
        let mut batch = Vec::new();
        while batch.len() < 20 {
            let x = fv(rand_vec(&mut rng, dim, -1.0, 1.0));
            if m.relu_margin(&x).unwrap() > KINK_MARGIN {
                batch.push(TrainingPair::new(x, fv(rand_vec(&mut rng, dim, -1.0, 1.0))).unwrap());
            }
        }
        let analytic = batch_grad(&m, &batch).unwrap();
        let numeric = finite_diff(&m, &batch, 1e-4);
        for (a, n) in analytic.0.iter().flatten().zip(numeric.iter().flatten()) {
            let scale = a.abs().max(n.abs());
            if scale > 1e-7 {
                worst = worst.max((a - n).abs() / scale);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        "A1",
        worst < 1e-3 && secs < 5.0,
        format!("max relative error {worst:.3e} over all families, {secs:.2}s"),
    );
}

// ---------------------------------------------------------------- A2

#[test]
fn a2_calibration_anchors() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let dim = 16;
    let g = random_gallery(&mut rng, 200, dim);
    let patches: Vec<FeatureVector> = (0..2000).map(|_| fv(rand_vec(&mut rng, dim, -1.0, 1.0))).collect();
    let stats = compute_stats(&g, &patches, Similarity::Cosine, 95.0).unwrap();
    let params = fit_calibration(&stats, calib::DEFAULT_FIT_EPS);
    let mut worst: f64 = 0.0;
    let mut all_valid = true;
    for i in 0..g.len() {
        all_valid &= params.valid[i];
        worst = worst.max((params.c[i] * stats.mean[i] + params.d[i] + 1.0).abs());
        worst = worst.max((params.c[i] * stats.percentile[i] + params.d[i]).abs());
    }

    // q = mu: every patch identical.
    let same = vec![patches[0].clone(); 50];
    let dstats = compute_stats(&g, &same, Similarity::Cosine, 95.0).unwrap();
    let dp = fit_calibration(&dstats, calib::DEFAULT_FIT_EPS);
    let flagged = dp.valid.iter().all(|v| !v) && dp.c.iter().chain(&dp.d).all(|v| !v.is_nan());
    let applied = apply_calibration(&dp, &vec![0.3; g.len()]).unwrap();
    let no_nan = applied.iter().all(|v| !v.is_nan());

    report(
        "A2",
        all_valid && worst < 1e-9 && flagged && no_nan,
        format!("max anchor error {worst:.3e}; degenerate flagged {flagged}, NaN-free {no_nan}"),
    );
}

// ---------------------------------------------------------------- A3

#[test]
fn a3_folding_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let dim = 24;
    let g = random_gallery(&mut rng, 50, dim);
    let params = CalibrationParams {
        c: rand_vec(&mut rng, 50, 0.1, 20.0),
        d: rand_vec(&mut rng, 50, -15.0, 5.0),
        valid: vec![true; 50],
    };
    let fg = fold(&g, &params).unwrap();
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for _ in 0..20 {
        let q = fv(rand_vec(&mut rng, dim, -2.0, 2.0));
        let folded = score_folded(&fg, &q).unwrap();
        let cos = score_gallery(&g, &q, Similarity::Cosine).unwrap();
        for i in 0..g.len() {
            worst = worst.max((folded[i] - (params.c[i] * cos[i] + params.d[i])).abs());
            cases += 1;
        }
    }
    report("A3", cases == 1000 && worst < 1e-6, format!("{cases} cases, max error {worst:.3e}"));
}

// ---------------------------------------------------------------- A4

fn rand_box(rng: &mut impl Rng) -> BBox {
    BBox::new(rng.gen_range(0..16), rng.gen_range(0..16), rng.gen_range(1..10), rng.gen_range(1..10)).unwrap()
}

fn iou_pixels(a: &BBox, b: &BBox) -> f64 {
    let inside = |r: &BBox, x: i32, y: i32| x >= r.x && x < r.x + r.w && y >= r.y && y < r.y + r.h;
    let (mut inter, mut union) = (0, 0);
    for y in 0..32 {
        for x in 0..32 {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as i32;
            union += (ia || ib) as i32;
        }
    }
    inter as f64 / union as f64
}

/// Repeatedly takes the best remaining detection by (score desc, exemplar
/// asc, input index asc) and keeps it if it clears every kept box.
fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut left: Vec<usize> = (0..dets.len()).collect();
    let mut kept: Vec<Detection> = Vec::new();
    while !left.is_empty() {
        let mut bi = 0;
        for k in 1..left.len() {
            let (c, b) = (&dets[left[k]], &dets[left[bi]]);
            if c.score > b.score || (c.score == b.score && c.exemplar_id < b.exemplar_id) {
                bi = k;
            }
        }
        let d = dets[left.remove(bi)];
        if kept.iter().all(|k| iou_pixels(&k.bbox, &d.bbox) <= thr) {
            kept.push(d);
        }
    }
    kept
}

/// Returns tp flags in descending score order (stable on ties).
fn match_oracle(dets: &[ImageDetection], gt: &GroundTruth, thr: f64) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 && dets[idx[j]].det.score > dets[idx[j - 1]].det.score {
            idx.swap(j, j - 1);
            j -= 1;
        }
    }
    let mut used = BTreeSet::new();
    idx.iter()
        .map(|&i| {
            let d = &dets[i];
            let mut best = None;
            let mut best_iou = -1.0;
            for (j, o) in gt.images[d.image_id].iter().enumerate() {
                let v = iou_pixels(&d.det.bbox, &o.bbox);
                if !used.contains(&(d.image_id, j)) && v >= thr && v > best_iou {
                    best = Some(j);
                    best_iou = v;
                }
            }
            if let Some(j) = best {
                used.insert((d.image_id, j));
            }
            best.is_some()
        })
        .collect()
}

/// All-points AP as the sum over true positives of the best precision at
/// or beyond their rank.
fn ap_oracle(labels: &[bool], n_gt: usize) -> f64 {
    let prec: Vec<f64> = labels
        .iter()
        .scan(0, |tp, &l| {
            *tp += l as usize;
            Some(*tp)
        })
        .enumerate()
        .map(|(k, tp)| tp as f64 / (k + 1) as f64)
        .collect();
    (0..labels.len())
        .filter(|&k| labels[k])
        .map(|k| prec[k..].iter().cloned().fold(0.0, f64::max))
        .sum::<f64>()
        / n_gt as f64
}

#[test]
fn a4_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut bad = Vec::new();
    for case in 0..500 {
        let n = rng.gen_range(0..=12);
        let dets: Vec<Detection> = (0..n)
            .map(|_| Detection {
                bbox: rand_box(&mut rng),
                exemplar_id: rng.gen_range(0..4),
                score: (rng.gen_range(0..6) as f64) / 5.0,
            })
            .collect();
        for a in &dets {
            for b in &dets {
                if (iou(&a.bbox, &b.bbox) - iou_pixels(&a.bbox, &b.bbox)).abs() > 1e-12 {
                    bad.push(format!("iou case {case}"));
                }
            }
        }
        let thr = [0.0, 0.3, 0.5, 0.7][case % 4];
        if nms(&dets, thr) != nms_oracle(&dets, thr) {
            bad.push(format!("nms case {case}"));
        }

        let n_img = rng.gen_range(1..=3);
        let gt = GroundTruth {
            images: (0..n_img)
                .map(|_| {
                    (0..rng.gen_range(0..=4))
                        .map(|_| GtObject {
                            bbox: rand_box(&mut rng),
                            model_id: 0,
                            azimuth: 0.0,
                        })
                        .collect()
                })
                .collect(),
        };
        let idets: Vec<ImageDetection> = dets
            .iter()
            .map(|&det| ImageDetection {
                image_id: rng.gen_range(0..n_img),
                det,
            })
            .collect();
        let mthr = [0.3, 0.5][case % 2];
        let labels: Vec<bool> = match_detections(&idets, &gt, mthr).iter().map(|m| m.tp).collect();
        if labels != match_oracle(&idets, &gt, mthr) {
            bad.push(format!("match case {case}"));
        }
        let n_gt = gt.n_objects().max(1);
        let ap = average_precision(&labels, n_gt, ApMode::AllPoints).unwrap();
        if (ap - ap_oracle(&labels, n_gt)).abs() > 1e-12 {
            bad.push(format!("ap case {case}"));
        }
    }
    let half = average_precision(&[false, true], 1, ApMode::AllPoints).unwrap();
    report(
        "A4",
        bad.is_empty() && half == 0.5,
        format!("500 instances, {} mismatches {:?}; [FP,TP] AP = {half}", bad.len(), &bad[..bad.len().min(5)]),
    );
}

// ---------------------------------------------------------------- A10

fn order(scores: &[f64]) -> Vec<usize> {
    let mut o: Vec<usize> = (0..scores.len()).collect();
    o.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    o
}

#[test]
fn a10_scale_invariances() {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let dim = 32;
    let g = random_gallery(&mut rng, 60, dim);
    let q = rand_vec(&mut rng, dim, -1.0, 1.0);
    let mut order_ok = true;
    for kind in [Similarity::Cosine, Similarity::SquaredCosine] {
        let base = order(&score_gallery(&g, &fv(q.clone()), kind).unwrap());
        for _ in 0..100 {
            let alpha = 10f64.powf(rng.gen_range(-3.0..3.0));
            let scaled = fv(q.iter().map(|v| v * alpha).collect());
            order_ok &= order(&score_gallery(&g, &scaled, kind).unwrap()) == base;
        }
    }
    let m = init_model(TransformFamily::AffineReLU, Shape3::flat(dim), dim, 0, 3).unwrap();
    let x = rand_vec(&mut rng, dim, -1.0, 1.0);
    let y = rand_vec(&mut rng, dim, -1.0, 1.0);
    let l0 = pair_loss(&m, &TrainingPair::new(fv(x.clone()), fv(y.clone())).unwrap()).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let beta = 10f64.powf(rng.gen_range(-3.0..3.0));
        let p = TrainingPair::new(fv(x.clone()), fv(y.iter().map(|v| v * beta).collect())).unwrap();
        worst = worst.max((pair_loss(&m, &p).unwrap() - l0).abs());
    }
    report(
        "A10",
        order_ok && worst < 1e-9,
        format!("ordering invariant {order_ok}; max loss change {worst:.3e}"),
    );
}

// ---------------------------------------------------------------- A11

#[test]
fn a11_throughput() {
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let (n, dim) = (10_000, 1024);
    let mut g = Gallery::new(dim);
    for i in 0..n {
        g.push(meta(i, 1.0), fv(rand_vec(&mut rng, dim, -1.0, 1.0))).unwrap();
    }
    let fg = fold(&g, &CalibrationParams::identity(n)).unwrap();
    let queries: Vec<FeatureVector> = (0..500).map(|_| fv(rand_vec(&mut rng, dim, -1.0, 1.0))).collect();
    let start = Instant::now();
    let scores = xdet::simkit::score_folded_batch(&fg, &queries).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let shaped = scores.len() == 500 && scores.iter().all(|r| r.len() == n);
    report(
        "A11",
        shaped && secs < 2.0,
        format!("500 x 10000 x 1024 folded scoring in {secs:.3}s"),
    );
}

// ---------------------------------------------------------------- A12

fn circ_oracle(a: f64, b: f64) -> f64 {
    (-5..=5)
        .map(|k| (a - b + 360.0 * k as f64).abs())
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn a12_pose_metric() {
    let mut rng = ChaCha8Rng::seed_from_u64(1212);
    let mut bad = 0;
    for _ in 0..200 {
        let (a, b) = (rng.gen_range(-720.0..720.0), rng.gen_range(-720.0..720.0));
        if (circ_diff(a, b) - circ_oracle(a, b)).abs() > 1e-9 {
            bad += 1;
        }
    }
    for case in 0..200 {
        let n_img = rng.gen_range(1..=3);
        let gt = GroundTruth {
            images: (0..n_img)
                .map(|_| {
                    (0..rng.gen_range(0..=3))
                        .map(|_| GtObject {
                            bbox: rand_box(&mut rng),
                            model_id: 0,
                            azimuth: rng.gen_range(0..36) as f64 * 10.0,
                        })
                        .collect()
                })
                .collect(),
        };
        if gt.n_objects() == 0 {
            continue;
        }
        let exemplars: Vec<ExemplarMeta> = (0..36).map(|i| meta(i, 1.0)).collect();
        let dets: Vec<ImageDetection> = (0..rng.gen_range(0..=10))
            .map(|_| ImageDetection {
                image_id: rng.gen_range(0..n_img),
                det: Detection {
                    bbox: rand_box(&mut rng),
                    exemplar_id: rng.gen_range(0..36),
                    score: rng.gen_range(0.0..1.0),
                },
            })
            .collect();
        let target = [0.25, 0.5, 1.0][case % 3];
        let got = pose_error_at_recall(&dets, &gt, &exemplars, target).unwrap();

        // Loop oracle: walk detections by score, collect errors of matched
        // ones until recall reaches the target.
        let labels = match_oracle(&dets, &gt, 0.5);
        let mut idx: Vec<usize> = (0..dets.len()).collect();
        idx.sort_by(|&a, &b| dets[b].det.score.total_cmp(&dets[a].det.score));
        let mut used = BTreeSet::new();
        let mut errs = Vec::new();
        for (&i, &tp) in idx.iter().zip(&labels) {
            if errs.len() as f64 / gt.n_objects() as f64 >= target {
                break;
            }
            if !tp {
                continue;
            }
            let d = &dets[i];
            let mut best = None;
            let mut bv = -1.0;
            for (j, o) in gt.images[d.image_id].iter().enumerate() {
                let v = iou_pixels(&d.det.bbox, &o.bbox);
                if !used.contains(&(d.image_id, j)) && v >= 0.5 && v > bv {
                    best = Some(j);
                    bv = v;
                }
            }
            let j = best.unwrap();
            used.insert((d.image_id, j));
            errs.push(circ_oracle(exemplars[d.det.exemplar_id as usize].azimuth, gt.images[d.image_id][j].azimuth));
        }
        let within = errs.iter().filter(|&&e| e <= 20.0).count();
        let frac = if errs.is_empty() { 0.0 } else { within as f64 / errs.len() as f64 };
        if got.errors != errs || got.fraction_within_20 != frac {
            bad += 1;
        }
    }
    let wrap = circ_diff(350.0, 10.0);
    report(
        "A12",
        bad == 0 && wrap == 20.0,
        format!("{bad} mismatches over 400 fixtures; circ_diff(350, 10) = {wrap}"),
    );
}

// ---------------------------------------------------------------- benchmark

struct Family {
    model: AdaptationModel,
    calibrated: FoldedGallery,
}

struct Fixture {
    bench: Benchmark,
    families: Vec<(TransformFamily, Family)>,
}

const BENCH_FAMILIES: [TransformFamily; 4] = [
    TransformFamily::Identity,
    TransformFamily::Affine,
    TransformFamily::AffineReLU,
    TransformFamily::TwoLayerReLU,
];

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let bench = Benchmark::build(&BenchmarkConfig::default()).unwrap();
        let families = BENCH_FAMILIES
            .iter()
            .map(|&f| {
                let (model, _) = bench.train_family(f).unwrap();
                let calibrated = bench.folded(&bench.gallery, &model, true).unwrap();
                (f, Family { model, calibrated })
            })
            .collect();
        Fixture { bench, families }
    })
}

impl Fixture {
    fn family(&self, f: TransformFamily) -> &Family {
        &self.families.iter().find(|(g, _)| *g == f).unwrap().1
    }

    fn calibrated_ap(&self, f: TransformFamily) -> f64 {
        static APS: OnceLock<Vec<(TransformFamily, f64)>> = OnceLock::new();
        let aps = APS.get_or_init(|| {
            self.families
                .iter()
                .map(|(f, fam)| {
                    let dets = self.bench.detect_all(&fam.model, &fam.calibrated, &[0.9]).unwrap();
                    (*f, self.bench.ap(&dets[0]).unwrap())
                })
                .collect()
        });
        aps.iter().find(|(g, _)| *g == f).unwrap().1
    }
}

/// Frozen values of the default benchmark, checked to this tolerance.
const FROZEN_TOL: f64 = 1e-6;
const FROZEN_RETRIEVAL_IDENTITY: f64 = 47.0 / 120.0;
const FROZEN_RETRIEVAL_AFFINE_RELU: f64 = 67.0 / 120.0;
const FROZEN_AP_UNCALIBRATED: f64 = 0.384820842;
const FROZEN_AP: [(TransformFamily, f64); 4] = [
    (TransformFamily::Identity, 0.388242099),
    (TransformFamily::Affine, 0.532380434),
    (TransformFamily::AffineReLU, 0.562128341),
    (TransformFamily::TwoLayerReLU, 0.436389094),
];

fn frozen(got: f64, want: f64) -> bool {
    (got - want).abs() <= FROZEN_TOL
}

#[test]
fn a5_adaptation_benefit() {
    let fx = fixture();
    let queries = fx.bench.scene_queries().unwrap();
    let acc = |f| retrieval_accuracy(&queries, &fx.bench.gallery, Similarity::Cosine, &fx.family(f).model).unwrap();
    let id = acc(TransformFamily::Identity);
    let relu = acc(TransformFamily::AffineReLU);
    let gain = relu - id;
    let pinned = frozen(id, FROZEN_RETRIEVAL_IDENTITY) && frozen(relu, FROZEN_RETRIEVAL_AFFINE_RELU);
    report(
        "A5",
        gain >= 0.10 && pinned,
        format!(
            "top-1 retrieval identity {id:.4}, affine_relu {relu:.4}, gain {:.1} points; matches frozen {pinned}",
            100.0 * gain
        ),
    );
}

#[test]
fn a6_calibration_benefit() {
    let fx = fixture();
    let fam = fx.family(TransformFamily::AffineReLU);
    let raw = fx.bench.folded(&fx.bench.gallery, &fam.model, false).unwrap();
    let uncal = fx.bench.ap(&fx.bench.detect_all(&fam.model, &raw, &[0.9]).unwrap()[0]).unwrap();
    let cal = fx.calibrated_ap(TransformFamily::AffineReLU);
    let pinned = frozen(uncal, FROZEN_AP_UNCALIBRATED) && frozen(cal, FROZEN_AP[2].1);
    report(
        "A6",
        cal >= uncal && pinned,
        format!("affine_relu AP calibrated {cal:.4} vs uncalibrated {uncal:.4}; matches frozen {pinned}"),
    );
}

#[test]
fn a7_family_ordering() {
    let fx = fixture();
    let ap = |f| fx.calibrated_ap(f);
    let (id, aff, relu, two) = (
        ap(TransformFamily::Identity),
        ap(TransformFamily::Affine),
        ap(TransformFamily::AffineReLU),
        ap(TransformFamily::TwoLayerReLU),
    );
    let ok = relu >= aff - 0.01 && aff >= id && relu >= two;
    let pinned = FROZEN_AP.iter().all(|&(f, want)| frozen(ap(f), want));
    report(
        "A7",
        ok && pinned,
        format!(
            "AP at tau 0.9: identity {id:.4}, affine {aff:.4}, affine_relu {relu:.4}, two_layer_relu {two:.4}; \
             matches frozen {pinned}"
        ),
    );
}

#[test]
fn a8_gate_monotonicity() {
    let fx = fixture();
    let fam = fx.family(TransformFamily::AffineReLU);
    let mut violations = 0;
    let (mut n_strict, mut n_loose) = (0, 0);
    for s in &fx.bench.scenes {
        let proposals = proposals_for(&s.image, &fx.bench.cfg.detect).unwrap();
        let set = |tau: f64| -> BTreeSet<(usize, usize)> {
            let cfg = DetectConfig {
                ar_threshold: tau,
                ..fx.bench.cfg.detect.clone()
            };
            collect_candidates(&s.image, &proposals, &fam.model, &fam.calibrated, &cfg)
                .unwrap()
                .iter()
                .map(|c| (c.proposal, c.exemplar))
                .collect()
        };
        let strict = set(0.9);
        let loose = set(0.75);
        n_strict += strict.len();
        n_loose += loose.len();
        violations += strict.difference(&loose).count();
    }
    report(
        "A8",
        violations == 0 && n_strict < n_loose,
        format!(
            "{} images: {n_strict} candidates at 0.9, {n_loose} at 0.75, {violations} outside the looser set",
            fx.bench.scenes.len()
        ),
    );
}

fn small_run(dir: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.out_dir = dir.to_path_buf();
    let b = &mut cfg.bench;
    b.n_models = 2;
    b.n_pairs = 200;
    b.n_scenes = 3;
    b.n_calibration_images = 3;
    b.calibration_patches = 500;
    b.train.max_epochs = 3;
    cfg.set_seed(11);
    cfg
}

#[test]
fn a9_determinism() {
    let files = ["model.xadp", "loss.csv", "gallery.xgal", "calibrated.xgal", "detections.txt", "metrics.csv", "pr.csv", "pose.csv"];
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_run(dir.path());
        harness::cmd_synth(&cfg).unwrap();
        harness::cmd_train(&cfg).unwrap();
        harness::cmd_gallery(&cfg).unwrap();
        harness::cmd_calibrate(&cfg, None, None).unwrap();
        harness::cmd_detect(&cfg, None, None, &harness::default_images(&cfg)).unwrap();
        harness::cmd_eval(&cfg, None, None, None, None).unwrap();
        files
            .iter()
            .map(|f| std::fs::read(dir.path().join(f)).unwrap())
            .collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    let differing: Vec<&str> = files.iter().zip(a.iter().zip(&b)).filter(|(_, (x, y))| x != y).map(|(f, _)| *f).collect();
    let nonempty = a.iter().all(|x| !x.is_empty());
    report(
        "A9",
        differing.is_empty() && nonempty,
        format!("{} artifacts compared across two runs, differing: {differing:?}", files.len()),
    );
}
