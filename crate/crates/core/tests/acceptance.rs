//! Acceptance gates. Runs without the libtest harness so every criterion
//! prints one `criterion N: PASS|FAIL` line, in order.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use mipcad::detect2d::{dice_loss_eps, he_std, soft_dice, UNet, UNetSpec, WeightInitSpec, DICE_EPS};
use mipcad::eval::{
    froc, match_candidates, render_summary, stage1_metrics, Detection, Reference, ReportInput, Stage1Summary,
    REFERENCE_FROC,
};
use mipcad::fpr3d::{ArchiSpec, FprNet};
use mipcad::ingest::{CtVolume, NoduleAnnotation};
use mipcad::merge::{dedup_distance_ratio, Candidate};
use mipcad::mip::build_mip_stack;
use mipcad::pipeline::{Metrics, Pipeline, PipelineConfig, Stage};
use mipcad::synthetic::{write_dataset, SyntheticConfig};
use mipcad_nn::{Mode, Tensor};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

// criterion 1

fn brute_force_mip(v: &Array3<f32>, t: usize) -> Array3<f32> {
    let (n, h, w) = v.dim();
    let mut out = Array3::zeros((n, h, w));
    for k in 0..n {
        let lo = k as isize - (t / 2) as isize;
        let hi = k as isize + t.div_ceil(2) as isize - 1;
        for y in 0..h {
            for x in 0..w {
                let mut m = f32::NEG_INFINITY;
                for z in lo.max(0)..=hi.min(n as isize - 1) {
                    m = m.max(v[[z as usize, y, x]]);
                }
                out[[k, y, x]] = m;
            }
        }
    }
    out
}

fn criterion_1_mip_matches_brute_force() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut cases = Vec::new();
    for _ in 0..100 {
        let (n, h, w) = (rng.gen_range(1..=64), rng.gen_range(1..=64), rng.gen_range(1..=64));
        let data: Vec<f32> = (0..n * h * w).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        cases.push(Array3::from_shape_vec((n, h, w), data).unwrap());
    }
    let start = Instant::now();
    let mut mismatches = 0;
    for (i, a) in cases.iter().enumerate() {
        let v = CtVolume::new(a.clone(), [0.7, 0.7, 1.0], [0.0; 3], format!("v{i}")).unwrap();
        for t in [1u32, 5, 10, 15] {
            let s = build_mip_stack(&v, t as f64).unwrap();
            let expect = brute_force_mip(a, t as usize);
            let same = s
                .images
                .iter()
                .zip(expect.iter())
                .all(|(p, q)| p.to_bits() == q.to_bits());
            if !same || s.len() != a.dim().0 {
                mismatches += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    (
        mismatches == 0 && elapsed < Duration::from_secs(10),
        format!(
            "400 stacks, {mismatches} mismatches, {:.2} s of 10 s",
            elapsed.as_secs_f64()
        ),
    )
}

// criterion 2

fn criterion_2_dice_loss() -> Outcome {
    let x = [1.0f32, 1.0, 1.0, 1.0, 0.0, 0.0];
    let y = [0.0f32, 0.0, 1.0, 1.0, 1.0, 1.0];
    let z = [0.0f32, 0.0, 0.0, 0.0, 1.0, 1.0];
    let eps = DICE_EPS;
    // 1 - (2·inter + ε) / (|X| + |Y| + ε)
    let closed = [
        (dice_loss_eps(&x, &x, eps).unwrap(), 1.0 - (8.0 + eps) / (8.0 + eps)),
        (dice_loss_eps(&x, &z, eps).unwrap(), 1.0 - eps / (6.0 + eps)),
        (dice_loss_eps(&x, &y, eps).unwrap(), 1.0 - (4.0 + eps) / (8.0 + eps)),
        (dice_loss_eps(&x, &x, 0.0).unwrap(), 0.0),
        (dice_loss_eps(&x, &z, 0.0).unwrap(), 1.0),
        (dice_loss_eps(&x, &y, 0.0).unwrap(), 0.5),
    ];
    let closed_err = closed.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let p: Vec<f64> = (0..64).map(|_| rng.gen_range(0.05..0.95)).collect();
        let t: Vec<f64> = (0..64).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let (_, g) = soft_dice(&p, &t, eps).unwrap();
        for i in 0..64 {
            let h = 1e-4;
            let (mut a, mut b) = (p.clone(), p.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (soft_dice(&a, &t, eps).unwrap().0 - soft_dice(&b, &t, eps).unwrap().0) / (2.0 * h);
            worst = worst.max((fd - g[i]).abs() / fd.abs().max(1e-12));
        }
    }
    (
        closed_err < 1e-6 && worst < 1e-3,
        format!("closed-form error {closed_err:.1e}, worst gradient relative error {worst:.1e} over 20 8x8 maps"),
    )
}

// criterion 3

fn criterion_3_he_variance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut parts = Vec::new();
    let mut ok = true;
    // (k, c) giving n_l = k²·c of 2, 288 and 3456
    for (k, c) in [(1, 2), (3, 32), (3, 384)] {
        let spec = WeightInitSpec::new(k, c, 100_000usize.div_ceil(k * k * c));
        let n_l = spec.n_l();
        let w = spec.sample_weights(&mut rng).unwrap();
        let w = &w[..100_000];
        let mean = w.iter().map(|&v| v as f64).sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        let target = 2.0 / n_l as f64;
        let rel = (var / target - 1.0).abs();
        ok &= rel < 0.05 && (he_std(n_l).unwrap().powi(2) - target).abs() < 1e-12;
        parts.push(format!("n_l={n_l}: {:.2}%", 100.0 * rel));
    }
    (ok, format!("variance deviation {}", parts.join(", ")))
}

// criterion 4

fn criterion_4_architecture_gates() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let spec = UNetSpec {
        input_size: 32,
        base_width: 4,
        ..UNetSpec::default()
    };
    let mut net = UNet::new(&spec, &mut rng).unwrap();
    let (k3, k1) = net.conv_census();
    let full = UNet::new(&UNetSpec::default(), &mut rng).unwrap().conv_census();
    let x = Tensor::from_vec(&[2, 1, 32, 32], (0..2048).map(|_| rng.gen_range(0.0f32..1.0)).collect()).unwrap();
    let y = net.forward(&x, Mode::Eval);
    let shape_ok = y.shape() == x.shape();
    let a3 = FprNet::new(&ArchiSpec::archi3(), &mut rng).unwrap();
    let a2 = FprNet::new(&ArchiSpec::archi2(), &mut rng).unwrap();
    let count = |c: (usize, usize, usize)| c.0 + c.1 + c.2;
    let (n3, n2) = (count(a3.layer_census()), count(a2.layer_census()));
    let w2 = a2.conv_widths().into_iter().max().unwrap_or(0);
    (k3 == 18 && full.0 == 18 && k1 == 1 && shape_ok && n3 == 12 && n2 == 17 && w2 == 128,
        format!(
            "U-Net 3x3 convs {k3} (full width {}), output {:?} for input {:?}; Archi-3 {n3} layers, Archi-2 {n2} layers, widest {w2}",
            full.0,
            y.shape(),
            x.shape()
        ),
    )
}

// shared synthetic run for criteria 5 and 7

struct E2e {
    _dir: tempfile::TempDir,
    pipeline: Pipeline,
    elapsed: Duration,
    metrics: Metrics,
}

fn e2e() -> &'static E2e {
    static RUN: OnceLock<E2e> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        write_dataset(&data, &SyntheticConfig::default()).unwrap();
        let mut cfg = PipelineConfig::synthetic();
        cfg.data_root = data;
        cfg.cache_root = dir.path().join("cache");
        let start = Instant::now();
        let pipeline = Pipeline::open(cfg).unwrap();
        for s in Stage::ALL {
            let out = pipeline.run(s).unwrap();
            println!("  {}: {}", s, out.message.lines().next().unwrap_or(""));
        }
        let elapsed = start.elapsed();
        let metrics = pipeline.load_metrics().unwrap();
        E2e {
            _dir: dir,
            pipeline,
            elapsed,
            metrics,
        }
    })
}

// criterion 5

fn cand(x: f64, side: u32, t: u32) -> Candidate {
    Candidate {
        series_id: "s".into(),
        center_voxel: [x, 0.0, 3.0],
        center_world: [x, 0.0, 3.0],
        bbox_side: side,
        bbox_mm: side as f64,
        source_thicknesses: BTreeSet::from([t]),
        probability: 1.0,
    }
}

fn hit_set(cands: &[Candidate], nodules: &[NoduleAnnotation], scans: &[String]) -> BTreeSet<usize> {
    let dets: Vec<Detection> = cands
        .iter()
        .filter(|c| scans.contains(&c.series_id))
        .map(Detection::from)
        .collect();
    let r = Reference::new(nodules, scans.to_vec());
    let m = match_candidates(&dets, &r);
    m.nodule_scores
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_some())
        .map(|(i, _)| i)
        .collect()
}

fn criterion_5_merger() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut idempotent = true;
    for _ in 0..200 {
        let cs: Vec<Candidate> = (0..rng.gen_range(0..12))
            .map(|_| cand(rng.gen_range(0.0..60.0), rng.gen_range(2..16), 1))
            .collect();
        let once = dedup_distance_ratio(&cs);
        idempotent &= dedup_distance_ratio(&once) == once;
    }
    // distance 10 over side 10 merges, distance 12 over side 10 does not
    let at_1_0 = dedup_distance_ratio(&[cand(0.0, 10, 1), cand(10.0, 8, 5)]).len();
    let at_1_2 = dedup_distance_ratio(&[cand(0.0, 10, 1), cand(12.0, 8, 1)]).len();

    let run = e2e();
    let p = &run.pipeline;
    let scans = p.plan().all_scans();
    let fused = hit_set(&p.load_fused_candidates().unwrap(), p.annotations(), &scans);
    let mut covered = true;
    let mut per_stream = Vec::new();
    for &t in &p.config().thicknesses {
        let hits = hit_set(&p.load_stream(t).unwrap(), p.annotations(), &scans);
        covered &= hits.is_subset(&fused);
        per_stream.push(format!("{t} mm {}", hits.len()));
    }
    (idempotent && at_1_0 == 1 && at_1_2 == 2 && covered,
        format!(
            "dedup idempotent {idempotent}; ratio 1.0 gives {at_1_0}, 1.2 gives {at_1_2} candidates; fused hits {} of {} nodules cover streams ({})",
            fused.len(),
            p.annotations().len(),
            per_stream.join(", ")
        ),
    )
}

// criterion 6

fn nod(s: &str, x: f64, d: f64) -> NoduleAnnotation {
    NoduleAnnotation {
        series_id: s.into(),
        center_world: [x, 0.0, 0.0],
        diameter_mm: d,
    }
}

fn det(s: &str, x: f64, p: f64) -> Detection {
    Detection {
        series_id: s.into(),
        center_world: [x, 0.0, 0.0],
        probability: p,
    }
}

fn criterion_6_froc_scorer() -> Outcome {
    let ids = vec!["a".to_string(), "b".to_string()];
    let r = Reference::new(&[nod("a", 0.0, 10.0), nod("b", 0.0, 10.0)], ids.clone());
    // sorted by score: hit a (0.9), FP (0.8), hit b (0.4), FP (0.1)
    let c = [
        det("a", 0.0, 0.9),
        det("a", 40.0, 0.8),
        det("b", 1.0, 0.4),
        det("b", 40.0, 0.1),
    ];
    let f = froc(&c, &r).unwrap();
    let example = [(0.0, 0.5), (0.25, 0.5), (0.5, 1.0), (1.0, 1.0)]
        .iter()
        .all(|&(b, s)| f.sensitivity_at(b) == s);

    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let budgets = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];
    let mut monotone = true;
    for _ in 0..1000 {
        let nodules: Vec<NoduleAnnotation> = (0..rng.gen_range(1..6))
            .map(|i| nod(&ids[i % 2], 100.0 * i as f64, rng.gen_range(3.0..30.0)))
            .collect();
        let dets: Vec<Detection> = (0..rng.gen_range(0..30))
            .map(|_| {
                let s = &ids[rng.gen_range(0..2)];
                let x = if rng.gen_bool(0.4) {
                    100.0 * rng.gen_range(0..6) as f64 + rng.gen_range(-2.0..2.0)
                } else {
                    rng.gen_range(1000.0..5000.0)
                };
                det(s, x, rng.gen_range(0.0..1.0))
            })
            .collect();
        let g = froc(&dets, &Reference::new(&nodules, ids.clone())).unwrap();
        let s: Vec<f64> = budgets.iter().map(|&b| g.sensitivity_at(b)).collect();
        monotone &= s.windows(2).all(|w| w[0] <= w[1]) && s.iter().all(|v| (0.0..=1.0).contains(v));
    }

    let fusion = Stage1Summary::from_counts([856, 225, 50], 1186, 16_985, 888).unwrap();
    let s1 = Stage1Summary::from_counts([719, 213, 50], 1186, 12_940, 888).unwrap();
    let table = (
        format!("{:.2}", 100.0 * fusion.sensitivity()),
        format!("{:.2}", fusion.fps_per_scan()),
        format!("{:.2}", s1.fps_per_scan()),
    );
    let table_ok = table == ("95.36".into(), "19.13".into(), "14.57".into());
    // stage1_metrics on hand data agrees with the counting constructor
    let strata = stage1_metrics(&[det("a", 0.5, 1.0), det("b", 70.0, 1.0)], &r).unwrap();
    let strata_ok = strata.detected == 1 && strata.false_positives == 1 && strata.fps_per_scan() == 0.5;
    (
        example && monotone && table_ok && strata_ok,
        format!("2-scan example {example}; monotone over 1000 sets {monotone}; table arithmetic {table:?}"),
    )
}

// criterion 7

fn criterion_7_end_to_end_synthetic() -> Outcome {
    let run = e2e();
    let m = &run.metrics;
    let sens = m.froc.sensitivity_at(4.0);
    let minutes = run.elapsed.as_secs_f64() / 60.0;
    (
        sens >= 0.9 && run.elapsed <= Duration::from_secs(15 * 60),
        format!(
            "sensitivity {sens:.3} at 4 FPs/scan on {} held-out scans, {:.3} at 1, CPM {:.3}; {minutes:.1} min",
            m.test_scans.len(),
            m.froc.sensitivity_at(1.0),
            m.froc.cpm()
        ),
    )
}

// criterion 8

fn criterion_8_report_layout() -> Outcome {
    let text = render_summary(&ReportInput::reference());
    let row = |name: &str| -> Vec<String> {
        text.lines()
            .find(|l| l.starts_with(name))
            .map(|l| l.split_whitespace().map(String::from).collect())
            .unwrap_or_default()
    };
    let fusion = row("Fusion");
    let s1 = row("Stream 1");
    let s4 = row("Stream 4");
    let ok = fusion
        == [
            "Fusion", "-", "856", "225", "50", "1131", "95.36", "16985", "19.13", "95.36",
        ]
        && s1.get(7..) == Some(&["982", "82.80", "12940", "14.57", "82.80"].map(String::from)[..])
        && s4.get(7..) == Some(&["1052", "88.70", "5602", "6.31", "88.70"].map(String::from)[..])
        && REFERENCE_FROC.iter().all(|(_, s)| text.contains(&format!("{s:.2}")));
    (
        ok,
        "reference rows and operating points rendered; full-data figures remain reference targets".into(),
    )
}

fn main() -> ExitCode {
    let gates: [fn() -> Outcome; 8] = [
        criterion_1_mip_matches_brute_force,
        criterion_2_dice_loss,
        criterion_3_he_variance,
        criterion_4_architecture_gates,
        criterion_5_merger,
        criterion_6_froc_scorer,
        criterion_7_end_to_end_synthetic,
        criterion_8_report_layout,
    ];
    let mut failed = 0;
    for (i, gate) in gates.iter().enumerate() {
        let (ok, detail) = gate();
        println!("criterion {}: {} ({detail})", i + 1, if ok { "PASS" } else { "FAIL" });
        failed += usize::from(!ok);
    }
    println!(
        "acceptance: {} of {} criteria passed",
        gates.len() - failed,
        gates.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
