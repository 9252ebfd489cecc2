use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};

use super::{FrocResult, Stage1Summary, OPERATING_POINTS};
use crate::Result;

/// Full-data reference stage-1 rows: name, slab (mm), detected per size
/// stratum, false positives, scans, nodules.
pub const REFERENCE_STAGE1: [(&str, Option<u32>, [usize; 3], usize); 5] = [
    ("Stream 1", Some(1), [719, 213, 50], 12_940),
    ("Stream 2", Some(5), [774, 218, 50], 9_792),
    ("Stream 3", Some(10), [801, 216, 50], 6_895),
    ("Stream 4", Some(15), [787, 215, 50], 5_602),
    ("Fusion", None, [856, 225, 50], 16_985),
];
/// Reference single-stream sensitivities (%), by slab 1, 5, 10, 15 mm.
pub const REFERENCE_STREAM_SENSITIVITY: [f64; 4] = [82.80, 87.86, 89.97, 88.70];
/// Reference final operating points: (FPs/scan, sensitivity %).
pub const REFERENCE_FROC: [(f64, f64); 2] = [(1.0, 92.67), (2.0, 94.19)];
const REFERENCE_SCANS: usize = 888;
const REFERENCE_NODULES: usize = 1186;

#[derive(Debug, Clone, PartialEq)]
pub struct StreamRow {
    pub name: String,
    /// Slab thickness in mm; `None` for the fused row.
    pub thickness: Option<u32>,
    pub summary: Stage1Summary,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportInput {
    pub title: String,
    pub stage1: Vec<StreamRow>,
    pub froc: Option<FrocResult>,
}

impl ReportInput {
    /// The full-data reference figures, for rendering the reference layout.
    pub fn reference() -> Self {
        let stage1 = REFERENCE_STAGE1
            .iter()
            .map(|&(name, thickness, by_size, fps)| StreamRow {
                name: name.into(),
                thickness,
                summary: Stage1Summary::from_counts(by_size, REFERENCE_NODULES, fps, REFERENCE_SCANS)
                    .expect("nonzero nodule count"),
            })
            .collect();
        Self {
            title: "Reference targets (888 scans, 1186 nodules)".into(),
            stage1,
            froc: None,
        }
    }
}

fn reference_sensitivity(row: &StreamRow) -> Option<f64> {
    match row.thickness {
        Some(t) => [1, 5, 10, 15].iter().position(|&x| x == t).map(|i| REFERENCE_STREAM_SENSITIVITY[i]),
        None => Some(95.36),
    }
}

/// Renders the plain-text summary.
pub fn render_summary(input: &ReportInput) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{}", input.title);
    let _ = writeln!(s);
    let _ = writeln!(s, "Nodule candidate detection");
    let _ = writeln!(
        s,
        "{:<10} {:>6} {:>9} {:>9} {:>9} {:>7} {:>9} {:>8} {:>9} {:>9}",
        "Stream", "Slab", "3-10 mm", "10-20 mm", ">=20 mm", "Total", "Sens (%)", "FPs", "FPs/scan", "Ref (%)"
    );
    for r in &input.stage1 {
        let slab = r.thickness.map_or("-".to_string(), |t| format!("{t} mm"));
        let reference = reference_sensitivity(r).map_or("-".to_string(), |v| format!("{v:.2}"));
        let d = r.summary.detected_by_size;
        let _ = writeln!(
            s,
            "{:<10} {:>6} {:>9} {:>9} {:>9} {:>7} {:>9.2} {:>8} {:>9.2} {:>9}",
            r.name,
            slab,
            d[0],
            d[1],
            d[2],
            r.summary.detected,
            100.0 * r.summary.sensitivity(),
            r.summary.false_positives,
            r.summary.fps_per_scan(),
            reference
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "False positive reduction (FROC)");
    let _ = writeln!(s, "{:>9} {:>9}", "FPs/scan", "Sens (%)");
    match &input.froc {
        Some(f) => {
            for &(b, v) in &f.operating_points {
                let _ = writeln!(s, "{:>9} {:>9.2}", b, 100.0 * v);
            }
            let _ = writeln!(s, "CPM {:.4} ({} scans, {} nodules)", f.cpm(), f.scan_count, f.nodule_count);
        }
        None => {
            for b in OPERATING_POINTS {
                let _ = writeln!(s, "{:>9} {:>9}", b, "-");
            }
        }
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "Comparison at fixed operating points");
    let _ = writeln!(s, "{:<24} {:>9} {:>9}", "System", "Sens (%)", "FPs/scan");
    for &(b, v) in &REFERENCE_FROC {
        let _ = writeln!(s, "{:<24} {:>9.2} {:>9.1}", "Reference (full data)", v, b);
    }
    for &(b, _) in &REFERENCE_FROC {
        let v = input.froc.as_ref().map_or("-".to_string(), |f| format!("{:.2}", 100.0 * f.sensitivity_at(b)));
        let _ = writeln!(s, "{:<24} {:>9} {:>9.1}", "This run", v, b);
    }
    s
}

fn draw_line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), c: Rgb<u8>) {
    let (mut x0, mut y0) = a;
    let (dx, dy) = ((b.0 - x0).abs(), -(b.1 - y0).abs());
    let (sx, sy) = (if x0 < b.0 { 1 } else { -1 }, if y0 < b.1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && y0 >= 0 && (x0 as u32) < img.width() && (y0 as u32) < img.height() {
            img.put_pixel(x0 as u32, y0 as u32, c);
        }
        if (x0, y0) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Draws the FROC step curve on a log₂ FPs/scan axis from 1/8 to 16.
pub fn render_froc_png(f: &FrocResult, path: &Path) -> Result<()> {
    let (w, h, m) = (640i64, 480i64, 40i64);
    let mut img = RgbImage::from_pixel(w as u32, h as u32, Rgb([255, 255, 255]));
    let (lo, hi) = (0.125f64.log2(), 16f64.log2());
    let px = |fps: f64| m + ((fps.max(0.125).log2() - lo) / (hi - lo) * (w - 2 * m) as f64).round() as i64;
    let py = |sens: f64| h - m - (sens * (h - 2 * m) as f64).round() as i64;
    let grid = Rgb([220, 220, 220]);
    for b in OPERATING_POINTS {
        draw_line(&mut img, (px(b), py(0.0)), (px(b), py(1.0)), grid);
    }
    for k in 0..=10 {
        let y = py(k as f64 / 10.0);
        draw_line(&mut img, (m, y), (w - m, y), grid);
    }
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, (m, h - m), (w - m, h - m), axis);
    draw_line(&mut img, (m, m), (m, h - m), axis);
    let curve = Rgb([200, 30, 30]);
    let samples: Vec<(i64, i64)> = (0..=(w - 2 * m))
        .map(|i| {
            let fps = 2f64.powf(lo + (hi - lo) * i as f64 / (w - 2 * m) as f64);
            (m + i, py(f.sensitivity_at(fps)))
        })
        .collect();
    for pair in samples.windows(2) {
        draw_line(&mut img, pair[0], pair[1], curve);
    }
    img.save(path)?;
    Ok(())
}

/// Writes `summary.txt`, and with FROC data `froc.csv` and `froc.png`,
/// into `dir`. Returns the summary text.
pub fn write_report(dir: &Path, input: &ReportInput) -> Result<String> {
    fs::create_dir_all(dir)?;
    let text = render_summary(input);
    fs::write(dir.join("summary.txt"), &text)?;
    if let Some(f) = &input.froc {
        let mut w = csv::Writer::from_path(dir.join("froc.csv"))?;
        w.write_record(["threshold", "fps_per_scan", "sensitivity"])?;
        for p in &f.points {
            w.write_record([p.threshold.to_string(), p.fps_per_scan.to_string(), p.sensitivity.to_string()])?;
        }
        w.flush()?;
        render_froc_png(f, &dir.join("froc.png"))?;
    }
    Ok(text)
}
