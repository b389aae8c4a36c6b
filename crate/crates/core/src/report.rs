//! Image outputs and run aggregation: field panels, PCA composites, line
//! plots, and a summary of metrics found under run directories.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::analysis::{CoherenceCurve, VarianceProfile};
use crate::error::{GaiaError, Result};
use crate::gapfill::SweepReport;
use crate::train::{read_metrics, MetricsRecord};

pub const PALETTE: [[u8; 3]; 6] =
    [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189], [140, 86, 75]];

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| GaiaError::Format(format!("{}: {e}", path.display())))
}

fn gray(v: f64, lo: f64, hi: f64) -> u8 {
    let t = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    (t * 255.0).round() as u8
}

/// Side-by-side grayscale panels with a shared value range; missing pixels in red.
pub fn panels_png(path: &Path, panels: &[(&Array2<f64>, Option<&Array2<bool>>)], lo: f64, hi: f64) -> Result<()> {
    let Some((first, _)) = panels.first() else {
        return Err(GaiaError::InvalidInput("no panels to draw".into()));
    };
    let (h, w) = first.dim();
    let gap = 4;
    let width = panels.len() * w + (panels.len() - 1) * gap;
    let mut img = RgbImage::from_pixel(width as u32, h as u32, Rgb([255, 255, 255]));
    for (i, (vals, miss)) in panels.iter().enumerate() {
        if vals.dim() != (h, w) {
            return Err(GaiaError::Shape("panels differ in shape".into()));
        }
        let x0 = i * (w + gap);
        for ((y, x), &v) in vals.indexed_iter() {
            let px = if miss.is_some_and(|m| m[[y, x]]) { Rgb([200, 0, 0]) } else { Rgb([gray(v, lo, hi); 3]) };
            img.put_pixel((x0 + x) as u32, y as u32, px);
        }
    }
    save(&img, path)
}

/// Three channels stretched independently to [0, 255].
pub fn rgb_png(path: &Path, channels: &[Array2<f64>], upscale: usize) -> Result<()> {
    if channels.is_empty() {
        return Err(GaiaError::InvalidInput("no channels to draw".into()));
    }
    let (h, w) = channels[0].dim();
    let s = upscale.max(1);
    let ranges: Vec<(f64, f64)> = channels
        .iter()
        .map(|c| c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v))))
        .collect();
    let img = RgbImage::from_fn((w * s) as u32, (h * s) as u32, |x, y| {
        let (r, c) = (y as usize / s, x as usize / s);
        let mut px = [0u8; 3];
        for (k, ch) in channels.iter().take(3).enumerate() {
            px[k] = gray(ch[[r, c]], ranges[k].0, ranges[k].1);
        }
        Rgb(px)
    });
    save(&img, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Line plot on a plain canvas with a frame and quarter grid lines. Axis
/// ranges and series colors are returned for the caption.
pub fn line_plot_png(path: &Path, series: &[Series]) -> Result<PlotLegend> {
    let (wid, hei, pad) = (640i64, 400i64, 30i64);
    let mut img = RgbImage::from_pixel(wid as u32, hei as u32, Rgb([255, 255, 255]));
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let map = |x: f64, y: f64| {
        let px = pad + ((x - x0) / (x1 - x0) * (wid - 2 * pad) as f64).round() as i64;
        let py = hei - pad - ((y - y0) / (y1 - y0) * (hei - 2 * pad) as f64).round() as i64;
        (px, py)
    };
    let grid = Rgb([225, 225, 225]);
    for q in 1..4 {
        let gx = pad + q * (wid - 2 * pad) / 4;
        let gy = pad + q * (hei - 2 * pad) / 4;
        line(&mut img, (gx, pad), (gx, hei - pad), grid);
        line(&mut img, (pad, gy), (wid - pad, gy), grid);
    }
    let black = Rgb([0, 0, 0]);
    for (a, b) in [((pad, pad), (pad, hei - pad)), ((pad, hei - pad), (wid - pad, hei - pad))] {
        line(&mut img, a, b, black);
    }
    let mut colors = Vec::new();
    for (i, s) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        colors.push((s.label.clone(), c));
        let finite: Vec<_> = s.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
        for w in finite.windows(2) {
            line(&mut img, map(w[0].0, w[0].1), map(w[1].0, w[1].1), Rgb(c));
        }
        for p in &finite {
            let (px, py) = map(p.0, p.1);
            for d in -1..=1 {
                plot(&mut img, px + d, py, Rgb(c));
                plot(&mut img, px, py + d, Rgb(c));
            }
        }
    }
    save(&img, path)?;
    Ok(PlotLegend { file: path.to_path_buf(), x_range: (x0, x1), y_range: (y0, y1), colors })
}

fn plot(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), c: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1);
    for s in 0..=steps {
        let x = a.0 + (b.0 - a.0) * s / steps;
        let y = a.1 + (b.1 - a.1) * s / steps;
        plot(img, x, y, c);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotLegend {
    pub file: PathBuf,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub colors: Vec<(String, [u8; 3])>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub runs: Vec<RunSummary>,
    pub plots: Vec<PlotLegend>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub steps: Option<usize>,
    pub final_total: Option<f64>,
    pub final_dino: Option<f64>,
    pub final_mae: Option<f64>,
    pub collapse_alarms: Option<usize>,
    pub sweep: Option<SweepReport>,
    pub variance: Option<VarianceProfile>,
    pub coherence: Option<CoherenceCurve>,
    pub eval: Option<serde_json::Value>,
}

fn find(dir: &Path, name: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            find(&p, name, out)?;
        } else if p.file_name().is_some_and(|n| n == name) {
            out.push(p);
        }
    }
    Ok(())
}

fn first(dir: &Path, name: &str) -> Result<Option<PathBuf>> {
    let mut v = Vec::new();
    find(dir, name, &mut v)?;
    v.sort();
    Ok(v.into_iter().next())
}

fn read_json<T: serde::de::DeserializeOwned>(p: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(p)?)?)
}

/// Collects metrics from each run directory and draws loss, sweep and
/// coherence plots into `out`. Returns the summary and the files written.
pub fn build_report(inputs: &[PathBuf], out: &Path) -> Result<(ReportSummary, Vec<PathBuf>)> {
    fs::create_dir_all(out)?;
    let mut summary = ReportSummary::default();
    let mut loss_series = Vec::new();
    let mut sweep_series = Vec::new();
    let mut coh_series = Vec::new();
    for dir in inputs {
        if !dir.is_dir() {
            return Err(GaiaError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{} is not a directory", dir.display()),
            )));
        }
        let tag = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let mut run = RunSummary { dir: dir.clone(), ..Default::default() };
        if let Some(p) = first(dir, "metrics.jsonl")? {
            let recs: Vec<MetricsRecord> = read_metrics(&p)?;
            run.steps = Some(recs.len());
            if let Some(last) = recs.last() {
                run.final_total = Some(last.total);
                run.final_dino = Some(last.dino);
                run.final_mae = Some(last.mae);
            }
            run.collapse_alarms = Some(recs.iter().filter(|r| r.collapse_alarm).count());
            for (name, f) in [
                ("total", (|r: &MetricsRecord| r.total) as fn(&MetricsRecord) -> f64),
                ("dino", |r| r.dino),
                ("mae", |r| r.mae),
            ] {
                loss_series.push(Series {
                    label: format!("{tag}:{name}"),
                    points: recs.iter().map(|r| (r.step as f64, f(r))).collect(),
                });
            }
        }
        if let Some(p) = first(dir, "sweep.json")? {
            let rep: SweepReport = read_json(&p)?;
            let mut fams: Vec<_> = rep.rows.iter().map(|r| r.family).collect();
            fams.dedup();
            for fam in fams {
                sweep_series.push(Series {
                    label: format!("{tag}:{}", fam.as_str()),
                    points: rep.rows.iter().filter(|r| r.family == fam).map(|r| (r.ratio, r.rmse_mean)).collect(),
                });
            }
            run.sweep = Some(rep);
        }
        if let Some(p) = first(dir, "variance_profile.json")? {
            run.variance = Some(read_json(&p)?);
        }
        if let Some(p) = first(dir, "coherence.json")? {
            let c: CoherenceCurve = read_json(&p)?;
            coh_series.push(Series {
                label: tag.clone(),
                points: c.lags.iter().zip(&c.mean_cosine).map(|(&l, &m)| (l as f64, m)).collect(),
            });
            run.coherence = Some(c);
        }
        if let Some(p) = first(dir, "eval.json")? {
            run.eval = Some(read_json(&p)?);
        }
        summary.runs.push(run);
    }
    let mut written = Vec::new();
    for (name, series) in [("loss_curves.png", loss_series), ("rmse_vs_mask_ratio.png", sweep_series), ("coherence.png", coh_series)] {
        if !series.is_empty() {
            let p = out.join(name);
            summary.plots.push(line_plot_png(&p, &series)?);
            written.push(p);
        }
    }
    let sp = out.join("report.json");
    fs::write(&sp, serde_json::to_vec_pretty(&summary)?)?;
    written.push(sp);
    Ok((summary, written))
}
