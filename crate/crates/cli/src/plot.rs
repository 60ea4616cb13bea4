//! Line charts (SVG or PNG) for loss logs, step tables and diagnostics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use anyhow::{anyhow, bail, Context, Result};
use plotters::coord::Shift;
use plotters::prelude::*;

use crate::args::PlotArgs;

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

const FONT_CANDIDATES: [&str; 4] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
];

/// Registers a TrueType font for chart text, from `SFTOK_FONT` or a few
/// common system locations.
fn ensure_font() -> Result<()> {
    static FONT: OnceLock<std::result::Result<(), String>> = OnceLock::new();
    FONT.get_or_init(|| {
        let env = std::env::var("SFTOK_FONT").ok().map(PathBuf::from);
        let path = env
            .into_iter()
            .chain(FONT_CANDIDATES.iter().map(PathBuf::from))
            .find(|p| p.is_file())
            .ok_or("no TrueType font found for plot text; set SFTOK_FONT to a .ttf file")?;
        let bytes = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
        plotters::style::register_font("sans-serif", FontStyle::Normal, bytes)
            .map_err(|_| format!("{} is not a usable font", path.display()))
    })
    .clone()
    .map_err(|e| anyhow!(e))
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9 + lo.abs() * 1e-3);
    (lo - pad, hi + pad)
}

fn draw_panel<DB: DrawingBackend>(area: &DrawingArea<DB, Shift>, panel: &Panel) -> Result<()>
where
    DB::ErrorType: 'static,
{
    let pts = || panel.series.iter().flat_map(|s| s.points.iter());
    let (x0, x1) = bounds(pts().map(|p| p.0));
    let (y0, y1) = bounds(pts().map(|p| p.1));
    let mut chart = ChartBuilder::on(area)
        .caption(&panel.title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| anyhow!("{e}"))?;
    chart
        .configure_mesh()
        .x_desc(&panel.x_label)
        .y_desc(&panel.y_label)
        .light_line_style(WHITE.mix(0.0))
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    for (i, s) in panel.series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(|e| anyhow!("{e}"))?
            .label(&s.name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        if s.points.len() <= 32 {
            chart
                .draw_series(s.points.iter().map(|&p| Circle::new(p, 3, color.filled())))
                .map_err(|e| anyhow!("{e}"))?;
        }
    }
    if panel.series.len() > 1 || panel.series.first().is_some_and(|s| !s.name.is_empty()) {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK)
            .draw()
            .map_err(|e| anyhow!("{e}"))?;
    }
    Ok(())
}

fn draw_all<DB: DrawingBackend>(root: DrawingArea<DB, Shift>, panels: &[Panel]) -> Result<()>
where
    DB::ErrorType: 'static,
{
    root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
    let areas = root.split_evenly((1, panels.len()));
    for (area, panel) in areas.iter().zip(panels) {
        draw_panel(area, panel)?;
    }
    root.present().map_err(|e| anyhow!("{e}"))?;
    Ok(())
}

/// Draws `panels` side by side; the format follows the file extension.
pub fn draw(path: &Path, panels: &[Panel]) -> Result<()> {
    if panels.is_empty() {
        bail!("nothing to plot");
    }
    ensure_font()?;
    let size = (560 * panels.len() as u32, 420);
    match path.extension().and_then(|e| e.to_str()) {
        Some("svg") => draw_all(SVGBackend::new(path, size).into_drawing_area(), panels),
        Some("png") => draw_all(BitMapBackend::new(path, size).into_drawing_area(), panels),
        _ => bail!("plot output {} must end in .svg or .png", path.display()),
    }
    .with_context(|| format!("drawing {}", path.display()))
}

// ---------------------------------------------------------------------------
// CSV reports

type Record = BTreeMap<String, String>;

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Record>)> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(header.iter().cloned().zip(rec.iter().map(String::from)).collect());
    }
    Ok((header, rows))
}

fn num(r: &Record, key: &str) -> Result<f64> {
    let v = r.get(key).ok_or_else(|| anyhow!("missing column {key}"))?;
    v.parse()
        .with_context(|| format!("column {key}: {v:?} is not a number"))
}

/// Records sharing a group must come from one config unless forced.
fn check_hashes(rows: &[Record], group: impl Fn(&Record) -> String, force: bool) -> Result<()> {
    let mut seen: BTreeMap<String, String> = BTreeMap::new();
    for r in rows {
        let Some(h) = r.get("config_hash") else { continue };
        let g = group(r);
        match seen.get(&g) {
            Some(prev) if prev != h && !force => bail!(
                "records of {g} come from different configs ({}… vs {}…); pass --force to plot them together",
                &prev[..prev.len().min(12)],
                &h[..h.len().min(12)]
            ),
            Some(_) => {}
            None => {
                seen.insert(g, h.clone());
            }
        }
    }
    Ok(())
}

fn loss_panels(rows: &[Record], terms: &[String]) -> Result<Vec<Panel>> {
    let mut by_stage: BTreeMap<String, BTreeMap<String, Vec<(f64, f64)>>> = BTreeMap::new();
    for r in rows {
        let term = r["term"].clone();
        let skip = if terms.is_empty() {
            term == "lr" || term == "grad_norm"
        } else {
            !terms.contains(&term)
        };
        if skip {
            continue;
        }
        by_stage
            .entry(r["stage"].clone())
            .or_default()
            .entry(term)
            .or_default()
            .push((num(r, "step")?, num(r, "value")?));
    }
    Ok(by_stage
        .into_iter()
        .map(|(stage, series)| Panel {
            title: format!("stage {stage}"),
            x_label: "step".into(),
            y_label: "loss".into(),
            series: series
                .into_iter()
                .map(|(name, points)| Series { name, points })
                .collect(),
        })
        .collect())
}

fn step_panels(rows: &[Record], step_key: &str, group: impl Fn(&Record) -> String) -> Result<Vec<Panel>> {
    let mut ce: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut fd: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        let t = num(r, step_key)?;
        ce.entry(group(r)).or_default().push((t, num(r, "masked_ce")?));
        fd.entry(group(r)).or_default().push((t, num(r, "frechet")?));
    }
    let panel = |title: &str, y: &str, m: BTreeMap<String, Vec<(f64, f64)>>| Panel {
        title: title.into(),
        x_label: "decoding steps T".into(),
        y_label: y.into(),
        series: m.into_iter().map(|(name, points)| Series { name, points }).collect(),
    };
    Ok(vec![
        panel("held-out masked cross-entropy", "nats", ce),
        panel("Fréchet proxy", "distance", fd),
    ])
}

fn diagnose_panels(rows: &[Record]) -> Result<Vec<Panel>> {
    let col = |k: &str| -> Result<Series> {
        Ok(Series {
            name: k.into(),
            points: rows
                .iter()
                .map(|r| Ok((num(r, "step")?, num(r, k)?)))
                .collect::<Result<_>>()?,
        })
    };
    Ok(vec![
        Panel {
            title: "divergence per step".into(),
            x_label: "step".into(),
            y_label: "nats".into(),
            series: vec![col("kl_to_final")?, col("nll_to_truth")?],
        },
        Panel {
            title: "top-1 agreement".into(),
            x_label: "step".into(),
            y_label: "fraction".into(),
            series: vec![col("top1_final")?, col("top1_truth")?],
        },
    ])
}

pub fn plot_csv(input: &Path, out: &Path, terms: &[String], force: bool) -> Result<()> {
    let (header, rows) = read_csv(input)?;
    let has = |k: &str| header.iter().any(|h| h == k);
    let panels = if has("term") && has("stage") {
        check_hashes(&rows, |r| format!("stage {}", r["stage"]), force)?;
        loss_panels(&rows, terms)?
    } else if has("eval_steps") {
        check_hashes(&rows, |r| format!("seed {}", r["seed"]), force)?;
        step_panels(&rows, "eval_steps", |r| format!("{} (seed {})", r["name"], r["seed"]))?
    } else if has("steps") && has("masked_ce") {
        check_hashes(&rows, |_| "the table".into(), force)?;
        step_panels(&rows, "steps", |_| String::new())?
    } else if has("kl_to_final") {
        check_hashes(&rows, |_| "the table".into(), force)?;
        diagnose_panels(&rows)?
    } else {
        bail!("{} is not a recognised report (header {header:?})", input.display());
    };
    draw(out, &panels)
}

pub fn run(a: PlotArgs) -> Result<()> {
    plot_csv(&a.input, &a.out, &a.terms, a.force)?;
    log::info!("wrote {}", a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn mixed_hashes_need_force() {
        let dir = tempfile::tempdir().unwrap();
        let csv = write(
            dir.path(),
            "losses.csv",
            "step,stage,term,value,config_hash\n0,1,total,2.0,aaa\n1,1,total,1.5,bbb\n0,2,total,1.0,ccc\n",
        );
        let out = dir.path().join("l.svg");
        let err = plot_csv(&csv, &out, &[], false).unwrap_err();
        assert!(err.to_string().contains("--force"), "{err}");
        plot_csv(&csv, &out, &[], true).unwrap();
        assert!(std::fs::read_to_string(&out).unwrap().starts_with("<svg"));
    }

    #[test]
    fn stage_boundaries_may_differ() {
        let dir = tempfile::tempdir().unwrap();
        let csv = write(
            dir.path(),
            "losses.csv",
            "step,stage,term,value,config_hash\n0,1,total,2.0,aaa\n0,2,total,1.0,ccc\n1,2,total,0.9,ccc\n",
        );
        let out = dir.path().join("l.png");
        plot_csv(&csv, &out, &["total".into()], false).unwrap();
        assert!(std::fs::metadata(&out).unwrap().len() > 0);
    }

    #[test]
    fn unknown_reports_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let csv = write(dir.path(), "x.csv", "a,b\n1,2\n");
        assert!(plot_csv(&csv, &dir.path().join("x.svg"), &[], false).is_err());
        let csv = write(
            dir.path(),
            "r.csv",
            "steps,masked_ce,token_accuracy,frechet,config_hash\n1,2.0,0.3,40,h\n",
        );
        assert!(plot_csv(&csv, &dir.path().join("x.pdf"), &[], false).is_err());
    }
}
