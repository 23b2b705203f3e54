//! CSV and SVG report emission for robustness curves.
//!
//! Output is a pure function of its inputs: identical curves and
//! metadata produce byte-identical files. Files are written atomically
//! (temp file, then rename).

use super::RobustnessCurve;
use crate::error::{Error, Result};
use std::io::Write;
use std::path::{Path, PathBuf};

const SVG_WIDTH: f64 = 640.0;
const SVG_HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 160.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 50.0;
const PALETTE: &[&str] = &[
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Free-form `#` metadata lines placed before the CSV header.
#[derive(Debug, Clone, Default)]
pub struct ReportMeta {
    pub lines: Vec<String>,
}

impl ReportMeta {
    pub fn push(&mut self, key: &str, value: impl std::fmt::Display) {
        self.lines.push(format!("{key}={value}"));
    }
}

fn check_curves(curves: &[RobustnessCurve]) -> Result<()> {
    let first = curves
        .first()
        .ok_or_else(|| Error::InvalidArg("no curves to report".into()))?;
    for c in curves {
        c.validate()?;
        if c.attack_grid != first.attack_grid {
            return Err(Error::InvalidArg(format!(
                "curve '{}' uses a different attack grid",
                c.model_id
            )));
        }
    }
    Ok(())
}

pub fn curves_to_csv(curves: &[RobustnessCurve], meta: &ReportMeta) -> Result<String> {
    check_curves(curves)?;
    let mut out = String::new();
    for line in &meta.lines {
        out.push_str(&format!("# {line}\n"));
    }
    for c in curves {
        out.push_str(&format!(
            "# curve={} average={:.6} config={}\n",
            c.model_id, c.average, c.config_digest
        ));
    }
    out.push_str("epsilon");
    for c in curves {
        out.push(',');
        out.push_str(&c.model_id);
    }
    out.push('\n');
    for (i, &eps) in curves[0].attack_grid.iter().enumerate() {
        out.push_str(&format!("{eps}"));
        for c in curves {
            out.push_str(&format!(",{:.6}", c.accuracy[i]));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Parse the CSV form back into curves plus the raw metadata lines.
pub fn curves_from_csv(text: &str) -> Result<(Vec<RobustnessCurve>, Vec<String>)> {
    let mut meta = Vec::new();
    let mut header: Option<Vec<String>> = None;
    let mut grid = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') {
            meta.push(line.trim_start_matches('#').trim().to_string());
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        match &header {
            None => {
                header = Some(cells.iter().skip(1).map(|s| s.to_string()).collect());
                columns = vec![Vec::new(); cells.len() - 1];
            }
            Some(names) => {
                if cells.len() != names.len() + 1 {
                    return Err(Error::Config(format!("ragged CSV row: {line}")));
                }
                grid.push(
                    cells[0]
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad epsilon: {}", cells[0])))?,
                );
                for (col, cell) in columns.iter_mut().zip(&cells[1..]) {
                    col.push(
                        cell.parse::<f64>()
                            .map_err(|_| Error::Config(format!("bad accuracy: {cell}")))?,
                    );
                }
            }
        }
    }
    let names = header.ok_or_else(|| Error::Config("CSV has no header row".into()))?;
    let digest_of = |name: &str| {
        meta.iter()
            .filter_map(|l| {
                let rest = l.strip_prefix("curve=")?;
                let (id, tail) = rest.split_once(' ')?;
                (id == name).then(|| tail.rsplit("config=").next().unwrap_or("").to_string())
            })
            .next()
            .unwrap_or_default()
    };
    let curves = names
        .iter()
        .zip(columns)
        .map(|(name, accuracy)| {
            let average = accuracy.iter().sum::<f64>() / accuracy.len() as f64;
            RobustnessCurve {
                attack_grid: grid.clone(),
                accuracy,
                average,
                model_id: name.clone(),
                config_digest: digest_of(name),
            }
        })
        .collect();
    // curve= lines are regenerated on the next emission; returning them
    // as free-form meta would duplicate them
    meta.retain(|l| !l.starts_with("curve="));
    Ok((curves, meta))
}

pub fn curves_to_svg(curves: &[RobustnessCurve]) -> Result<String> {
    check_curves(curves)?;
    let grid = &curves[0].attack_grid;
    let x_max = *grid.last().unwrap();
    let x_span = if x_max > 0.0 { x_max } else { 1.0 };
    let plot_w = SVG_WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = SVG_HEIGHT - MARGIN_T - MARGIN_B;
    let x_of = |eps: f64| MARGIN_L + eps / x_span * plot_w;
    let y_of = |acc: f64| MARGIN_T + (1.0 - acc) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_WIDTH}\" height=\"{SVG_HEIGHT}\" viewBox=\"0 0 {SVG_WIDTH} {SVG_HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    // axes
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        MARGIN_T + plot_h,
        MARGIN_L + plot_w,
        MARGIN_T + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        MARGIN_T + plot_h
    ));
    // tick labels
    for &eps in grid {
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"middle\">{eps}</text>\n",
            x_of(eps),
            MARGIN_T + plot_h + 18.0
        ));
    }
    for tick in 0..=5 {
        let acc = tick as f64 / 5.0;
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"end\">{acc:.1}</text>\n",
            MARGIN_L - 6.0,
            y_of(acc) + 4.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\">attack strength</text>\n",
        MARGIN_L + plot_w / 2.0,
        SVG_HEIGHT - 10.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">accuracy</text>\n",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0
    ));
    // curves + legend
    for (k, c) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = c
            .attack_grid
            .iter()
            .zip(&c.accuracy)
            .map(|(&eps, &acc)| format!("{:.2},{:.2}", x_of(eps), y_of(acc)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        let ly = MARGIN_T + 16.0 * (k as f64 + 1.0);
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            MARGIN_L + plot_w + 10.0,
            ly,
            MARGIN_L + plot_w + 34.0,
            ly
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\">{}</text>\n",
            MARGIN_L + plot_w + 40.0,
            ly + 4.0,
            c.model_id
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "report".into())
    ));
    std::fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(contents.as_bytes()))
        .map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Write `robustness.csv` and `robustness.svg` into `out_dir`; returns
/// the two paths.
pub fn emit_report(
    curves: &[RobustnessCurve],
    out_dir: &Path,
    meta: &ReportMeta,
) -> Result<(PathBuf, PathBuf)> {
    let csv = curves_to_csv(curves, meta)?;
    let svg = curves_to_svg(curves)?;
    let csv_path = out_dir.join("robustness.csv");
    let svg_path = out_dir.join("robustness.svg");
    write_atomic(&csv_path, &csv)?;
    write_atomic(&svg_path, &svg)?;
    Ok((csv_path, svg_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(id: &str, accs: &[f64]) -> RobustnessCurve {
        RobustnessCurve {
            attack_grid: (0..accs.len()).map(|i| i as f64 * 0.1).collect(),
            accuracy: accs.to_vec(),
            average: accs.iter().sum::<f64>() / accs.len() as f64,
            model_id: id.to_string(),
            config_digest: "cafef00d".into(),
        }
    }

    #[test]
    fn csv_has_one_row_per_grid_point() {
        let c = curve("plain", &[0.9, 0.5]);
        let csv = curves_to_csv(&[c], &ReportMeta::default()).unwrap();
        let data_rows = csv
            .lines()
            .filter(|l| !l.starts_with('#') && !l.starts_with("epsilon"))
            .count();
        assert_eq!(data_rows, 2);
    }

    #[test]
    fn identical_inputs_are_byte_identical() {
        let curves = vec![curve("plain", &[0.9, 0.5, 0.2]), curve("mixed", &[0.9, 0.8, 0.7])];
        let mut meta = ReportMeta::default();
        meta.push("seed", 42);
        let dir = tempfile::tempdir().unwrap();
        let (csv1, svg1) = emit_report(&curves, dir.path(), &meta).unwrap();
        let a_csv = std::fs::read(&csv1).unwrap();
        let a_svg = std::fs::read(&svg1).unwrap();
        let (csv2, svg2) = emit_report(&curves, dir.path(), &meta).unwrap();
        assert_eq!(a_csv, std::fs::read(&csv2).unwrap());
        assert_eq!(a_svg, std::fs::read(&svg2).unwrap());
    }

    #[test]
    fn svg_legend_lists_every_series() {
        let curves = vec![
            curve("original", &[0.9, 0.5]),
            curve("single", &[0.9, 0.7]),
            curve("mixed", &[0.9, 0.8]),
            curve("parallel", &[0.95, 0.85]),
        ];
        let svg = curves_to_svg(&curves).unwrap();
        for name in ["original", "single", "mixed", "parallel"] {
            assert!(svg.contains(&format!(">{name}</text>")), "missing {name}");
        }
        assert_eq!(svg.matches("<polyline").count(), 4);
    }

    #[test]
    fn mismatched_grids_rejected() {
        let a = curve("a", &[0.9, 0.5]);
        let b = curve("b", &[0.9, 0.5, 0.1]);
        assert!(curves_to_csv(&[a, b], &ReportMeta::default()).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let curves = vec![curve("plain", &[0.9, 0.5, 0.25]), curve("mixed", &[0.8, 0.75, 0.7])];
        let mut meta = ReportMeta::default();
        meta.push("seed", 7);
        let csv = curves_to_csv(&curves, &meta).unwrap();
        let (parsed, meta_lines) = curves_from_csv(&csv).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].model_id, "plain");
        assert_eq!(parsed[0].attack_grid, curves[0].attack_grid);
        for (p, c) in parsed.iter().zip(&curves) {
            for (x, y) in p.accuracy.iter().zip(&c.accuracy) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        assert!(meta_lines.iter().any(|l| l.contains("seed=7")));
    }
}
