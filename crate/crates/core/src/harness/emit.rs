//! CSV and SVG output for phase diagrams.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sweep::{CellResult, PhaseDiagram, SeedMetrics};
use crate::error::{Error, Result};
use crate::regimes::Regime;

pub const CSV_HEADER: [&str; 11] = [
    "temperature_knob",
    "temperature_value",
    "load_knob",
    "load_value",
    "seed",
    "test_error",
    "train_error",
    "lmc",
    "cka",
    "regime",
    "diverged",
];

/// Value of the `seed` column on per-cell average rows.
pub const MEAN_SEED: &str = "mean";

/// One parsed CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub temperature_knob: String,
    pub temperature_value: f64,
    pub load_knob: String,
    pub load_value: f64,
    /// A seed number, or [`MEAN_SEED`].
    pub seed: String,
    pub test_error: Option<f64>,
    pub train_error: Option<f64>,
    pub lmc: Option<f64>,
    pub cka: Option<f64>,
    pub regime: Option<Regime>,
    pub diverged: bool,
}

impl CsvRow {
    pub fn is_mean(&self) -> bool {
        self.seed == MEAN_SEED
    }
}

fn rows_of(diagram: &PhaseDiagram) -> Vec<CsvRow> {
    let tk = diagram.temperature_knob.to_string();
    let lk = diagram.load_knob.to_string();
    let row = |cell: &CellResult, seed: String, m: Option<&SeedMetrics>, regime| CsvRow {
        temperature_knob: tk.clone(),
        temperature_value: cell.temperature,
        load_knob: lk.clone(),
        load_value: cell.load,
        seed,
        test_error: m.map(|m| m.test_error),
        train_error: m.map(|m| m.train_error),
        lmc: m.map(|m| m.lmc),
        cka: m.map(|m| m.cka),
        regime,
        diverged: m.is_none(),
    };
    let mut rows = Vec::new();
    for cell in &diagram.cells {
        for s in &cell.seeds {
            rows.push(row(cell, s.seed.to_string(), s.metrics.as_ref(), s.regime));
        }
        if cell.seeds.len() > 1 {
            rows.push(row(cell, MEAN_SEED.into(), cell.mean.as_ref(), cell.regime));
        }
    }
    rows
}

/// Renders the diagram as CSV: one row per (cell, seed), plus a `mean` row
/// per cell when it has more than one seed.
pub fn csv_string(diagram: &PhaseDiagram) -> String {
    let mut out = CSV_HEADER.join(",");
    out.push('\n');
    let num = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for r in rows_of(diagram) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.temperature_knob,
            r.temperature_value,
            r.load_knob,
            r.load_value,
            r.seed,
            num(r.test_error),
            num(r.train_error),
            num(r.lmc),
            num(r.cka),
            r.regime.map_or(String::new(), |g| g.to_string()),
            r.diverged,
        );
    }
    out
}

pub fn emit_csv(diagram: &PhaseDiagram, path: impl AsRef<Path>) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(csv_string(diagram).as_bytes())?;
    Ok(())
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::InvalidArgument(format!("csv header: {e}")))?;
    if headers.iter().ne(CSV_HEADER) {
        return Err(Error::InvalidArgument(format!(
            "unexpected csv header: {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::InvalidArgument(format!("csv row: {e}"))))
        .collect()
}

/// Metric plotted by a heatmap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    TestError,
    NormalizedError,
    Lmc,
    Cka,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::TestError,
        Metric::NormalizedError,
        Metric::Lmc,
        Metric::Cka,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::TestError => "test_error",
            Metric::NormalizedError => "normalized_error",
            Metric::Lmc => "lmc",
            Metric::Cka => "cka",
        }
    }

    fn value(self, diagram: &PhaseDiagram, t: usize, l: usize) -> Option<f64> {
        let m = diagram.cell(t, l).mean;
        match self {
            Metric::TestError => m.map(|m| m.test_error),
            Metric::NormalizedError => diagram.normalized_at(t, l),
            Metric::Lmc => m.map(|m| m.lmc),
            Metric::Cka => m.map(|m| m.cka),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

// Dark blue at the minimum, pale yellow at the maximum.
fn color(frac: f64) -> String {
    let lo = [49.0, 54.0, 149.0];
    let hi = [255.0, 255.0, 191.0];
    let c: Vec<u8> = lo
        .iter()
        .zip(hi)
        .map(|(a, b)| (a + (b - a) * frac.clamp(0.0, 1.0)).round() as u8)
        .collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn fmt_value(v: f64) -> String {
    format!("{v:.4}")
}

const CELL: f64 = 60.0;
const LEFT: f64 = 90.0;
const TOP: f64 = 40.0;

/// Renders one metric as an SVG heatmap. Rows are temperatures, coldest at
/// the bottom; columns are loads. Diverged cells are drawn hatched.
pub fn heatmap_svg(diagram: &PhaseDiagram, metric: Metric) -> String {
    let (rows, cols) = (diagram.rows(), diagram.cols());
    let values: Vec<Option<f64>> = (0..rows * cols)
        .map(|i| metric.value(diagram, i / cols, i % cols))
        .collect();
    let finite = values.iter().flatten().copied().filter(|v| v.is_finite());
    let min = finite.clone().fold(f64::INFINITY, f64::min);
    let max = finite.fold(f64::NEG_INFINITY, f64::max);
    let span = if max > min { max - min } else { 1.0 };

    let width = LEFT + CELL * cols as f64 + 40.0;
    let grid_bottom = TOP + CELL * rows as f64;
    let height = grid_bottom + 110.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        metric
    );
    let _ = writeln!(
        s,
        r##"<defs><pattern id="hole" width="6" height="6" patternUnits="userSpaceOnUse"><path d="M0,6 L6,0" stroke="#888"/></pattern></defs>"##
    );
    for t in 0..rows {
        let y = grid_bottom - CELL * (t + 1) as f64;
        for l in 0..cols {
            let x = LEFT + CELL * l as f64;
            let (fill, label) = match values[t * cols + l] {
                Some(v) if v.is_finite() => (color((v - min) / span), fmt_value(v)),
                _ => ("url(#hole)".to_string(), "diverged".to_string()),
            };
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{fill}" stroke="white"><title>{label}</title></rect>"#
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            y + CELL / 2.0 + 4.0,
            diagram.temperature_values[t]
        );
    }
    for l in 0..cols {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            LEFT + CELL * (l as f64 + 0.5),
            grid_bottom + 16.0,
            diagram.load_values[l]
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">load: {}</text>"#,
        LEFT + CELL * cols as f64 / 2.0,
        grid_bottom + 34.0,
        diagram.load_knob
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{y}" text-anchor="middle" transform="rotate(-90 14 {y})">temperature: {}</text>"#,
        diagram.temperature_knob,
        y = TOP + CELL * rows as f64 / 2.0
    );

    // Legend: a stepped gradient drawn with paths so rect count stays equal
    // to the cell count.
    let (lx, ly, lw, lh) = (LEFT, grid_bottom + 50.0, CELL * cols.max(2) as f64, 14.0);
    let steps = 20;
    for i in 0..steps {
        let x0 = lx + lw * i as f64 / steps as f64;
        let x1 = lx + lw * (i + 1) as f64 / steps as f64;
        let _ = writeln!(
            s,
            r#"<path d="M{x0},{ly} H{x1} V{} H{x0} Z" fill="{}"/>"#,
            ly + lh,
            color((i as f64 + 0.5) / steps as f64)
        );
    }
    let (lo, hi) = if min.is_finite() {
        (fmt_value(min), fmt_value(max))
    } else {
        ("n/a".into(), "n/a".into())
    };
    let _ = writeln!(
        s,
        r#"<text x="{lx}" y="{}">min {lo}</text>"#,
        ly + lh + 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">max {hi}</text>"#,
        lx + lw,
        ly + lh + 16.0
    );
    s.push_str("</svg>\n");
    s
}

pub fn emit_heatmap(diagram: &PhaseDiagram, metric: Metric, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, heatmap_svg(diagram, metric))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::LoadKnob;
    use crate::harness::sweep::{normalize_columns, SeedResult};
    use crate::optimize::TemperatureKnob;

    pub(crate) fn fixture(seeds: usize) -> PhaseDiagram {
        let temps = vec![10.0, 80.0];
        let loads = vec![0.03, 0.5];
        let mut cells = Vec::new();
        for (ti, &t) in temps.iter().enumerate() {
            for (li, &l) in loads.iter().enumerate() {
                let k = (ti * 2 + li) as f64;
                let seeds: Vec<SeedResult> = (0..seeds as u64)
                    .map(|s| SeedResult {
                        seed: s,
                        metrics: (k != 3.0 || s != 0).then(|| SeedMetrics {
                            test_error: 0.1 + 0.01 * k + 0.001 * s as f64,
                            train_error: 0.05,
                            lmc: -0.1 * k,
                            cka: 0.9 - 0.1 / 3.0 * k,
                            dense_test_error: 0.02,
                        }),
                        regime: Some(Regime::IIA),
                    })
                    .collect();
                let mean = seeds.iter().find_map(|s| s.metrics);
                cells.push(CellResult {
                    temperature: t,
                    load: l,
                    seeds,
                    mean,
                    regime: Some(Regime::I),
                    seconds: 0.0,
                });
            }
        }
        normalize_columns(PhaseDiagram {
            temperature_knob: TemperatureKnob::Epochs,
            temperature_values: temps,
            load_knob: LoadKnob::Density,
            load_values: loads,
            cells,
            normalized: vec![],
            column_valid: vec![],
        })
    }

    #[test]
    fn single_seed_grid_has_one_row_per_cell() {
        let text = csv_string(&fixture(1));
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("temperature_knob,temperature_value,"));
        assert!(!text.contains('\r'));
    }

    #[test]
    fn csv_round_trips_values() {
        let d = fixture(3);
        let rows = parse_csv(&csv_string(&d)).unwrap();
        assert_eq!(rows.len(), 4 * 4);
        for (i, cell) in d.cells.iter().enumerate() {
            let chunk = &rows[i * 4..i * 4 + 4];
            for (r, s) in chunk.iter().zip(&cell.seeds) {
                assert_eq!(r.seed, s.seed.to_string());
                assert_eq!(r.test_error, s.metrics.map(|m| m.test_error));
                assert_eq!(r.lmc, s.metrics.map(|m| m.lmc));
                assert_eq!(r.cka, s.metrics.map(|m| m.cka));
                assert_eq!(r.diverged, s.metrics.is_none());
                assert_eq!(r.regime, s.regime);
            }
            assert!(chunk[3].is_mean());
            assert_eq!(chunk[3].test_error, cell.test_error());
            assert_eq!(chunk[3].temperature_value, cell.temperature);
            assert_eq!(chunk[3].load_value, cell.load);
        }
    }

    #[test]
    fn heatmap_has_one_rect_per_cell() {
        let d = fixture(1);
        for metric in Metric::ALL {
            let svg = heatmap_svg(&d, metric);
            assert_eq!(svg.matches("<rect").count(), 4, "{metric}");
            assert!(svg.contains("min "));
            assert!(svg.contains("max "));
            assert!(svg.contains(">0.03<") && svg.contains(">80<"));
        }
    }
}
