use std::path::Path;
use std::process::ExitCode;

use saeda::eval::EvalReport;
use saeda::GroundTruth;

use super::read_json;
use crate::draw::{class_color, heat_color, Canvas, BLACK, GREY, WHITE};
use crate::error::CliError;
use crate::PlotArgs;

const CONFUSION_CORNER: &str = "true\\predicted";

/// What an input file turned out to contain.
#[derive(Debug, PartialEq)]
pub enum Figure {
    Confusion {
        counts: Vec<Vec<usize>>,
        names: Option<Vec<String>>,
    },
    Scatter {
        points: Vec<[f64; 2]>,
        labels: Vec<Option<usize>>,
    },
}

pub fn run(args: &PlotArgs) -> Result<ExitCode, CliError> {
    let figure = read_figure(&args.input)?;
    let truth_names = match &args.truth {
        Some(p) => Some(read_json::<GroundTruth>(p)?.class_names),
        None => None,
    };
    let canvas = match figure {
        Figure::Confusion { counts, names } => heatmap(&counts, truth_names.or(names).as_deref()),
        Figure::Scatter { points, labels } => scatter(&points, &labels, truth_names.as_deref()),
    };
    canvas
        .img
        .save(&args.output)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", args.output.display())))?;
    println!("wrote {}", args.output.display());
    Ok(ExitCode::SUCCESS)
}

fn schema(path: &Path, message: impl Into<String>) -> CliError {
    CliError::Schema {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn read_figure(path: &Path) -> Result<Figure, CliError> {
    if path.extension().is_some_and(|e| e == "json") {
        let report: EvalReport = read_json(path)?;
        let counts = report
            .confusion
            .ok_or_else(|| schema(path, "report has no confusion matrix to plot"))?;
        return check_confusion(path, counts, report.class_names);
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| schema(path, e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| schema(path, e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    let rows = reader
        .records()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| schema(path, e.to_string()))?;
    if rows.is_empty() {
        return Err(schema(path, "no data rows"));
    }
    let bad = |line: usize, what: &str| schema(path, format!("row {}: {what}", line + 2));

    if header == ["x", "y", "label"] {
        let mut points = Vec::with_capacity(rows.len());
        let mut labels = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            let num = |j: usize| r[j].trim().parse::<f64>().map_err(|_| bad(i, "coordinates must be numbers"));
            points.push([num(0)?, num(1)?]);
            labels.push(match r[2].trim() {
                "" => None,
                s => Some(s.parse().map_err(|_| bad(i, "label must be a class index"))?),
            });
        }
        return Ok(Figure::Scatter { points, labels });
    }
    if header.first().map(String::as_str) == Some(CONFUSION_CORNER) {
        let names: Vec<String> = header[1..].to_vec();
        let mut counts = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            let row = r
                .iter()
                .skip(1)
                .map(|v| v.trim().parse::<usize>().map_err(|_| bad(i, "counts must be non-negative integers")))
                .collect::<Result<Vec<_>, _>>()?;
            counts.push(row);
        }
        return check_confusion(path, counts, Some(names));
    }
    Err(schema(
        path,
        format!("unrecognised header {header:?}; expected `x,y,label` or a `{CONFUSION_CORNER}` confusion matrix"),
    ))
}

fn check_confusion(path: &Path, counts: Vec<Vec<usize>>, names: Option<Vec<String>>) -> Result<Figure, CliError> {
    let n = counts.len();
    if n == 0 || counts.iter().any(|r| r.len() != n) {
        return Err(schema(path, "confusion matrix must be square and non-empty"));
    }
    Ok(Figure::Confusion { counts, names })
}

const MIN_CELL: i64 = 56;

pub fn heatmap(counts: &[Vec<usize>], names: Option<&[String]>) -> Canvas {
    let n = counts.len() as i64;
    let name = |k: usize| names.and_then(|v| v.get(k).cloned()).unwrap_or_else(|| format!("class {k}"));
    let longest = (0..counts.len()).map(|k| Canvas::text_width(&name(k), 1)).max().unwrap_or(0);
    let cell = MIN_CELL.max(longest + 10);
    let (left, top) = (longest + 40, 64);
    let mut c = Canvas::new((left + n * cell + 24) as u32, (top + n * cell + 40) as u32);
    c.text(8, 8, "rows: true class, columns: predicted", 1, BLACK);

    let max = counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    for (i, row) in counts.iter().enumerate() {
        let y = top + i as i64 * cell;
        c.text(left - 8 - Canvas::text_width(&name(i), 1), y + cell / 2 - 4, &name(i), 1, BLACK);
        for (j, &v) in row.iter().enumerate() {
            let x = left + j as i64 * cell;
            let t = v as f64 / max;
            c.fill_rect(x, y, cell, cell, heat_color(t));
            c.stroke_rect(x, y, cell, cell, GREY);
            c.text_centered(x + cell / 2, y + cell / 2, &v.to_string(), 1, if t > 0.5 { WHITE } else { BLACK });
        }
    }
    for j in 0..counts.len() {
        c.text_centered(left + j as i64 * cell + cell / 2, top - 14, &name(j), 1, BLACK);
    }
    c
}

pub fn scatter(points: &[[f64; 2]], labels: &[Option<usize>], names: Option<&[String]>) -> Canvas {
    let (plot, margin, legend_w) = (480i64, 32i64, 160i64);
    let mut c = Canvas::new((plot + 2 * margin + legend_w) as u32, (plot + 2 * margin) as u32);
    c.stroke_rect(margin, margin, plot, plot, BLACK);

    let bounds = |axis: usize| {
        let (lo, hi) = points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[axis]), hi.max(p[axis])));
        let pad = ((hi - lo) * 0.05).max(1e-9);
        (lo - pad, hi + pad)
    };
    let ((x0, x1), (y0, y1)) = (bounds(0), bounds(1));
    for (p, l) in points.iter().zip(labels) {
        let px = margin + ((p[0] - x0) / (x1 - x0) * plot as f64) as i64;
        let py = margin + plot - ((p[1] - y0) / (y1 - y0) * plot as f64) as i64;
        c.dot(px, py, 2, l.map_or(GREY, class_color));
    }

    let mut classes: Vec<usize> = labels.iter().flatten().copied().collect();
    classes.sort_unstable();
    classes.dedup();
    let lx = margin * 2 + plot;
    for (row, &k) in classes.iter().enumerate() {
        let y = margin + 8 + row as i64 * 18;
        c.fill_rect(lx, y, 10, 10, class_color(k));
        let name = names.and_then(|v| v.get(k).cloned()).unwrap_or_else(|| format!("class {k}"));
        c.text(lx + 16, y + 1, &name, 1, BLACK);
    }
    c
}
