//! CSV, manifest and SVG outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use crate::checkpoint::{self, ContainerKind};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::harness::{EvalCell, EvalMatrix, GridResult, LambdaSurface, RunOutcome};

pub const EVAL_CSV: &str = "eval.csv";
pub const SURFACE_CSV: &str = "surface.csv";
pub const BEST_LAMBDA_CSV: &str = "best_lambda.csv";
pub const ACCURACY_SVG: &str = "accuracy.svg";
pub const SURFACE_SVG: &str = "surface.svg";
pub const MANIFEST: &str = "manifest.toml";
pub const PARAMS_FILE: &str = "params.wvac";
pub const IMPORTANCE_FILE: &str = "importance.wvac";

const EVAL_HEADER: [&str; 4] = ["after_task", "eval_task", "accuracy", "n_samples"];
const SURFACE_HEADER: [&str; 3] = ["lambda", "tasks_learned", "avg_accuracy"];

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn eval_csv(matrix: &EvalMatrix) -> String {
    let mut out = EVAL_HEADER.join(",");
    out.push('\n');
    for (t, j, c) in matrix.cells() {
        let _ = writeln!(out, "{t},{j},{},{}", c.accuracy, c.n_samples);
    }
    out
}

pub fn write_eval_csv(matrix: &EvalMatrix, path: &Path) -> Result<()> {
    write_file(path, eval_csv(matrix))
}

fn reader(path: &Path, header: &[&str]) -> Result<csv::Reader<fs::File>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let found: Vec<String> = r.headers().map_err(csv_err(path))?.iter().map(str::to_owned).collect();
    if found != header {
        return Err(Error::Config(format!(
            "{}: expected header {}, found {}",
            path.display(),
            header.join(","),
            found.join(",")
        )));
    }
    Ok(r)
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, name: &str, raw: Option<&str>) -> Result<T> {
    raw.and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::Config(format!("{}: record {line}: bad {name}", path.display())))
}

pub fn read_eval_csv(path: &Path) -> Result<EvalMatrix> {
    let mut rows: Vec<Vec<EvalCell>> = Vec::new();
    for (line, record) in reader(path, &EVAL_HEADER)?.records().enumerate() {
        let record = record.map_err(csv_err(path))?;
        let t: usize = field(path, line, "after_task", record.get(0))?;
        let j: usize = field(path, line, "eval_task", record.get(1))?;
        let cell = EvalCell {
            accuracy: field(path, line, "accuracy", record.get(2))?,
            n_samples: field(path, line, "n_samples", record.get(3))?,
        };
        if t == rows.len() {
            rows.push(Vec::new());
        }
        if t + 1 != rows.len() || j != rows[t].len() {
            return Err(Error::Config(format!(
                "{}: record {line}: cell ({t}, {j}) out of lower-triangular order",
                path.display()
            )));
        }
        rows[t].push(cell);
    }
    EvalMatrix::from_rows(rows)
}

pub fn surface_csv(surface: &LambdaSurface) -> String {
    let mut out = SURFACE_HEADER.join(",");
    out.push('\n');
    for (i, lambda) in surface.lambdas.iter().enumerate() {
        for t in 0..surface.num_tasks() {
            match surface.get(i, t) {
                Some(v) => writeln!(out, "{lambda},{},{v}", t + 1),
                None => writeln!(out, "{lambda},{},", t + 1),
            }
            .expect("writing to a String");
        }
    }
    out
}

pub fn write_surface_csv(surface: &LambdaSurface, path: &Path) -> Result<()> {
    write_file(path, surface_csv(surface))
}

/// Parses a surface CSV; empty `avg_accuracy` fields become gaps.
pub fn read_surface_csv(path: &Path) -> Result<LambdaSurface> {
    let mut lambdas: Vec<f64> = Vec::new();
    let mut cells: Vec<Vec<Option<f64>>> = Vec::new();
    for (line, record) in reader(path, &SURFACE_HEADER)?.records().enumerate() {
        let record = record.map_err(csv_err(path))?;
        let lambda: f64 = field(path, line, "lambda", record.get(0))?;
        let tasks: usize = field(path, line, "tasks_learned", record.get(1))?;
        let value = match record.get(2).map(str::trim) {
            None | Some("") => None,
            raw => Some(field(path, line, "avg_accuracy", raw)?),
        };
        if lambdas.last() != Some(&lambda) {
            lambdas.push(lambda);
            cells.push(Vec::new());
        }
        let row = cells.last_mut().expect("pushed above");
        if tasks != row.len() + 1 {
            return Err(Error::Config(format!(
                "{}: record {line}: tasks_learned {tasks} out of order",
                path.display()
            )));
        }
        row.push(value);
    }
    if lambdas.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config(format!("{}: λ values not strictly increasing", path.display())));
    }
    let errors = vec![None; lambdas.len()];
    Ok(LambdaSurface { lambdas, cells, errors })
}

pub fn best_lambda_csv(surface: &LambdaSurface) -> String {
    let mut out = String::from("tasks_learned,lambda,avg_accuracy\n");
    for t in 0..surface.num_tasks() {
        if let Some(i) = surface.argmax(t) {
            let v = surface.get(i, t).expect("argmax has a value");
            let _ = writeln!(out, "{},{},{v}", t + 1, surface.lambdas[i]);
        }
    }
    out
}

/// `git describe --always --dirty`, or `"unknown"` outside a work tree.
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_owned())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

pub fn manifest(config: &ExperimentConfig, command: &str) -> String {
    format!(
        "# wvalab {command}\n# seed = {}\n# git-describe = {}\n# data source = {:?}\n{}",
        config.seed,
        git_describe(),
        config.data.resolved_source(),
        config.to_toml()
    )
}

/// Writes `eval.csv`, `accuracy.svg`, `manifest.toml` and parameter and
/// importance containers into `dir`.
pub fn emit_run_reports(dir: &Path, config: &ExperimentConfig, outcome: &RunOutcome) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, contents: String| -> Result<()> {
        let path = dir.join(name);
        write_file(&path, contents)?;
        written.push(path);
        Ok(())
    };
    put(EVAL_CSV, eval_csv(&outcome.eval))?;
    put(ACCURACY_SVG, accuracy_svg(&outcome.eval))?;
    put(MANIFEST, manifest(config, "run"))?;
    let params = dir.join(PARAMS_FILE);
    checkpoint::save(&params, &outcome.params, ContainerKind::Parameters)?;
    written.push(params);
    if let Some(importance) = &outcome.importance {
        let path = dir.join(IMPORTANCE_FILE);
        checkpoint::save(&path, importance.values(), ContainerKind::Importance)?;
        written.push(path);
    }
    Ok(written)
}

/// Writes the surface CSV and heatmap, the best-λ table, the manifest and one
/// `runs/lambda_<i>.csv` evaluation matrix per successful grid point.
pub fn emit_grid_reports(dir: &Path, config: &ExperimentConfig, grid: &GridResult) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let runs_dir = dir.join("runs");
    create_dir(&runs_dir)?;
    let mut written = Vec::new();
    let mut put = |path: PathBuf, contents: String| -> Result<()> {
        write_file(&path, contents)?;
        written.push(path);
        Ok(())
    };
    put(dir.join(SURFACE_CSV), surface_csv(&grid.surface))?;
    put(dir.join(SURFACE_SVG), surface_svg(&grid.surface))?;
    put(dir.join(BEST_LAMBDA_CSV), best_lambda_csv(&grid.surface))?;
    put(dir.join(MANIFEST), manifest(config, "grid"))?;
    for (i, run) in grid.runs.iter().enumerate() {
        if let Some(eval) = run {
            put(runs_dir.join(format!("lambda_{i:02}.csv")), eval_csv(eval))?;
        }
    }
    Ok(written)
}

/// Re-renders SVGs from whichever of `eval.csv` and `surface.csv` exist in
/// `dir`.
pub fn rerender(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let eval = dir.join(EVAL_CSV);
    if eval.is_file() {
        let path = dir.join(ACCURACY_SVG);
        write_file(&path, accuracy_svg(&read_eval_csv(&eval)?))?;
        written.push(path);
    }
    let surface = dir.join(SURFACE_CSV);
    if surface.is_file() {
        let path = dir.join(SURFACE_SVG);
        write_file(&path, surface_svg(&read_surface_csv(&surface)?))?;
        written.push(path);
    }
    if written.is_empty() {
        return Err(Error::Config(format!(
            "{}: no {EVAL_CSV} or {SURFACE_CSV} to render",
            dir.display()
        )));
    }
    Ok(written)
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 130.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn svg_open(title: &str) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n\
         <svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
        WIDTH / 2.0
    )
}

/// Accuracy on each task as later tasks are learned: one polyline per task.
pub fn accuracy_svg(matrix: &EvalMatrix) -> String {
    let n = matrix.num_tasks();
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x = |t: usize| {
        if n <= 1 {
            LEFT + plot_w / 2.0
        } else {
            LEFT + plot_w * t as f64 / (n - 1) as f64
        }
    };
    let y = |acc: f64| TOP + plot_h * (1.0 - acc);

    let mut s = svg_open("Test accuracy per task");
    let _ = writeln!(
        s,
        "<rect x=\"{LEFT}\" y=\"{TOP}\" width=\"{plot_w}\" height=\"{plot_h}\" fill=\"none\" stroke=\"black\"/>"
    );
    for k in 0..=5 {
        let a = k as f64 / 5.0;
        let _ = writeln!(
            s,
            "<line x1=\"{LEFT}\" y1=\"{0:.2}\" x2=\"{1}\" y2=\"{0:.2}\" stroke=\"#ddd\"/>\n<text x=\"{2}\" y=\"{3:.2}\" text-anchor=\"end\">{a:.1}</text>",
            y(a),
            LEFT + plot_w,
            LEFT - 6.0,
            y(a) + 4.0
        );
    }
    for t in 0..n {
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            x(t),
            TOP + plot_h + 18.0,
            t + 1
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">tasks learned</text>",
        LEFT + plot_w / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">accuracy</text>",
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );
    for j in 0..n {
        let color = PALETTE[j % PALETTE.len()];
        let points: Vec<String> = (j..n)
            .filter_map(|t| matrix.accuracy(t, j).map(|a| format!("{:.2},{:.2}", x(t), y(a))))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            points.join(" ")
        );
        if let Some(a) = matrix.accuracy(j, j) {
            let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>", x(j), y(a));
        }
        let ly = TOP + 16.0 * j as f64 + 8.0;
        let lx = WIDTH - RIGHT + 14.0;
        let _ = writeln!(
            s,
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n<text x=\"{}\" y=\"{}\">task {}</text>",
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            j + 1
        );
    }
    s.push_str("</svg>\n");
    s
}

fn heat_color(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * v).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(68.0, 253.0), lerp(1.0, 231.0), lerp(84.0, 37.0))
}

/// Heatmap of average accuracy over λ (rows) and tasks learned (columns).
pub fn surface_svg(surface: &LambdaSurface) -> String {
    let rows = surface.lambdas.len().max(1);
    let cols = surface.num_tasks().max(1);
    let left = 90.0;
    let plot_w = WIDTH - left - 40.0;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let cw = plot_w / cols as f64;
    let ch = plot_h / rows as f64;

    let mut s = svg_open("Average accuracy by λ and tasks learned");
    for (i, lambda) in surface.lambdas.iter().enumerate() {
        // largest λ on top
        let ry = TOP + ch * (rows - 1 - i) as f64;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{lambda:.0e}</text>",
            left - 6.0,
            ry + ch / 2.0 + 4.0
        );
        for t in 0..cols {
            let rx = left + cw * t as f64;
            let (fill, label) = match surface.get(i, t) {
                Some(v) => (heat_color(v), format!("{v:.3}")),
                None => ("#cccccc".to_owned(), "-".to_owned()),
            };
            let _ = writeln!(
                s,
                "<rect x=\"{rx:.2}\" y=\"{ry:.2}\" width=\"{cw:.2}\" height=\"{ch:.2}\" fill=\"{fill}\" stroke=\"white\"/>"
            );
            if ch >= 14.0 && cw >= 34.0 {
                let _ = writeln!(
                    s,
                    "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"10\" fill=\"{}\">{label}</text>",
                    rx + cw / 2.0,
                    ry + ch / 2.0 + 3.5,
                    if surface.get(i, t).is_some_and(|v| v > 0.6) { "black" } else { "white" }
                );
            }
        }
    }
    for t in 0..cols {
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            left + cw * (t as f64 + 0.5),
            TOP + plot_h + 18.0,
            t + 1
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">tasks learned</text>\n<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">λ</text>",
        left + plot_w / 2.0,
        HEIGHT - 10.0,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_two() -> EvalMatrix {
        let c = |a| EvalCell {
            accuracy: a,
            n_samples: 2000,
        };
        EvalMatrix::from_rows(vec![vec![c(0.95)], vec![c(0.625), c(0.9)]]).unwrap()
    }

    #[test]
    fn eval_csv_has_lower_triangle_rows() {
        let text = eval_csv(&two_by_two());
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "after_task,eval_task,accuracy,n_samples");
        assert_eq!(&lines[1..], &["0,0,0.95,2000", "1,0,0.625,2000", "1,1,0.9,2000"]);
    }

    #[test]
    fn eval_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        let m = two_by_two();
        write_eval_csv(&m, &path).unwrap();
        assert_eq!(read_eval_csv(&path).unwrap(), m);
    }

    #[test]
    fn surface_csv_round_trips_with_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let s = LambdaSurface {
            lambdas: vec![0.001, 1.0, 1000.0],
            cells: vec![vec![Some(0.5), Some(0.25)], vec![None, None], vec![Some(1.0 / 3.0), Some(0.1)]],
            errors: vec![None; 3],
        };
        write_surface_csv(&s, &path).unwrap();
        assert_eq!(read_surface_csv(&path).unwrap(), s);
        assert!(surface_csv(&s).contains("\n1,1,\n"));
    }

    #[test]
    fn malformed_csv_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "after_task,eval_task,accuracy,n_samples\n0,1,0.5,10\n").unwrap();
        let err = read_eval_csv(&path).unwrap_err().to_string();
        assert!(err.contains("bad.csv"), "{err}");
        let missing = dir.path().join("missing.csv");
        assert!(read_eval_csv(&missing).unwrap_err().to_string().contains("missing.csv"));
    }

    #[test]
    fn svgs_are_static() {
        let a = accuracy_svg(&two_by_two());
        assert_eq!(a.matches("<polyline").count(), 2);
        let s = surface_svg(&LambdaSurface {
            lambdas: vec![1.0],
            cells: vec![vec![Some(0.5)]],
            errors: vec![None],
        });
        for svg in [a, s] {
            assert!(!svg.contains("<script"));
            assert!(svg.trim_end().ends_with("</svg>"));
        }
    }

    #[test]
    fn heat_color_endpoints() {
        assert_eq!(heat_color(0.0), "#440154");
        assert_eq!(heat_color(1.0), "#fde725");
    }
}
