//! Hand-written SVG rendering of shape-function and trajectory CSVs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use echelon::evalstats::iqm;
use echelon::interpret::ShapeFunctionTable;
use echelon::{Error, Result};

const PANEL_W: f64 = 220.0;
const PANEL_H: f64 = 150.0;
const MARGIN: f64 = 24.0;
const COLUMNS: usize = 6;

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if let csv::ErrorKind::Io(_) = e.kind() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::format(format!("csv {}", path.display()), e)
    }
}

fn read_rows(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.records().map(|rec| rec.map_err(|e| csv_err(path, e))).collect()
}

fn num(path: &Path, s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::format(format!("csv {}", path.display()), format!("`{s}` is not a number")))
}

fn field<'a>(path: &Path, rec: &'a csv::StringRecord, k: usize) -> Result<&'a str> {
    rec.get(k)
        .ok_or_else(|| Error::format(format!("csv {}", path.display()), format!("missing column {k}")))
}

struct Curve {
    feature: String,
    points: Vec<(f64, f64)>,
}

fn read_curves(path: &Path) -> Result<Vec<Curve>> {
    let mut curves: Vec<Curve> = Vec::new();
    for rec in read_rows(path)? {
        let feature = field(path, &rec, 0)?;
        if feature == "bias" {
            continue;
        }
        let p = (num(path, field(path, &rec, 1)?)?, num(path, field(path, &rec, 2)?)?);
        match curves.last_mut() {
            Some(c) if c.feature == feature => c.points.push(p),
            _ => curves.push(Curve {
                feature: feature.to_string(),
                points: vec![p],
            }),
        }
    }
    Ok(curves)
}

/// Bin edges and counts per feature.
fn read_density(path: &Path) -> Result<BTreeMap<String, Vec<(f64, f64, f64)>>> {
    let mut out: BTreeMap<String, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for rec in read_rows(path)? {
        let bin = (
            num(path, field(path, &rec, 1)?)?,
            num(path, field(path, &rec, 2)?)?,
            num(path, field(path, &rec, 3)?)?,
        );
        out.entry(field(path, &rec, 0)?.to_string()).or_default().push(bin);
    }
    Ok(out)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn span(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

struct Frame {
    left: f64,
    top: f64,
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        self.left + (x - self.x.0) / (self.x.1 - self.x.0) * PANEL_W
    }

    fn py(&self, y: f64) -> f64 {
        self.top + PANEL_H - (y - self.y.0) / (self.y.1 - self.y.0) * PANEL_H
    }

    fn polyline(&self, class: &str, attrs: &str, pts: &[(f64, f64)]) -> String {
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.3},{:.3}", self.px(x), self.py(y)))
            .collect();
        format!(
            "<polyline class=\"{class}\"{attrs} fill=\"none\" points=\"{}\"/>\n",
            coords.join(" ")
        )
    }
}

fn document(width: f64, height: f64, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\" font-size=\"11\">\n\
<style>.shape{{stroke:#1f5fa8;stroke-width:1.5}} .zero{{stroke:#999;stroke-dasharray:3 3}} .density{{fill:#d9534f;fill-opacity:0.25}} .frame{{fill:none;stroke:#ccc}} .cumulative-iqm{{stroke:#1f5fa8;stroke-width:1.5}} .reward-mean{{stroke:#5a9e3a;stroke-width:1.2}}</style>\n\
<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n"
    )
}

fn write_svg(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn shape_panel(k: usize, curve: &Curve, density: Option<&Vec<(f64, f64, f64)>>) -> String {
    let left = MARGIN + (k % COLUMNS) as f64 * (PANEL_W + 2.0 * MARGIN);
    let top = MARGIN + (k / COLUMNS) as f64 * (PANEL_H + 2.0 * MARGIN);
    let (xs, ys): (Vec<f64>, Vec<f64>) = curve.points.iter().copied().unzip();
    let x = span(xs.iter().copied().fold(f64::INFINITY, f64::min), xs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let ylo = ys.iter().copied().fold(0.0, f64::min);
    let yhi = ys.iter().copied().fold(0.0, f64::max);
    let y = if yhi > ylo { (ylo, yhi) } else { (-1.0, 1.0) };
    let frame = Frame { left, top, x, y };

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<g class=\"panel\" data-feature=\"{}\">\n<rect class=\"frame\" x=\"{left:.3}\" y=\"{top:.3}\" width=\"{PANEL_W}\" height=\"{PANEL_H}\"/>",
        escape(&curve.feature)
    );
    if let Some(bins) = density {
        let max = bins.iter().map(|b| b.2).fold(0.0, f64::max);
        if max > 0.0 {
            for &(lo, hi, count) in bins {
                let (a, b) = (frame.px(lo.max(x.0)), frame.px(hi.min(x.1)));
                if b <= a {
                    continue;
                }
                let h = count / max * PANEL_H * 0.35;
                let _ = writeln!(
                    s,
                    "<rect class=\"density\" x=\"{a:.3}\" y=\"{:.3}\" width=\"{:.3}\" height=\"{h:.3}\"/>",
                    top + PANEL_H - h,
                    b - a
                );
            }
        }
    }
    let _ = writeln!(
        s,
        "<line class=\"zero\" x1=\"{left:.3}\" x2=\"{:.3}\" y1=\"{z:.3}\" y2=\"{z:.3}\"/>",
        left + PANEL_W,
        z = frame.py(0.0)
    );
    s.push_str(&frame.polyline(
        "shape",
        &format!(" data-feature=\"{}\"", escape(&curve.feature)),
        &curve.points,
    ));
    let _ = writeln!(s, "<text x=\"{left:.3}\" y=\"{:.3}\">{}</text>\n</g>", top - 6.0, escape(&curve.feature));
    s
}

/// One SVG per task, one panel per feature with the state density underneath.
pub fn plot_shapes(dir: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let density_path = ShapeFunctionTable::histogram_csv_path(dir);
    let density = if density_path.exists() {
        read_density(&density_path)?
    } else {
        BTreeMap::new()
    };
    let mut written = Vec::new();
    for t in 0.. {
        let path = ShapeFunctionTable::shape_csv_path(dir, t);
        if !path.exists() {
            if t == 0 {
                return Err(Error::io(
                    &path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "no shape-function CSV found"),
                ));
            }
            break;
        }
        let curves = read_curves(&path)?;
        let mut body = String::new();
        for (k, c) in curves.iter().enumerate() {
            body.push_str(&shape_panel(k, c, density.get(&c.feature)));
        }
        let rows = curves.len().div_ceil(COLUMNS).max(1);
        let width = COLUMNS as f64 * (PANEL_W + 2.0 * MARGIN);
        let height = rows as f64 * (PANEL_H + 2.0 * MARGIN);
        let target = out.join(format!("shapes_task{t}.svg"));
        write_svg(&target, &document(width, height, &body))?;
        written.push(target);
    }
    Ok(written)
}

/// Cumulative-reward IQM and per-step mean reward across all rollouts.
pub fn plot_trajectories(path: &Path, out: &Path) -> Result<PathBuf> {
    let mut cumulative: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut rewards: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for rec in read_rows(path)? {
        let t = num(path, field(path, &rec, 2)?)? as usize;
        rewards.entry(t).or_default().push(num(path, field(path, &rec, 3)?)?);
        cumulative.entry(t).or_default().push(num(path, field(path, &rec, 4)?)?);
    }
    if cumulative.is_empty() {
        return Err(Error::format(format!("csv {}", path.display()), "no trajectory rows"));
    }
    let cum: Vec<(f64, f64)> = cumulative
        .iter()
        .map(|(&t, v)| Ok(((t + 1) as f64, iqm(v)?)))
        .collect::<Result<_>>()?;
    let mean: Vec<(f64, f64)> = rewards
        .iter()
        .map(|(&t, v)| ((t + 1) as f64, v.iter().sum::<f64>() / v.len() as f64))
        .collect();

    let mut body = String::new();
    for (k, (title, class, pts)) in [
        ("cumulative reward (IQM)", "cumulative-iqm", &cum),
        ("mean reward per step", "reward-mean", &mean),
    ]
    .into_iter()
    .enumerate()
    {
        let left = MARGIN + k as f64 * (PANEL_W + 2.0 * MARGIN);
        let x = span(pts[0].0, pts[pts.len() - 1].0);
        let ylo = pts.iter().map(|p| p.1).fold(0.0, f64::min);
        let yhi = pts.iter().map(|p| p.1).fold(0.0, f64::max);
        let frame = Frame {
            left,
            top: MARGIN,
            x,
            y: span(ylo, yhi),
        };
        let _ = writeln!(
            body,
            "<rect class=\"frame\" x=\"{left:.3}\" y=\"{MARGIN}\" width=\"{PANEL_W}\" height=\"{PANEL_H}\"/>"
        );
        let _ = writeln!(
            body,
            "<line class=\"zero\" x1=\"{left:.3}\" x2=\"{:.3}\" y1=\"{z:.3}\" y2=\"{z:.3}\"/>",
            left + PANEL_W,
            z = frame.py(0.0)
        );
        body.push_str(&frame.polyline(class, "", pts));
        let _ = writeln!(body, "<text x=\"{left:.3}\" y=\"{:.3}\">{title}</text>", MARGIN - 6.0);
    }
    let stem = path.file_stem().map_or_else(|| "trajectories".into(), |s| s.to_string_lossy().to_string());
    let target = out.join(format!("trajectories_{stem}.svg"));
    write_svg(&target, &document(2.0 * (PANEL_W + 2.0 * MARGIN), PANEL_H + 2.0 * MARGIN, &body))?;
    Ok(target)
}
