//! Standalone SVG figures: reliability diagrams, Q-Q plots and forecast
//! contours.

use std::fmt::Write as _;

use intent_forecast::evaluation::{hdr_regions, Density2, MetricRow};
use intent_forecast::geometry::{forecast_offsets, Point2};
use intent_forecast::mixture::{find_mode, Mixture};
use intent_forecast::motion_states::{MotionState, SubMachine};

use crate::config::RunConfig;
use crate::error::CliResult;
use crate::evaluate::{COMPLETE, PLOT_HORIZONS};
use crate::forecast::{WindowForecast, BASELINE, COMPOSED, ENSEMBLE};

const PANEL: f64 = 200.0;
const MARGIN: f64 = 40.0;
const DASHES: [&str; 3] = ["6,3", "2,2", "6,2,2,2"];

/// Maps a data rectangle onto one panel of the figure.
struct Panel {
    x0: f64,
    y0: f64,
    lo: Point2,
    hi: Point2,
}

impl Panel {
    fn px(&self, p: Point2) -> (f64, f64) {
        (
            self.x0 + (p.x - self.lo.x) / (self.hi.x - self.lo.x) * PANEL,
            self.y0 + PANEL - (p.y - self.lo.y) / (self.hi.y - self.lo.y) * PANEL,
        )
    }

    fn polyline(&self, svg: &mut String, pts: &[Point2], color: &str, dash: Option<&str>) {
        if pts.len() < 2 {
            return;
        }
        let coords: Vec<String> = pts
            .iter()
            .map(|p| {
                let (x, y) = self.px(*p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let dash = dash
            .map(|d| format!(" stroke-dasharray=\"{d}\""))
            .unwrap_or_default();
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.2\"{dash}/>",
            coords.join(" ")
        );
    }

    fn frame(&self, svg: &mut String, title: &str) {
        let _ = writeln!(
            svg,
            "<rect x=\"{}\" y=\"{}\" width=\"{PANEL}\" height=\"{PANEL}\" fill=\"none\" stroke=\"#444\"/>",
            self.x0, self.y0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{title}</text>",
            self.x0 + PANEL / 2.0,
            self.y0 - 6.0
        );
    }
}

fn document(cols: usize, rows: usize, body: &str) -> String {
    let w = cols as f64 * (PANEL + MARGIN) + MARGIN;
    let h = rows as f64 * (PANEL + MARGIN) + MARGIN;
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n"
    )
}

fn unit_panel(col: usize, row: usize) -> Panel {
    Panel {
        x0: MARGIN + col as f64 * (PANEL + MARGIN),
        y0: MARGIN + row as f64 * (PANEL + MARGIN),
        lo: Point2::ORIGIN,
        hi: Point2::new(1.0, 1.0),
    }
}

fn series(rows: &[MetricRow], metric: &str, state: &str, horizon: Option<f64>) -> Vec<Point2> {
    rows.iter()
        .filter(|r| {
            r.metric == metric
                && r.state == state
                && match (r.horizon_s, horizon) {
                    (None, None) => true,
                    (Some(a), Some(b)) => (a - b).abs() < 1e-9,
                    _ => false,
                }
        })
        .filter_map(|r| r.level.map(|l| Point2::new(l, r.value)))
        .collect()
}

/// Observed vs. nominal coverage; baseline on top, ensemble below, one
/// column per subset and one dash style per plotted horizon.
pub fn reliability_svg(rows: &[MetricRow]) -> String {
    let mut subsets = vec![COMPLETE.to_string()];
    subsets.extend(MotionState::ALL.iter().map(|s| s.as_str().to_string()));
    let mut body = String::new();
    for (r, model) in [BASELINE, ENSEMBLE].iter().enumerate() {
        for (c, subset) in subsets.iter().enumerate() {
            let p = unit_panel(c, r);
            p.frame(&mut body, &format!("{model}: {subset}"));
            p.polyline(
                &mut body,
                &[Point2::ORIGIN, Point2::new(1.0, 1.0)],
                "#999",
                None,
            );
            for (k, &h) in PLOT_HORIZONS.iter().enumerate() {
                let pts = series(rows, &format!("{model}.coverage"), subset, Some(h));
                p.polyline(&mut body, &pts, "#1f5fa8", Some(DASHES[k]));
            }
        }
    }
    document(subsets.len(), 2, &body)
}

/// Predicted probability vs. observed frequency per sub-machine:
/// uncalibrated solid, calibrated dotted, ideal dashed.
pub fn qq_svg(rows: &[MetricRow]) -> String {
    let mut machines: Vec<&str> = SubMachine::ALL.iter().map(|m| m.as_str()).collect();
    machines.push(COMPOSED);
    let mut body = String::new();
    for (c, m) in machines.iter().enumerate() {
        let p = unit_panel(c, 0);
        p.frame(&mut body, m);
        p.polyline(
            &mut body,
            &[Point2::ORIGIN, Point2::new(1.0, 1.0)],
            "#999",
            Some("6,3"),
        );
        p.polyline(
            &mut body,
            &series(rows, "classifier_uncalibrated.qq", m, None),
            "#222",
            None,
        );
        p.polyline(
            &mut body,
            &series(rows, "classifier_calibrated.qq", m, None),
            "#c0392b",
            Some("2,2"),
        );
    }
    document(machines.len(), 1, &body)
}

/// Line segments of the `level` iso-line of a sampled field. `grid[j][i]`
/// holds the value at `(xs[i], ys[j])`.
pub fn marching_squares(
    xs: &[f64],
    ys: &[f64],
    grid: &[Vec<f64>],
    level: f64,
) -> Vec<(Point2, Point2)> {
    let mut out = Vec::new();
    let lerp = |a: Point2, b: Point2, va: f64, vb: f64| {
        let t = if (vb - va).abs() < f64::MIN_POSITIVE {
            0.5
        } else {
            (level - va) / (vb - va)
        };
        Point2::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y))
    };
    for j in 0..ys.len().saturating_sub(1) {
        for i in 0..xs.len().saturating_sub(1) {
            let corners = [
                (Point2::new(xs[i], ys[j]), grid[j][i]),
                (Point2::new(xs[i + 1], ys[j]), grid[j][i + 1]),
                (Point2::new(xs[i + 1], ys[j + 1]), grid[j + 1][i + 1]),
                (Point2::new(xs[i], ys[j + 1]), grid[j + 1][i]),
            ];
            let mut crossings = Vec::with_capacity(4);
            for e in 0..4 {
                let (a, va) = corners[e];
                let (b, vb) = corners[(e + 1) % 4];
                if (va >= level) != (vb >= level) {
                    crossings.push(lerp(a, b, va, vb));
                }
            }
            match crossings.len() {
                2 => out.push((crossings[0], crossings[1])),
                4 => {
                    // saddle: resolve by the cell-centre value
                    let centre = corners.iter().map(|c| c.1).sum::<f64>() / 4.0;
                    if (centre >= level) == (corners[0].1 >= level) {
                        out.push((crossings[0], crossings[3]));
                        out.push((crossings[1], crossings[2]));
                    } else {
                        out.push((crossings[0], crossings[1]));
                        out.push((crossings[2], crossings[3]));
                    }
                }
                _ => {}
            }
        }
    }
    out
}

fn contour_panel(
    body: &mut String,
    p: &Panel,
    f: &WindowForecast,
    qmc_points: usize,
) -> CliResult<()> {
    let offsets = forecast_offsets();
    p.polyline(body, &f.truth, "#aaa", None);
    const N: usize = 90;
    for &h in &PLOT_HORIZONS {
        let hi = offsets
            .iter()
            .position(|o| (o - h).abs() < 1e-9)
            .expect("on grid");
        let mix: &Mixture = &f.mixtures[hi];
        let regions = hdr_regions(mix, &[0.68, 0.95], qmc_points)?;
        let xs: Vec<f64> = (0..N)
            .map(|i| p.lo.x + (p.hi.x - p.lo.x) * i as f64 / (N - 1) as f64)
            .collect();
        let ys: Vec<f64> = (0..N)
            .map(|j| p.lo.y + (p.hi.y - p.lo.y) * j as f64 / (N - 1) as f64)
            .collect();
        let grid: Vec<Vec<f64>> = ys
            .iter()
            .map(|&y| xs.iter().map(|&x| mix.density(Point2::new(x, y))).collect())
            .collect();
        for (region, dash) in regions.iter().zip([None, Some("5,3")]) {
            for (a, b) in marching_squares(&xs, &ys, &grid, region.threshold) {
                p.polyline(body, &[a, b], "#1f5fa8", dash);
            }
        }
        let (mx, my) = p.px(find_mode(mix));
        let _ = writeln!(
            body,
            "<path d=\"M{:.2},{my:.2}h8M{mx:.2},{:.2}v8\" stroke=\"#c0392b\" stroke-width=\"1.5\"/>",
            mx - 4.0,
            my - 4.0
        );
        let (tx, ty) = p.px(f.truth[hi]);
        let _ = writeln!(
            body,
            "<circle cx=\"{tx:.2}\" cy=\"{ty:.2}\" r=\"2.5\" fill=\"#222\"/>"
        );
    }
    Ok(())
}

/// Baseline (left) and ensemble (right) for one window, with 68% (solid)
/// and 95% (dashed) contours, modes (+) and ground truth (dots).
pub fn contour_svg(
    baseline: &WindowForecast,
    ensemble: &WindowForecast,
    qmc_points: usize,
) -> CliResult<String> {
    let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    let offsets = forecast_offsets();
    for f in [baseline, ensemble] {
        for &h in &PLOT_HORIZONS {
            let i = offsets
                .iter()
                .position(|o| (o - h).abs() < 1e-9)
                .expect("on grid");
            for c in f.mixtures[i].components() {
                let r = 2.5 * c.normal.max_sigma();
                lo = Point2::new(lo.x.min(c.normal.mean.x - r), lo.y.min(c.normal.mean.y - r));
                hi = Point2::new(hi.x.max(c.normal.mean.x + r), hi.y.max(c.normal.mean.y + r));
            }
        }
        for t in &f.truth {
            lo = Point2::new(lo.x.min(t.x), lo.y.min(t.y));
            hi = Point2::new(hi.x.max(t.x), hi.y.max(t.y));
        }
    }
    // square data window so circles stay round
    let half = 0.5 * (hi.x - lo.x).max(hi.y - lo.y).max(1.0);
    let centre = Point2::new(0.5 * (lo.x + hi.x), 0.5 * (lo.y + hi.y));
    let lo = Point2::new(centre.x - half, centre.y - half);
    let hi = Point2::new(centre.x + half, centre.y + half);
    let mut body = String::new();
    for (c, (name, f)) in [(BASELINE, baseline), (ENSEMBLE, ensemble)]
        .iter()
        .enumerate()
    {
        let p = Panel {
            x0: MARGIN + c as f64 * (PANEL + MARGIN),
            y0: MARGIN,
            lo,
            hi,
        };
        p.frame(
            &mut body,
            &format!("{name}: {} (scene {})", f.state, f.scene_id),
        );
        contour_panel(&mut body, &p, f, qmc_points)?;
    }
    Ok(document(2, 1, &body))
}

/// Writes every figure into `reports/`.
pub fn write_plots(
    cfg: &RunConfig,
    rows: &[MetricRow],
    forecasts: &std::collections::BTreeMap<String, Vec<WindowForecast>>,
) -> CliResult<()> {
    let dir = cfg.reports_dir();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("reliability.svg"), reliability_svg(rows))?;
    std::fs::write(dir.join("qq.svg"), qq_svg(rows))?;
    let (Some(base), Some(ens)) = (forecasts.get(BASELINE), forecasts.get(ENSEMBLE)) else {
        return Ok(());
    };
    // first window of each state, in state order
    let mut chosen = Vec::new();
    for s in MotionState::ALL {
        if let Some(i) = ens.iter().position(|f| f.state == s) {
            chosen.push(i);
        }
    }
    for (k, &i) in chosen.iter().take(cfg.evaluation.contour_plots).enumerate() {
        let svg = contour_svg(&base[i], &ens[i], cfg.evaluation.qmc_points)?;
        std::fs::write(dir.join(format!("contours_{k}.svg")), svg)?;
    }
    Ok(())
}
