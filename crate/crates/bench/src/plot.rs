//! Static SVG rendering of episode logs: reference path, speed-colored ego
//! trajectory, pedestrian tracks, prediction uncertainty level sets, and
//! the alternative topology candidates at a chosen planning cycle.

use std::fmt::Write as _;

use anyhow::{bail, Result};
use tmpc_core::sim::EpisodeLog;

struct Frame {
    min_x: f64,
    min_y: f64,
    max_y: f64,
    scale: f64,
    pad: f64,
}

impl Frame {
    fn x(&self, x: f64) -> f64 {
        (x - self.min_x) * self.scale + self.pad
    }
    fn y(&self, y: f64) -> f64 {
        (self.max_y - y) * self.scale + self.pad
    }
    fn width(&self, max_x: f64) -> f64 {
        (max_x - self.min_x) * self.scale + 2.0 * self.pad
    }
    fn height(&self) -> f64 {
        (self.max_y - self.min_y) * self.scale + 2.0 * self.pad
    }
}

fn speed_color(speed: f64, v_max: f64) -> String {
    // Blue (slow) to green (fast).
    let a = (speed / v_max.max(1e-9)).clamp(0.0, 1.0);
    let r = 30.0;
    let g = 60.0 + 160.0 * a;
    let b = 220.0 - 170.0 * a;
    format!("rgb({},{},{})", r as u8, g as u8, b as u8)
}

const CANDIDATE_COLORS: [&str; 6] = [
    "#e6194b", "#f58231", "#911eb4", "#46f0f0", "#bcf60c", "#808000",
];

/// Render an episode log to SVG. `cycle` picks the planning cycle whose
/// candidates and uncertainty level sets are drawn (default: mid-episode).
pub fn render_svg(log: &EpisodeLog, cycle: Option<usize>) -> Result<String> {
    let Some(meta) = &log.meta else {
        bail!("log has no meta line");
    };
    if log.steps.is_empty() {
        bail!("log has no world steps");
    }

    // Data bounds.
    let mut min_x = f64::INFINITY;
    let mut max_x = -f64::INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = -f64::INFINITY;
    let mut include = |x: f64, y: f64| {
        min_x = min_x.min(x);
        max_x = max_x.max(x);
        min_y = min_y.min(y);
        max_y = max_y.max(y);
    };
    for (x, y) in &meta.path_polyline {
        include(*x, *y);
    }
    for step in &log.steps {
        include(step.ego.0, step.ego.1);
        for (x, y) in &step.pedestrians {
            include(*x, *y);
        }
    }
    min_y -= 1.0;
    max_y += 1.0;

    let frame = Frame {
        min_x,
        min_y,
        max_y,
        scale: 20.0,
        pad: 30.0,
    };
    let width = frame.width(max_x);
    let height = frame.height();

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    )?;
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#)?;

    // Reference path.
    let path_pts: Vec<String> = meta
        .path_polyline
        .iter()
        .map(|(x, y)| format!("{:.2},{:.2}", frame.x(*x), frame.y(*y)))
        .collect();
    writeln!(
        svg,
        r##"<polyline id="reference-path" points="{}" fill="none" stroke="#999" stroke-width="2" stroke-dasharray="6 4"/>"##,
        path_pts.join(" ")
    )?;

    // Chosen planning cycle: prediction level sets and topology candidates.
    if !log.cycles.is_empty() {
        let idx = cycle.unwrap_or(log.cycles.len() / 2).min(log.cycles.len() - 1);
        let cyc = &log.cycles[idx];
        for pred in &cyc.predictions {
            for (k, ((mx, my), (sxx, sxy, syy))) in
                pred.means.iter().zip(pred.covariances.iter()).enumerate()
            {
                if k % 7 != 0 {
                    continue;
                }
                // 2-sigma level set from the covariance eigen-decomposition.
                let tr = sxx + syy;
                let det = sxx * syy - sxy * sxy;
                let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
                let (l1, l2) = (tr / 2.0 + disc, tr / 2.0 - disc);
                let angle = if sxy.abs() > 1e-12 {
                    (l1 - sxx).atan2(*sxy)
                } else {
                    0.0
                };
                let (rx, ry) = (2.0 * l1.max(0.0).sqrt(), 2.0 * l2.max(0.0).sqrt());
                if rx < 1e-3 {
                    continue;
                }
                writeln!(
                    svg,
                    r##"<ellipse cx="{:.2}" cy="{:.2}" rx="{:.2}" ry="{:.2}" transform="rotate({:.1} {:.2} {:.2})" fill="none" stroke="#d8b4e2" stroke-width="1"/>"##,
                    frame.x(*mx),
                    frame.y(*my),
                    rx * frame.scale,
                    ry * frame.scale,
                    -angle.to_degrees(),
                    frame.x(*mx),
                    frame.y(*my),
                )?;
            }
            let mean_pts: Vec<String> = pred
                .means
                .iter()
                .map(|(x, y)| format!("{:.2},{:.2}", frame.x(*x), frame.y(*y)))
                .collect();
            writeln!(
                svg,
                r##"<polyline points="{}" fill="none" stroke="#d8b4e2" stroke-width="1"/>"##,
                mean_pts.join(" ")
            )?;
        }
        for (i, cand) in cyc.candidates.iter().enumerate() {
            let pts: Vec<String> = cand
                .polyline
                .iter()
                .map(|(x, y)| format!("{:.2},{:.2}", frame.x(*x), frame.y(*y)))
                .collect();
            writeln!(
                svg,
                r#"<polyline class="candidate" data-signature="{}" points="{}" fill="none" stroke="{}" stroke-width="1.5" opacity="0.8"/>"#,
                cand.signature,
                pts.join(" "),
                CANDIDATE_COLORS[i % CANDIDATE_COLORS.len()],
            )?;
        }
    }

    // Pedestrian tracks (pink) with terminal markers.
    let n_peds = log.steps[0].pedestrians.len();
    for p in 0..n_peds {
        let pts: Vec<String> = log
            .steps
            .iter()
            .map(|s| {
                let (x, y) = s.pedestrians[p];
                format!("{:.2},{:.2}", frame.x(x), frame.y(y))
            })
            .collect();
        writeln!(
            svg,
            r##"<polyline class="pedestrian" points="{}" fill="none" stroke="#e91e8c" stroke-width="1.5" opacity="0.7"/>"##,
            pts.join(" ")
        )?;
        if let Some(last) = log.steps.last() {
            let (x, y) = last.pedestrians[p];
            writeln!(
                svg,
                r##"<circle cx="{:.2}" cy="{:.2}" r="{:.2}" fill="#e91e8c" opacity="0.8"/>"##,
                frame.x(x),
                frame.y(y),
                0.3 * frame.scale
            )?;
        }
    }

    // Ego trajectory: speed-colored segments plus an exact polyline with
    // full-precision coordinates for parse-back checks.
    let v_max = log
        .steps
        .iter()
        .map(|s| s.ego.3)
        .fold(0.0_f64, f64::max)
        .max(1e-9);
    for w in log.steps.windows(2) {
        writeln!(
            svg,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{}" stroke-width="3" stroke-linecap="round"/>"#,
            frame.x(w[0].ego.0),
            frame.y(w[0].ego.1),
            frame.x(w[1].ego.0),
            frame.y(w[1].ego.1),
            speed_color(w[1].ego.3, v_max),
        )?;
    }
    let ego_pts: Vec<String> = log
        .steps
        .iter()
        .map(|s| format!("{},{}", s.ego.0, s.ego.1))
        .collect();
    writeln!(
        svg,
        r#"<polyline id="ego-trajectory" points="{}" fill="none" stroke="none"/>"#,
        ego_pts.join(" ")
    )?;

    writeln!(svg, "</svg>")?;
    Ok(svg)
}

/// Extract the world-frame ego polyline back out of a rendered SVG.
pub fn parse_ego_polyline(svg: &str) -> Result<Vec<(f64, f64)>> {
    let marker = r#"id="ego-trajectory" points=""#;
    let Some(start) = svg.find(marker) else {
        bail!("no ego trajectory element");
    };
    let rest = &svg[start + marker.len()..];
    let Some(end) = rest.find('"') else {
        bail!("unterminated points attribute");
    };
    rest[..end]
        .split_whitespace()
        .map(|pair| {
            let mut it = pair.split(',');
            let x: f64 = it.next().unwrap_or("").parse()?;
            let y: f64 = it.next().unwrap_or("").parse()?;
            Ok((x, y))
        })
        .collect()
}
