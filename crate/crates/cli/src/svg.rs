//! Snapshot figures: one panel per requested time, intensity means as 2σ
//! ellipses, agents as dots and desired means as crosses.

use std::fmt::Write;

use rfs_swarm_core::swarmsim::{SimLog, StepLog};

const PANEL: f64 = 320.0;
const MARGIN: f64 = 24.0;

/// Step closest to time `t` (earliest on ties).
pub fn step_at(log: &SimLog, t: f64) -> Option<&StepLog> {
    log.steps
        .iter()
        .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
}

/// Snapshot times used when a scenario lists none: start, middle and end.
pub fn default_times(log: &SimLog) -> Vec<f64> {
    match (log.steps.first(), log.steps.last()) {
        (Some(a), Some(b)) => vec![a.t, 0.5 * (a.t + b.t), b.t],
        _ => Vec::new(),
    }
}

/// Semi-axes (2σ) and orientation in radians of a 2×2 covariance.
pub fn ellipse_2sigma(pxx: f64, pxy: f64, pyy: f64) -> (f64, f64, f64) {
    let mid = 0.5 * (pxx + pyy);
    let rad = (0.25 * (pxx - pyy).powi(2) + pxy * pxy).sqrt();
    let l1 = (mid + rad).max(0.0);
    let l2 = (mid - rad).max(0.0);
    let angle = 0.5 * (2.0 * pxy).atan2(pxx - pyy);
    (2.0 * l1.sqrt(), 2.0 * l2.sqrt(), angle)
}

struct Frame {
    x0: f64,
    y0: f64,
    scale: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) * self.scale
    }

    fn py(&self, y: f64) -> f64 {
        MARGIN + (PANEL - 2.0 * MARGIN) - (y - self.y0) * self.scale
    }
}

/// Square data window covering every drawn point of the chosen steps.
fn frame(steps: &[&StepLog]) -> Frame {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut take = |p: &[f64]| {
        for d in 0..2 {
            if let Some(v) = p.get(d).filter(|v| v.is_finite()) {
                lo[d] = lo[d].min(*v);
                hi[d] = hi[d].max(*v);
            }
        }
    };
    for s in steps {
        s.intensities.iter().for_each(|c| take(&c.mean));
        s.agents.iter().for_each(|a| take(&a.state));
        s.targets.iter().for_each(|t| take(t));
    }
    if !lo[0].is_finite() {
        lo = [-1.0, -1.0];
        hi = [1.0, 1.0];
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-6) * 1.15;
    let cx = 0.5 * (lo[0] + hi[0]);
    let cy = 0.5 * (lo[1] + hi[1]);
    Frame {
        x0: cx - 0.5 * span,
        y0: cy - 0.5 * span,
        scale: (PANEL - 2.0 * MARGIN) / span,
    }
}

fn panel(out: &mut String, s: &StepLog, f: &Frame, offset: f64) {
    let _ = writeln!(out, r#"<g transform="translate({offset:.1},0)">"#);
    let _ = writeln!(
        out,
        r##"<rect x="0.5" y="0.5" width="{w:.1}" height="{w:.1}" fill="white" stroke="#444"/>"##,
        w = PANEL - 1.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{x:.1}" y="16" font-family="sans-serif" font-size="12" text-anchor="middle">t = {t:.3} s</text>"#,
        x = PANEL / 2.0,
        t = s.t
    );
    for c in &s.intensities {
        if c.mean.len() < 2 || c.cov.len() < 2 {
            continue;
        }
        let (a, b, th) = ellipse_2sigma(c.cov[0][0], c.cov[0][1], c.cov[1][1]);
        let opacity = c.weight.clamp(0.05, 1.0);
        let _ = writeln!(
            out,
            r##"<ellipse cx="{cx:.2}" cy="{cy:.2}" rx="{rx:.2}" ry="{ry:.2}" transform="rotate({deg:.2} {cx:.2} {cy:.2})" fill="none" stroke="#1f4e9c" stroke-opacity="{opacity:.3}"/>"##,
            cx = f.px(c.mean[0]),
            cy = f.py(c.mean[1]),
            rx = a * f.scale,
            ry = b * f.scale,
            deg = -th.to_degrees(),
        );
    }
    for a in &s.agents {
        let _ = writeln!(
            out,
            r##"<circle cx="{:.2}" cy="{:.2}" r="1.6" fill="#c0392b"/>"##,
            f.px(a.state[0]),
            f.py(a.state[1])
        );
    }
    for t in &s.targets {
        let (x, y) = (f.px(t[0]), f.py(t[1]));
        let _ = writeln!(
            out,
            r##"<path d="M{:.2} {:.2}L{:.2} {:.2}M{:.2} {:.2}L{:.2} {:.2}" stroke="#111" stroke-width="1.2"/>"##,
            x - 4.0,
            y - 4.0,
            x + 4.0,
            y + 4.0,
            x - 4.0,
            y + 4.0,
            x + 4.0,
            y - 4.0
        );
    }
    let _ = writeln!(out, "</g>");
}

/// Renders one panel per time. Identical logs and times give identical bytes.
pub fn render_snapshots(log: &SimLog, times: &[f64]) -> String {
    let steps: Vec<&StepLog> = times.iter().filter_map(|&t| step_at(log, t)).collect();
    let f = frame(&steps);
    let width = PANEL * steps.len().max(1) as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{PANEL:.0}" viewBox="0 0 {width:.0} {PANEL:.0}">"#
    );
    let _ = writeln!(out, "<title>{}</title>", escape(&log.scenario));
    for (i, s) in steps.iter().enumerate() {
        panel(&mut out, s, &f, i as f64 * PANEL);
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
