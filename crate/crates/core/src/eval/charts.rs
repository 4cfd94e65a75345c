//! Flat CSV tables for the diagnostics and static SVG charts rendered from
//! them. Rendering is a pure function of the table text, so unchanged
//! tables always regenerate byte-identical charts.

use std::fmt::Write as _;

use super::diagnose::{ActivationProfile, TrajectoryReport, TrajectoryRow};
use crate::error::{Error, Result};

/// Modality x expert activation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTable {
    pub experts: usize,
    pub rows: Vec<(String, Vec<f64>)>,
}

pub fn activation_csv(p: &ActivationProfile) -> String {
    let mut s = String::from("modality");
    for e in 0..p.expert_count {
        let _ = write!(s, ",expert{}", e + 1);
    }
    s.push('\n');
    for (m, rates) in p.modalities.iter().zip(&p.rates) {
        s.push_str(m.name());
        for r in rates {
            let _ = write!(s, ",{r:.6}");
        }
        s.push('\n');
    }
    s
}

fn parse_f64(field: &str, line: usize) -> Result<f64> {
    field.trim().parse().map_err(|_| Error::Schema(format!("line {line}: bad number {field:?}")))
}

pub fn parse_activation_csv(text: &str) -> Result<ActivationTable> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Schema("empty activation table".into()))?;
    let experts = header.split(',').count().saturating_sub(1);
    if !header.starts_with("modality") || experts == 0 {
        return Err(Error::Schema("activation table header must be modality,expert1,...".into()));
    }
    let rows = lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != experts + 1 {
                return Err(Error::Schema(format!("line {}: expected {} fields", i + 2, experts + 1)));
            }
            Ok((f[0].to_string(), f[1..].iter().map(|x| parse_f64(x, i + 2)).collect::<Result<_>>()?))
        })
        .collect::<Result<_>>()?;
    Ok(ActivationTable { experts, rows })
}

pub fn trajectory_csv(r: &TrajectoryReport) -> String {
    let mut s = String::from("group,step,mean,std,count\n");
    for row in &r.rows {
        let _ = writeln!(s, "{},{},{:.6},{:.6},{}", row.group, row.step, row.mean, row.std, row.count);
    }
    s
}

pub fn parse_trajectory_csv(text: &str) -> Result<Vec<TrajectoryRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next() != Some("group,step,mean,std,count") {
        return Err(Error::Schema("trajectory table header must be group,step,mean,std,count".into()));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Schema(format!("line {}: expected 5 fields", i + 2)));
            }
            let int = |x: &str| x.trim().parse::<usize>().map_err(|_| Error::Schema(format!("line {}: bad integer {x:?}", i + 2)));
            Ok(TrajectoryRow {
                group: f[0].to_string(),
                step: int(f[1])?,
                mean: parse_f64(f[2], i + 2)?,
                std: parse_f64(f[3], i + 2)?,
                count: int(f[4])?,
            })
        })
        .collect()
}

const PALETTE: [&str; 5] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e"];

/// Heat map with one cell per modality and expert, labelled with the rate.
pub fn activation_svg(t: &ActivationTable) -> String {
    let (cell, left, top) = (64.0, 70.0, 40.0);
    let w = left + cell * t.experts as f64 + 20.0;
    let h = top + cell * t.rows.len() as f64 + 20.0;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<text x="{left:.0}" y="16">Expert activation rate</text>"#);
    for e in 0..t.experts {
        let x = left + cell * (e as f64 + 0.5);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="34" text-anchor="middle">E{}</text>"#, e + 1);
    }
    for (i, (name, rates)) in t.rows.iter().enumerate() {
        let y = top + cell * i as f64;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{name}</text>"#, left - 6.0, y + cell / 2.0 + 4.0);
        for (e, r) in rates.iter().enumerate() {
            let x = left + cell * e as f64;
            let shade = (255.0 - 200.0 * r.clamp(0.0, 1.0)).round() as u8;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{y:.1}" width="{cell:.0}" height="{cell:.0}" fill="rgb({shade},{shade},255)" stroke="white"/>"#
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.0}%</text>"#,
                x + cell / 2.0,
                y + cell / 2.0 + 4.0,
                r * 100.0
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Mean cosine per latent step with a one-standard-deviation band per group.
pub fn trajectory_svg(rows: &[TrajectoryRow]) -> String {
    let (w, h, pad) = (480.0, 300.0, 40.0);
    let mut groups: Vec<&str> = Vec::new();
    for r in rows {
        if !groups.contains(&r.group.as_str()) {
            groups.push(&r.group);
        }
    }
    let max_step = rows.iter().map(|r| r.step).max().unwrap_or(1).max(2);
    let sx = |k: usize| pad + (w - 2.0 * pad) * (k - 1) as f64 / (max_step - 1) as f64;
    let sy = |v: f64| h - pad - (h - 2.0 * pad) * (v.clamp(-1.0, 1.0) + 1.0) / 2.0;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<text x="{pad:.0}" y="20">Cosine to positive target per latent step</text>"#);
    let _ = writeln!(s, r##"<line x1="{pad:.0}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#999"/>"##, sy(0.0), w - pad, sy(0.0));
    for (g, name) in groups.iter().enumerate() {
        let color = PALETTE[g % PALETTE.len()];
        let pts: Vec<&TrajectoryRow> = rows.iter().filter(|r| r.group == *name).collect();
        let upper: Vec<String> = pts.iter().map(|r| format!("{:.1},{:.1}", sx(r.step), sy(r.mean + r.std))).collect();
        let lower: Vec<String> = pts.iter().rev().map(|r| format!("{:.1},{:.1}", sx(r.step), sy(r.mean - r.std))).collect();
        let _ = writeln!(s, r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#, upper.join(" "), lower.join(" "));
        let line: Vec<String> = pts.iter().map(|r| format!("{:.1},{:.1}", sx(r.step), sy(r.mean))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, line.join(" "));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" fill="{color}">{name}</text>"#, w - pad + 4.0 - 40.0, pad + 14.0 * (g as f64 + 1.0));
    }
    for k in 1..=max_step {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{k}</text>"#, sx(k), h - pad + 16.0);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tables_round_trip_and_render_deterministically() {
        let csv = "modality,expert1,expert2\nimg,1.000000,0.500000\nvid,0.000000,1.000000\n";
        let t = parse_activation_csv(csv).unwrap();
        assert_eq!(t.experts, 2);
        assert_eq!(t.rows[0].1, vec![1.0, 0.5]);
        assert_eq!(activation_svg(&t), activation_svg(&parse_activation_csv(csv).unwrap()));

        let traj = "group,step,mean,std,count\nall,1,0.100000,0.010000,3\nall,2,0.200000,0.000000,3\n";
        let rows = parse_trajectory_csv(traj).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(trajectory_svg(&rows), trajectory_svg(&parse_trajectory_csv(traj).unwrap()));
        assert!(parse_trajectory_csv("bad\n").is_err());
        assert!(parse_activation_csv("modality,expert1\nimg,x\n").is_err());
    }
}
